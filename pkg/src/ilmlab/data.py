"""Synthetic corpora: a bigram language over Gaussian-emitting labels.

Source and target domains share the emission model but draw their label
sequences from two independently sampled bigram tables, so a language model
trained on one domain is measurably worse on the other. Everything is a
pure function of (task spec, count, domain, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kv
from .errors import ConfigError, FormatError, InputError

BOS = 0
EOS = 1
SENTINELS = 2

CORPUS_HEADER_PREFIX = "#ilmlab-corpus"
CORPUS_VERSION = 1

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory; ids 0 and 1 are the begin/end sentinels."""

    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def bos(self) -> int:
        return BOS

    @property
    def eos(self) -> int:
        return EOS

    @classmethod
    def build(cls, n_words: int) -> "Vocabulary":
        return cls(("<s>", "</s>") + tuple(f"w{i:02d}" for i in range(n_words)))


@dataclass(frozen=True)
class Utterance:
    uid: str
    labels: tuple[int, ...]
    features: np.ndarray | None = None  # (frames, d_in); None for text-only


@dataclass
class Corpus:
    items: list[Utterance]
    vocab_size: int
    kind: str  # "paired" | "text"

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


_SPEC_KEYS = {
    "version",
    "n_words",
    "d_in",
    "sigma",
    "frames_min",
    "frames_max",
    "len_min",
    "len_max",
    "concentration",
    "seed",
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Materialized task: bigram tables per domain plus the emission model."""

    n_words: int
    d_in: int
    sigma: float
    frames_min: int
    frames_max: int
    len_min: int
    len_max: int
    concentration: float
    seed: int
    source_bigram: np.ndarray = field(repr=False)  # (n_words+1, n_words); row 0 = start
    target_bigram: np.ndarray = field(repr=False)
    means: np.ndarray = field(repr=False)  # (n_words, d_in)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.build(self.n_words)

    @property
    def vocab_size(self) -> int:
        return self.n_words + SENTINELS

    def bigram(self, domain: str) -> np.ndarray:
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}, expected one of {DOMAINS}")
        return self.source_bigram if domain == "source" else self.target_bigram

    def validate(self) -> "SyntheticTaskSpec":
        for name, table in (("source", self.source_bigram), ("target", self.target_bigram)):
            if table.shape != (self.n_words + 1, self.n_words):
                raise ConfigError(f"{name} bigram table has shape {table.shape}")
            if np.max(np.abs(table.sum(axis=1) - 1.0)) > 1e-12:
                raise ConfigError(f"{name} bigram rows do not normalize to 1")
        d = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((d * d).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if self.sigma > 0 and dist.min() <= 4.0 * self.sigma:
            raise ConfigError(
                f"emission means too close: min distance {dist.min():.4f} "
                f"<= 4*sigma = {4 * self.sigma:.4f}"
            )
        return self


def _random_bigram(rng: np.random.Generator, rows: int, cols: int, concentration: float) -> np.ndarray:
    # Dirichlet-style rows; small concentration gives peaked transitions.
    raw = rng.gamma(shape=concentration, scale=1.0, size=(rows, cols))
    raw = np.maximum(raw, 1e-12)
    return raw / raw.sum(axis=1, keepdims=True)


def build_task_spec(
    n_words: int = 50,
    d_in: int = 16,
    sigma: float = 0.3,
    frames_min: int = 1,
    frames_max: int = 3,
    len_min: int = 4,
    len_max: int = 12,
    concentration: float = 0.25,
    seed: int = 0,
) -> SyntheticTaskSpec:
    if n_words < 2 or d_in < 1 or not (1 <= frames_min <= frames_max) or not (1 <= len_min <= len_max):
        raise ConfigError("invalid task spec parameters")
    children = np.random.SeedSequence(seed).spawn(3)
    source = _random_bigram(np.random.default_rng(children[0]), n_words + 1, n_words, concentration)
    target = _random_bigram(np.random.default_rng(children[1]), n_words + 1, n_words, concentration)
    means = np.random.default_rng(children[2]).standard_normal((n_words, d_in))
    if sigma > 0:
        d = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((d * d).sum(-1))
        np.fill_diagonal(dist, np.inf)
        needed = 4.0 * sigma * 1.05
        if dist.min() < needed:
            means = means * (needed / dist.min())
    return SyntheticTaskSpec(
        n_words=n_words,
        d_in=d_in,
        sigma=sigma,
        frames_min=frames_min,
        frames_max=frames_max,
        len_min=len_min,
        len_max=len_max,
        concentration=concentration,
        seed=seed,
        source_bigram=source,
        target_bigram=target,
        means=means,
    ).validate()


def save_task_spec(path: str | Path, spec: SyntheticTaskSpec) -> None:
    kv.write_kv_file(
        path,
        {
            "version": 1,
            "n_words": spec.n_words,
            "d_in": spec.d_in,
            "sigma": spec.sigma,
            "frames_min": spec.frames_min,
            "frames_max": spec.frames_max,
            "len_min": spec.len_min,
            "len_max": spec.len_max,
            "concentration": spec.concentration,
            "seed": spec.seed,
        },
    )


def load_task_spec(path: str | Path) -> SyntheticTaskSpec:
    pairs = kv.read_kv_file(path)
    kv.reject_unknown(pairs, _SPEC_KEYS, "task spec")
    if int(pairs.get("version", "1")) != 1:
        raise ConfigError(f"unsupported task spec version {pairs.get('version')}")
    return build_task_spec(
        n_words=int(pairs.get("n_words", 50)),
        d_in=int(pairs.get("d_in", 16)),
        sigma=float(pairs.get("sigma", 0.3)),
        frames_min=int(pairs.get("frames_min", 1)),
        frames_max=int(pairs.get("frames_max", 3)),
        len_min=int(pairs.get("len_min", 4)),
        len_max=int(pairs.get("len_max", 12)),
        concentration=float(pairs.get("concentration", 0.25)),
        seed=int(pairs.get("seed", 0)),
    )


def _domain_rng(spec: SyntheticTaskSpec, domain: str, seed: int, kind: str) -> np.random.Generator:
    code = {"source": 0, "target": 1}[domain]
    tag = {"paired": 0, "text": 1}[kind]
    return np.random.default_rng(np.random.SeedSequence([seed, code, tag]))


def _sample_labels(rng: np.random.Generator, spec: SyntheticTaskSpec, cdf: np.ndarray) -> tuple[int, ...]:
    length = int(rng.integers(spec.len_min, spec.len_max + 1))
    words = []
    state = 0  # start row
    last = cdf.shape[1] - 1
    for r in rng.random(length):
        w = min(int(np.searchsorted(cdf[state], r, side="right")), last)
        words.append(w)
        state = w + 1
    return tuple(w + SENTINELS for w in words)


def generate_corpus(spec: SyntheticTaskSpec, n_utts: int, domain: str, seed: int) -> Corpus:
    """Paired corpus: bigram-sampled labels with Gaussian frame emissions."""
    if n_utts < 1:
        raise InputError(f"n_utts must be >= 1, got {n_utts}")
    cdf = np.cumsum(spec.bigram(domain), axis=1)
    rng = _domain_rng(spec, domain, seed, "paired")
    prefix = {"source": "src", "target": "tgt"}[domain]
    items = []
    for u in range(n_utts):
        labels = _sample_labels(rng, spec, cdf)
        words = np.asarray(labels, dtype=np.int64) - SENTINELS
        frames_per = rng.integers(spec.frames_min, spec.frames_max + 1, size=len(labels))
        noise = rng.standard_normal((int(frames_per.sum()), spec.d_in)) * spec.sigma
        feats = np.repeat(spec.means[words], frames_per, axis=0) + noise
        items.append(Utterance(uid=f"{prefix}{u:06d}", labels=labels, features=feats))
    return Corpus(items=items, vocab_size=spec.vocab_size, kind="paired")


def generate_text(spec: SyntheticTaskSpec, n_sentences: int, domain: str, seed: int) -> Corpus:
    """Text-only corpus of bigram-sampled label sequences."""
    if n_sentences < 1:
        raise InputError(f"n_sentences must be >= 1, got {n_sentences}")
    cdf = np.cumsum(spec.bigram(domain), axis=1)
    rng = _domain_rng(spec, domain, seed, "text")
    prefix = {"source": "srctxt", "target": "tgttxt"}[domain]
    items = [
        Utterance(uid=f"{prefix}{u:06d}", labels=_sample_labels(rng, spec, cdf))
        for u in range(n_sentences)
    ]
    return Corpus(items=items, vocab_size=spec.vocab_size, kind="text")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Line-delimited text; features as hex little-endian float64, bit-exact."""
    lines = [f"{CORPUS_HEADER_PREFIX} v={CORPUS_VERSION} kind={corpus.kind} vocab={corpus.vocab_size}"]
    for item in corpus.items:
        labels = " ".join(str(x) for x in item.labels)
        if corpus.kind == "paired":
            f = item.features
            if f is None:
                raise InputError(f"utterance {item.uid} in paired corpus has no features")
            hexed = np.ascontiguousarray(f, dtype="<f8").tobytes().hex()
            lines.append(f"{item.uid}\t{labels}\t{f.shape[0]}\t{f.shape[1]}\t{hexed}")
        else:
            lines.append(f"{item.uid}\t{labels}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    data = Path(path).read_bytes()
    offset = 0
    lines: list[tuple[int, bytes]] = []
    for raw in data.split(b"\n"):
        lines.append((offset, raw))
        offset += len(raw) + 1
    if not lines or not lines[0][1].startswith(CORPUS_HEADER_PREFIX.encode()):
        raise FormatError("missing corpus header line", 0)
    try:
        head = dict(p.split("=", 1) for p in lines[0][1].decode("utf-8").split()[1:])
        version, kind, vocab_size = int(head["v"]), head["kind"], int(head["vocab"])
    except Exception as e:
        raise FormatError(f"malformed corpus header: {e}", 0) from e
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}", 0)
    if kind not in ("paired", "text"):
        raise FormatError(f"unknown corpus kind {kind!r}", 0)
    expected_fields = 5 if kind == "paired" else 2
    items = []
    for off, raw in lines[1:]:
        if not raw:
            continue
        fields = raw.decode("utf-8", errors="replace").split("\t")
        if len(fields) != expected_fields:
            raise FormatError(
                f"expected {expected_fields} tab-separated fields, got {len(fields)}", off
            )
        uid = fields[0]
        try:
            labels = tuple(int(x) for x in fields[1].split())
        except ValueError as e:
            raise FormatError(f"bad label ids in {uid}: {e}", off) from e
        if any(not (SENTINELS <= lab < vocab_size) for lab in labels):
            raise FormatError(f"label id out of range in {uid}", off)
        features = None
        if kind == "paired":
            try:
                frames, width = int(fields[2]), int(fields[3])
            except ValueError as e:
                raise FormatError(f"bad frame counts in {uid}: {e}", off) from e
            hexed = fields[4]
            if len(hexed) != frames * width * 16:
                raise FormatError(
                    f"feature payload of {uid} has {len(hexed)} hex chars, "
                    f"expected {frames * width * 16}",
                    off,
                )
            try:
                buf = bytes.fromhex(hexed)
            except ValueError as e:
                raise FormatError(f"non-hex feature payload in {uid}", off) from e
            features = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(frames, width)
            if frames < len(labels):
                raise FormatError(f"{uid}: fewer frames ({frames}) than labels ({len(labels)})", off)
        items.append(Utterance(uid=uid, labels=labels, features=features))
    return Corpus(items=items, vocab_size=vocab_size, kind=kind)


def batch_iter(corpus: Corpus | list, batch_size: int, seed: int):
    """Seeded shuffled batches; every utterance appears exactly once."""
    items = list(corpus.items if isinstance(corpus, Corpus) else corpus)
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(items))
    for lo in range(0, len(items), batch_size):
        yield [items[i] for i in order[lo : lo + batch_size]]
