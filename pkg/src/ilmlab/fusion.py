"""Log-linear three-model decoding: AED + scaled LM - scaled label prior.

Every hypothesis keeps its three component scores separately; the fused
score is always recomputed as aed + lambda1*lm - lambda2*ilm, so the
decomposition is exact by construction. Beam search is label-synchronous
and breadth-first over the whole vocabulary, with deterministic tie
breaking (higher score, then lexicographically smaller label sequence,
shorter prefixes first).

All models are immutable during decoding; each utterance's beam is
single-owner, so decoding parallelizes over utterances and grid search
over grid points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import BOS, EOS, Corpus
from .errors import ConfigError, FormatError, InputError
from .ilm import ContextSource, ilm_start, ilm_step
from .model import (
    AEDModel,
    EncoderOutput,
    LSTMLM,
    Tensor,
    aed_decode_step,
    encode,
    initial_decoder_state,
    lm_start,
    lm_step,
    lm_step_logprobs,
)
from .parallel import payload_map

METHOD_NONE = "none"
METHOD_SF = "shallow-fusion"
METHOD_DR = "density-ratio"
ESTIMATION_METHODS = ("zero", "avg-encoder", "avg-context", "utt-encoder", "mini-lstm")
ALL_METHODS = (METHOD_NONE, METHOD_SF, METHOD_DR) + ESTIMATION_METHODS

EXHAUSTIVE_GUARD = 10**6


@dataclass
class FusionConfig:
    method: str = METHOD_NONE
    lambda1: float = 0.0  # external LM scale
    lambda2: float = 0.0  # prior subtraction scale
    beam_width: int = 8
    max_output_len: int = 24
    length_norm: bool = False  # off by default; kept for ablations only

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {ALL_METHODS}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("model scales must be >= 0")
        if self.method == METHOD_NONE and (self.lambda1 != 0 or self.lambda2 != 0):
            raise ConfigError("method 'none' forces lambda1 = lambda2 = 0")
        if self.method == METHOD_SF and self.lambda2 != 0:
            raise ConfigError("shallow fusion forces lambda2 = 0")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_output_len < 1:
            raise ConfigError("max_output_len must be >= 1")


@dataclass(frozen=True)
class _AedState:
    dec: object
    beta: Tensor
    c_prev: Tensor
    enc: EncoderOutput


class AEDScorer:
    """Per-step label log-probabilities of the attention model."""

    def __init__(self, model: AEDModel):
        self.model = model
        self.vocab_size = model.vocab.size

    def start(self, enc: EncoderOutput) -> _AedState:
        m = self.model
        return _AedState(
            dec=initial_decoder_state(m),
            beta=nc.zeros(enc.frames),
            c_prev=nc.zeros(m.config.d_enc),
            enc=enc,
        )

    def step(self, state: _AedState, y_prev: int):
        dec, att, lp = aed_decode_step(
            None, self.model, state.dec, state.beta, state.c_prev, y_prev, state.enc
        )
        return _AedState(dec=dec, beta=att.beta, c_prev=att.c, enc=state.enc), lp.values


class LMScorer:
    """Per-step label log-probabilities of an LSTM LM (external or subtracted)."""

    def __init__(self, lm: LSTMLM):
        self.lm = lm
        self.vocab_size = lm.vocab.size

    def start(self, enc=None):
        return lm_start(self.lm)

    def step(self, state, y_prev: int):
        state, lp = lm_step(None, self.lm, state, y_prev)
        return state, lp.values


class SubstitutedILM:
    """Label prior scorer: the AED decoder with its context replaced."""

    def __init__(self, model: AEDModel, source: ContextSource):
        self.model = model
        self.source = source
        self.vocab_size = model.vocab.size

    def start(self, enc=None):
        return ilm_start(self.model, self.source, enc)

    def step(self, state, y_prev: int):
        state, lp = ilm_step(None, self.model, self.source, state, y_prev)
        return state, lp.values


@dataclass
class Scorers:
    aed: object
    lm: object | None = None
    ilm: object | None = None


def make_scorers(aed: AEDModel, lm: LSTMLM | None = None, ilm=None) -> Scorers:
    """Bundle the three scorers and check that their vocabularies agree."""
    aed_scorer = AEDScorer(aed)
    for other in (lm,):
        if other is not None and other.vocab.size != aed.vocab.size:
            raise ConfigError(
                f"LM vocabulary ({other.vocab.size}) does not match the model ({aed.vocab.size})"
            )
    if ilm is not None and getattr(ilm, "vocab_size", aed.vocab.size) != aed.vocab.size:
        raise ConfigError("prior scorer vocabulary does not match the model")
    return Scorers(aed=aed_scorer, lm=LMScorer(lm) if lm is not None else None, ilm=ilm)


def scorers_for_method(
    aed: AEDModel,
    config: FusionConfig,
    lm: LSTMLM | None = None,
    source: ContextSource | None = None,
    dr_lm: LSTMLM | None = None,
) -> Scorers:
    """Wire up the scorer bundle an operating point needs."""
    method = config.method
    if method == METHOD_NONE:
        return make_scorers(aed)
    if method == METHOD_SF:
        if lm is None:
            raise ConfigError("shallow fusion needs an external LM")
        return make_scorers(aed, lm=lm)
    if lm is None and config.lambda1 != 0:
        raise ConfigError(f"method {method} at lambda1 != 0 needs an external LM")
    if method == METHOD_DR:
        if dr_lm is None:
            raise ConfigError("density ratio needs the decoder-like LM")
        return make_scorers(aed, lm=lm, ilm=LMScorer(dr_lm))
    if source is None:
        raise ConfigError(f"method {method} needs a resolved context source")
    if source.method != method:
        raise ConfigError(f"estimator file is for method {source.method!r}, not {method!r}")
    return make_scorers(aed, lm=lm, ilm=SubstitutedILM(aed, source))


@dataclass
class Hypothesis:
    """A label prefix with separately tracked component scores."""

    labels: tuple[int, ...]
    aed_score: float = 0.0
    lm_score: float = 0.0
    ilm_score: float = 0.0
    states: tuple = (None, None, None)
    finished: bool = False

    def fused(self, config: FusionConfig) -> float:
        return self.aed_score + config.lambda1 * self.lm_score - config.lambda2 * self.ilm_score


def _rank_key(hyp: Hypothesis, config: FusionConfig):
    score = hyp.fused(config)
    if config.length_norm:
        steps = len(hyp.labels) + (1 if hyp.finished else 0)
        score = score / max(1, steps)
    return (-score, hyp.labels)


def _advance(hyp: Hypothesis, scorers: Scorers, config: FusionConfig):
    """Step every model once from this hypothesis; label-independent."""
    y_prev = hyp.labels[-1] if hyp.labels else BOS
    a_state, l_state, i_state = hyp.states
    a_state, lp_aed = scorers.aed.step(a_state, y_prev)
    lp_lm = None
    lp_ilm = None
    fused = lp_aed
    if scorers.lm is not None:
        l_state, lp_lm = scorers.lm.step(l_state, y_prev)
        fused = fused + config.lambda1 * lp_lm
    if scorers.ilm is not None:
        i_state, lp_ilm = scorers.ilm.step(i_state, y_prev)
        fused = fused - config.lambda2 * lp_ilm
    return (a_state, l_state, i_state), lp_aed, lp_lm, lp_ilm, fused


def fused_step_scores(hyp: Hypothesis, scorers: Scorers, config: FusionConfig) -> np.ndarray:
    """Per-label fused log scores for expanding an unfinished hypothesis."""
    if hyp.finished:
        raise InputError("cannot expand a finished hypothesis")
    _, _, _, _, fused = _advance(hyp, scorers, config)
    return fused


def _start_hypothesis(scorers: Scorers, enc) -> Hypothesis:
    return Hypothesis(
        labels=(),
        states=(
            scorers.aed.start(enc),
            scorers.lm.start(enc) if scorers.lm is not None else None,
            scorers.ilm.start(enc) if scorers.ilm is not None else None,
        ),
    )


def _expansions(hyp: Hypothesis, scorers: Scorers, config: FusionConfig, vocab_size: int):
    states, lp_aed, lp_lm, lp_ilm, fused = _advance(hyp, scorers, config)
    n = len(hyp.labels)
    allowed = []
    if n >= 1:  # the empty output is not a hypothesis
        allowed.append(EOS)
    if n < config.max_output_len:
        allowed.extend(range(2, vocab_size))
    for v in allowed:
        yield Hypothesis(
            labels=hyp.labels + (v,),
            aed_score=hyp.aed_score + float(lp_aed[v]),
            lm_score=hyp.lm_score + (float(lp_lm[v]) if lp_lm is not None else 0.0),
            ilm_score=hyp.ilm_score + (float(lp_ilm[v]) if lp_ilm is not None else 0.0),
            states=states,
            finished=v == EOS,
        )


def _resolve_enc(scorers: Scorers, features_or_enc):
    if features_or_enc is None or isinstance(features_or_enc, EncoderOutput):
        return features_or_enc
    feats = features_or_enc if isinstance(features_or_enc, Tensor) else Tensor(features_or_enc, validate=False)
    return encode(None, scorers.aed.model, feats)


def beam_search(scorers: Scorers, features_or_enc, config: FusionConfig) -> list[Hypothesis]:
    """Breadth-first label-synchronous search; returns the ranked n-best list.

    Finished hypotheses are frozen and compete with new candidates for the
    beam_width slots; the search stops when every kept hypothesis is
    finished (the end sentinel is forced once max_output_len is reached).
    """
    enc = _resolve_enc(scorers, features_or_enc)
    vocab_size = scorers.aed.vocab_size
    beam = [_start_hypothesis(scorers, enc)]
    for _ in range(config.max_output_len + 1):
        unfinished = [h for h in beam if not h.finished]
        if not unfinished:
            break
        candidates = [h for h in beam if h.finished]
        for hyp in unfinished:
            candidates.extend(_expansions(hyp, scorers, config, vocab_size))
        candidates.sort(key=lambda h: _rank_key(h, config))
        beam = candidates[: config.beam_width]
    done = [h for h in beam if h.finished]
    done.sort(key=lambda h: _rank_key(h, config))
    return done


def exhaustive_search(scorers: Scorers, features_or_enc, config: FusionConfig, max_len: int) -> Hypothesis:
    """Enumerate every terminated label sequence up to max_len; argmax fused.

    Test oracle for beam_search; guarded to at most 10^6 sequences.
    """
    vocab_size = scorers.aed.vocab_size
    n_content = vocab_size - 2
    if n_content**max_len > EXHAUSTIVE_GUARD:
        raise InputError(
            f"exhaustive search over {n_content}^{max_len} sequences exceeds the "
            f"{EXHAUSTIVE_GUARD} guard"
        )
    enc = _resolve_enc(scorers, features_or_enc)
    best: list[Hypothesis | None] = [None]

    def visit(hyp: Hypothesis):
        states, lp_aed, lp_lm, lp_ilm, _ = _advance(hyp, scorers, config)
        n = len(hyp.labels)
        if n >= 1:
            ended = Hypothesis(
                labels=hyp.labels + (EOS,),
                aed_score=hyp.aed_score + float(lp_aed[EOS]),
                lm_score=hyp.lm_score + (float(lp_lm[EOS]) if lp_lm is not None else 0.0),
                ilm_score=hyp.ilm_score + (float(lp_ilm[EOS]) if lp_ilm is not None else 0.0),
                states=(None, None, None),
                finished=True,
            )
            if best[0] is None or _rank_key(ended, config) < _rank_key(best[0], config):
                best[0] = ended
        if n < max_len:
            for v in range(2, vocab_size):
                visit(
                    Hypothesis(
                        labels=hyp.labels + (v,),
                        aed_score=hyp.aed_score + float(lp_aed[v]),
                        lm_score=hyp.lm_score + (float(lp_lm[v]) if lp_lm is not None else 0.0),
                        ilm_score=hyp.ilm_score + (float(lp_ilm[v]) if lp_ilm is not None else 0.0),
                        states=states,
                    )
                )

    visit(_start_hypothesis(scorers, enc))
    return best[0]


def rescore_components(scorers: Scorers, features_or_enc, labels) -> tuple[float, float, float]:
    """Teacher-force each model along ``labels`` (ending in EOS); component sums."""
    labels = list(labels)
    if not labels or labels[-1] != EOS:
        raise InputError("label sequence must end with the end sentinel")
    enc = _resolve_enc(scorers, features_or_enc)
    hyp = _start_hypothesis(scorers, enc)
    neutral = FusionConfig()
    aed = lm = ilm = 0.0
    for y in labels:
        states, lp_aed, lp_lm, lp_ilm, _ = _advance(hyp, scorers, neutral)
        aed += float(lp_aed[y])
        lm += float(lp_lm[y]) if lp_lm is not None else 0.0
        ilm += float(lp_ilm[y]) if lp_ilm is not None else 0.0
        hyp = Hypothesis(labels=hyp.labels + (y,), states=states)
    return aed, lm, ilm


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref = list(ref)
    hyp = list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion
                cur[j - 1] + 1,  # insertion
                prev[j - 1] + (0 if r == h else 1),  # substitution
            )
        prev = cur
    return prev[-1]


def word_error_rate(refs, hyps) -> float:
    """Total edit distance divided by total reference length."""
    refs = list(refs)
    hyps = list(hyps)
    if not refs:
        raise InputError("need at least one reference")
    if len(refs) != len(hyps):
        raise InputError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise InputError("total reference length is zero")
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return edits / total_ref


def lm_perplexity(corpus, lm: LSTMLM) -> float:
    """exp of the mean per-token negative log-prob (end sentinel included)."""
    items = list(corpus)
    if not items:
        raise InputError("cannot compute perplexity of an empty corpus")
    total_nll = 0.0
    total_tokens = 0
    for utt in items:
        targets = list(utt.labels) + [EOS]
        rows = lm_step_logprobs(None, lm, targets)
        loss = nc.cross_entropy(None, nc.stack_rows(None, rows), targets)
        total_nll += loss.item() * len(targets)
        total_tokens += len(targets)
    return math.exp(total_nll / total_tokens)


def _decode_one(payload, idx):
    scorers, encs, config = payload
    return beam_search(scorers, encs[idx], config)


def decode_corpus(scorers: Scorers, corpus: Corpus, config: FusionConfig, workers: int = 1) -> dict:
    """Beam-decode every utterance; returns uid -> ranked n-best list."""
    encs = []
    for utt in corpus:
        if utt.features is None:
            raise InputError(f"utterance {utt.uid} has no features to decode")
        encs.append(encode(None, scorers.aed.model, Tensor(utt.features, validate=False)))
    results = payload_map(_decode_one, (scorers, encs, config), range(len(encs)), workers=workers)
    return {utt.uid: nbest for utt, nbest in zip(corpus, results)}


@dataclass(frozen=True)
class GridSpec:
    l1_min: float = 0.0
    l1_max: float = 0.8
    l1_step: float = 0.02
    l2_min: float = 0.0
    l2_max: float = 0.8
    l2_step: float = 0.02

    @staticmethod
    def _axis(lo: float, hi: float, step: float) -> list[float]:
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad grid axis [{lo}, {hi}] step {step}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + k * step, 10) for k in range(count)]

    def points(self, method: str) -> list[tuple[float, float]]:
        if method == METHOD_NONE:
            return [(0.0, 0.0)]
        l1 = self._axis(self.l1_min, self.l1_max, self.l1_step)
        l2 = [0.0] if method == METHOD_SF else self._axis(self.l2_min, self.l2_max, self.l2_step)
        pts = [(a, b) for a in l1 for b in l2]
        if not pts:
            raise ConfigError("empty scale grid")
        return pts


def _grid_point_wer(payload, point):
    scorers, encs, refs, config = payload
    l1, l2 = point
    cfg = replace(config, lambda1=l1, lambda2=l2)
    hyps = [beam_search(scorers, enc, cfg)[0].labels[:-1] for enc in encs]
    return word_error_rate(refs, hyps)


def grid_search_scales(
    scorers: Scorers,
    dev_corpus: Corpus,
    config: FusionConfig,
    grid: GridSpec,
    workers: int = 1,
) -> tuple[float, float, list[tuple[float, float, float]]]:
    """Decode the dev set at every grid point; argmin WER.

    Ties break toward the lexicographically smaller (lambda1, lambda2).
    Returns the tuned scales and the full WER surface.
    """
    points = grid.points(config.method)
    encs = []
    refs = []
    for utt in dev_corpus:
        if utt.features is None:
            raise InputError(f"utterance {utt.uid} has no features to decode")
        encs.append(encode(None, scorers.aed.model, Tensor(utt.features, validate=False)))
        refs.append(utt.labels)
    wers = payload_map(_grid_point_wer, (scorers, encs, refs, config), points, workers=workers)
    surface = [(l1, l2, wer) for (l1, l2), wer in zip(points, wers)]
    best = min(surface, key=lambda row: (row[2], row[0], row[1]))
    return best[0], best[1], surface


NBEST_HEADER_PREFIX = "#ilmlab-nbest"


def write_nbest(path, results: dict, config: FusionConfig) -> None:
    """Line-delimited n-best records: uid, rank, fused and component scores, labels."""
    lines = [
        f"{NBEST_HEADER_PREFIX} v=1 method={config.method} "
        f"lambda1={config.lambda1:.17g} lambda2={config.lambda2:.17g}"
    ]
    for uid in results:
        for rank, hyp in enumerate(results[uid], start=1):
            labels = " ".join(str(x) for x in hyp.labels)
            lines.append(
                f"{uid}\t{rank}\t{hyp.fused(config):.17g}\t{hyp.aed_score:.17g}"
                f"\t{hyp.lm_score:.17g}\t{hyp.ilm_score:.17g}\t{labels}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_nbest(path) -> tuple[dict, list]:
    """Parse an n-best file into (header, records)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(NBEST_HEADER_PREFIX):
        raise FormatError("missing n-best header line", 0)
    head = dict(p.split("=", 1) for p in lines[0].split()[1:])
    records = []
    for line in lines[1:]:
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise FormatError(f"expected 7 fields, got {len(fields)}", 0)
        records.append(
            {
                "uid": fields[0],
                "rank": int(fields[1]),
                "fused": float(fields[2]),
                "aed": float(fields[3]),
                "lm": float(fields[4]),
                "ilm": float(fields[5]),
                "labels": tuple(int(x) for x in fields[6].split()),
            }
        )
    return head, records
