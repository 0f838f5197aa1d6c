"""Label priors read off the decoder by substituting its attention context.

The decoder plus readout is run exactly as in the full model, but every
context vector (both the one mixed into the state update and the one fed to
the readout) is replaced by a surrogate: zero, a corpus average of contexts
or encoder states, the current utterance's encoder average, or the output
of a small trained LSTM. With everything except the utterance average the
resulting distributions cannot depend on the acoustic input at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numcore as nc
from .data import Corpus, batch_iter
from .errors import (
    ArtifactMismatch,
    ConfigError,
    FreezeViolation,
    InputError,
    UsageError,
)
from .model import (
    AEDModel,
    Adam,
    EncoderOutput,
    FFDecoderState,
    TrainConfig,
    aed_step_logprobs,
    decoder_step_ff,
    decoder_step_lstm,
    encode,
    epoch_seed,
    initial_decoder_state,
    model_digest,
    readout,
)
from .numcore import Tape, Tensor

MINI_LSTM_WIDTH = 50

METHODS = ("zero", "avg-context", "avg-encoder", "utt-encoder", "mini-lstm")


@dataclass
class CorpusStats:
    """Running sums for the corpus-average context surrogates."""

    sum_c: np.ndarray
    j_tot: int
    sum_h: np.ndarray
    t_tot: int

    @property
    def context_avg(self) -> np.ndarray:
        if self.j_tot <= 0:
            raise InputError("no label steps accumulated")
        return self.sum_c / self.j_tot

    @property
    def encoder_avg(self) -> np.ndarray:
        if self.t_tot <= 0:
            raise InputError("no encoder frames accumulated")
        return self.sum_h / self.t_tot


def accumulate_stats(corpus: Corpus, model: AEDModel) -> CorpusStats:
    """Teacher-forced pass collecting context vectors and encoder states.

    Contexts are taken at the label steps only (the end-sentinel step is not
    part of the average); encoder states are taken at every frame.
    """
    if len(corpus) == 0:
        raise InputError("cannot accumulate statistics over an empty corpus")
    d_enc = model.config.d_enc
    stats = CorpusStats(sum_c=np.zeros(d_enc), j_tot=0, sum_h=np.zeros(d_enc), t_tot=0)
    for utt in corpus:
        if utt.features is None:
            raise InputError(f"utterance {utt.uid} has no features")
        enc = encode(None, model, Tensor(utt.features, validate=False))
        stats.sum_h += enc.h.values.sum(axis=0)
        stats.t_tot += enc.frames
        targets = list(utt.labels) + [model.vocab.eos]
        _, atts = aed_step_logprobs(None, model, enc, targets)
        for att in atts[: len(utt.labels)]:
            stats.sum_c += att.c.values
        stats.j_tot += len(utt.labels)
    return stats


def seq_encoder_avg(enc: EncoderOutput) -> Tensor:
    """Arithmetic mean of the encoder rows of one utterance."""
    if enc.frames < 1:
        raise InputError("empty encoder output")
    return Tensor(enc.h.values.sum(axis=0) / enc.frames, validate=False)


class ContextSource:
    """Rule producing the surrogate context vector per decode step."""

    method: str = "?"

    def __init__(self, zero_at_step_zero: bool = True):
        self.zero_at_step_zero = zero_at_step_zero

    def needs_encoder(self) -> bool:
        return False

    def start(self, model: AEDModel, enc: EncoderOutput | None):
        """Per-utterance provider state (None when the rule is stateless)."""
        return None

    def advance(self, tape: Tape | None, state, model: AEDModel, y: int):
        return state

    def context(self, tape: Tape | None, state, model: AEDModel, i: int) -> Tensor:
        raise NotImplementedError

    def trainable_params(self) -> dict[str, Tensor]:
        return {}

    # serialization hooks
    def extra_header(self) -> dict:
        return {}

    def tensors(self) -> dict[str, np.ndarray]:
        return {}


class ZeroContext(ContextSource):
    """The surrogate is the zero vector at every step."""

    method = "zero"

    def context(self, tape, state, model, i):
        return nc.zeros(model.config.d_enc)


class FixedContext(ContextSource):
    """A single corpus-level vector for every step i >= 1."""

    def __init__(self, method: str, c_hat: np.ndarray, zero_at_step_zero: bool = True):
        super().__init__(zero_at_step_zero)
        if method not in ("avg-context", "avg-encoder"):
            raise ConfigError(f"fixed context method must be an average, got {method!r}")
        self.method = method
        self.c_hat = np.asarray(c_hat, dtype=np.float64)

    def context(self, tape, state, model, i):
        if i == 0 and self.zero_at_step_zero:
            return nc.zeros(model.config.d_enc)
        return Tensor(self.c_hat, validate=False)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"c_hat": self.c_hat}


class UtteranceEncoderAvg(ContextSource):
    """Mean encoder state of the current utterance (uses the input x)."""

    method = "utt-encoder"

    def needs_encoder(self) -> bool:
        return True

    def start(self, model, enc):
        if enc is None:
            raise UsageError("utt-encoder source needs the utterance's encoder output")
        return seq_encoder_avg(enc)

    def context(self, tape, state, model, i):
        if i == 0 and self.zero_at_step_zero:
            return nc.zeros(model.config.d_enc)
        return state


class MiniLstmContext(ContextSource):
    """Small trained LSTM over the emitted labels, projected to context size.

    Shares the decoder embedding; only the LSTM and the projection are
    trainable. State is (h, cell) after consuming the labels so far.
    """

    method = "mini-lstm"

    def __init__(self, params: dict[str, Tensor], width: int = MINI_LSTM_WIDTH, zero_at_step_zero: bool = True):
        super().__init__(zero_at_step_zero)
        self.params = params
        self.width = width

    @classmethod
    def create(cls, model: AEDModel, seed: int = 0, width: int = MINI_LSTM_WIDTH, zero_at_step_zero: bool = True):
        rng = np.random.default_rng(seed)
        e = model.config.embed_dim

        def u(shape):
            return Tensor(rng.uniform(-0.08, 0.08, size=shape), requires_grad=True, validate=False)

        params = {
            "mini.lstm.w": u((e + width, 4 * width)),
            "mini.lstm.b": u((4 * width,)),
            "mini.proj.w": u((width, model.config.d_enc)),
            "mini.proj.b": u((model.config.d_enc,)),
        }
        return cls(params, width=width, zero_at_step_zero=zero_at_step_zero)

    def start(self, model, enc):
        return (nc.zeros(self.width), nc.zeros(self.width))

    def advance(self, tape, state, model, y):
        emb = nc.index_row(tape, model.p("embed"), y)
        h, cell = nc.lstm_cell(
            tape, emb, state[0], state[1], self.params["mini.lstm.w"], self.params["mini.lstm.b"]
        )
        return (h, cell)

    def context(self, tape, state, model, i):
        if i == 0 and self.zero_at_step_zero:
            return nc.zeros(model.config.d_enc)
        return nc.add(
            tape,
            nc.matmul(tape, state[0], self.params["mini.proj.w"]),
            self.params["mini.proj.b"],
        )

    def trainable_params(self) -> dict[str, Tensor]:
        return self.params

    def extra_header(self) -> dict:
        return {"width": self.width}

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.params.items()}


@dataclass
class IlmState:
    """Decoder state plus provider state; ``step`` counts emitted labels."""

    dec: object
    ctx: object
    step: int = 0


def ilm_start(model: AEDModel, source: ContextSource, enc: EncoderOutput | None = None) -> IlmState:
    if source.needs_encoder() and enc is None:
        raise UsageError(f"{source.method} source is unresolved without an encoder pass")
    return IlmState(dec=initial_decoder_state(model), ctx=source.start(model, enc), step=0)


def ilm_step(
    tape: Tape | None,
    model: AEDModel,
    source: ContextSource,
    state: IlmState,
    y_prev: int,
) -> tuple[IlmState, Tensor]:
    """One substituted decoder step; same path as the full model otherwise."""
    i = state.step + 1
    c_prev = source.context(tape, state.ctx, model, i - 1)
    ctx = state.ctx if i == 1 else source.advance(tape, state.ctx, model, y_prev)
    c_i = source.context(tape, ctx, model, i)
    if model.config.decoder == "lstm":
        dec = decoder_step_lstm(tape, model, state.dec, y_prev, c_prev)
        s = dec.s
    else:
        hist = (state.dec.history + (y_prev,))[-model.config.context_k :]
        dec = FFDecoderState(history=hist, step=state.dec.step + 1)
        s = decoder_step_ff(tape, model, hist, c_prev)
    logp = readout(tape, model, s, y_prev, c_i)
    return IlmState(dec=dec, ctx=ctx, step=i), logp


def ilm_step_logprobs(
    tape: Tape | None,
    model: AEDModel,
    source: ContextSource,
    targets: list[int],
    enc: EncoderOutput | None = None,
) -> list[Tensor]:
    """Teacher-forced substituted pass along ``targets``."""
    state = ilm_start(model, source, enc)
    rows = []
    y_prev = model.vocab.bos
    for y in targets:
        state, lp = ilm_step(tape, model, source, state, y_prev)
        rows.append(lp)
        y_prev = y
    return rows


def ilm_sequence_logprob(model: AEDModel, source: ContextSource, labels: list[int], enc=None) -> float:
    rows = ilm_step_logprobs(None, model, source, list(labels), enc)
    return float(sum(row.values[y] for row, y in zip(rows, labels)))


def ilm_perplexity(corpus: Corpus, source: ContextSource, model: AEDModel) -> float:
    """exp of the mean per-token negative log-prob, end sentinel included."""
    if len(corpus) == 0:
        raise InputError("cannot compute perplexity of an empty corpus")
    total_nll = 0.0
    total_tokens = 0
    for utt in corpus:
        enc = None
        if source.needs_encoder():
            if utt.features is None:
                raise InputError(f"{source.method} needs features, {utt.uid} has none")
            enc = encode(None, model, Tensor(utt.features, validate=False))
        targets = list(utt.labels) + [model.vocab.eos]
        rows = ilm_step_logprobs(None, model, source, targets, enc)
        loss = nc.cross_entropy(None, nc.stack_rows(None, rows), targets)
        total_nll += loss.item() * len(targets)
        total_tokens += len(targets)
    return math.exp(total_nll / total_tokens)


def subset_for_mini_training(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Seeded sample of the training utterances (default one tenth)."""
    n = max(1, int(math.ceil(fraction * len(corpus))))
    idx = np.random.default_rng(seed).choice(len(corpus), size=n, replace=False)
    return Corpus(items=[corpus.items[i] for i in sorted(idx)], vocab_size=corpus.vocab_size, kind=corpus.kind)


def train_mini_lstm(
    subset: Corpus,
    model: AEDModel,
    cfg: TrainConfig,
    width: int = MINI_LSTM_WIDTH,
    zero_at_step_zero: bool = True,
) -> tuple[MiniLstmContext, list[float]]:
    """Fit the trained-context source by minimizing substituted-decoder loss.

    The AED stays frozen: its parameters are excluded from the optimizer,
    temporarily marked as not requiring gradients, and checksummed before
    and after training.
    """
    if len(subset) == 0:
        raise InputError("mini-lstm training subset is empty")
    source = MiniLstmContext.create(model, seed=cfg.seed, width=width, zero_at_step_zero=zero_at_step_zero)
    digest_before = model_digest(model)
    saved_flags = {name: t.requires_grad for name, t in model.params().items()}
    for t in model.params().values():
        t.requires_grad = False
    try:
        opt = Adam(source.params.values(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        curve = []
        for epoch in range(cfg.epochs):
            total_nll = 0.0
            total_tokens = 0
            for batch in batch_iter(subset, cfg.batch_size, epoch_seed(cfg.seed, epoch)):
                tape = Tape()
                acc = None
                for utt in batch:
                    targets = list(utt.labels) + [model.vocab.eos]
                    rows = ilm_step_logprobs(tape, model, source, targets)
                    loss = nc.cross_entropy(tape, nc.stack_rows(tape, rows), targets)
                    total_nll += loss.item() * len(targets)
                    total_tokens += len(targets)
                    acc = loss if acc is None else nc.add(tape, acc, loss)
                batch_loss = nc.scale(tape, acc, 1.0 / len(batch))
                opt.zero_grad()
                tape.backward(batch_loss)
                opt.step()
            curve.append(total_nll / total_tokens)
    finally:
        for name, t in model.params().items():
            t.requires_grad = saved_flags[name]
    if model_digest(model) != digest_before:
        raise FreezeViolation("AED parameters changed during mini-lstm training")
    return source, curve


def build_estimator(
    method: str,
    model: AEDModel,
    corpus: Corpus | None,
    cfg: TrainConfig | None = None,
    subset_fraction: float = 0.1,
    zero_at_step_zero: bool = True,
    width: int = MINI_LSTM_WIDTH,
) -> ContextSource:
    """Resolve a context source for one of the estimation methods."""
    if method == "zero":
        return ZeroContext(zero_at_step_zero)
    if method == "utt-encoder":
        return UtteranceEncoderAvg(zero_at_step_zero)
    if method in ("avg-context", "avg-encoder"):
        if corpus is None:
            raise InputError(f"{method} needs a training corpus")
        stats = accumulate_stats(corpus, model)
        vec = stats.context_avg if method == "avg-context" else stats.encoder_avg
        return FixedContext(method, vec, zero_at_step_zero)
    if method == "mini-lstm":
        if corpus is None:
            raise InputError("mini-lstm needs a training corpus")
        cfg = cfg or TrainConfig(epochs=5)
        subset = subset_for_mini_training(corpus, subset_fraction, cfg.seed)
        train_cfg = TrainConfig(
            epochs=cfg.epochs, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
            eps=cfg.eps, batch_size=cfg.batch_size, seed=cfg.seed + 1,
        )
        source, _ = train_mini_lstm(subset, model, train_cfg, width=width, zero_at_step_zero=zero_at_step_zero)
        return source
    raise ConfigError(f"unknown estimation method {method!r}, expected one of {METHODS}")


def serialize_estimator(source: ContextSource, model: AEDModel) -> bytes:
    header = {
        "kind": "estimator",
        "method": source.method,
        "zero_at_step_zero": source.zero_at_step_zero,
        "aed_digest": model_digest(model),
    }
    header.update(source.extra_header())
    return checkpoint.serialize(header, source.tensors())


def save_estimator(path, source: ContextSource, model: AEDModel) -> None:
    Path(path).write_bytes(serialize_estimator(source, model))


def load_estimator(path, model: AEDModel) -> ContextSource:
    """Load a context source; refuses if it was built for a different model."""
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "estimator":
        raise ConfigError(f"checkpoint kind {header.get('kind')!r} is not an estimator")
    if header.get("aed_digest") != model_digest(model):
        raise ArtifactMismatch(
            "estimator was built for a different model checkpoint "
            f"(stored digest {header.get('aed_digest', '?')[:12]}..., "
            f"model digest {model_digest(model)[:12]}...)"
        )
    method = header.get("method")
    flag = bool(header.get("zero_at_step_zero", True))
    if method == "zero":
        return ZeroContext(flag)
    if method == "utt-encoder":
        return UtteranceEncoderAvg(flag)
    if method in ("avg-context", "avg-encoder"):
        return FixedContext(method, tensors["c_hat"], flag)
    if method == "mini-lstm":
        params = {k: Tensor(v, requires_grad=True, validate=False) for k, v in tensors.items()}
        return MiniLstmContext(params, width=int(header.get("width", MINI_LSTM_WIDTH)), zero_at_step_zero=flag)
    raise ConfigError(f"estimator has unknown method {method!r}")
