"""Attention encoder-decoder networks and standalone LSTM language models.

The encoder is a stack of bidirectional LSTM layers over (optionally
subsampled) input frames. Each decoder step queries an additive attention
scorer with a location-feedback term, mixes the resulting context vector
into either a recurrent (LSTM) or a limited-context feed-forward state, and
emits label log-probabilities through a linear-maxout-linear readout.

A trained model is immutable and may be shared across decoding workers;
training mutates parameters and must own the model exclusively.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numcore as nc
from .data import Corpus, Utterance, Vocabulary, batch_iter
from .errors import ConfigError, InputError, ShapeError, TrainingError, UsageError
from .numcore import Tape, Tensor

INIT_RANGE = 0.08


@dataclass(frozen=True)
class AEDConfig:
    d_in: int = 16
    enc_layers: int = 1
    enc_width: int = 24
    subsample: int = 1
    att_dim: int = 24
    decoder: str = "lstm"  # "lstm" | "ff"
    dec_width: int = 32
    context_k: int = 3  # FF decoder label context
    embed_dim: int = 16
    maxout_units: int = 24

    @property
    def d_enc(self) -> int:
        return 2 * self.enc_width

    def __post_init__(self):
        if self.decoder not in ("lstm", "ff"):
            raise ConfigError(f"decoder must be 'lstm' or 'ff', got {self.decoder!r}")
        if self.subsample < 1 or self.enc_layers < 1 or self.context_k < 1:
            raise ConfigError("subsample, enc_layers and context_k must be >= 1")


@dataclass(frozen=True)
class LMConfig:
    embed_dim: int = 16
    width: int = 32
    layers: int = 1
    role: str = "external"  # "external" | "decoder-like"

    def __post_init__(self):
        if self.role not in ("external", "decoder-like"):
            raise ConfigError(f"unknown LM role {self.role!r}")


def lm_config_like_decoder(cfg: AEDConfig) -> LMConfig:
    """Topology for the subtracted LM: widths copied from the AED decoder."""
    return LMConfig(embed_dim=cfg.embed_dim, width=cfg.dec_width, layers=1, role="decoder-like")


def _uniform(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape), requires_grad=True, validate=False)


class AEDModel:
    """Encoder, attention, decoder and readout parameters plus the vocabulary."""

    def __init__(self, config: AEDConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self._params = params

    @classmethod
    def create(cls, config: AEDConfig, vocab: Vocabulary, seed: int = 0) -> "AEDModel":
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Tensor] = {}
        d_in = c.d_in
        for layer in range(c.enc_layers):
            w = c.enc_width
            for direction in ("fwd", "bwd"):
                p[f"enc{layer}.{direction}.w"] = _uniform(rng, (d_in + w, 4 * w))
                p[f"enc{layer}.{direction}.b"] = _uniform(rng, (4 * w,))
            d_in = 2 * w
        p["att.w_query"] = _uniform(rng, (c.dec_width, c.att_dim))
        p["att.w_enc"] = _uniform(rng, (c.d_enc, c.att_dim))
        p["att.bias"] = _uniform(rng, (c.att_dim,))
        p["att.v"] = _uniform(rng, (c.att_dim,))
        p["att.loc_gain"] = _uniform(rng, ())
        p["embed"] = _uniform(rng, (vocab.size, c.embed_dim))
        if c.decoder == "lstm":
            p["dec.w"] = _uniform(rng, (c.embed_dim + c.d_enc + c.dec_width, 4 * c.dec_width))
            p["dec.b"] = _uniform(rng, (4 * c.dec_width,))
        else:
            p["dec.w"] = _uniform(rng, (c.context_k * c.embed_dim + c.d_enc, c.dec_width))
            p["dec.b"] = _uniform(rng, (c.dec_width,))
        p["readout.w1"] = _uniform(rng, (c.dec_width + c.embed_dim + c.d_enc, 2 * c.maxout_units))
        p["readout.b1"] = _uniform(rng, (2 * c.maxout_units,))
        p["readout.w2"] = _uniform(rng, (c.maxout_units, vocab.size))
        p["readout.b2"] = _uniform(rng, (vocab.size,))
        return cls(config, vocab, p)

    def params(self) -> dict[str, Tensor]:
        return self._params

    def p(self, name: str) -> Tensor:
        return self._params[name]


class LSTMLM:
    """Embedding, stacked LSTM and output projection over the vocabulary."""

    def __init__(self, config: LMConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self._params = params

    @classmethod
    def create(cls, config: LMConfig, vocab: Vocabulary, seed: int = 0) -> "LSTMLM":
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {"embed": _uniform(rng, (vocab.size, config.embed_dim))}
        d_in = config.embed_dim
        for layer in range(config.layers):
            p[f"lstm{layer}.w"] = _uniform(rng, (d_in + config.width, 4 * config.width))
            p[f"lstm{layer}.b"] = _uniform(rng, (4 * config.width,))
            d_in = config.width
        p["out.w"] = _uniform(rng, (config.width, vocab.size))
        p["out.b"] = _uniform(rng, (vocab.size,))
        return cls(config, vocab, p)

    def params(self) -> dict[str, Tensor]:
        return self._params

    def p(self, name: str) -> Tensor:
        return self._params[name]


@dataclass
class EncoderOutput:
    h: Tensor  # (frames, d_enc)
    frames: int


@dataclass
class AttentionState:
    alpha: Tensor  # (frames,) normalized weights
    beta: Tensor  # (frames,) cumulative past weights
    c: Tensor  # (d_enc,) context vector


@dataclass
class LstmDecoderState:
    s: Tensor
    cell: Tensor
    step: int = 0


@dataclass
class FFDecoderState:
    history: tuple[int, ...]  # last k consumed labels, BOS-padded
    step: int = 0


def initial_decoder_state(model: AEDModel):
    c = model.config
    if c.decoder == "lstm":
        return LstmDecoderState(s=nc.zeros(c.dec_width), cell=nc.zeros(c.dec_width), step=0)
    return FFDecoderState(history=(model.vocab.bos,) * c.context_k, step=0)


def encode(tape: Tape | None, model: AEDModel, features: Tensor) -> EncoderOutput:
    """Map input frames to encoder states; frames = ceil(input / subsample)."""
    c = model.config
    if features.values.ndim != 2 or features.shape[1] != c.d_in:
        raise ShapeError(f"features shape {features.shape} incompatible with d_in={c.d_in}")
    if features.shape[0] < 1:
        raise InputError("cannot encode an empty feature sequence")
    kept = range(0, features.shape[0], c.subsample)
    rows = [nc.index_row(tape, features, t) for t in kept]
    width = c.enc_width
    for layer in range(c.enc_layers):
        wf, bf = model.p(f"enc{layer}.fwd.w"), model.p(f"enc{layer}.fwd.b")
        wb, bb = model.p(f"enc{layer}.bwd.w"), model.p(f"enc{layer}.bwd.b")
        h = nc.zeros(width)
        cell = nc.zeros(width)
        fwd = []
        for x in rows:
            h, cell = nc.lstm_cell(tape, x, h, cell, wf, bf)
            fwd.append(h)
        h = nc.zeros(width)
        cell = nc.zeros(width)
        bwd = [None] * len(rows)
        for t in range(len(rows) - 1, -1, -1):
            h, cell = nc.lstm_cell(tape, rows[t], h, cell, wb, bb)
            bwd[t] = h
        rows = [nc.concat(tape, [f, b]) for f, b in zip(fwd, bwd)]
    return EncoderOutput(h=nc.stack_rows(tape, rows), frames=len(rows))


def attend(tape: Tape | None, model: AEDModel, s: Tensor, beta: Tensor, enc: EncoderOutput) -> AttentionState:
    """Additive attention with cumulative location feedback.

    Scores are v . tanh(W_enc h_t + W_query s + bias + gain*beta_t); the
    context vector is the alpha-weighted sum of encoder rows and the
    returned beta accumulates the new weights.
    """
    if beta.shape != (enc.frames,):
        raise ShapeError(f"beta shape {beta.shape} != frame count ({enc.frames},)")
    q = nc.add(tape, nc.matmul(tape, s, model.p("att.w_query")), model.p("att.bias"))
    pre = nc.add_rowvec(tape, nc.matmul(tape, enc.h, model.p("att.w_enc")), q)
    loc = nc.mul(tape, model.p("att.loc_gain"), beta)
    pre = nc.add(tape, pre, nc.outer(tape, loc, nc.tensor(np.ones(model.config.att_dim))))
    scores = nc.matmul(tape, nc.tanh(tape, pre), model.p("att.v"))
    alpha = nc.softmax(tape, scores)
    c = nc.matmul(tape, alpha, enc.h)
    return AttentionState(alpha=alpha, beta=nc.add(tape, beta, alpha), c=c)


def decoder_step_lstm(
    tape: Tape | None, model: AEDModel, state: LstmDecoderState, y_prev: int, c_prev: Tensor
) -> LstmDecoderState:
    """Advance the recurrent decoder state by one consumed label."""
    if model.config.decoder != "lstm" or not isinstance(state, LstmDecoderState):
        raise UsageError("decoder_step_lstm called on a non-LSTM decoder/state")
    emb = nc.index_row(tape, model.p("embed"), y_prev)
    x = nc.concat(tape, [emb, c_prev])
    s, cell = nc.lstm_cell(tape, x, state.s, state.cell, model.p("dec.w"), model.p("dec.b"))
    return LstmDecoderState(s=s, cell=cell, step=state.step + 1)


def decoder_step_ff(
    tape: Tape | None, model: AEDModel, history: tuple[int, ...], c_prev: Tensor
) -> Tensor:
    """Limited-context state: linear+tanh over the last k embeddings and c_prev.

    A pure function of its arguments; labels older than k cannot influence it.
    """
    if model.config.decoder != "ff":
        raise UsageError("decoder_step_ff called on a non-FF decoder")
    k = model.config.context_k
    if len(history) != k:
        raise UsageError(f"FF history must hold exactly {k} labels, got {len(history)}")
    embs = [nc.index_row(tape, model.p("embed"), y) for y in history]
    x = nc.concat(tape, embs + [c_prev])
    return nc.tanh(tape, nc.add(tape, nc.matmul(tape, x, model.p("dec.w")), model.p("dec.b")))


def readout(tape: Tape | None, model: AEDModel, s: Tensor, y_prev: int, c: Tensor) -> Tensor:
    """Label log-distribution: log-softmax of linear(maxout(linear(s, emb, c)))."""
    r = nc.concat(tape, [s, nc.index_row(tape, model.p("embed"), y_prev), c])
    a = nc.add(tape, nc.matmul(tape, r, model.p("readout.w1")), model.p("readout.b1"))
    logits = nc.add(tape, nc.matmul(tape, nc.maxout(tape, a), model.p("readout.w2")), model.p("readout.b2"))
    return nc.log_softmax(tape, logits)


def aed_decode_step(
    tape: Tape | None,
    model: AEDModel,
    state,
    beta: Tensor,
    c_prev: Tensor,
    y_prev: int,
    enc: EncoderOutput,
):
    """One full decode step: advance the state, attend, read out.

    Returns (new decoder state, attention state, log-distribution); the one
    step function shared by teacher forcing and beam search.
    """
    if model.config.decoder == "lstm":
        state = decoder_step_lstm(tape, model, state, y_prev, c_prev)
        s = state.s
    else:
        hist = (state.history + (y_prev,))[-model.config.context_k :]
        state = FFDecoderState(history=hist, step=state.step + 1)
        s = decoder_step_ff(tape, model, hist, c_prev)
    att = attend(tape, model, s, beta, enc)
    return state, att, readout(tape, model, s, y_prev, att.c)


def aed_step_logprobs(
    tape: Tape | None, model: AEDModel, enc: EncoderOutput, targets: list[int]
) -> tuple[list[Tensor], list[AttentionState]]:
    """Teacher-forced pass; returns per-step log-distributions and attention.

    ``targets`` is the label sequence the decoder is forced along (normally
    ending with the end sentinel); step i consumes targets[i-1] as y_prev.
    """
    state = initial_decoder_state(model)
    beta = nc.zeros(enc.frames)
    c_prev = nc.zeros(model.config.d_enc)
    y_prev = model.vocab.bos
    rows: list[Tensor] = []
    atts: list[AttentionState] = []
    for y in targets:
        state, att, row = aed_decode_step(tape, model, state, beta, c_prev, y_prev, enc)
        rows.append(row)
        atts.append(att)
        beta, c_prev, y_prev = att.beta, att.c, y
    return rows, atts


def aed_sequence_logprob(model: AEDModel, features: Tensor, labels: list[int]) -> float:
    """Teacher-forced log P(labels | features); labels must end with EOS."""
    if not labels or labels[-1] != model.vocab.eos:
        raise InputError("label sequence must end with the end sentinel")
    enc = encode(None, model, features)
    rows, _ = aed_step_logprobs(None, model, enc, list(labels))
    return float(sum(row.values[y] for row, y in zip(rows, labels)))


def lm_start(lm: LSTMLM) -> tuple:
    return tuple((nc.zeros(lm.config.width), nc.zeros(lm.config.width)) for _ in range(lm.config.layers))


def lm_step(tape: Tape | None, lm: LSTMLM, state: tuple, y_prev: int) -> tuple[tuple, Tensor]:
    """One LM step: consume y_prev, emit the next-label log-distribution."""
    x = nc.index_row(tape, lm.p("embed"), y_prev)
    new_state = []
    for layer, (h, cell) in enumerate(state):
        h, cell = nc.lstm_cell(tape, x, h, cell, lm.p(f"lstm{layer}.w"), lm.p(f"lstm{layer}.b"))
        new_state.append((h, cell))
        x = h
    logits = nc.add(tape, nc.matmul(tape, x, lm.p("out.w")), lm.p("out.b"))
    return tuple(new_state), nc.log_softmax(tape, logits)


def lm_step_logprobs(tape: Tape | None, lm: LSTMLM, targets: list[int]) -> list[Tensor]:
    """Per-step log-distributions along targets, starting from BOS."""
    state = lm_start(lm)
    rows = []
    y_prev = lm.vocab.bos
    for y in targets:
        state, lp = lm_step(tape, lm, state, y_prev)
        rows.append(lp)
        y_prev = y
    return rows


def lm_sequence_logprob(lm: LSTMLM, labels: list[int]) -> float:
    if not labels or labels[-1] != lm.vocab.eos:
        raise InputError("label sequence must end with the end sentinel")
    rows = lm_step_logprobs(None, lm, list(labels))
    return float(sum(row.values[y] for row, y in zip(rows, labels)))


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0


class Adam:
    """Adam over a fixed parameter list; missing grads are treated as zero."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _targets(utt: Utterance, eos: int) -> list[int]:
    return list(utt.labels) + [eos]


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _run_epochs(models_params, corpus, cfg: TrainConfig, loss_fn) -> list[float]:
    if len(corpus) == 0:
        raise InputError("training corpus is empty")
    opt = Adam(models_params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    curve = []
    for epoch in range(cfg.epochs):
        total_nll = 0.0
        total_tokens = 0
        for batch in batch_iter(corpus, cfg.batch_size, epoch_seed(cfg.seed, epoch)):
            tape = Tape()
            acc = None
            for utt in batch:
                loss, n_tok = loss_fn(tape, utt)
                total_nll += loss.item() * n_tok
                total_tokens += n_tok
                acc = loss if acc is None else nc.add(tape, acc, loss)
            batch_loss = nc.scale(tape, acc, 1.0 / len(batch))
            if not np.isfinite(batch_loss.values):
                raise TrainingError("training diverged to a non-finite loss", epoch)
            opt.zero_grad()
            tape.backward(batch_loss)
            opt.step()
        curve.append(total_nll / total_tokens)
    return curve


def train_aed(model: AEDModel, corpus: Corpus, cfg: TrainConfig) -> list[float]:
    """Teacher-forced cross-entropy training; returns the per-epoch loss curve."""
    if corpus.vocab_size != model.vocab.size:
        raise ConfigError(f"corpus vocab {corpus.vocab_size} != model vocab {model.vocab.size}")

    def loss_fn(tape, utt):
        targets = _targets(utt, model.vocab.eos)
        enc = encode(tape, model, Tensor(utt.features, validate=False))
        rows, _ = aed_step_logprobs(tape, model, enc, targets)
        loss = nc.cross_entropy(tape, nc.stack_rows(tape, rows), targets)
        return loss, len(targets)

    return _run_epochs(model.params().values(), corpus, cfg, loss_fn)


def train_lm(lm: LSTMLM, corpus: Corpus, cfg: TrainConfig) -> list[float]:
    """Next-label cross-entropy over text sequences (end sentinel included)."""
    if corpus.vocab_size != lm.vocab.size:
        raise ConfigError(f"corpus vocab {corpus.vocab_size} != LM vocab {lm.vocab.size}")

    def loss_fn(tape, utt):
        targets = _targets(utt, lm.vocab.eos)
        rows = lm_step_logprobs(tape, lm, targets)
        loss = nc.cross_entropy(tape, nc.stack_rows(tape, rows), targets)
        return loss, len(targets)

    return _run_epochs(lm.params().values(), corpus, cfg, loss_fn)


def serialize_model(model: AEDModel | LSTMLM) -> bytes:
    kind = "aed" if isinstance(model, AEDModel) else "lm"
    header = {
        "kind": kind,
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
    }
    return checkpoint.serialize(header, {k: t.values for k, t in model.params().items()})


def model_digest(model: AEDModel | LSTMLM) -> str:
    """Content hash of the model's canonical serialized form."""
    return checkpoint.digest(serialize_model(model))


def save_model(path, model: AEDModel | LSTMLM) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> AEDModel | LSTMLM:
    header, tensors = checkpoint.load(path)
    vocab = Vocabulary(tuple(header["vocab"]))
    params = {k: Tensor(v, requires_grad=True, validate=False) for k, v in tensors.items()}
    kind = header.get("kind")
    if kind == "aed":
        return AEDModel(AEDConfig(**header["config"]), vocab, params)
    if kind == "lm":
        return LSTMLM(LMConfig(**header["config"]), vocab, params)
    raise ConfigError(f"checkpoint kind {kind!r} is not a model")
