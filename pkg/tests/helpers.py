"""Shared tiny-model factories for the unit suites."""

import numpy as np

from ilmlab.data import Corpus, Utterance, Vocabulary
from ilmlab.model import AEDConfig, AEDModel, LMConfig, LSTMLM


def tiny_aed_config(**over) -> AEDConfig:
    base = dict(
        d_in=3,
        enc_layers=1,
        enc_width=3,
        subsample=1,
        att_dim=3,
        decoder="lstm",
        dec_width=4,
        context_k=3,
        embed_dim=3,
        maxout_units=3,
    )
    base.update(over)
    return AEDConfig(**base)


def make_aed(n_words=3, seed=0, **over) -> AEDModel:
    return AEDModel.create(tiny_aed_config(**over), Vocabulary.build(n_words), seed=seed)


def make_lm(n_words=3, seed=0, **over) -> LSTMLM:
    base = dict(embed_dim=3, width=4, layers=1, role="external")
    base.update(over)
    return LSTMLM.create(LMConfig(**base), Vocabulary.build(n_words), seed=seed)


def make_features(rng, frames, d_in=3):
    return rng.standard_normal((frames, d_in))


def toy_paired_corpus(rng, n_utts, n_words=3, d_in=3, max_len=4) -> Corpus:
    items = []
    for u in range(n_utts):
        n = int(rng.integers(1, max_len + 1))
        labels = tuple(int(x) for x in rng.integers(2, n_words + 2, size=n))
        frames = rng.standard_normal((n + int(rng.integers(0, 3)), d_in))
        items.append(Utterance(uid=f"u{u:03d}", labels=labels, features=frames))
    return Corpus(items=items, vocab_size=n_words + 2, kind="paired")


def toy_text_corpus(rng, n_utts, n_words=3, max_len=5) -> Corpus:
    items = []
    for u in range(n_utts):
        n = int(rng.integers(1, max_len + 1))
        labels = tuple(int(x) for x in rng.integers(2, n_words + 2, size=n))
        items.append(Utterance(uid=f"t{u:03d}", labels=labels))
    return Corpus(items=items, vocab_size=n_words + 2, kind="text")


def zero_params(model) -> None:
    for t in model.params().values():
        t.values[...] = 0.0


def param_bytes(model) -> bytes:
    return b"".join(t.values.tobytes() for t in model.params().values())
