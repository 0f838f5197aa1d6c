import math

import numpy as np
import pytest

from ilmlab import ilm
from ilmlab import model as md
from ilmlab import numcore as nc
from ilmlab.data import Corpus, Utterance
from ilmlab.errors import ArtifactMismatch, FreezeViolation, InputError, UsageError
from ilmlab.model import TrainConfig, Tensor

from gradcheck import fd_scalar_grads, rel_err
from helpers import make_aed, make_features, param_bytes, toy_paired_corpus


def one_utt_corpus(rng, n_labels=1, n_words=3, d_in=3):
    labels = tuple(int(x) for x in rng.integers(2, n_words + 2, size=n_labels))
    feats = rng.standard_normal((n_labels + 1, d_in))
    return Corpus(
        items=[Utterance(uid="u0", labels=labels, features=feats)],
        vocab_size=n_words + 2,
        kind="paired",
    )


def test_stats_single_utterance_single_step_is_that_context():
    m = make_aed(seed=0)
    rng = np.random.default_rng(1)
    corpus = one_utt_corpus(rng, n_labels=1)
    stats = ilm.accumulate_stats(corpus, m)
    utt = corpus.items[0]
    enc = md.encode(None, m, Tensor(utt.features))
    _, atts = md.aed_step_logprobs(None, m, enc, list(utt.labels) + [m.vocab.eos])
    assert stats.j_tot == 1
    assert np.array_equal(stats.context_avg, atts[0].c.values)


def test_stats_weighted_average_matches_flat_resummation():
    m = make_aed(seed=2)
    rng = np.random.default_rng(3)
    items = []
    for uid, n in (("a", 1), ("b", 3)):
        labels = tuple(int(x) for x in rng.integers(2, 5, size=n))
        items.append(Utterance(uid=uid, labels=labels, features=rng.standard_normal((n + 2, 3))))
    corpus = Corpus(items=items, vocab_size=5, kind="paired")
    stats = ilm.accumulate_stats(corpus, m)
    assert stats.j_tot == 4 and stats.t_tot == 3 + 5

    flat_c = []
    flat_h = []
    for utt in corpus:
        enc = md.encode(None, m, Tensor(utt.features))
        flat_h.extend(enc.h.values)
        _, atts = md.aed_step_logprobs(None, m, enc, list(utt.labels) + [m.vocab.eos])
        flat_c.extend(att.c.values for att in atts[: len(utt.labels)])
    assert np.max(np.abs(stats.context_avg - np.mean(flat_c, axis=0))) < 1e-12
    assert np.max(np.abs(stats.encoder_avg - np.mean(flat_h, axis=0))) < 1e-12


def test_global_encoder_avg_equals_seq_avg_on_single_utterance_exactly():
    m = make_aed(seed=4)
    rng = np.random.default_rng(5)
    corpus = one_utt_corpus(rng, n_labels=2)
    stats = ilm.accumulate_stats(corpus, m)
    enc = md.encode(None, m, Tensor(corpus.items[0].features))
    assert np.array_equal(stats.encoder_avg, ilm.seq_encoder_avg(enc).values)


def test_stats_order_independent_within_tolerance():
    m = make_aed(seed=6)
    rng = np.random.default_rng(7)
    corpus = toy_paired_corpus(rng, 6)
    fwd = ilm.accumulate_stats(corpus, m)
    rev = ilm.accumulate_stats(
        Corpus(items=list(reversed(corpus.items)), vocab_size=corpus.vocab_size, kind="paired"), m
    )
    assert np.max(np.abs(fwd.context_avg - rev.context_avg)) < 1e-9
    assert np.max(np.abs(fwd.encoder_avg - rev.encoder_avg)) < 1e-9


def test_stats_empty_corpus_rejected():
    with pytest.raises(InputError):
        ilm.accumulate_stats(Corpus(items=[], vocab_size=5, kind="paired"), make_aed())


def test_seq_encoder_avg_trivials_and_loop_oracle():
    m = make_aed(seed=8)
    rng = np.random.default_rng(9)
    enc1 = md.encode(None, m, Tensor(make_features(rng, 1)))
    assert np.array_equal(ilm.seq_encoder_avg(enc1).values, enc1.h.values[0])
    enc = md.encode(None, m, Tensor(make_features(rng, 5)))
    manual = np.zeros(m.config.d_enc)
    for t in range(5):
        manual = manual + enc.h.values[t]
    manual /= 5
    assert np.max(np.abs(ilm.seq_encoder_avg(enc).values - manual)) < 1e-12


def test_constant_encoder_rows_average_to_that_constant():
    m = make_aed(seed=10)
    rng = np.random.default_rng(11)
    row = rng.standard_normal(m.config.d_enc)
    enc = md.EncoderOutput(h=Tensor(np.tile(row, (4, 1))), frames=4)
    assert np.max(np.abs(ilm.seq_encoder_avg(enc).values - row)) < 1e-12


def test_zero_source_yields_zero_context_every_step():
    m = make_aed(seed=12)
    src = ilm.ZeroContext()
    state = ilm.ilm_start(m, src)
    for i in range(4):
        assert np.array_equal(src.context(None, state.ctx, m, i).values, np.zeros(m.config.d_enc))
        state, _ = ilm.ilm_step(None, m, src, state, 2)


def test_ilm_distribution_is_feature_invariant_bitwise():
    m = make_aed(seed=13)
    rng = np.random.default_rng(14)
    corpus = toy_paired_corpus(rng, 4)
    stats = ilm.accumulate_stats(corpus, m)
    sources = [
        ilm.ZeroContext(),
        ilm.FixedContext("avg-context", stats.context_avg),
        ilm.FixedContext("avg-encoder", stats.encoder_avg),
        ilm.MiniLstmContext.create(m, seed=1, width=5),
    ]
    targets = [2, 3, 4, m.vocab.eos]
    for src in sources:
        rows_a = ilm.ilm_step_logprobs(None, m, src, targets)
        rows_b = ilm.ilm_step_logprobs(None, m, src, targets)
        for a, b in zip(rows_a, rows_b):
            assert np.array_equal(a.values, b.values)
    # the utterance average is the documented exception: it does use features
    utt_src = ilm.UtteranceEncoderAvg()
    enc_a = md.encode(None, m, Tensor(make_features(np.random.default_rng(15), 4)))
    enc_b = md.encode(None, m, Tensor(make_features(np.random.default_rng(16), 4)))
    ra = ilm.ilm_step_logprobs(None, m, utt_src, targets, enc_a)
    rb = ilm.ilm_step_logprobs(None, m, utt_src, targets, enc_b)
    assert not np.array_equal(ra[0].values, rb[0].values)


def test_ilm_sequence_logprob_matches_step_sum():
    m = make_aed(seed=17)
    src = ilm.MiniLstmContext.create(m, seed=2, width=4)
    targets = [3, 2, 4, m.vocab.eos]
    total = ilm.ilm_sequence_logprob(m, src, targets)
    state = ilm.ilm_start(m, src)
    manual = 0.0
    y_prev = m.vocab.bos
    for y in targets:
        state, lp = ilm.ilm_step(None, m, src, state, y_prev)
        manual += lp.values[y]
        y_prev = y
    assert abs(total - manual) < 1e-12


def test_unresolved_utt_source_raises():
    m = make_aed()
    with pytest.raises(UsageError):
        ilm.ilm_start(m, ilm.UtteranceEncoderAvg(), enc=None)


def test_ff_window_markov_property_bitwise_under_fixed_context():
    # with a limited-context decoder and a context rule that ignores label
    # history, permuting labels older than k leaves later step
    # distributions bit-identical
    m = make_aed(decoder="ff", context_k=2, n_words=4, seed=50)
    src = ilm.ZeroContext()
    seq_a = [2, 3, 4, 5, m.vocab.eos]
    seq_b = [3, 2, 4, 5, m.vocab.eos]  # first two labels swapped
    rows_a = ilm.ilm_step_logprobs(None, m, src, seq_a)
    rows_b = ilm.ilm_step_logprobs(None, m, src, seq_b)
    # the swapped labels fall outside the window only at the final step,
    # whose window is (4, 5) in both sequences
    assert np.array_equal(rows_a[4].values, rows_b[4].values)
    for i in (1, 2, 3):
        assert not np.array_equal(rows_a[i].values, rows_b[i].values)


def test_step_zero_context_identical_across_zero_and_average_sources():
    # with the step-zero flag on, the context consumed by the first state
    # update is the zero vector for every source, so the first decoder state
    # is bit-identical across them
    m = make_aed(seed=18)
    rng = np.random.default_rng(19)
    corpus = toy_paired_corpus(rng, 3)
    stats = ilm.accumulate_stats(corpus, m)
    sources = [
        ilm.ZeroContext(),
        ilm.FixedContext("avg-context", stats.context_avg),
        ilm.FixedContext("avg-encoder", stats.encoder_avg),
    ]
    states = []
    for src in sources:
        assert np.array_equal(src.context(None, src.start(m, None), m, 0).values, np.zeros(m.config.d_enc))
        state, _ = ilm.ilm_step(None, m, src, ilm.ilm_start(m, src), m.vocab.bos)
        states.append(state.dec.s.values)
    assert np.array_equal(states[0], states[1])
    assert np.array_equal(states[0], states[2])


def test_step_zero_flag_off_feeds_average_at_step_zero():
    m = make_aed(seed=20)
    vec = np.random.default_rng(21).standard_normal(m.config.d_enc)
    on = ilm.FixedContext("avg-context", vec, zero_at_step_zero=True)
    off = ilm.FixedContext("avg-context", vec, zero_at_step_zero=False)
    assert np.array_equal(on.context(None, None, m, 0).values, np.zeros(m.config.d_enc))
    assert np.array_equal(off.context(None, None, m, 0).values, vec)
    s_on, _ = ilm.ilm_step(None, m, on, ilm.ilm_start(m, on), m.vocab.bos)
    s_off, _ = ilm.ilm_step(None, m, off, ilm.ilm_start(m, off), m.vocab.bos)
    assert not np.array_equal(s_on.dec.s.values, s_off.dec.s.values)


def test_train_mini_lstm_freezes_aed_and_lr_zero_keeps_mini_params():
    m = make_aed(seed=22)
    rng = np.random.default_rng(23)
    corpus = toy_paired_corpus(rng, 4)
    before = param_bytes(m)
    src, curve = ilm.train_mini_lstm(corpus, m, TrainConfig(epochs=1, lr=0.0, batch_size=2, seed=3), width=4)
    assert param_bytes(m) == before
    fresh = ilm.MiniLstmContext.create(m, seed=3, width=4)
    for k in src.params:
        assert np.array_equal(src.params[k].values, fresh.params[k].values)
    assert len(curve) == 1


def test_train_mini_lstm_raises_if_aed_mutates():
    m = make_aed(seed=24)
    corpus = toy_paired_corpus(np.random.default_rng(25), 2)

    class Sabotage(ilm.MiniLstmContext):
        def advance(self, tape, state, model, y):
            model.p("embed").values[0, 0] += 1.0  # illegal: must stay frozen
            return super().advance(tape, state, model, y)

    orig = ilm.MiniLstmContext.create
    ilm.MiniLstmContext.create = classmethod(
        lambda cls, model, seed=0, width=ilm.MINI_LSTM_WIDTH, zero_at_step_zero=True: Sabotage(
            orig.__func__(ilm.MiniLstmContext, model, seed=seed, width=width).params,
            width=width,
            zero_at_step_zero=zero_at_step_zero,
        )
    )
    try:
        with pytest.raises(FreezeViolation):
            ilm.train_mini_lstm(corpus, m, TrainConfig(epochs=1, lr=1e-3, batch_size=2, seed=0), width=4)
    finally:
        ilm.MiniLstmContext.create = orig


def test_mini_lstm_gradients_match_finite_differences():
    m = make_aed(seed=26, n_words=2, d_in=2, enc_width=2, att_dim=2, dec_width=2, embed_dim=2, maxout_units=2)
    src = ilm.MiniLstmContext.create(m, seed=4, width=3)
    targets = [2, 3, m.vocab.eos]

    def loss_value(_arrays):
        rows = ilm.ilm_step_logprobs(None, m, src, targets)
        return nc.cross_entropy(None, nc.stack_rows(None, rows), targets).item()

    for t in m.params().values():
        t.requires_grad = False
    tape = nc.Tape()
    rows = ilm.ilm_step_logprobs(tape, m, src, targets)
    loss = nc.cross_entropy(tape, nc.stack_rows(tape, rows), targets)
    tape.backward(loss)
    arrays = [t.values for t in src.params.values()]
    fd = fd_scalar_grads(loss_value, arrays)
    worst = max(rel_err(t.grad, g) for t, g in zip(src.params.values(), fd))
    assert worst < 1e-4


def test_mini_lstm_beats_zero_on_held_out_ilm_ppl():
    # train on source-domain-like toy data with a strong label bias, then
    # compare substituted-decoder perplexities on held-out text
    rng = np.random.default_rng(27)
    items = []
    for u in range(24):
        n = int(rng.integers(2, 5))
        labels = [2]
        for _ in range(n - 1):
            labels.append(2 if rng.random() < 0.7 else int(rng.integers(3, 6)))
        items.append(Utterance(uid=f"u{u}", labels=tuple(labels), features=rng.standard_normal((n + 1, 3))))
    train = Corpus(items=items[:20], vocab_size=6, kind="paired")
    held = Corpus(items=items[20:], vocab_size=6, kind="paired")

    m = make_aed(seed=28, n_words=4)
    md.train_aed(m, train, TrainConfig(epochs=20, lr=3e-3, batch_size=10, seed=5))
    src, curve = ilm.train_mini_lstm(train, m, TrainConfig(epochs=8, lr=3e-3, batch_size=10, seed=6), width=8)
    ppl_mini = ilm.ilm_perplexity(held, src, m)
    ppl_zero = ilm.ilm_perplexity(held, ilm.ZeroContext(), m)
    assert ppl_mini < ppl_zero
    assert curve[-1] < curve[0]


def test_ilm_perplexity_uniform_model_is_vocab_size():
    m = make_aed(n_words=3)
    for t in m.params().values():
        t.values[...] = 0.0
    corpus = Corpus(
        items=[Utterance(uid="a", labels=(2, 3)), Utterance(uid="b", labels=(4,))],
        vocab_size=5,
        kind="text",
    )
    ppl = ilm.ilm_perplexity(corpus, ilm.ZeroContext(), m)
    assert abs(ppl - m.vocab.size) < 1e-9


def test_ilm_perplexity_matches_exp_cross_entropy():
    m = make_aed(seed=29)
    rng = np.random.default_rng(30)
    corpus = one_utt_corpus(rng, n_labels=3)
    src = ilm.ZeroContext()
    ppl = ilm.ilm_perplexity(corpus, src, m)
    targets = list(corpus.items[0].labels) + [m.vocab.eos]
    rows = ilm.ilm_step_logprobs(None, m, src, targets)
    loss = nc.cross_entropy(None, nc.stack_rows(None, rows), targets)
    assert abs(ppl - math.exp(loss.item())) < 1e-9


def test_ilm_perplexity_empty_corpus_rejected():
    with pytest.raises(InputError):
        ilm.ilm_perplexity(Corpus(items=[], vocab_size=5, kind="text"), ilm.ZeroContext(), make_aed())


def test_estimator_roundtrip_and_model_hash_guard(tmp_path):
    m = make_aed(seed=31)
    rng = np.random.default_rng(32)
    corpus = toy_paired_corpus(rng, 3)
    for method in ("zero", "avg-context", "avg-encoder", "utt-encoder"):
        src = ilm.build_estimator(method, m, corpus)
        path = tmp_path / f"{method}.est"
        ilm.save_estimator(path, src, m)
        loaded = ilm.load_estimator(path, m)
        assert loaded.method == method
        if isinstance(src, ilm.FixedContext):
            assert np.array_equal(loaded.c_hat, src.c_hat)

    mini = ilm.build_estimator("mini-lstm", m, corpus, TrainConfig(epochs=1, lr=1e-3, batch_size=2, seed=0))
    path = tmp_path / "mini.est"
    ilm.save_estimator(path, mini, m)
    loaded = ilm.load_estimator(path, m)
    for k in mini.params:
        assert np.array_equal(loaded.params[k].values, mini.params[k].values)

    other = make_aed(seed=99)
    with pytest.raises(ArtifactMismatch):
        ilm.load_estimator(path, other)


def test_subset_sampling_is_seeded_and_sized():
    corpus = toy_paired_corpus(np.random.default_rng(33), 10)
    a = ilm.subset_for_mini_training(corpus, 0.3, seed=1)
    b = ilm.subset_for_mini_training(corpus, 0.3, seed=1)
    c = ilm.subset_for_mini_training(corpus, 0.3, seed=2)
    assert [u.uid for u in a] == [u.uid for u in b]
    assert len(a) == 3
    assert [u.uid for u in a] != [u.uid for u in c] or len(c) == 3
