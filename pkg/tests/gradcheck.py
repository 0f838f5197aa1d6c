"""Central finite-difference oracle used by the unit and acceptance suites.

The oracle only ever calls the forward path (with a fresh, tape-less
evaluation per probe), so it stays independent of the reverse-mode code it
checks.
"""

import numpy as np

from ilmlab import numcore as nc

EPS = 1e-5


def fd_scalar_grads(f, arrays, eps=EPS):
    """Central differences of scalar ``f(arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(arrays)
            flat[j] = orig - eps
            fm = f(arrays)
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    """Worst elementwise |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_op(make, rng, tol, eps=EPS):
    """Compare reverse-mode grads of one op instance against the FD oracle.

    ``make(rng)`` returns (arrays, forward) where ``forward(tape, tensors)``
    yields the op output tensor. The scalar objective is a fixed random
    projection of the output. Returns the worst relative error.
    """
    arrays, forward = make(rng)
    tensors = [nc.tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = nc.Tape()
    out = forward(tape, tensors)
    w = rng.standard_normal(out.shape) if out.shape else np.ones(())
    tape.backward(out, seed=w)

    def objective(arrs):
        ts = [nc.tensor(a, requires_grad=False) for a in arrs]
        return float(np.sum(forward(None, ts).values * w))

    fd = fd_scalar_grads(objective, [a.copy() for a in arrays], eps=eps)
    worst = 0.0
    for t, g in zip(tensors, fd):
        worst = max(worst, rel_err(t.grad, g))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:g}"
    return worst


def random_logprobs(rng, n, v):
    x = rng.standard_normal((n, v))
    return nc._log_softmax_values(x, axis=-1)


def op_suite():
    """(name, make, tol) for every differentiable op in numcore."""

    def mk_matmul22(rng):
        return [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], (
            lambda tape, ts: nc.matmul(tape, ts[0], ts[1])
        )

    def mk_matmul21(rng):
        return [rng.standard_normal((3, 4)), rng.standard_normal(4)], (
            lambda tape, ts: nc.matmul(tape, ts[0], ts[1])
        )

    def mk_matmul12(rng):
        return [rng.standard_normal(3), rng.standard_normal((3, 4))], (
            lambda tape, ts: nc.matmul(tape, ts[0], ts[1])
        )

    def mk_add(rng):
        return [rng.standard_normal(5), rng.standard_normal(5)], (
            lambda tape, ts: nc.add(tape, ts[0], ts[1])
        )

    def mk_add_scalar(rng):
        return [rng.standard_normal(5), rng.standard_normal(())], (
            lambda tape, ts: nc.add(tape, ts[0], ts[1])
        )

    def mk_sub(rng):
        return [rng.standard_normal(5), rng.standard_normal(5)], (
            lambda tape, ts: nc.sub(tape, ts[0], ts[1])
        )

    def mk_mul(rng):
        return [rng.standard_normal(5), rng.standard_normal(5)], (
            lambda tape, ts: nc.mul(tape, ts[0], ts[1])
        )

    def mk_mul_scalar(rng):
        return [rng.standard_normal(()), rng.standard_normal(6)], (
            lambda tape, ts: nc.mul(tape, ts[0], ts[1])
        )

    def mk_scale(rng):
        return [rng.standard_normal(5)], (lambda tape, ts: nc.scale(tape, ts[0], -1.7))

    def mk_tanh(rng):
        return [rng.standard_normal(6)], (lambda tape, ts: nc.tanh(tape, ts[0]))

    def mk_sigmoid(rng):
        return [rng.standard_normal(6)], (lambda tape, ts: nc.sigmoid(tape, ts[0]))

    def mk_softmax(rng):
        return [rng.standard_normal((2, 5))], (lambda tape, ts: nc.softmax(tape, ts[0]))

    def mk_log_softmax(rng):
        return [rng.standard_normal((2, 5))], (
            lambda tape, ts: nc.log_softmax(tape, ts[0])
        )

    def mk_maxout(rng):
        # keep probes away from ties so FD stays valid
        x = rng.standard_normal(8)
        while np.min(np.abs(x[0::2] - x[1::2])) < 1e-3:
            x = rng.standard_normal(8)
        return [x], (lambda tape, ts: nc.maxout(tape, ts[0]))

    def mk_concat(rng):
        return [rng.standard_normal(3), rng.standard_normal(4)], (
            lambda tape, ts: nc.concat(tape, ts)
        )

    def mk_slice(rng):
        return [rng.standard_normal(7)], (lambda tape, ts: nc.slice1d(tape, ts[0], 2, 5))

    def mk_index_row(rng):
        return [rng.standard_normal((4, 3))], (
            lambda tape, ts: nc.index_row(tape, ts[0], 2)
        )

    def mk_stack(rng):
        return [rng.standard_normal(4), rng.standard_normal(4)], (
            lambda tape, ts: nc.stack_rows(tape, ts)
        )

    def mk_add_rowvec(rng):
        return [rng.standard_normal((3, 4)), rng.standard_normal(4)], (
            lambda tape, ts: nc.add_rowvec(tape, ts[0], ts[1])
        )

    def mk_outer(rng):
        return [rng.standard_normal(3), rng.standard_normal(4)], (
            lambda tape, ts: nc.outer(tape, ts[0], ts[1])
        )

    def mk_lstm(rng):
        dh, dx = 3, 2
        arrs = [
            rng.standard_normal(dx),
            rng.standard_normal(dh),
            rng.standard_normal(dh),
            rng.standard_normal((dx + dh, 4 * dh)) * 0.5,
            rng.standard_normal(4 * dh) * 0.5,
        ]

        def fwd(tape, ts):
            h, _ = nc.lstm_cell(tape, ts[0], ts[1], ts[2], ts[3], ts[4])
            return h

        return arrs, fwd

    def mk_lstm_unroll(rng):
        # two-step unroll: checks gradients through time
        dh, dx = 2, 2
        arrs = [
            rng.standard_normal(dx),
            rng.standard_normal(dx),
            rng.standard_normal((dx + dh, 4 * dh)) * 0.5,
            rng.standard_normal(4 * dh) * 0.5,
        ]

        def fwd(tape, ts):
            h = nc.zeros(dh)
            c = nc.zeros(dh)
            h, c = nc.lstm_cell(tape, ts[0], h, c, ts[2], ts[3])
            h, c = nc.lstm_cell(tape, ts[1], h, c, ts[2], ts[3])
            return h

        return arrs, fwd

    def mk_cross_entropy(rng):
        lp = random_logprobs(rng, 3, 5)
        targets = rng.integers(0, 5, size=3).tolist()
        return [lp], (lambda tape, ts: nc.cross_entropy(tape, ts[0], targets))

    return [
        ("matmul_2d_2d", mk_matmul22, 1e-6),
        ("matmul_2d_1d", mk_matmul21, 1e-6),
        ("matmul_1d_2d", mk_matmul12, 1e-6),
        ("add", mk_add, 1e-6),
        ("add_scalar", mk_add_scalar, 1e-6),
        ("sub", mk_sub, 1e-6),
        ("mul", mk_mul, 1e-6),
        ("mul_scalar", mk_mul_scalar, 1e-6),
        ("scale", mk_scale, 1e-6),
        ("tanh", mk_tanh, 1e-6),
        ("sigmoid", mk_sigmoid, 1e-6),
        ("softmax", mk_softmax, 1e-6),
        ("log_softmax", mk_log_softmax, 1e-6),
        ("maxout", mk_maxout, 1e-6),
        ("concat", mk_concat, 1e-6),
        ("slice1d", mk_slice, 1e-6),
        ("index_row", mk_index_row, 1e-6),
        ("stack_rows", mk_stack, 1e-6),
        ("add_rowvec", mk_add_rowvec, 1e-6),
        ("outer", mk_outer, 1e-6),
        ("lstm_cell", mk_lstm, 1e-5),
        ("lstm_unroll", mk_lstm_unroll, 1e-5),
        ("cross_entropy", mk_cross_entropy, 1e-6),
    ]
