"""End-to-end experiment driver built on the CLI commands.

Generates a source-domain training corpus plus target-domain dev/test and
text corpora, trains the attention model and both LMs, resolves every
estimator, grid-tunes the fusion scales per method on the target dev set,
decodes the target test set, and emits the result table with figures.

All stage seeds are fixed offsets from one experiment seed, so a rerun into
a fresh directory reproduces every artifact byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import cli, fusion, kv

SMOKE_TASK = {
    "n_words": 12,
    "d_in": 8,
    "sigma": 0.45,
    "frames_min": 1,
    "frames_max": 3,
    "len_min": 4,
    "len_max": 10,
    "concentration": 0.25,
}


@dataclass
class ExperimentPlan:
    out_dir: Path
    seed: int = 0
    decoder: str = "lstm"
    methods: tuple = fusion.ALL_METHODS
    task: dict = field(default_factory=lambda: dict(SMOKE_TASK))
    n_train: int = 300
    n_dev: int = 24
    n_test: int = 40
    n_text: int = 1200
    aed_epochs: int = 24
    lm_epochs: int = 8
    drlm_epochs: int = 10
    mini_epochs: int = 12
    lr: float = 3e-3
    enc_width: int = 20
    att_dim: int = 16
    dec_width: int = 28
    context_k: int = 3
    embed_dim: int = 12
    maxout_units: int = 16
    lm_width: int = 32
    lm_embed: int = 16
    grid: str = "0:1.0:0.2"
    tune_beam: int = 4
    beam: int = 8
    max_len: int = 14
    workers: int = 1


def _run(argv: list[str]) -> None:
    rc = cli.main(argv)
    if rc != 0:
        raise RuntimeError(f"pipeline stage failed ({rc}): {' '.join(argv)}")


def run_experiment(plan: ExperimentPlan) -> list[dict]:
    """Execute every stage; returns the parsed result rows."""
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = plan.seed
    w = str(plan.workers)

    spec_path = out / "task.spec"
    kv.write_kv_file(spec_path, {"version": 1, "seed": seed, **plan.task})

    train = out / "train.corpus"
    dev = out / "dev.corpus"
    test = out / "test.corpus"
    lmtext = out / "lmtext.corpus"
    for path, kind, domain, n, offset in (
        (train, "paired", "source", plan.n_train, 1),
        (dev, "paired", "target", plan.n_dev, 2),
        (test, "paired", "target", plan.n_test, 3),
        (lmtext, "text", "target", plan.n_text, 4),
    ):
        _run([
            "gen", "--task-spec", str(spec_path), "--kind", kind, "--domain", domain,
            "--n", str(n), "--seed", str(seed + offset), "--out", str(path),
        ])

    aed = out / "aed.ckpt"
    _run([
        "train-aed", "--train", str(train), "--out", str(aed), "--seed", str(seed + 10),
        "--epochs", str(plan.aed_epochs), "--lr", str(plan.lr), "--batch-size", "10",
        "--decoder", plan.decoder, "--decoder-width", str(plan.dec_width),
        "--context-k", str(plan.context_k), "--enc-width", str(plan.enc_width),
        "--att-dim", str(plan.att_dim), "--embed-dim", str(plan.embed_dim),
        "--maxout-units", str(plan.maxout_units),
    ])

    lm = out / "lm.ckpt"
    _run([
        "train-lm", "--train", str(lmtext), "--out", str(lm), "--seed", str(seed + 12),
        "--role", "external", "--width", str(plan.lm_width), "--embed-dim", str(plan.lm_embed),
        "--epochs", str(plan.lm_epochs), "--lr", str(plan.lr), "--batch-size", "20",
    ])

    drlm = out / "drlm.ckpt"
    if fusion.METHOD_DR in plan.methods:
        _run([
            "train-lm", "--train", str(train), "--out", str(drlm), "--seed", str(seed + 14),
            "--role", "decoder-like", "--aed", str(aed),
            "--epochs", str(plan.drlm_epochs), "--lr", str(plan.lr), "--batch-size", "10",
        ])

    estimators = {}
    for method in plan.methods:
        if method not in fusion.ESTIMATION_METHODS:
            continue
        est = out / f"est-{method}.ckpt"
        estimators[method] = est
        argv = [
            "estimate", "--method", method, "--aed", str(aed), "--out", str(est),
            "--seed", str(seed + 16),
        ]
        if method in ("avg-context", "avg-encoder", "mini-lstm"):
            argv += ["--corpus", str(train)]
        if method == "mini-lstm":
            argv += ["--epochs", str(plan.mini_epochs), "--lr", str(plan.lr), "--batch-size", "10"]
        _run(argv)

    for method in plan.methods:
        tune_dir = out / f"tune-{method}"
        argv = [
            "tune", "--method", method, "--aed", str(aed), "--dev", str(dev),
            "--beam", str(plan.tune_beam), "--max-len", str(plan.max_len),
            "--grid-l1", plan.grid, "--grid-l2", plan.grid,
            "--workers", w, "--out", str(tune_dir),
        ]
        if method != fusion.METHOD_NONE:
            argv += ["--lm", str(lm)]
        if method == fusion.METHOD_DR:
            argv += ["--dr-lm", str(drlm)]
        elif method in fusion.ESTIMATION_METHODS:
            argv += ["--estimator", str(estimators[method])]
        _run(argv)

        scales = kv.read_kv_file(tune_dir / "scales.kv")
        argv = [
            "decode", "--method", method, "--aed", str(aed), "--corpus", str(test),
            "--lambda1", scales["lambda1"], "--lambda2", scales["lambda2"],
            "--beam", str(plan.beam), "--max-len", str(plan.max_len),
            "--workers", w, "--out", str(out / f"nbest-{method}.tsv"),
        ]
        if method != fusion.METHOD_NONE:
            argv += ["--lm", str(lm)]
        if method == fusion.METHOD_DR:
            argv += ["--dr-lm", str(drlm)]
        elif method in fusion.ESTIMATION_METHODS:
            argv += ["--estimator", str(estimators[method])]
        _run(argv)

    _run([
        "eval", "--run-dir", str(out), "--refs", str(test),
        "--aed", str(aed), "--dev", str(dev), "--out", str(out),
    ])
    return read_results(out / "results.kv")


def read_results(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        pairs = dict(p.split("=", 1) for p in line.split("\t"))
        rows.append(
            {
                "method": pairs["method"],
                "lambda1": float(pairs["lambda1"]),
                "lambda2": float(pairs["lambda2"]),
                "wer": float(pairs["wer"]),
                "ilm_ppl": None if pairs["ilm_ppl"] == "NA" else float(pairs["ilm_ppl"]),
            }
        )
    return rows
