"""One binary, subcommand style: gen, train-aed, train-lm, estimate, tune,
decode, eval.

Every command resolves its settings from an optional flat key=value config
file plus flags (flags win), is idempotent for fixed inputs and seed, and
writes a ``<output>.manifest.json`` sidecar recording the effective
settings, a config hash, and content hashes of all inputs and outputs.
Paths inside manifests are stored relative to the manifest location so a
rerun into a fresh directory is byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import data, fusion, ilm, kv, report
from . import model as md
from .errors import ConfigError, IlmLabError, MissingArtifact
from .model import TrainConfig

# union of config keys accepted anywhere; config files are validated against it
KNOWN_KEYS = {
    "task_spec", "kind", "domain", "n", "seed", "out", "workers",
    "train", "dev", "corpus", "refs", "nbest", "run_dir",
    "aed", "lm", "dr_lm", "estimator",
    "epochs", "lr", "batch_size",
    "decoder", "decoder_width", "context_k", "enc_width", "enc_layers",
    "subsample", "att_dim", "embed_dim", "maxout_units",
    "width", "layers", "role",
    "method", "lambda1", "lambda2", "beam", "max_len",
    "grid_l1", "grid_l2",
    "subset_fraction", "step_zero_context", "mini_width",
}

PATH_KEYS = {
    "task_spec", "out", "train", "dev", "corpus", "refs", "nbest", "run_dir",
    "aed", "lm", "dr_lm", "estimator",
}


class Resolver:
    """Flag values win over config file values win over defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = {}
        if getattr(args, "config", None):
            self.config = kv.read_kv_file(args.config)
            kv.reject_unknown(self.config, KNOWN_KEYS, "config")
        self.effective: dict = {}

    def get(self, key: str, default=None, cast=str):
        value = getattr(self.args, key, None)
        if value is None:
            raw = self.config.get(key)
            if raw is not None:
                if cast is bool:
                    value = raw.strip().lower() in ("1", "true", "yes", "on")
                else:
                    value = cast(raw)
            else:
                value = default
        self.effective[key] = str(value) if isinstance(value, Path) else value
        return value

    def require(self, key: str, cast=str):
        value = self.get(key, None, cast)
        if value is None:
            raise ConfigError(f"missing required setting: {key}")
        return value


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, role: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"missing {role}: {p}")
    return p


def write_manifest(primary: Path, command: str, resolver: Resolver, inputs: dict, outputs: dict) -> Path:
    base = Path(primary).parent

    def rel(p) -> str:
        return os.path.relpath(Path(p), base)

    settings = {}
    for key, value in sorted(resolver.effective.items()):
        if key in PATH_KEYS and value is not None:
            settings[key] = rel(value)
        else:
            settings[key] = value
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":")).encode("utf-8")
    manifest = {
        "command": command,
        "settings": settings,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "inputs": {k: {"path": rel(p), "sha256": _sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"path": rel(p), "sha256": _sha256_file(p)} for k, p in sorted(outputs.items())},
    }
    path = Path(str(primary) + ".manifest.json")
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _load_aed(path) -> md.AEDModel:
    model = md.load_model(_require_file(path, "model checkpoint"))
    if not isinstance(model, md.AEDModel):
        raise ConfigError(f"{path} is not an attention model checkpoint")
    return model


def _load_lm(path, role_hint: str) -> md.LSTMLM:
    model = md.load_model(_require_file(path, role_hint))
    if not isinstance(model, md.LSTMLM):
        raise ConfigError(f"{path} is not an LM checkpoint")
    return model


def cmd_gen(r: Resolver) -> int:
    spec_path = _require_file(r.require("task_spec"), "task spec")
    spec = data.load_task_spec(spec_path)
    kind = r.get("kind", "paired")
    domain = r.get("domain", "source")
    n = r.get("n", 100, int)
    seed = r.get("seed", spec.seed, int)
    r.effective["seed"] = seed
    out = Path(r.require("out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "paired":
        corpus = data.generate_corpus(spec, n, domain, seed)
    elif kind == "text":
        corpus = data.generate_text(spec, n, domain, seed)
    else:
        raise ConfigError(f"kind must be 'paired' or 'text', got {kind!r}")
    data.save_corpus(corpus, out)
    write_manifest(out, "gen", r, {"task_spec": spec_path}, {"corpus": out})
    print(f"wrote {kind} corpus of {n} {domain}-domain utterances to {out}")
    return 0


def _train_config(r: Resolver, default_epochs: int, default_lr: float, default_batch: int, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=r.get("epochs", default_epochs, int),
        lr=r.get("lr", default_lr, float),
        batch_size=r.get("batch_size", default_batch, int),
        seed=seed + 1,  # parameter init uses the seed itself
    )


def cmd_train_aed(r: Resolver) -> int:
    train_path = _require_file(r.require("train"), "training corpus")
    corpus = data.load_corpus(train_path)
    if corpus.kind != "paired" or not corpus.items:
        raise ConfigError("train-aed needs a non-empty paired corpus")
    seed = r.get("seed", 0, int)
    config = md.AEDConfig(
        d_in=corpus.items[0].features.shape[1],
        enc_layers=r.get("enc_layers", 1, int),
        enc_width=r.get("enc_width", 24, int),
        subsample=r.get("subsample", 1, int),
        att_dim=r.get("att_dim", 24, int),
        decoder=r.get("decoder", "lstm"),
        dec_width=r.get("decoder_width", 32, int),
        context_k=r.get("context_k", 3, int),
        embed_dim=r.get("embed_dim", 16, int),
        maxout_units=r.get("maxout_units", 24, int),
    )
    model = md.AEDModel.create(config, data.Vocabulary.build(corpus.vocab_size - 2), seed=seed)
    curve = md.train_aed(model, corpus, _train_config(r, 10, 1e-3, 8, seed))
    out = Path(r.require("out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    md.save_model(out, model)
    losses = out.with_suffix(out.suffix + ".losses.tsv")
    losses.write_text("".join(f"{e}\t{v:.17g}\n" for e, v in enumerate(curve)), encoding="utf-8")
    fig = out.with_suffix(out.suffix + ".loss.png")
    report.plot_curve(curve, fig, ylabel="mean cross-entropy")
    write_manifest(out, "train-aed", r, {"train": train_path}, {"model": out, "losses": losses, "loss_fig": fig})
    print(f"trained {config.decoder} model: loss {curve[0]:.4f} -> {curve[-1]:.4f}, saved {out}")
    return 0


def cmd_train_lm(r: Resolver) -> int:
    train_path = _require_file(r.require("train"), "training text corpus")
    corpus = data.load_corpus(train_path)
    if not corpus.items:
        raise ConfigError("train-lm needs a non-empty corpus")
    role = r.get("role", "external")
    seed = r.get("seed", 0, int)
    inputs = {"train": train_path}
    if role == "decoder-like":
        aed_path = _require_file(r.require("aed"), "model checkpoint (for topology)")
        config = md.lm_config_like_decoder(_load_aed(aed_path).config)
        inputs["aed"] = aed_path
    else:
        config = md.LMConfig(
            embed_dim=r.get("embed_dim", 16, int),
            width=r.get("width", 32, int),
            layers=r.get("layers", 1, int),
            role=role,
        )
    lm = md.LSTMLM.create(config, data.Vocabulary.build(corpus.vocab_size - 2), seed=seed)
    curve = md.train_lm(lm, corpus, _train_config(r, 10, 1e-3, 8, seed))
    out = Path(r.require("out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    md.save_model(out, lm)
    losses = out.with_suffix(out.suffix + ".losses.tsv")
    losses.write_text("".join(f"{e}\t{v:.17g}\n" for e, v in enumerate(curve)), encoding="utf-8")
    fig = out.with_suffix(out.suffix + ".loss.png")
    report.plot_curve(curve, fig, ylabel="mean cross-entropy")
    write_manifest(out, "train-lm", r, inputs, {"model": out, "losses": losses, "loss_fig": fig})
    print(f"trained {role} LM: loss {curve[0]:.4f} -> {curve[-1]:.4f}, saved {out}")
    return 0


def cmd_estimate(r: Resolver) -> int:
    method = r.require("method")
    if method not in ilm.METHODS:
        raise ConfigError(f"estimate handles {ilm.METHODS}, got {method!r}")
    aed_path = _require_file(r.require("aed"), "model checkpoint")
    model = _load_aed(aed_path)
    seed = r.get("seed", 0, int)
    zero_at_step_zero = r.get("step_zero_context", "zero") == "zero"
    inputs = {"aed": aed_path}
    corpus = None
    if method in ("avg-context", "avg-encoder", "mini-lstm"):
        corpus_path = _require_file(r.require("corpus"), "statistics corpus")
        corpus = data.load_corpus(corpus_path)
        inputs["corpus"] = corpus_path
    source = ilm.build_estimator(
        method,
        model,
        corpus,
        cfg=TrainConfig(
            epochs=r.get("epochs", 5, int),
            lr=r.get("lr", 1e-3, float),
            batch_size=r.get("batch_size", 8, int),
            seed=seed,  # subset sampling; mini training derives seed + 1
        ),
        subset_fraction=r.get("subset_fraction", 0.1, float),
        zero_at_step_zero=zero_at_step_zero,
        width=r.get("mini_width", ilm.MINI_LSTM_WIDTH, int),
    )
    out = Path(r.require("out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    ilm.save_estimator(out, source, model)
    write_manifest(out, "estimate", r, inputs, {"estimator": out})
    print(f"resolved {method} estimator, saved {out}")
    return 0


def _parse_grid_axis(text: str, what: str) -> tuple[float, float, float]:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError as e:
        raise ConfigError(f"{what} must be min:max:step, got {text!r}") from e
    return lo, hi, step


def _scorers_from_paths(r: Resolver, model: md.AEDModel, config: fusion.FusionConfig, inputs: dict):
    lm = None
    source = None
    dr_lm = None
    needs_lm = config.method != fusion.METHOD_NONE
    lm_path = r.get("lm")
    if needs_lm and lm_path is None:
        raise MissingArtifact(f"method {config.method} needs an external LM checkpoint (--lm)")
    if lm_path is not None and needs_lm:
        lm = _load_lm(lm_path, "external LM checkpoint")
        inputs["lm"] = Path(lm_path)
    if config.method == fusion.METHOD_DR:
        dr_path = r.get("dr_lm")
        if dr_path is None:
            raise MissingArtifact("density ratio needs the decoder-like LM checkpoint (--dr-lm)")
        dr_lm = _load_lm(dr_path, "decoder-like LM checkpoint")
        if dr_lm.config.role != "decoder-like":
            raise ConfigError(f"{dr_path} is not a decoder-like LM (role={dr_lm.config.role})")
        inputs["dr_lm"] = Path(dr_path)
    elif config.method in fusion.ESTIMATION_METHODS:
        est_path = r.get("estimator")
        if est_path is None:
            raise MissingArtifact(f"method {config.method} needs an estimator file (--estimator)")
        source = ilm.load_estimator(_require_file(est_path, "estimator file"), model)
        inputs["estimator"] = Path(est_path)
    return fusion.scorers_for_method(model, config, lm=lm, source=source, dr_lm=dr_lm)


def cmd_tune(r: Resolver) -> int:
    method = r.require("method")
    aed_path = _require_file(r.require("aed"), "model checkpoint")
    dev_path = _require_file(r.require("dev"), "dev corpus")
    model = _load_aed(aed_path)
    dev = data.load_corpus(dev_path)
    config = fusion.FusionConfig(
        method=method,
        beam_width=r.get("beam", 8, int),
        max_output_len=r.get("max_len", 24, int),
    )
    inputs = {"aed": aed_path, "dev": dev_path}
    scorers = _scorers_from_paths(r, model, config, inputs)
    l1 = _parse_grid_axis(r.get("grid_l1", "0:0.8:0.02"), "grid_l1")
    l2 = _parse_grid_axis(r.get("grid_l2", "0:0.8:0.02"), "grid_l2")
    grid = fusion.GridSpec(
        l1_min=l1[0], l1_max=l1[1], l1_step=l1[2], l2_min=l2[0], l2_max=l2[1], l2_step=l2[2]
    )
    workers = r.get("workers", os.cpu_count() or 1, int)
    best_l1, best_l2, surface = fusion.grid_search_scales(scorers, dev, config, grid, workers=workers)
    dev_wer = min(w for _, _, w in surface)
    out_dir = Path(r.require("out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    scales = out_dir / "scales.kv"
    kv.write_kv_file(
        scales,
        {"method": method, "lambda1": f"{best_l1:.17g}", "lambda2": f"{best_l2:.17g}", "dev_wer": f"{dev_wer:.17g}"},
    )
    surface_tsv = out_dir / "surface.tsv"
    report.write_surface_tsv(surface, surface_tsv)
    surface_png = out_dir / "surface.png"
    report.plot_surface(surface, method, surface_png)
    write_manifest(
        scales, "tune", r, inputs, {"scales": scales, "surface": surface_tsv, "surface_fig": surface_png}
    )
    print(f"tuned {method}: lambda1={best_l1:g} lambda2={best_l2:g} dev WER {100*dev_wer:.2f}%")
    return 0


def cmd_decode(r: Resolver) -> int:
    method = r.get("method", fusion.METHOD_NONE)
    aed_path = _require_file(r.require("aed"), "model checkpoint")
    corpus_path = _require_file(r.require("corpus"), "corpus to decode")
    model = _load_aed(aed_path)
    corpus = data.load_corpus(corpus_path)
    config = fusion.FusionConfig(
        method=method,
        lambda1=r.get("lambda1", 0.0, float),
        lambda2=r.get("lambda2", 0.0, float),
        beam_width=r.get("beam", 8, int),
        max_output_len=r.get("max_len", 24, int),
    )
    inputs = {"aed": aed_path, "corpus": corpus_path}
    scorers = _scorers_from_paths(r, model, config, inputs)
    workers = r.get("workers", os.cpu_count() or 1, int)
    results = fusion.decode_corpus(scorers, corpus, config, workers=workers)
    out = Path(r.require("out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    fusion.write_nbest(out, results, config)
    write_manifest(out, "decode", r, inputs, {"nbest": out})
    print(f"decoded {len(corpus)} utterances with {method} (l1={config.lambda1:g}, l2={config.lambda2:g}) -> {out}")
    return 0


def _wer_from_nbest(nbest_path: Path, refs: data.Corpus) -> tuple[dict, float]:
    head, records = fusion.read_nbest(nbest_path)
    best = {}
    for rec in records:
        if rec["rank"] == 1:
            best[rec["uid"]] = rec["labels"]
    missing = [u.uid for u in refs if u.uid not in best]
    if missing:
        raise ConfigError(f"n-best file {nbest_path} lacks hypotheses for {missing[:3]}...")
    hyps = [tuple(x for x in best[u.uid] if x != data.EOS) for u in refs]
    return head, fusion.word_error_rate([u.labels for u in refs], hyps)


def cmd_eval(r: Resolver) -> int:
    refs_path = _require_file(r.require("refs"), "reference corpus")
    refs = data.load_corpus(refs_path)
    nbest = r.get("nbest")
    run_dir = r.get("run_dir")
    if (nbest is None) == (run_dir is None):
        raise ConfigError("eval needs exactly one of --nbest or --run-dir")
    inputs = {"refs": refs_path}
    rows = []
    if nbest is not None:
        head, wer = _wer_from_nbest(_require_file(nbest, "n-best file"), refs)
        inputs["nbest"] = Path(nbest)
        rows.append(
            {
                "method": head.get("method", "?"),
                "lambda1": float(head.get("lambda1", 0.0)),
                "lambda2": float(head.get("lambda2", 0.0)),
                "wer": wer,
                "ilm_ppl": None,
            }
        )
    else:
        run = Path(run_dir)
        if not run.is_dir():
            raise MissingArtifact(f"missing run directory: {run}")
        model = None
        dev = None
        if r.get("aed") is not None and r.get("dev") is not None:
            aed_path = _require_file(r.get("aed"), "model checkpoint")
            dev_path = _require_file(r.get("dev"), "dev corpus")
            model = _load_aed(aed_path)
            dev = data.load_corpus(dev_path)
            inputs["aed"] = aed_path
            inputs["dev"] = dev_path
        found = {p.name[len("nbest-") : -len(".tsv")]: p for p in sorted(run.glob("nbest-*.tsv"))}
        ordered = [m for m in fusion.ALL_METHODS if m in found]
        ordered += sorted(set(found) - set(ordered))
        if not ordered:
            raise MissingArtifact(f"no nbest-<method>.tsv files in {run}")
        for method in ordered:
            path = found[method]
            head, wer = _wer_from_nbest(path, refs)
            inputs[f"nbest_{method}"] = path
            ppl = None
            est_path = run / f"est-{method}.ckpt"
            if model is not None and dev is not None and est_path.is_file():
                source = ilm.load_estimator(est_path, model)
                ppl = ilm.ilm_perplexity(dev, source, model)
                inputs[f"estimator_{method}"] = est_path
            rows.append(
                {
                    "method": method,
                    "lambda1": float(head.get("lambda1", 0.0)),
                    "lambda2": float(head.get("lambda2", 0.0)),
                    "wer": wer,
                    "ilm_ppl": ppl,
                }
            )
    out_dir = Path(r.get("out") or run_dir or ".")
    paths = report.write_results(out_dir, rows)
    write_manifest(paths["results_kv"], "eval", r, inputs, paths)
    sys.stdout.write(report.render_results_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilmlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file; flags win")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--workers", type=int, help="parallelism cap (default: cores)")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--task-spec", dest="task_spec")
    p.add_argument("--kind", choices=("paired", "text"))
    p.add_argument("--domain", choices=data.DOMAINS)
    p.add_argument("--n", type=int)

    p = sub.add_parser("train-aed", help="train the attention model")
    common(p)
    p.add_argument("--train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--decoder", choices=("lstm", "ff"))
    p.add_argument("--decoder-width", dest="decoder_width", type=int)
    p.add_argument("--context-k", dest="context_k", type=int)
    p.add_argument("--enc-width", dest="enc_width", type=int)
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--subsample", type=int)
    p.add_argument("--att-dim", dest="att_dim", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--maxout-units", dest="maxout_units", type=int)

    p = sub.add_parser("train-lm", help="train an LSTM language model")
    common(p)
    p.add_argument("--train")
    p.add_argument("--role", choices=("external", "decoder-like"))
    p.add_argument("--aed", help="model checkpoint to copy decoder topology from")
    p.add_argument("--width", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("estimate", help="resolve a label-prior estimator")
    common(p)
    p.add_argument("--method", choices=ilm.METHODS)
    p.add_argument("--aed")
    p.add_argument("--corpus", help="training corpus for statistics / mini training")
    p.add_argument("--subset-fraction", dest="subset_fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--mini-width", dest="mini_width", type=int)
    p.add_argument(
        "--step-zero-context",
        dest="step_zero_context",
        choices=("zero", "average"),
        help="surrogate context consumed at the very first step",
    )

    p = sub.add_parser("tune", help="grid-search the fusion scales on a dev set")
    common(p)
    p.add_argument("--method", choices=fusion.ALL_METHODS)
    p.add_argument("--aed")
    p.add_argument("--dev")
    p.add_argument("--lm")
    p.add_argument("--dr-lm", dest="dr_lm")
    p.add_argument("--estimator")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--grid-l1", dest="grid_l1", help="lambda1 axis as min:max:step")
    p.add_argument("--grid-l2", dest="grid_l2", help="lambda2 axis as min:max:step")

    p = sub.add_parser("decode", help="beam-decode a corpus with fused scores")
    common(p)
    p.add_argument("--method", choices=fusion.ALL_METHODS)
    p.add_argument("--aed")
    p.add_argument("--corpus")
    p.add_argument("--lm")
    p.add_argument("--dr-lm", dest="dr_lm")
    p.add_argument("--estimator")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)

    p = sub.add_parser("eval", help="score decodes and emit the result table")
    common(p)
    p.add_argument("--refs")
    p.add_argument("--nbest", help="single n-best file to score")
    p.add_argument("--run-dir", dest="run_dir", help="directory holding nbest-<method>.tsv files")
    p.add_argument("--aed", help="with --dev: compute label-prior perplexities")
    p.add_argument("--dev")

    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train-aed": cmd_train_aed,
    "train-lm": cmd_train_lm,
    "estimate": cmd_estimate,
    "tune": cmd_tune,
    "decode": cmd_decode,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](Resolver(args))
    except IlmLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
