"""Result tables (text and delimited) and the figures rendered next to them."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_TABLE_COLUMNS = ("method", "lambda1", "lambda2", "WER[%]", "ILM PPL")


def _fmt_ppl(value) -> str:
    return "-" if value is None else f"{value:.1f}"


def render_results_table(rows: list[dict]) -> str:
    """Fixed-width table: method, tuned scales, WER percent, ILM perplexity."""
    body = [
        (
            r["method"],
            f"{r['lambda1']:.2f}",
            f"{r['lambda2']:.2f}",
            f"{100.0 * r['wer']:.2f}",
            _fmt_ppl(r.get("ilm_ppl")),
        )
        for r in rows
    ]
    widths = [max(len(col), *(len(b[i]) for b in body)) if body else len(col) for i, col in enumerate(_TABLE_COLUMNS)]
    lines = [
        "  ".join(col.ljust(widths[i]) if i == 0 else col.rjust(widths[i]) for i, col in enumerate(_TABLE_COLUMNS))
    ]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(b[i].ljust(widths[i]) if i == 0 else b[i].rjust(widths[i]) for i in range(len(b))))
    return "\n".join(lines) + "\n"


def results_kv_lines(rows: list[dict]) -> str:
    """One record per line, tab-separated key=value pairs."""
    out = []
    for r in rows:
        ppl = r.get("ilm_ppl")
        out.append(
            f"method={r['method']}\tlambda1={r['lambda1']:.17g}\tlambda2={r['lambda2']:.17g}"
            f"\twer={r['wer']:.17g}\tilm_ppl={'NA' if ppl is None else format(ppl, '.17g')}"
        )
    return "\n".join(out) + "\n"


def write_results(out_dir: str | Path, rows: list[dict]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "results.txt"
    kv = out_dir / "results.kv"
    txt.write_text(render_results_table(rows), encoding="utf-8")
    kv.write_text(results_kv_lines(rows), encoding="utf-8")
    paths = {"results_txt": txt, "results_kv": kv}
    if rows:
        paths["wer_fig"] = out_dir / "wer_by_method.png"
        plot_wer_bars(rows, paths["wer_fig"])
        if any(r.get("ilm_ppl") is not None for r in rows):
            paths["ppl_fig"] = out_dir / "ilm_ppl_by_method.png"
            plot_ppl_bars(rows, paths["ppl_fig"])
    return paths


def plot_wer_bars(rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2), constrained_layout=True)
    methods = [r["method"] for r in rows]
    wers = [100.0 * r["wer"] for r in rows]
    ax.bar(methods, wers, color="#4878a8")
    ax.set_ylabel("WER [%]")
    ax.grid(True, axis="y", alpha=0.3)
    ax.tick_params(axis="x", rotation=30)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_ppl_bars(rows: list[dict], path: str | Path) -> None:
    pairs = [(r["method"], r["ilm_ppl"]) for r in rows if r.get("ilm_ppl") is not None]
    fig, ax = plt.subplots(figsize=(6, 3.2), constrained_layout=True)
    ax.bar([p[0] for p in pairs], [p[1] for p in pairs], color="#a85948")
    ax.set_ylabel("label prior perplexity")
    ax.set_yscale("log")
    ax.grid(True, axis="y", alpha=0.3)
    ax.tick_params(axis="x", rotation=30)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_surface(surface: list[tuple[float, float, float]], method: str, path: str | Path) -> None:
    """Scale-tuning landscape: heatmap over (lambda1, lambda2), or a line
    when one axis is collapsed."""
    l1s = sorted({p[0] for p in surface})
    l2s = sorted({p[1] for p in surface})
    fig, ax = plt.subplots(figsize=(5, 4), constrained_layout=True)
    if len(l2s) == 1 or len(l1s) == 1:
        xs = l1s if len(l2s) == 1 else l2s
        ws = [100.0 * w for _, _, w in sorted(surface)]
        ax.plot(xs, ws, marker="o")
        ax.set_xlabel("lambda1" if len(l2s) == 1 else "lambda2")
        ax.set_ylabel("dev WER [%]")
        ax.grid(True, alpha=0.3)
    else:
        z = np.full((len(l2s), len(l1s)), np.nan)
        for l1, l2, w in surface:
            z[l2s.index(l2), l1s.index(l1)] = 100.0 * w
        im = ax.imshow(z, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(l1s)), [f"{v:g}" for v in l1s])
        ax.set_yticks(range(len(l2s)), [f"{v:g}" for v in l2s])
        ax.set_xlabel("lambda1 (LM)")
        ax.set_ylabel("lambda2 (prior)")
        fig.colorbar(im, ax=ax, label="dev WER [%]")
    ax.set_title(f"scale grid: {method}")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_curve(curve: list[float], path: str | Path, ylabel: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3), constrained_layout=True)
    ax.plot(range(len(curve)), curve, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_surface_tsv(surface: list[tuple[float, float, float]], path: str | Path) -> None:
    lines = ["lambda1\tlambda2\twer"]
    for l1, l2, w in surface:
        lines.append(f"{l1:.17g}\t{l2:.17g}\t{w:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
