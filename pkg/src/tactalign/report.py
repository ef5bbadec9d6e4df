"""Text summaries and static plots from training metric logs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

NON_METRIC = ("epoch", "split")


class EmptyLogError(ValueError):
    pass


def find_runs(run_dir: str | Path) -> list[Path]:
    """Directories under ``run_dir`` (inclusive) that hold a ``metrics.jsonl``."""
    run_dir = Path(run_dir)
    return sorted(p.parent for p in run_dir.rglob("metrics.jsonl"))


def load_metrics(run: Path) -> list[dict]:
    rows = []
    with (run / "metrics.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def run_label(run: Path, root: Path) -> str:
    cfg_path = run / "train_config.json"
    name = str(run.relative_to(root)) if run != root else run.name
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        return f"{name} (gamma={cfg.get('gamma')})"
    return name


def _series(rows, split, key):
    pts = [(r["epoch"], r[key]) for r in rows if r["split"] == split and r.get(key) is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def metric_keys(rows: list[dict]) -> list[str]:
    keys: dict[str, None] = {}
    for r in rows:
        for k in r:
            if k not in NON_METRIC:
                keys.setdefault(k, None)
    return list(keys)


def summarize(rows: list[dict]) -> str:
    """One line per metric key with the final value for every split."""
    splits = list(dict.fromkeys(r["split"] for r in rows))
    last = {s: [r for r in rows if r["split"] == s][-1] for s in splits}
    width = max(len(k) for k in metric_keys(rows))
    lines = [f"{'metric':<{width}}  " + "  ".join(f"{s:>12}" for s in splits)]
    for key in metric_keys(rows):
        cells = []
        for s in splits:
            v = last[s].get(key)
            cells.append(f"{v:>12.4f}" if isinstance(v, (int, float)) else f"{str(v):>12}")
        lines.append(f"{key:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)


def _plot_run(rows, run: Path, out: Path) -> list[Path]:
    files = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for split in dict.fromkeys(r["split"] for r in rows):
        for key, style in (("loss_total", "-"), ("loss_tv", ":"), ("loss_tl", "--")):
            x, y = _series(rows, split, key)
            if x:
                ax.plot(x, y, style, marker="o" if len(x) == 1 else None, label=f"{split} {key}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    files.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for split in dict.fromkeys(r["split"] for r in rows):
        x, y = _series(rows, split, "retrieval_top1")
        if x:
            ax.plot(x, y, marker="o" if len(x) == 1 else None, label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel("tactile->text top-1")
    ax.set_ylim(0, 1.05)
    ax.legend()
    path = out / "accuracy.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    files.append(path)
    return files


def _plot_overlay(runs: dict[str, list[dict]], out: Path) -> Path:
    fig, (ax_loss, ax_gap) = plt.subplots(1, 2, figsize=(11, 4))
    for label, rows in runs.items():
        xt, yt = _series(rows, "train", "loss_total")
        xv, yv = _series(rows, "val", "loss_total")
        line = ax_loss.plot(xt, yt, label=f"{label} train")[0]
        if xv:
            ax_loss.plot(xv, yv, "--", color=line.get_color(), label=f"{label} val")
            train_at = dict(zip(xt, yt))
            gx = [e for e in xv if e in train_at]
            gy = [v - train_at[e] for e, v in zip(xv, yv) if e in train_at]
            ax_gap.plot(gx, gy, color=line.get_color(), marker="o" if len(gx) == 1 else None, label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("total loss")
    ax_loss.legend(fontsize=7)
    ax_gap.set_xlabel("epoch")
    ax_gap.set_ylabel("val - train loss")
    ax_gap.legend(fontsize=7)
    path = out / "gamma_overlay.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Write ``summary.txt`` and plots for every run found under ``run_dir``.

    Several runs additionally get one overlay figure comparing their loss
    curves and generalization gaps.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    runs = find_runs(run_dir)
    if not runs:
        raise EmptyLogError(f"no metrics.jsonl under {run_dir}")
    sections, plots, loaded = [], [], {}
    for run in runs:
        rows = load_metrics(run)
        if not rows:
            raise EmptyLogError(f"{run / 'metrics.jsonl'} is empty")
        label = run_label(run, run_dir)
        loaded[label] = rows
        sections.append(f"== {label}\n{summarize(rows)}")
        target = out if len(runs) == 1 else out / run.relative_to(run_dir)
        target.mkdir(parents=True, exist_ok=True)
        plots.extend(_plot_run(rows, run, target))
    overlay = _plot_overlay(loaded, out) if len(runs) > 1 else None
    if overlay:
        plots.append(overlay)
    summary = "\n\n".join(sections) + "\n"
    summary_path = out / "summary.txt"
    summary_path.write_text(summary, encoding="utf-8")
    return {"summary": summary_path, "plots": plots, "overlay": overlay, "runs": [str(r) for r in runs]}
