"""Aggregate run directories into comparison tables and SVG figures.

Output is byte-for-byte reproducible: rows are sorted, figures carry no
timestamp and use a fixed SVG id salt.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .attack import SUMMARY_COLUMNS  # noqa: E402
from .models import precision_bits, precision_rank  # noqa: E402

STYLE = {"svg.hashsalt": "bitflip-bnn", "svg.fonttype": "none", "font.size": 9}


class ReportError(ValueError):
    pass


def _rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                r["_run"] = str(p.parent)
                rows.append(r)
    return rows


def _find(run_dir: Path, name: str, skip: Path) -> list[Path]:
    return sorted(p for p in run_dir.rglob(name) if skip not in p.parents)


def comparison_table(rows: list[dict]) -> list[dict]:
    """Summary rows sorted by precision (wide to narrow), then model and mode."""
    ordered = sorted(rows, key=lambda r: (precision_rank(r["precision"]), r["model"], r["mode"], r["_run"]))
    return [{k: r[k] for k in SUMMARY_COLUMNS} for r in ordered]


def monotone_violations(table: list[dict]) -> list[str]:
    """Places where a narrower precision needed fewer flips than a wider one."""
    best = {}
    for r in table:
        if r["mode"] != "untargeted":
            continue
        key = r["precision"]
        best[key] = max(best.get(key, 0), int(r["n_flips"]))
    labels = sorted(best, key=precision_rank)
    out = []
    for a, b in zip(labels, labels[1:]):
        if best[b] < best[a]:
            out.append(f"{b} ({best[b]} flips) < {a} ({best[a]} flips)")
    return out


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "bitflip-bnn"})
    plt.close(fig)
    return path


def _bits_axis(table):
    labels = sorted({r["precision"] for r in table}, key=precision_rank)
    return labels, {l: i for i, l in enumerate(labels)}


def plot_accuracy(table, path: Path) -> Path:
    labels, pos = _bits_axis(table)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key, marker in (("CA", "o"), ("PA", "x")):
        ax.scatter([pos[r["precision"]] for r in table], [float(r[key]) for r in table], marker=marker, label=key)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("precision")
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_flips(table, path: Path, violations: list[str]) -> Path:
    labels, pos = _bits_axis(table)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for mode, marker in (("untargeted", "o"), ("targeted", "s")):
        sel = [r for r in table if r["mode"] == mode]
        if sel:
            ax.scatter([pos[r["precision"]] for r in sel], [int(r["n_flips"]) for r in sel], marker=marker,
                       label=mode)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yscale("symlog")
    ax.set_xlabel("precision")
    ax.set_ylabel("bit-flips")
    if violations:
        ax.set_title("non-monotone: " + "; ".join(violations), fontsize=7, color="tab:red")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_growth(logs: list[Path], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for p in logs:
        series = defaultdict(list)
        for r in _rows([p]):
            series[int(r["layer_id"])].append((int(r["checkpoint"]), int(r["active_channels"])))
        for layer, pts in sorted(series.items()):
            pts.sort()
            ax.plot([a for a, _ in pts], [b for _, b in pts], marker=".", label=f"{p.parent.name} L{layer}")
    ax.set_xlabel("growth checkpoint (epoch)")
    ax.set_ylabel("active channels")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)


def plot_profile(hists: list[Path], path: Path) -> Path:
    rows = _rows(hists)
    runs = sorted({(r["_run"], r["model"], r["precision"]) for r in rows})
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    width = 0.8 / max(len(runs), 1)
    for j, (run, model, prec) in enumerate(runs):
        sel = sorted((int(r["layer"]), int(r["flips"])) for r in rows if r["_run"] == run)
        ax.bar([k + j * width for k in range(len(sel))], [f for _, f in sel], width,
               label=f"{model} ({prec})")
        ax.set_xticks(range(len(sel)), [str(l) for l, _ in sel])
    ax.set_xlabel("layer index (weighted layers)")
    ax.set_ylabel("committed flips")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)


def _markdown(table, violations) -> str:
    lines = ["| " + " | ".join(SUMMARY_COLUMNS) + " |", "|" + "---|" * len(SUMMARY_COLUMNS)]
    lines += ["| " + " | ".join(str(r[c]) for c in SUMMARY_COLUMNS) + " |" for r in table]
    if violations:
        lines += ["", "Flips are not monotone in bit width: " + "; ".join(violations) + "."]
    return "\n".join(lines) + "\n"


def build_report(run_dir, dest) -> list[Path]:
    """Write ``table.csv``, ``table.md`` and the figures into ``dest``."""
    run_dir, dest = Path(run_dir), Path(dest)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a directory")
    summaries = _find(run_dir, "summary.csv", dest)
    logs = _find(run_dir, "growth_log.csv", dest)
    hists = _find(run_dir, "histogram.csv", dest)
    if not summaries and not logs:
        raise ReportError(f"{run_dir} holds no completed runs")
    dest.mkdir(parents=True, exist_ok=True)
    outputs = []
    with plt.rc_context(STYLE):
        if summaries:
            table = comparison_table(_rows(summaries))
            violations = monotone_violations(table)
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(table)
            (dest / "table.csv").write_text(buf.getvalue())
            (dest / "table.md").write_text(_markdown(table, violations))
            outputs += [dest / "table.csv", dest / "table.md"]
            outputs.append(plot_accuracy(table, dest / "accuracy_vs_bits.svg"))
            outputs.append(plot_flips(table, dest / "flips_vs_bits.svg", violations))
        if logs:
            outputs.append(plot_growth(logs, dest / "growth_evolution.svg"))
        if hists:
            outputs.append(plot_profile(hists, dest / "flip_profile.svg"))
    return outputs


__all__ = ["build_report", "comparison_table", "monotone_violations", "precision_bits", "ReportError"]
