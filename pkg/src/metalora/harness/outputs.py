"""CSV, JSON and plot emission for ablation sweeps."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..serialization import write_json
from .experiments import METHODS, AblationRow

CSV_HEADER = ["sweep_axis", "sweep_value", "method", "trial", "retrain_loss", "test_loss", "seed", "converged"]
AXIS_LABELS = {"d": "dimension d", "N": "retraining samples N", "N'": "fine-tuning samples N'", "T": "tasks T"}
_AXIS_FILE = {"d": "d", "N": "N", "N'": "Nprime", "T": "T", "none": "none"}


def csv_text(rows: Iterable[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.sweep_axis, r.sweep_value, r.method, r.trial, repr(float(r.retrain_loss)),
                         repr(float(r.test_loss)), r.seed, "true" if r.converged else "false"])
    return buf.getvalue()


def write_csv(rows: Iterable[AblationRow], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(csv_text(rows))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [AblationRow(r["sweep_axis"], int(r["sweep_value"]), r["method"], int(r["trial"]),
                            float(r["retrain_loss"]), float(r["test_loss"]), r["seed"], r["converged"] == "true")
                for r in reader]


def summarize(rows: Iterable[AblationRow]) -> dict:
    """``{method: {value: (q25, median, q75, count)}}`` over finite test losses."""
    out = {m: {} for m in METHODS}
    grouped = {}
    for r in rows:
        grouped.setdefault((r.method, r.sweep_value), []).append(r.test_loss)
    for (method, value), losses in sorted(grouped.items()):
        arr = np.asarray([x for x in losses if np.isfinite(x)])
        if arr.size:
            q25, med, q75 = np.percentile(arr, [25, 50, 75])
            out[method][value] = (float(q25), float(med), float(q75), int(arr.size))
    return out


def plot_sweep(rows: list, axis: str, path, fmt: str = "svg") -> Path:
    """Median test loss with an interquartile band per method, log-scale y."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stats = summarize(rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for method, style in zip(METHODS, ("o-", "s--")):
        series = stats.get(method, {})
        if not series:
            continue
        xs = sorted(series)
        lo, med, hi = (np.array([series[x][i] for x in xs]) for i in range(3))
        ax.plot(xs, med, style, label=method.replace("_", "+"))
        ax.fill_between(xs, lo, hi, alpha=0.25)
    ax.set_yscale("log")
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("test loss (median, IQR band)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def emit_outputs(rows, report: Optional[dict], out_dir, formats=("csv", "json", "plot")) -> list:
    """Write results under ``out_dir``.

    ``rows`` is a list of rows (one sweep) or a dict ``{axis: rows}``; each
    sweep gets ``ablation_<axis>.csv`` and ``ablation_<axis>.svg``. The
    report (any JSON-able dict) goes to ``report.json``.
    """
    out_dir = Path(out_dir)
    formats = set(formats)
    unknown = formats - {"csv", "json", "plot"}
    if unknown:
        raise ValueError(f"unknown output formats {sorted(unknown)}")
    if isinstance(rows, dict):
        groups = rows
    else:
        axes = {r.sweep_axis for r in rows}
        groups = {axes.pop() if len(axes) == 1 else "none": rows}
    written = []
    for axis, group in groups.items():
        stem = f"ablation_{_AXIS_FILE.get(axis, axis)}"
        if "csv" in formats:
            written.append(write_csv(group, out_dir / f"{stem}.csv"))
        if "plot" in formats and group:
            written.append(plot_sweep(group, axis, out_dir / f"{stem}.svg"))
    if "json" in formats:
        payload = {"summary": {axis: {m: {str(v): s for v, s in per.items()} for m, per in summarize(g).items()}
                               for axis, g in groups.items()}}
        if report is not None:
            payload["report"] = report
        written.append(write_json(out_dir / "report.json", payload))
    return written
