"""Dice scoring, convergence summaries and comparison reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, UsageError


@dataclass
class DiceReport:
    per_label: dict
    mean: float
    n_volumes: int

    def to_dict(self) -> dict:
        return {"per_label": {str(k): v for k, v in self.per_label.items()}, "mean": self.mean,
                "n_volumes": self.n_volumes}


@dataclass
class ConvergenceSummary:
    peak_epoch: int
    peak_value: float
    epoch_at_85: int


def dsc(pred: np.ndarray, ref: np.ndarray, label: int) -> float:
    """Dice of one label: ``2|P & R| / (|P| + |R|)``; 1 if both empty, 0 if only one is."""
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    p = pred == label
    r = ref == label
    sp, sr = int(p.sum()), int(r.sum())
    if sp + sr == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, r).sum()) / (sp + sr)


def dice_per_label(pred: np.ndarray, ref: np.ndarray, labels: Sequence[int]) -> dict:
    return {int(lbl): dsc(pred, ref, int(lbl)) for lbl in labels}


def summarize(per_volume: Sequence[dict], foreground: Sequence[int]) -> DiceReport:
    """Average per-label scores across volumes, then over foreground labels."""
    per_label = {int(lbl): float(np.mean([v[lbl] for v in per_volume])) for lbl in foreground}
    mean = float(np.mean(list(per_label.values()))) if per_label else 0.0
    return DiceReport(per_label, mean, len(per_volume))


def evaluate(artifact, bundles, overlap: float = 0.5) -> DiceReport:
    """Sliding-window inference on each bundle and per-label DSC against its labels.

    Raises:
        DataError: a reference carries a label id the model cannot predict.
    """
    from .train import predict_bundle

    model = artifact.build_network()
    k = artifact.plan.num_classes
    fg = list(range(1, k))
    scores = []
    for b in bundles:
        if b.labels.size and int(b.labels.max()) >= k:
            raise DataError(f"reference label {int(b.labels.max())} outside the model's {k} classes")
        pred = predict_bundle(model, artifact, b, overlap)
        scores.append(dice_per_label(pred, b.labels, fg))
    return summarize(scores, fg)


def convergence(curve: Sequence[float], fraction: float = 0.85) -> ConvergenceSummary:
    """Peak epoch (earliest on ties) and first epoch reaching ``fraction`` of the peak, both 1-based."""
    if len(curve) == 0:
        raise UsageError("convergence needs a non-empty curve")
    vals = np.asarray(curve, dtype=np.float64)
    peak_idx = int(np.argmax(vals))
    peak = float(vals[peak_idx])
    threshold = fraction * peak
    at = int(np.flatnonzero(vals >= threshold)[0])
    return ConvergenceSummary(peak_idx + 1, peak, at + 1)


def gain_points(best: float, baseline_best: float) -> float:
    """Difference in absolute percentage points, rounded to two decimals."""
    return round((best - baseline_best) * 100.0, 2)


def _curve_of(record) -> list:
    if isinstance(record, Mapping):
        return list(record["mean_dsc"])
    if hasattr(record, "mean_dsc_curve"):
        return list(record.mean_dsc_curve())
    return list(record)


def comparison_rows(records: Mapping, baseline: Optional[str] = None) -> list[dict]:
    if not records:
        raise UsageError("no runs to compare")
    if baseline is not None and baseline not in records:
        raise UsageError(f"baseline run {baseline!r} not among {sorted(records)}")
    summaries = {name: convergence(_curve_of(rec)) for name, rec in records.items()}
    rows = []
    for name, s in summaries.items():
        row = {"strategy": name, "best_avg_dsc": round(s.peak_value, 4), "peak_epoch": s.peak_epoch,
               "epoch_at_85": s.epoch_at_85}
        if baseline is not None:
            row["gain_vs_scratch_pts"] = (None if name == baseline
                                          else gain_points(s.peak_value, summaries[baseline].peak_value))
        rows.append(row)
    return rows


def emit_report(records: Mapping, out_dir, baseline: Optional[str] = None) -> list[Path]:
    """Write ``comparison.csv``, ``comparison.txt`` and one ``curve_<name>.csv`` per run.

    ``records`` maps run names to a metrics record, a ``{"mean_dsc": [...]}``
    mapping, or a bare list of per-epoch mean DSC values.  Gain columns are
    produced only when ``baseline`` is given.
    """
    rows = comparison_rows(records, baseline)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["strategy", "best_avg_dsc"] + (["gain_vs_scratch_pts"] if baseline else []) + \
        ["peak_epoch", "epoch_at_85"]

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row[c]) for c in cols})
    (out / "comparison.csv").write_text(buf.getvalue())

    def fmt(c, v):
        if v is None:
            return "-"
        if c == "best_avg_dsc":
            return f"{v:.4f}"
        if c == "gain_vs_scratch_pts":
            return f"{v:+.2f}"
        return str(v)

    table = [cols] + [[fmt(c, r.get(c)) for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    text = "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table)
    (out / "comparison.txt").write_text(text + "\n")

    paths = [out / "comparison.csv", out / "comparison.txt"]
    for name, rec in records.items():
        p = out / f"curve_{name}.csv"
        lines = ["epoch,mean_dsc"] + [f"{i + 1},{v!r}" for i, v in enumerate(_curve_of(rec))]
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths
