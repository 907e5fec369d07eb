"""Registration quality metrics and batch evaluation to CSV."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import ncc_per_sample
from .volume import DisplacementField, Volume
from .warp import warp_nearest, warp_trilinear


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, DisplacementField)) else np.asarray(x)


def dice(a, b, label: int = 1) -> float:
    """Overlap 2|A n B| / (|A| + |B|) of the voxels equal to ``label``; 1.0 if both empty."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: dims mismatch {a.shape} vs {b.shape}")
    A = a == label
    B = b == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((A & B).sum()) / total


def endpoint_error(field, truth) -> float:
    """Mean Euclidean distance between two displacement fields, in voxels."""
    f, t = _arr(field).astype(np.float64), _arr(truth).astype(np.float64)
    if f.shape != t.shape:
        raise ValueError(f"endpoint_error: dims mismatch {f.shape} vs {t.shape}")
    if isinstance(field, DisplacementField) and isinstance(truth, DisplacementField) \
            and field.level != truth.level:
        raise ValueError("endpoint_error: fields live on different pyramid levels")
    return float(np.sqrt(((f - t) ** 2).sum(axis=0)).mean())


def mean_volume(volumes: Sequence) -> Volume:
    if len(volumes) == 0:
        raise ValueError("mean_volume needs at least one volume")
    arrays = [_arr(v) for v in volumes]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"mean_volume: dims mismatch {a.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for a in arrays:
        acc += a
    return Volume(acc / len(arrays))


def ncc_value(a, b) -> float:
    return float(ncc_per_sample(_arr(a), _arr(b))[0])


@dataclass
class MetricRow:
    pair_id: str
    ncc_before: float = math.nan
    ncc_after: float = math.nan
    dice_before: float = math.nan
    dice_after: float = math.nan
    epe_before: float = math.nan
    epe_after: float = math.nan
    error: str = ""


METRIC_COLUMNS = [f.name for f in fields(MetricRow)]
NUMERIC_COLUMNS = METRIC_COLUMNS[1:-1]


@dataclass
class EvalPair:
    pair_id: str
    fixed: Volume
    moving: Volume
    fixed_labels: Optional[Volume] = None
    moving_labels: Optional[Volume] = None
    truth: Optional[DisplacementField] = None


def evaluate_pairs(register: Callable[[Volume, Volume], DisplacementField],
                   pairs: Sequence[EvalPair], label: int = 1) -> list:
    """Register each pair and score it before/after; failures become error rows."""
    rows = []
    for pair in pairs:
        row = MetricRow(pair.pair_id)
        try:
            if pair.fixed.dims != pair.moving.dims:
                raise ValueError(f"fixed dims {pair.fixed.dims} != moving dims {pair.moving.dims}")
            field = register(pair.fixed, pair.moving)
            warped = warp_trilinear(pair.moving, field)
            row.ncc_before = ncc_value(pair.fixed, pair.moving)
            row.ncc_after = ncc_value(pair.fixed, warped)
            if pair.fixed_labels is not None and pair.moving_labels is not None:
                row.dice_before = dice(pair.fixed_labels, pair.moving_labels, label)
                row.dice_after = dice(pair.fixed_labels,
                                      warp_nearest(pair.moving_labels, field), label)
            if pair.truth is not None:
                row.epe_before = endpoint_error(DisplacementField.zeros(pair.truth.dims),
                                                pair.truth)
                row.epe_after = endpoint_error(field, pair.truth)
        except Exception as exc:  # a failed pair is recorded, not fatal
            row = MetricRow(pair.pair_id, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def summarize(rows: Sequence[MetricRow]) -> dict:
    """Per-column mean and sample standard deviation (ddof=1), ignoring blanks."""
    out = {}
    for col in NUMERIC_COLUMNS:
        vals = np.array([getattr(r, col) for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[col] = (math.nan, math.nan)
        else:
            out[col] = (float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
    return out


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    """Header, one row per pair, then ``#summary,mean,...`` and ``#summary,std,...``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    summary = summarize(rows)
    writer.writerow(["#summary", "stat"] + NUMERIC_COLUMNS)
    writer.writerow(["#summary", "mean"] + [_fmt(summary[c][0]) for c in NUMERIC_COLUMNS])
    writer.writerow(["#summary", "std"] + [_fmt(summary[c][1]) for c in NUMERIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str):
    """Parse :func:`metrics_csv` output back into rows and the summary dict."""
    rows, summary = [], {}
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    for rec in reader:
        if rec and rec[0] == "#summary":
            if rec[1] in ("mean", "std"):
                summary[rec[1]] = {c: (float(v) if v else math.nan)
                                   for c, v in zip(NUMERIC_COLUMNS, rec[2:])}
            continue
        vals = dict(zip(header, rec))
        rows.append(MetricRow(vals["pair_id"],
                              *[float(vals[c]) if vals[c] else math.nan for c in NUMERIC_COLUMNS],
                              error=vals.get("error", "")))
    return rows, summary
