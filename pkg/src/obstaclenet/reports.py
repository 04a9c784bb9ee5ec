"""CSV writers for training reports, field dumps and result tables."""
from __future__ import annotations

import csv
import json
import os

import numpy as np

REPORT_COLUMNS = ("iteration", "loss1", "loss2", "loss3", "total", "l1_error", "lr")


def _open(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w", newline="")


def write_report_csv(report, path, benchmark=None):
    """One row per iteration. ``benchmark`` (a LossBreakdown) adds constant
    reference columns ``bench_loss1..3``."""
    cols = list(REPORT_COLUMNS)
    if benchmark is not None:
        cols += ["bench_loss1", "bench_loss2", "bench_loss3"]
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(report.iterations):
            row = [i, *(repr(float(v)) for v in report.losses[i]),
                   repr(float(report.l1_error[i])), repr(float(report.lr[i]))]
            if benchmark is not None:
                row += [repr(float(benchmark.loss1)), repr(float(benchmark.loss2)),
                        repr(float(benchmark.loss3))]
            w.writerow(row)


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0].keys() if rows else REPORT_COLUMNS)}


def write_field_csv(points, values, path, extra=None):
    """Long-format field dump: one row per point with coordinate columns
    ``x`` (and ``y``) followed by ``value`` and any ``extra`` columns."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    names = ["x", "y", "z"][: points.shape[1]]
    extra = extra or {}
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(names + ["value"] + list(extra))
        cols = [np.asarray(values).reshape(-1)] + [np.asarray(v).reshape(-1) for v in extra.values()]
        for i in range(points.shape[0]):
            w.writerow([repr(float(c)) for c in points[i]] + [repr(float(c[i])) for c in cols])


def write_table(rows, columns, path):
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([row.get(c, "") if isinstance(row, dict) else row[i] for i, c in enumerate(columns)])


def write_json(obj, path):
    with _open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"{type(x).__name__} is not JSON serializable")
