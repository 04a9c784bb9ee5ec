"""Error metrics and the sample-count scaling study."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ErrorReport:
    l1: float
    relative: float
    resolution: tuple
    sample_count: int | None = None


def eval_grid_points(dim, resolution=None):
    """Uniform evaluation nodes on the unit box: spacing 1e-3 in 1-D,
    256 x 256 in 2-D unless ``resolution`` says otherwise."""
    if dim == 1:
        n = 1001 if resolution is None else int(resolution)
        return np.linspace(0.0, 1.0, n)[:, None]
    n = 256 if resolution is None else int(resolution)
    axis = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _values(field_, points):
    if callable(field_):
        return np.asarray(field_(points), dtype=np.float64).reshape(-1)
    return np.asarray(field_, dtype=np.float64).reshape(-1)


def l1_error(pred, exact, points, sample_count=None):
    """Mean absolute difference over the grid and its relative variant
    (divided by the mean of ``|exact|``). Fields may be callables or arrays
    of nodal values."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("evaluation grid is empty")
    p = _values(pred, points)
    e = _values(exact, points)
    if p.shape != e.shape:
        raise ValueError(f"field sizes differ: {p.shape} vs {e.shape}")
    l1 = float(np.mean(np.abs(p - e)))
    scale = float(np.mean(np.abs(e)))
    rel = l1 / scale if scale > 0 else (0.0 if l1 == 0 else float("inf"))
    return ErrorReport(l1, rel, tuple(points.shape), sample_count)


def loglog_slope(counts, errors):
    """Least-squares slope of log(error) against log(count)."""
    x = np.log(np.asarray(counts, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


@dataclass
class ScalingResult:
    slope: float
    counts: list
    mean_errors: list
    rows: list = field(default_factory=list)  # (count, seed, relative error)
    failed: list = field(default_factory=list)

    @property
    def complete(self):
        return not self.failed


def training_runner(problem, config=None, hidden=(128,) * 5, scheme="uniform"):
    """``run(count, seed)`` for a manufactured problem.

    The count is the size of the fixed pool of interior points (a midpoint
    grid unless ``config.sampling`` says otherwise); each iteration draws
    ``min(count, config.n_interior)`` of them. Returns the final relative error.
    """
    from dataclasses import replace

    from .nnet import init
    from .optim import EvalGrid, TrainConfig, train

    base = config or TrainConfig(sampling="grid")
    pts = eval_grid_points(problem.spec.dim)
    grid = EvalGrid(pts, problem.exact(pts))
    sizes = [problem.spec.dim, *hidden, 1]

    def run(count, seed):
        cfg = replace(base, pool_size=int(count), seed=int(seed), fixed_batch=False,
                      eval_every=max(base.iterations, 1))
        net = init(seed, sizes, scheme=scheme)
        return train(net, problem.spec, cfg, grid).final_error

    return run


def scaling_study(run, sample_counts, seeds):
    """Fit the error-vs-sample-count slope on seed-averaged errors.

    ``run(count, seed)`` trains one model and returns its relative error; a
    manufactured problem may be passed instead and is wrapped by
    ``training_runner`` with default settings. Failures are recorded and
    skipped; the slope uses the remaining counts.
    """
    if not callable(run):
        run = training_runner(run)
    counts = sorted(int(c) for c in sample_counts)
    if len(counts) < 4:
        raise ValueError("need at least 4 sample counts")
    if np.log10(counts[-1] / counts[0]) < 1.5:
        raise ValueError("sample counts must span at least 1.5 decades")
    rows, failed = [], []
    for n in counts:
        for seed in seeds:
            try:
                err = float(run(n, seed))
            except Exception as exc:  # a failed cell is reported, not fatal
                log.warning("scaling run N=%d seed=%d failed: %s", n, seed, exc)
                failed.append((n, seed, str(exc)))
                continue
            rows.append((n, seed, err))
            log.info("scaling N=%d seed=%d relative error %.4e", n, seed, err)
    used, means = [], []
    for n in counts:
        errs = [e for c, _, e in rows if c == n]
        if errs:
            used.append(n)
            means.append(float(np.mean(errs)))
    slope = loglog_slope(used, means) if len(used) >= 2 else float("nan")
    return ScalingResult(slope, used, means, rows, failed)
