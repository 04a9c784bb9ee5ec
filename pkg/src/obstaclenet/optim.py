"""Adam, the three-plateau learning-rate schedule, training and pretraining."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import energy
from .energy import LossBreakdown, SpecError
from .nnet import Tape, autodiff as ad, evaluate, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; carries the partial report when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def lr_at(iteration, base, breakpoints=(500, 750)):
    """``base`` before the first breakpoint, halved at each breakpoint."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    halvings = sum(1 for b in breakpoints if iteration >= b)
    return base / (2 ** halvings)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kwargs):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of ``params`` in place.

    Raises TrainingError before touching anything if a gradient is not finite.
    """
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter array {i}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 5e-4
    breakpoints: tuple = (500, 750)
    n_interior: int = 1024
    n_boundary: int = 256
    seed: int = 0
    deterministic: bool = True
    fixed_batch: bool = False
    pool_size: int | None = None
    sampling: str = "uniform"
    eval_every: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.n_interior < 1:
            raise ValueError("n_interior must be >= 1")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.sampling not in energy.SAMPLING:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


@dataclass
class TrainReport:
    losses: np.ndarray  # (iterations, 4): loss1, loss2, loss3, total
    lr: np.ndarray
    l1_error: np.ndarray  # relative L1 error, NaN where not evaluated
    seed: int
    wall_clock: float = 0.0
    final_error: float | None = None
    status: str = "ok"
    checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self):
        return self.losses.shape[0]

    def breakdown(self, i):
        return LossBreakdown(*(float(v) for v in self.losses[i]))

    def trailing_mean(self, column=3, window=100):
        return float(np.mean(self.losses[-window:, column]))


class EvalGrid:
    """Fixed evaluation points with exact values, for relative L1 tracking."""

    def __init__(self, points, exact):
        self.points = points
        self.exact = np.asarray(exact, dtype=np.float64)
        self.scale = float(np.mean(np.abs(self.exact)))

    def relative_error(self, net):
        pred = evaluate(net, self.points)
        err = float(np.mean(np.abs(pred - self.exact)))
        return err / self.scale if self.scale > 0 else err


class BatchSource:
    """Produces the batch for each iteration.

    Modes: fresh uniform samples per iteration (default), one fixed batch, or
    minibatches drawn from a fixed pool of ``pool_size`` interior points.
    """

    def __init__(self, spec, config, sampler=None):
        self.spec = spec
        self.config = config
        self.sampler = sampler
        self._fixed = None
        self._pool = None
        if config.fixed_batch:
            self._fixed = energy.sample_batch(spec, config.n_interior, config.n_boundary,
                                              config.seed, None, sampler, config.sampling)
        elif config.pool_size is not None:
            self._pool = energy.sample_batch(spec, config.pool_size, 1, config.seed, None, sampler,
                                             config.sampling).interior

    def __call__(self, iteration):
        cfg = self.config
        if self._fixed is not None:
            return self._fixed
        batch = energy.sample_batch(self.spec, min(cfg.n_interior, cfg.pool_size or cfg.n_interior),
                                    cfg.n_boundary, cfg.seed, iteration, self.sampler, cfg.sampling)
        if self._pool is not None:
            rng = energy.batch_rng(cfg.seed + 7919, iteration)
            n = min(cfg.n_interior, self._pool.shape[0])
            idx = rng.choice(self._pool.shape[0], size=n, replace=False)
            batch.interior = self._pool[np.sort(idx)]
        return batch


def _threadpool_guard(deterministic):
    if not deterministic:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=1)


def train(net, spec, config, eval_grid=None, sampler=None, callback=None):
    """Minimize the penalized energy over the parameters of ``net`` in place.

    Each iteration: sample batch -> total loss -> backward -> Adam with the
    scheduled learning rate. Returns a TrainReport; on a non-finite loss the
    partial report is attached to the raised TrainingError.
    """
    config.validate()
    spec.validate()
    n = config.iterations
    losses = np.full((n, 4), np.nan)
    lrs = np.full(n, np.nan)
    l1 = np.full(n, np.nan)
    report = TrainReport(losses, lrs, l1, seed=config.seed)
    if n == 0:
        report.losses = losses[:0]
        return report

    batches = BatchSource(spec, config, sampler)
    state = AdamState.zeros_like(net.parameters())
    params = net.parameters()
    guard = _threadpool_guard(config.deterministic)
    start = time.perf_counter()
    try:
        for it in range(n):
            batch = batches(it)
            breakdown, grads = energy.loss_and_grad(net, spec, batch)
            if not np.isfinite(breakdown.total):
                report.status = f"aborted: non-finite loss at iteration {it}"
                raise TrainingError(report.status, report)
            losses[it] = breakdown.as_tuple()
            lr = lr_at(it, config.base_lr, config.breakpoints)
            lrs[it] = lr
            try:
                adam_step(params, grads, state, lr)
            except TrainingError as exc:
                report.status = f"aborted at iteration {it}: {exc}"
                raise TrainingError(report.status, report) from exc
            if eval_grid is not None and (it % config.eval_every == 0 or it == n - 1):
                l1[it] = eval_grid.relative_error(net)
            if config.checkpoint_every and config.checkpoint_path and (it + 1) % config.checkpoint_every == 0:
                save_checkpoint(net, config.checkpoint_path)
                report.checkpoint = config.checkpoint_path
            if callback is not None:
                callback(it, breakdown)
    finally:
        if guard is not None:
            guard.unregister()
        report.wall_clock = time.perf_counter() - start
    if eval_grid is not None:
        report.final_error = float(l1[-1])
    if config.checkpoint_path:
        save_checkpoint(net, config.checkpoint_path)
        report.checkpoint = config.checkpoint_path
    return report


def pretrain(net, target, config, lower, upper, sampler=None, history=None):
    """Fit ``net`` to ``target`` by mean squared error over uniform batches.

    Uses the same Adam settings and schedule as :func:`train`. The network is
    updated in place and returned; per-iteration MSE values are appended to
    ``history`` when a list is given.
    """
    config.validate()
    lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
    upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
    if lower.size != net.input_dim:
        raise SpecError("pretraining domain does not match the network input")
    state = AdamState.zeros_like(net.parameters())
    params = net.parameters()
    guard = _threadpool_guard(config.deterministic)
    try:
        for it in range(config.iterations):
            rng = energy.batch_rng(config.seed, it)
            if sampler is None:
                x = energy.sample_interior(rng, lower, upper, config.n_interior)
            else:
                x = sampler(rng, config.n_interior)
            y = np.asarray(target(x), dtype=np.float64).reshape(-1, 1)
            tape = Tape(net)
            u, _ = tape.propagate(x, with_tangents=False)
            diff = u - y
            mse = (diff * diff).mean()
            if not np.isfinite(mse.value):
                raise TrainingError(f"non-finite pretraining loss at iteration {it}")
            grads = tape.backward(mse)
            adam_step(params, grads, state, lr_at(it, config.base_lr, config.breakpoints))
            if history is not None:
                history.append(float(mse.value))
    finally:
        if guard is not None:
            guard.unregister()
    return net


def fit_mse(net, target, points):
    """Mean squared misfit of ``net`` against ``target`` at ``points``."""
    with ad.no_grad():
        pred = evaluate(net, points)
    return float(np.mean((pred - np.asarray(target(points)).reshape(-1)) ** 2))
