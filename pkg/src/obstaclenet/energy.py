"""Penalized energy loss for the obstacle problem.

For a trial function ``u`` sampled at interior points ``X`` and boundary
points ``Y``::

    loss1 = mean( |grad u(X) - psi(X)|^p / p - a(X) u(X) )
    loss2 = mean( max(b(X) - u(X), 0)^2 )
    loss3 = mean( (u(Y) - h(Y))^2 )
    total = loss1 + alpha * loss2 + beta * loss3

The domain-volume prefactor of the Monte Carlo estimate is omitted; it does
not move the minimizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nnet import Tape, autodiff as ad

Field = Callable[[np.ndarray], np.ndarray]


class SpecError(ValueError):
    """Invalid problem specification or batch for the requested loss."""


@dataclass
class ProblemSpec:
    """Obstacle problem data on an axis-aligned box.

    Field callables take an ``(n, dim)`` array of points and return ``(n,)``
    values; ``drift`` returns ``(n, dim)``. A ``None`` drift means zero.
    """

    lower: np.ndarray
    upper: np.ndarray
    p: float
    obstacle: Field
    source: Field
    boundary: Field
    drift: Field | None = None
    alpha: float = 4000.0
    beta: float = 4000.0
    name: str = ""

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise SpecError("domain bounds must be 1-D arrays of equal length")
        if np.any(self.upper <= self.lower):
            raise SpecError("degenerate domain")
        self.validate()

    @property
    def dim(self):
        return self.lower.size

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))

    def validate(self):
        if not self.p >= 2:
            raise SpecError(f"p must be >= 2, got {self.p}")
        if not self.alpha > 0:
            raise SpecError(f"alpha must be positive, got {self.alpha}")
        if not self.beta >= 0:
            raise SpecError(f"beta must be nonnegative, got {self.beta}")

    def with_weights(self, alpha=None, beta=None):
        from dataclasses import replace
        return replace(self,
                       alpha=self.alpha if alpha is None else alpha,
                       beta=self.beta if beta is None else beta)

    def drift_at(self, x):
        if self.drift is None:
            return np.zeros_like(x)
        return np.asarray(self.drift(x), dtype=np.float64).reshape(x.shape)


@dataclass
class SampleBatch:
    interior: np.ndarray  # (N, dim), strictly inside the box
    boundary: np.ndarray  # (M, dim), on the box boundary
    seed: int | None = None
    iteration: int | None = None


@dataclass
class LossBreakdown:
    loss1: float
    loss2: float
    loss3: float
    total: float

    def as_tuple(self):
        return (self.loss1, self.loss2, self.loss3, self.total)


def compose_total(loss1, loss2, loss3, alpha, beta):
    return loss1 + alpha * loss2 + beta * loss3


def batch_rng(seed, iteration=None):
    """RNG stream for one batch; distinct iterations give independent streams."""
    key = [int(seed)] if iteration is None else [int(seed), int(iteration)]
    return np.random.default_rng(np.random.SeedSequence(key))


def sample_interior(rng, lower, upper, n):
    u = rng.random((n, lower.size))
    # rng.random is in [0, 1); keep points off the lower face as well
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return lower + (upper - lower) * u


def stratified_interior(rng, lower, upper, n):
    """One uniform point per cell of a regular grid, fresh on every call.

    The grid has ``k = floor(n ** (1/dim))`` cells per axis; the remaining
    ``n - k**dim`` points are drawn uniformly. Each point is still uniformly
    distributed, but the estimate of a smooth integral has far smaller
    variance than with independent draws.
    """
    dim = lower.size
    k = int(np.floor(n ** (1.0 / dim) + 1e-9))
    axes = np.meshgrid(*[np.arange(k)] * dim, indexing="ij")
    cells = np.stack([a.reshape(-1) for a in axes], axis=1).astype(np.float64)
    u = (cells + rng.random(cells.shape)) / k
    rest = n - cells.shape[0]
    if rest:
        u = np.concatenate([u, rng.random((rest, dim))])
    u = np.clip(u, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return lower + (upper - lower) * u


def grid_interior(lower, upper, n):
    """Fixed midpoint grid with ``floor(n ** (1/dim))`` nodes per axis."""
    dim = lower.size
    k = int(np.floor(n ** (1.0 / dim) + 1e-9))
    axis = (np.arange(k) + 0.5) / k
    axes = np.meshgrid(*[axis] * dim, indexing="ij")
    u = np.stack([a.reshape(-1) for a in axes], axis=1)
    return lower + (upper - lower) * u


SAMPLING = ("uniform", "stratified", "grid")


def sample_boundary(rng, lower, upper, m):
    """Uniform by arc length over the box boundary.

    In 1-D the boundary is the two endpoints, both always returned.
    """
    if lower.size == 1:
        return np.array([[lower[0]], [upper[0]]])
    if lower.size != 2:
        raise SpecError("boundary sampling is implemented for 1-D and 2-D boxes")
    wx, wy = upper - lower
    perimeter = 2.0 * (wx + wy)
    s = rng.random(m) * perimeter
    pts = np.empty((m, 2))
    for i, t in enumerate(s):
        if t < wx:
            pts[i] = (lower[0] + t, lower[1])
        elif t < wx + wy:
            pts[i] = (upper[0], lower[1] + (t - wx))
        elif t < 2 * wx + wy:
            pts[i] = (upper[0] - (t - wx - wy), upper[1])
        else:
            pts[i] = (lower[0], upper[1] - (t - 2 * wx - wy))
    return pts


def sample_batch(spec, n_interior, n_boundary, seed, iteration=None, sampler=None,
                 sampling="uniform"):
    """Draw a SampleBatch; ``(seed, iteration)`` fully determines the points.

    ``sampling`` picks independent uniform draws, a stratified (jittered grid)
    draw, or a fixed midpoint grid. ``sampler(rng, n)`` overrides all of them,
    e.g. to restrict points to unmasked grid cells.
    """
    if n_interior < 1:
        raise SpecError("interior batch must be nonempty")
    if spec.beta > 0 and n_boundary < 1:
        raise SpecError("boundary batch must be nonempty when beta > 0")
    rng = batch_rng(seed, iteration)
    if sampler is not None:
        interior = sampler(rng, n_interior)
    elif sampling == "uniform":
        interior = sample_interior(rng, spec.lower, spec.upper, n_interior)
    elif sampling == "stratified":
        interior = stratified_interior(rng, spec.lower, spec.upper, n_interior)
    elif sampling == "grid":
        interior = grid_interior(spec.lower, spec.upper, n_interior)
    else:
        raise SpecError(f"unknown sampling mode {sampling!r}; expected one of {SAMPLING}")
    boundary = sample_boundary(rng, spec.lower, spec.upper, max(n_boundary, 1))
    return SampleBatch(interior, boundary, seed=seed, iteration=iteration)


# -- loss terms on arbitrary fields -----------------------------------------

def _column(values, n):
    return np.asarray(values, dtype=np.float64).reshape(n, 1)


def residual_term(u, du, spec, points):
    """Graph-level loss1 given ``u`` (n, 1) and a list of ``dim`` tangents."""
    n = points.shape[0]
    psi = spec.drift_at(points)
    sq = None
    for j, t in enumerate(du):
        diff = t - psi[:, j:j + 1] if spec.drift is not None else t
        sq = diff * diff if sq is None else sq + diff * diff
    energy = ad.power(sq, spec.p / 2.0) * (1.0 / spec.p)
    a = _column(spec.source(points), n)
    return (energy - u * a).mean()


def obstacle_term(u, spec, points):
    b = _column(spec.obstacle(points), points.shape[0])
    gap = ad.relu(ad.constant(b) - u)
    return (gap * gap).mean()


def boundary_term(ub, spec, points):
    h = _column(spec.boundary(points), points.shape[0])
    diff = ub - h
    return (diff * diff).mean()


def _check(spec, batch):
    spec.validate()
    if batch.interior.shape[0] < 1:
        raise SpecError("interior batch must be nonempty")
    if spec.beta > 0 and batch.boundary.shape[0] < 1:
        raise SpecError("boundary batch must be nonempty when beta > 0")


def _graph_terms(tape, spec, batch):
    u, du = tape.propagate(batch.interior)
    l1 = residual_term(u, du, spec, batch.interior)
    l2 = obstacle_term(u, spec, batch.interior)
    if batch.boundary.shape[0] > 0:
        ub, _ = tape.propagate(batch.boundary, with_tangents=False)
        l3 = boundary_term(ub, spec, batch.boundary)
    else:
        l3 = ad.constant(0.0)
    return l1, l2, l3


def _breakdown(l1, l2, l3, spec):
    l1, l2, l3 = float(l1.value), float(l2.value), float(l3.value)
    return LossBreakdown(l1, l2, l3, compose_total(l1, l2, l3, spec.alpha, spec.beta))


def residual_loss(net, spec, batch):
    _check(spec, batch)
    tape = Tape(net)
    with ad.no_grad():
        u, du = tape.propagate(batch.interior)
        return float(residual_term(u, du, spec, batch.interior).value)


def obstacle_loss(net, spec, batch):
    _check(spec, batch)
    tape = Tape(net)
    with ad.no_grad():
        u, _ = tape.propagate(batch.interior)
        return float(obstacle_term(u, spec, batch.interior).value)


def boundary_loss(net, spec, batch):
    if batch.boundary.shape[0] < 1:
        raise SpecError("boundary batch is empty")
    tape = Tape(net)
    with ad.no_grad():
        ub, _ = tape.propagate(batch.boundary, with_tangents=False)
        return float(boundary_term(ub, spec, batch.boundary).value)


def total_loss(net, spec, batch):
    _check(spec, batch)
    with ad.no_grad():
        return _breakdown(*_graph_terms(Tape(net), spec, batch), spec)


def loss_and_grad(net, spec, batch):
    """LossBreakdown and the exact parameter gradient of its total."""
    _check(spec, batch)
    tape = Tape(net)
    l1, l2, l3 = _graph_terms(tape, spec, batch)
    total = l1 + l2 * spec.alpha + l3 * spec.beta
    grads = tape.backward(total)
    return _breakdown(l1, l2, l3, spec), grads


def field_losses(spec, batch, values, gradients, boundary_values):
    """The three loss terms for a field given by arrays instead of a network.

    ``values`` and ``gradients`` are at ``batch.interior`` (shapes ``(N,)`` and
    ``(N, dim)``); ``boundary_values`` at ``batch.boundary``.
    """
    _check(spec, batch)
    n = batch.interior.shape[0]
    gradients = np.asarray(gradients, dtype=np.float64).reshape(n, spec.dim)
    with ad.no_grad():
        u = ad.constant(_column(values, n))
        du = [ad.constant(gradients[:, j:j + 1]) for j in range(spec.dim)]
        l1 = residual_term(u, du, spec, batch.interior)
        l2 = obstacle_term(u, spec, batch.interior)
        if batch.boundary.shape[0] > 0:
            ub = ad.constant(_column(boundary_values, batch.boundary.shape[0]))
            l3 = boundary_term(ub, spec, batch.boundary)
        else:
            l3 = ad.constant(0.0)
    return _breakdown(l1, l2, l3, spec)
