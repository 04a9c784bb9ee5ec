"""Finite-difference reference solvers for the discrete obstacle problem.

Both solvers impose Dirichlet data strongly at boundary nodes and keep the
iterate feasible (``u >= b``) by projection.

``solve_psor_1d``
    Projected SOR for ``-u'' = a`` (p = 2) on a uniform 1-D grid.
``solve_pgd``
    Projected gradient descent on the discrete p-energy
    ``sum_T |T| |grad v - psi|^p / p - sum_i w_i a_i v_i``
    with P1 elements (1-D segments, or two triangles per square cell in 2-D).
    Steps use a Barzilai-Borwein trial length with Armijo backtracking, so
    every accepted step decreases the energy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    """The reference solver diverged or failed to converge."""


@dataclass
class FdGrid:
    """Uniform node set on a box with nodal obstacle, source and boundary data.

    ``shape`` is the number of nodes per axis; arrays are indexed ``[i]`` in
    1-D and ``[i, j]`` (x index first) in 2-D.
    """

    axes: list
    obstacle: np.ndarray
    source: np.ndarray
    boundary: np.ndarray
    solution: np.ndarray | None = None

    @property
    def dim(self):
        return len(self.axes)

    @property
    def spacing(self):
        return [float(a[1] - a[0]) for a in self.axes]

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    def points(self):
        """Node coordinates as an ``(n_nodes, dim)`` array (C order)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.dim):
            index = [slice(None)] * self.dim
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = -1
            mask[tuple(index)] = True
        return mask


def _two_sided(field, pts, delta, lower, upper):
    """Average of ``field`` sampled just left and right of each node along
    every axis. Equals the point value where ``field`` is continuous and the
    mean of one-sided limits across a jump."""
    total = np.zeros(pts.shape[0])
    count = 0
    for axis in range(pts.shape[1]):
        for sign in (-1.0, 1.0):
            q = pts.copy()
            q[:, axis] += sign * delta
            total += field(np.clip(q, lower, upper))
            count += 1
    return total / count


def make_grid(spec, cells):
    """Sample a ProblemSpec on a uniform grid with ``cells`` cells per axis."""
    cells = [cells] * spec.dim if np.isscalar(cells) else list(cells)
    axes = [np.linspace(lo, hi, n + 1) for lo, hi, n in zip(spec.lower, spec.upper, cells)]
    grid = FdGrid(axes, None, None, None)
    pts = grid.points()
    shape = grid.shape
    h = min(grid.spacing)
    grid.obstacle = np.asarray(spec.obstacle(pts), dtype=np.float64).reshape(shape)
    grid.source = _two_sided(spec.source, pts, 1e-7 * h, spec.lower, spec.upper).reshape(shape)
    bmask = grid.boundary_mask()
    hvals = np.zeros(shape)
    hvals[bmask] = np.asarray(spec.boundary(pts[bmask.reshape(-1)]), dtype=np.float64)
    grid.boundary = hvals
    return grid


@numba.njit(cache=True)
def _psor_sweeps(u, b, rhs, omega, tol, max_sweeps):
    n = u.size
    for sweep in range(max_sweeps):
        change = 0.0
        for i in range(1, n - 1):
            gs = 0.5 * (u[i - 1] + u[i + 1] + rhs[i])
            new = (1.0 - omega) * u[i] + omega * gs
            if new < b[i]:
                new = b[i]
            d = abs(new - u[i])
            if d > change:
                change = d
            u[i] = new
        if change < tol:
            return sweep + 1, change
        if not np.isfinite(change):
            return -1, change
    return max_sweeps, change


def solve_psor_1d(grid, omega=None, tol=1e-10, max_sweeps=100_000):
    """Projected SOR for ``-u'' = a, u >= b`` with ``u = h`` at both ends."""
    if grid.dim != 1:
        raise ValueError("solve_psor_1d needs a 1-D grid")
    n = grid.shape[0] - 1
    hx = grid.spacing[0]
    if omega is None:
        omega = 2.0 / (1.0 + np.sin(np.pi / n))
    if not 1.0 < omega < 2.0:
        raise ValueError("omega must lie in (1, 2)")
    u = np.maximum(grid.obstacle, 0.0).astype(np.float64)
    u[0], u[-1] = grid.boundary[0], grid.boundary[-1]
    u[1:-1] = np.maximum(u[1:-1], grid.obstacle[1:-1])
    rhs = hx * hx * grid.source
    sweeps, change = _psor_sweeps(u, grid.obstacle.astype(np.float64), rhs, float(omega),
                                  float(tol), int(max_sweeps))
    if sweeps < 0 or not np.all(np.isfinite(u)):
        raise OracleError("PSOR diverged")
    if sweeps >= max_sweeps:
        raise OracleError(f"PSOR did not converge in {max_sweeps} sweeps (last update {change:.3e})")
    log.debug("PSOR converged in %d sweeps", sweeps)
    grid.solution = u
    return u


# -- discrete p-energy ---------------------------------------------------------

class _Energy:
    """Discrete P1 p-energy, its gradient, and the lumped nodal weights."""

    def __init__(self, grid, p, drift=None):
        self.grid = grid
        self.p = float(p)
        self.h = grid.spacing
        if grid.dim == 1:
            self.weights = np.full(grid.shape, self.h[0])
            self.weights[[0, -1]] *= 0.5
            if drift is not None:
                mid = 0.5 * (grid.axes[0][1:] + grid.axes[0][:-1])
                self.psi = [np.asarray(drift(mid[:, None]), dtype=np.float64).reshape(-1)]
            else:
                self.psi = None
        else:
            hx, hy = self.h
            wx = np.full(grid.shape[0], hx)
            wx[[0, -1]] *= 0.5
            wy = np.full(grid.shape[1], hy)
            wy[[0, -1]] *= 0.5
            self.weights = np.outer(wx, wy)
            self.psi = None
            if drift is not None:
                x, y = grid.axes
                # centroids of lower-left and upper-right triangles
                lx = x[:-1, None] + hx / 3.0
                ly = y[None, :-1] + hy / 3.0
                ux = x[:-1, None] + 2.0 * hx / 3.0
                uy = y[None, :-1] + 2.0 * hy / 3.0
                shp = (grid.shape[0] - 1, grid.shape[1] - 1)
                lo = np.stack(np.broadcast_arrays(lx, ly), axis=-1).reshape(-1, 2)
                up = np.stack(np.broadcast_arrays(ux, uy), axis=-1).reshape(-1, 2)
                self.psi = [np.asarray(drift(lo)).reshape(*shp, 2), np.asarray(drift(up)).reshape(*shp, 2)]
        self.load = self.weights * grid.source

    def _flux(self, gx, gy=None):
        if gy is None:
            mag = np.abs(gx)
            k = mag ** (self.p - 2.0) if self.p != 2 else 1.0
            return k * gx, mag ** self.p / self.p
        sq = gx * gx + gy * gy
        k = sq ** (0.5 * self.p - 1.0) if self.p != 2 else 1.0
        return (k * gx, k * gy), sq ** (0.5 * self.p) / self.p

    def value_and_grad(self, v):
        if self.grid.dim == 1:
            h = self.h[0]
            g = np.diff(v) / h
            if self.psi is not None:
                g = g - self.psi[0]
            flux, dens = self._flux(g)
            energy = h * dens.sum() - np.dot(self.load, v)
            grad = np.zeros_like(v)
            grad[1:] += flux
            grad[:-1] -= flux
            return energy, grad - self.load
        hx, hy = self.h
        area = 0.5 * hx * hy
        v00, v10, v01, v11 = v[:-1, :-1], v[1:, :-1], v[:-1, 1:], v[1:, 1:]
        # lower-left triangle (v00, v10, v01)
        gx1, gy1 = (v10 - v00) / hx, (v01 - v00) / hy
        # upper-right triangle (v11, v01, v10)
        gx2, gy2 = (v11 - v01) / hx, (v11 - v10) / hy
        if self.psi is not None:
            gx1, gy1 = gx1 - self.psi[0][..., 0], gy1 - self.psi[0][..., 1]
            gx2, gy2 = gx2 - self.psi[1][..., 0], gy2 - self.psi[1][..., 1]
        (fx1, fy1), d1 = self._flux(gx1, gy1)
        (fx2, fy2), d2 = self._flux(gx2, gy2)
        energy = area * (d1.sum() + d2.sum()) - np.sum(self.load * v)
        grad = np.zeros_like(v)
        c1x, c1y = area * fx1 / hx, area * fy1 / hy
        c2x, c2y = area * fx2 / hx, area * fy2 / hy
        grad[1:, :-1] += c1x
        grad[:-1, :-1] -= c1x + c1y
        grad[:-1, 1:] += c1y
        grad[1:, 1:] += c2x + c2y
        grad[:-1, 1:] -= c2x
        grad[1:, :-1] -= c2y
        return energy, grad - self.load


def vi_residual(grid, energy, v):
    """Max-norm of ``v - max(b, v - grad E(v) / w)`` over free nodes."""
    _, g = energy.value_and_grad(v)
    free = ~grid.boundary_mask()
    step = v - g / energy.weights
    r = v - np.maximum(grid.obstacle, step)
    return float(np.max(np.abs(r[free])))


def solve_pgd(grid, spec, tol=1e-8, max_iter=200_000, initial=None, history=None):
    """Projected gradient descent on the discrete p-energy (any p >= 2).

    Converged when the projected-gradient residual (see :func:`vi_residual`)
    falls below ``tol``. Accepted steps never increase the energy. When
    ``history`` is a list, the energy after each accepted step is appended.
    """
    p = spec.p
    if not p >= 2:
        raise ValueError(f"p must be >= 2, got {p}")
    energy = _Energy(grid, p, spec.drift)
    free = ~grid.boundary_mask()
    w = energy.weights
    b = grid.obstacle

    def project(v):
        v = np.where(free, np.maximum(v, b), grid.boundary)
        return v

    v = project(np.maximum(b, 0.0) if initial is None else np.asarray(initial, dtype=np.float64))
    e, g = energy.value_and_grad(v)
    g = np.where(free, g / w, 0.0)
    step = 1.0 / max(1.0, float(np.max(np.abs(g))))
    for it in range(max_iter):
        res = float(np.max(np.abs((v - np.maximum(b, v - g))[free])))
        if res < tol:
            grid.solution = v
            log.debug("PGD converged in %d iterations", it)
            return v
        t = step
        for _ in range(60):
            trial = project(v - t * g)
            et, gt = energy.value_and_grad(trial)
            d = trial - v
            if et <= e + 1e-4 * np.sum(w * g * d) or abs(et - e) <= 1e-15 * max(1.0, abs(e)):
                break
            t *= 0.5
        else:
            raise OracleError(f"line search failed at iteration {it}")
        if not np.isfinite(et):
            raise OracleError("projected gradient diverged")
        gt = np.where(free, gt / w, 0.0)
        s = trial - v
        y = gt - g
        sy = float(np.sum(w * s * y))
        step = float(np.sum(w * s * s)) / sy if sy > 0 else 2.0 * t
        v, e, g = trial, et, gt
        if history is not None:
            history.append(e)
    raise OracleError(f"projected gradient did not converge in {max_iter} iterations")


def complementarity_1d(grid, u):
    """Nodewise ``(u - b) * (-u'' - a)`` on interior nodes."""
    h = grid.spacing[0]
    lap = (-u[:-2] + 2 * u[1:-1] - u[2:]) / (h * h)
    return (u[1:-1] - grid.obstacle[1:-1]) * (lap - grid.source[1:-1])
