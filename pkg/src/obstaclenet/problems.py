"""Manufactured obstacle problems with known exact solutions.

``mms1d-p2``
    On [0, 1]: the solution equals the obstacle ``10 sin(2 pi x)`` near the
    ends and sits on the plateau ``u = 10`` for 0.25 <= x <= 0.75.

``mms2d-p<k>``
    On the unit square with radial coordinate ``r = |x - (0.5, 0.5)|``.
    With ``q = p/(p-1)`` the inner profile is ``-r^q + (1-r)^q + q r``,
    shared by obstacle and solution for ``r <= 0.75``. Beyond that the
    solution continues along its tangent line (the C^1 extension)::

        u(r) = u_in(r*) + u_in'(r*) (r - r*),   u_in'(r) = q (1 - r^t - (1-r)^t)

    where ``t = 1/(p-1)``. The corners of the square sit at r = 0.707, so
    the outer branch is only reached outside the domain.

The source term ``a`` is derived so that the exact solution satisfies
``-div(|grad u|^(p-2) grad u) = a`` on every smooth piece.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .energy import ProblemSpec

log = logging.getLogger(__name__)

R_STAR = 0.75
CENTER = np.array([0.5, 0.5])
SEAMS_1D = (0.25, 0.75)
SEAM_TOL = 1e-12
_DOMAIN_TOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the domain where a formula is defined."""


@dataclass
class MmsProblem:
    spec: ProblemSpec
    exact: Callable[[np.ndarray], np.ndarray]
    exact_gradient: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    @property
    def dim(self):
        return self.spec.dim


# -- 1-D problem --------------------------------------------------------------

def _x1d(x):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if np.any(flat < -_DOMAIN_TOL) or np.any(flat > 1.0 + _DOMAIN_TOL):
        raise DomainError("1-D formulas are defined on [0, 1]")
    return flat


def obstacle_1d(x):
    xs = _x1d(x)
    out = np.where(
        xs <= 0.25, 10.0 * np.sin(2 * np.pi * xs),
        np.where(xs <= 0.75, 5.0 * np.cos(np.pi * (4 * xs - 1)) + 5.0,
                 10.0 * np.sin(2 * np.pi * (1.0 - xs))))
    return out if np.ndim(x) else float(out[0])


def exact_1d(x):
    xs = _x1d(x)
    out = np.where(
        xs <= 0.25, 10.0 * np.sin(2 * np.pi * xs),
        np.where(xs <= 0.75, 10.0, 10.0 * np.sin(2 * np.pi * (1.0 - xs))))
    return out if np.ndim(x) else float(out[0])


def exact_1d_derivative(x):
    xs = _x1d(x)
    out = np.where(
        xs <= 0.25, 20 * np.pi * np.cos(2 * np.pi * xs),
        np.where(xs <= 0.75, 0.0, -20 * np.pi * np.cos(2 * np.pi * (1.0 - xs))))
    return out if np.ndim(x) else float(out[0])


def _exact_1d_second(xs):
    return np.where(
        xs <= 0.25, -40 * np.pi ** 2 * np.sin(2 * np.pi * xs),
        np.where(xs <= 0.75, 0.0, -40 * np.pi ** 2 * np.sin(2 * np.pi * (1.0 - xs))))


def source_1d(x, p=2.0):
    """``-(|u'|^(p-2) u')'`` on the exact 1-D solution, returned with a mask of
    points that were nudged off a seam."""
    xs = _x1d(x).copy()
    flagged = np.zeros(xs.shape, dtype=bool)
    for seam in SEAMS_1D:
        hit = np.abs(xs - seam) < SEAM_TOL
        # nudge towards the plateau side
        xs[hit] = seam + (SEAM_TOL if seam < 0.5 else -SEAM_TOL) * 2
        flagged |= hit
    d1 = exact_1d_derivative(xs)
    d2 = _exact_1d_second(xs)
    if p == 2:
        return -d2, flagged
    return -(p - 1.0) * np.abs(d1) ** (p - 2.0) * d2, flagged


# -- 2-D radial family --------------------------------------------------------

def _q(p):
    return p / (p - 1.0)


def inner_profile(r, p):
    q = _q(p)
    return -r ** q + (1.0 - r) ** q + q * r


def inner_slope(r, p):
    t = 1.0 / (p - 1.0)
    return _q(p) * (1.0 - r ** t - (1.0 - r) ** t)


def inner_curvature(r, p):
    t = 1.0 / (p - 1.0)
    return -_q(p) * t * (r ** (t - 1.0) - (1.0 - r) ** (t - 1.0))


def obstacle_2d(r, p):
    r = np.asarray(r, dtype=np.float64)
    inside = r <= R_STAR
    rin = np.where(inside, r, 0.0)
    out = np.where(inside, inner_profile(rin, p), 0.0)
    return out if out.ndim else float(out)


def exact_2d(r, p):
    r = np.asarray(r, dtype=np.float64)
    inside = r <= R_STAR
    rin = np.where(inside, r, 0.0)
    outer = inner_profile(R_STAR, p) + inner_slope(R_STAR, p) * (r - R_STAR)
    out = np.where(inside, inner_profile(rin, p), outer)
    return out if out.ndim else float(out)


def exact_2d_slope(r, p):
    """Radial derivative du/dr of the exact 2-D solution."""
    r = np.asarray(r, dtype=np.float64)
    inside = r <= R_STAR
    rin = np.where(inside, r, 0.0)
    out = np.where(inside, inner_slope(rin, p), inner_slope(R_STAR, p))
    return out if out.ndim else float(out)


def radial_source(r, p, r_min=1e-9):
    """``-(1/r) d/dr (r |u'|^(p-2) u')`` on the exact radial solution.

    Points with ``r < r_min`` (the center) are evaluated at ``r_min`` and
    flagged.
    """
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    flagged = r < r_min
    r = np.where(flagged, r_min, r)
    inside = r <= R_STAR
    rin = np.where(inside, r, 0.5)
    d1 = np.where(inside, inner_slope(rin, p), inner_slope(R_STAR, p))
    d2 = np.where(inside, inner_curvature(rin, p), 0.0)
    mag = np.abs(d1) ** (p - 2.0) if p != 2 else np.ones_like(d1)
    flux = mag * d1
    dflux = (p - 1.0) * mag * d2
    return -(dflux + flux / r), flagged


def radius(x):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    return np.hypot(x[:, 0] - CENTER[0], x[:, 1] - CENTER[1])


def exact_2d_gradient(x, p):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    r = radius(x)
    slope = exact_2d_slope(r, p)
    safe = np.where(r > 0, r, 1.0)
    scale = np.where(r > 0, slope / safe, 0.0)
    return (x - CENTER) * scale[:, None]


# -- registry -------------------------------------------------------------------

def mms_source(problem, x):
    """Source term on the exact solution; returns ``(values, flagged)``."""
    x = np.asarray(x, dtype=np.float64)
    p = problem.spec.p
    if problem.dim == 1:
        values, flagged = source_1d(x, p)
    else:
        values, flagged = radial_source(radius(x), p)
    if np.any(flagged):
        log.warning("mms_source: %d point(s) on a seam were nudged", int(flagged.sum()))
    return values, flagged


def mms1d(p=2.0, alpha=4000.0, beta=4000.0):
    def source(x):
        return source_1d(x, p)[0]

    spec = ProblemSpec(
        lower=[0.0], upper=[1.0], p=p,
        obstacle=lambda x: obstacle_1d(np.asarray(x).reshape(-1)),
        source=source,
        boundary=lambda x: np.zeros(np.asarray(x).shape[0]),
        alpha=alpha, beta=beta, name=f"mms1d-p{p:g}")
    return MmsProblem(
        spec,
        exact=lambda x: exact_1d(np.asarray(x).reshape(-1)),
        exact_gradient=lambda x: exact_1d_derivative(np.asarray(x).reshape(-1))[:, None],
        name=spec.name)


def mms2d(p=3.0, alpha=100.0, beta=100.0):
    spec = ProblemSpec(
        lower=[0.0, 0.0], upper=[1.0, 1.0], p=p,
        obstacle=lambda x: obstacle_2d(radius(x), p),
        source=lambda x: radial_source(radius(x), p)[0],
        boundary=lambda x: exact_2d(radius(x), p),
        alpha=alpha, beta=beta, name=f"mms2d-p{p:g}")
    return MmsProblem(
        spec,
        exact=lambda x: exact_2d(radius(x), p),
        exact_gradient=lambda x: exact_2d_gradient(x, p),
        name=spec.name)


_NAME = re.compile(r"^mms(?P<dim>[12])d-p(?P<p>\d+(\.\d+)?)$")

# weights used in the published runs of each family
DEFAULT_WEIGHTS = {1: (4000.0, 4000.0), 2: (100.0, 100.0)}


def get_problem(name, alpha=None, beta=None):
    """Look up a manufactured problem by registry name, e.g. ``mms2d-p3``."""
    m = _NAME.match(name)
    if m is None:
        raise KeyError(f"unknown problem {name!r}; expected mms1d-p2, mms2d-p<k> or grid:<path>")
    dim, p = int(m["dim"]), float(m["p"])
    if dim == 1 and p != 2:
        log.warning("1-D manufactured problem is published for p=2 only; using p=%g", p)
    a0, b0 = DEFAULT_WEIGHTS[dim]
    alpha = a0 if alpha is None else alpha
    beta = b0 if beta is None else beta
    return mms1d(p, alpha, beta) if dim == 1 else mms2d(p, alpha, beta)


PROBLEM_NAMES = ("mms1d-p2", "mms2d-p3", "mms2d-p4")
