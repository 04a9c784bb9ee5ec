"""ESRI/Arc-Info ASCII raster grids and their use as obstacle-problem data.

Grids are stored north-up: ``values[0]`` is the top row, as in the file.
Cell centers map to the computational box ``[0, ncols/L] x [0, nrows/L]``
with ``L = max(ncols, nrows)``, which keeps the raster aspect ratio, and
elevations are multiplied by ``value_scale`` (1/3000 by default) so that
network outputs are O(1).
"""
from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import energy
from .energy import ProblemSpec

log = logging.getLogger(__name__)

VALUE_SCALE = 1.0 / 3000.0

# published ranges of the 5 km Greenland rasters, in meters
PUBLISHED_RANGES = {
    "bedrock": (-963.1, 3239.0),
    "thickness": (0.0, 3366.5),
    "surface": (-0.1, 3278.3),
}

_HEADER_KEYS = {
    "ncols": "ncols", "nrows": "nrows",
    "xllcorner": "xllcorner", "yllcorner": "yllcorner",
    "xllcenter": "xllcenter", "yllcenter": "yllcenter",
    "cellsize": "cellsize", "nodata_value": "nodata",
}


class GridParseError(ValueError):
    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass
class Grid:
    ncols: int
    nrows: int
    cell_size: float
    origin: tuple  # lower-left corner (x, y) in meters
    nodata: float | None
    values: np.ndarray  # (nrows, ncols), row 0 is north
    mask: np.ndarray  # True where the cell holds NODATA

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.nrows, self.ncols):
            raise ValueError(f"values shape {self.values.shape} != ({self.nrows}, {self.ncols})")
        self.mask = np.asarray(self.mask, dtype=bool)

    def valid(self):
        return self.values[~self.mask]

    def same_georeference(self, other):
        return (self.ncols == other.ncols and self.nrows == other.nrows
                and self.cell_size == other.cell_size and tuple(self.origin) == tuple(other.origin))

    def cell_centers(self):
        """Projected coordinates ``(x[ncols], y[nrows])`` of cell centers."""
        x0, y0 = self.origin
        x = x0 + (np.arange(self.ncols) + 0.5) * self.cell_size
        y = y0 + (self.nrows - np.arange(self.nrows) - 0.5) * self.cell_size
        return x, y


def parse_grid(stream):
    """Read an ASCII grid from a text stream, a path, or a string."""
    if isinstance(stream, (str, os.PathLike)) and os.path.exists(stream):
        with open(stream) as fh:
            return parse_grid(fh)
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    header = {}
    values = []
    lineno = 0
    data_started = False
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if not data_started:
            key = tokens[0].lower()
            if key in _HEADER_KEYS:
                if len(tokens) != 2:
                    raise GridParseError(f"malformed header entry {line.strip()!r}", lineno)
                name = _HEADER_KEYS[key]
                if name in header:
                    raise GridParseError(f"duplicate header entry {tokens[0]!r}", lineno)
                try:
                    header[name] = float(tokens[1])
                except ValueError:
                    raise GridParseError(f"header value {tokens[1]!r} is not a number",
                                         lineno, len(line) - len(line.lstrip()) + len(tokens[0]) + 2)
                continue
            if tokens[0][0].isalpha() and tokens[0].lower() not in ("nan", "inf", "-inf"):
                raise GridParseError(f"unknown header entry {tokens[0]!r}", lineno, 1)
            data_started = True
        col = 0
        for tok in tokens:
            col = line.index(tok, col) + 1
            try:
                values.append(float(tok))
            except ValueError:
                raise GridParseError(f"unparseable value {tok!r}", lineno, col)
            col += len(tok) - 1

    for required in ("ncols", "nrows", "cellsize"):
        if required not in header:
            raise GridParseError(f"missing header entry {required!r}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise GridParseError("ncols and nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    cs = header["cellsize"]
    if not cs > 0:
        raise GridParseError("cellsize must be positive")
    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - 0.5 * cs
    else:
        raise GridParseError("missing header entry 'xllcorner'")
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - 0.5 * cs
    else:
        raise GridParseError("missing header entry 'yllcorner'")
    if len(values) != ncols * nrows:
        raise GridParseError(f"expected {ncols * nrows} values, found {len(values)}", lineno)
    data = np.array(values, dtype=np.float64).reshape(nrows, ncols)
    nodata = header.get("nodata")
    mask = data == nodata if nodata is not None else np.zeros(data.shape, dtype=bool)
    return Grid(ncols, nrows, cs, (x0, y0), nodata, data, mask)


def check_range(grid, kind, tol=0.05):
    """Log valid values that fall outside the published range for ``kind``;
    returns the number of such cells."""
    lo, hi = PUBLISHED_RANGES[kind]
    v = grid.valid()
    bad = int(np.sum((v < lo - tol) | (v > hi + tol)))
    if bad:
        log.warning("%s grid: %d value(s) outside published range [%g, %g]", kind, bad, lo, hi)
    return bad


def _fmt(x):
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_grid(grid, stream):
    """Write ``grid`` in ASCII grid format; values round-trip bit-exactly."""
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "w") as fh:
            return write_grid(grid, fh)
    stream.write(f"ncols {grid.ncols}\n")
    stream.write(f"nrows {grid.nrows}\n")
    stream.write(f"xllcorner {_fmt(grid.origin[0])}\n")
    stream.write(f"yllcorner {_fmt(grid.origin[1])}\n")
    stream.write(f"cellsize {_fmt(grid.cell_size)}\n")
    if grid.nodata is not None:
        stream.write(f"NODATA_value {_fmt(grid.nodata)}\n")
    for i in range(grid.nrows):
        row = []
        for j in range(grid.ncols):
            v = grid.nodata if grid.mask[i, j] else grid.values[i, j]
            row.append(repr(float(v)))
        stream.write(" ".join(row) + "\n")


def downsample(grid, factor):
    """Keep every ``factor``-th cell in each direction, starting at the
    north-west cell; georeferencing follows the kept cell centers."""
    f = int(factor)
    if f < 1:
        raise ValueError("downsample factor must be >= 1")
    if f == 1:
        return replace(grid, values=grid.values.copy(), mask=grid.mask.copy())
    vals = grid.values[::f, ::f]
    mask = grid.mask[::f, ::f]
    nrows, ncols = vals.shape
    x, y = grid.cell_centers()
    cs = grid.cell_size * f
    bottom_row = (nrows - 1) * f
    x0 = x[0] - 0.5 * cs
    y0 = y[bottom_row] - 0.5 * cs
    return Grid(ncols, nrows, cs, (x0, y0), grid.nodata, vals.copy(), mask.copy())


class NormalizedField:
    """Bilinear interpolant of a grid over the normalized computational box.

    Masked nodes are filled from the nearest valid node before interpolation,
    so masked values are never read. Outside the outermost cell centers the
    field is held constant.
    """

    def __init__(self, grid, value_scale=VALUE_SCALE, value_offset=0.0):
        self.grid = grid
        self.value_scale = float(value_scale)
        self.value_offset = float(value_offset)
        self.length = float(max(grid.ncols, grid.nrows))
        self.coord_scale = 1.0 / (self.length * grid.cell_size)
        self.h = 1.0 / self.length
        self.upper = np.array([grid.ncols / self.length, grid.nrows / self.length])
        vals = grid.values
        self.filled = int(grid.mask.sum())
        if self.filled:
            if grid.mask.all():
                raise ValueError("grid has no valid cells")
            _, (ii, jj) = ndimage.distance_transform_edt(grid.mask, return_indices=True)
            vals = vals[ii, jj]
            log.info("interpolant: %d masked node(s) filled from nearest valid cell", self.filled)
        # nodes indexed [ix, iy] with iy increasing northward
        self.nodes = self.to_unit_values(vals[::-1, :].T.copy())

    # -- affine maps ----------------------------------------------------------

    def to_unit_coords(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.asarray(self.grid.origin)) * self.coord_scale

    def from_unit_coords(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        return xi / self.coord_scale + np.asarray(self.grid.origin)

    def to_unit_values(self, v):
        return (np.asarray(v, dtype=np.float64) - self.value_offset) * self.value_scale

    def from_unit_values(self, u):
        return np.asarray(u, dtype=np.float64) / self.value_scale + self.value_offset

    def node_coords(self):
        """Unit-box coordinates of the cell centers, ``(ncols*nrows, 2)`` in
        file order (north row first)."""
        x, y = self.grid.cell_centers()
        gx, gy = np.meshgrid(x, y)
        return self.to_unit_coords(np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1))

    # -- interpolation ----------------------------------------------------------

    def _locate(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        nx, ny = self.nodes.shape
        s = pts / self.h - 0.5
        out = []
        for axis, n in ((0, nx), (1, ny)):
            t = np.clip(s[:, axis], 0.0, n - 1)
            i = np.minimum(np.floor(t).astype(int), max(n - 2, 0))
            frac = t - i
            inside = (s[:, axis] >= 0.0) & (s[:, axis] <= n - 1)
            out.append((i, frac, inside, n))
        return out

    def __call__(self, pts):
        (i, fx, _, nx), (j, fy, _, ny) = self._locate(pts)
        z = self.nodes
        i1 = np.minimum(i + 1, nx - 1)
        j1 = np.minimum(j + 1, ny - 1)
        return ((1 - fx) * (1 - fy) * z[i, j] + fx * (1 - fy) * z[i1, j]
                + (1 - fx) * fy * z[i, j1] + fx * fy * z[i1, j1])

    def gradient(self, pts):
        """Analytic gradient of the bilinear interpolant (zero in the
        constant border)."""
        (i, fx, inx, nx), (j, fy, iny, ny) = self._locate(pts)
        z = self.nodes
        i1 = np.minimum(i + 1, nx - 1)
        j1 = np.minimum(j + 1, ny - 1)
        gx = ((1 - fy) * (z[i1, j] - z[i, j]) + fy * (z[i1, j1] - z[i, j1])) / self.h
        gy = ((1 - fx) * (z[i, j1] - z[i, j]) + fx * (z[i1, j1] - z[i1, j])) / self.h
        return np.stack([np.where(inx, gx, 0.0), np.where(iny, gy, 0.0)], axis=1)


def combine(a, b, op=np.add):
    """Cellwise combination of two co-registered grids; masks are merged."""
    if not a.same_georeference(b):
        raise ValueError("grids do not share shape and georeferencing")
    mask = a.mask | b.mask
    vals = np.where(mask, a.nodata if a.nodata is not None else np.nan, op(a.values, b.values))
    return Grid(a.ncols, a.nrows, a.cell_size, a.origin, a.nodata, vals, mask)


@dataclass
class GridProblem:
    spec: ProblemSpec
    bedrock: NormalizedField
    surface: NormalizedField  # bedrock + thickness, the boundary data
    benchmark: NormalizedField  # measured surface used for benchmark lines
    thickness: Grid
    mask: np.ndarray  # True for cells excluded from sampling (north row first)
    value_scale: float

    def sampler(self, rng, n):
        return masked_sample(rng, n, self.mask, self.bedrock.h, self.spec.lower, self.spec.upper)


def masked_sample(rng, n, mask, h, lower, upper):
    """Uniform points in the box, rejecting those whose nearest cell is masked.

    ``mask`` is north-row-first with cell size ``h`` in unit coordinates.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if not mask.any():
        return energy.sample_interior(rng, lower, upper, n)
    if mask.all():
        raise ValueError("every cell is masked")
    nrows, ncols = mask.shape
    out = np.empty((0, 2))
    while out.shape[0] < n:
        pts = energy.sample_interior(rng, lower, upper, 2 * n)
        ix = np.clip((pts[:, 0] / h).astype(int), 0, ncols - 1)
        iy = np.clip((pts[:, 1] / h).astype(int), 0, nrows - 1)
        keep = ~mask[nrows - 1 - iy, ix]
        out = np.concatenate([out, pts[keep]])
    return out[:n]


def build_problem(bedrock, thickness, p, alpha=4000.0, beta=4000.0, surface=None,
                  value_scale=VALUE_SCALE, source=None, drift="zero"):
    """Obstacle problem for surface elevation over the bedrock.

    Obstacle: normalized bedrock. Boundary data: normalized bedrock +
    thickness on the box boundary. Source defaults to zero; drift is zero or
    the bedrock gradient (``drift="bedrock"``). ``surface`` (a measured DEM)
    is only used as the benchmark field; without it, bedrock + thickness
    serves as the benchmark.
    """
    if not bedrock.same_georeference(thickness):
        raise ValueError("bedrock and thickness grids do not share shape and georeferencing")
    if surface is not None and not surface.same_georeference(bedrock):
        raise ValueError("surface grid does not share shape and georeferencing with bedrock")
    b_field = NormalizedField(bedrock, value_scale)
    top = combine(bedrock, thickness)
    s_field = NormalizedField(top, value_scale)
    bench = NormalizedField(surface, value_scale) if surface is not None else s_field
    mask = bedrock.mask | thickness.mask
    if source is None:
        def source(x):
            return np.zeros(np.asarray(x).shape[0])
    if drift == "zero":
        psi = None
    elif drift == "bedrock":
        psi = b_field.gradient
    else:
        raise ValueError(f"unknown drift option {drift!r}")
    spec = ProblemSpec(
        lower=[0.0, 0.0], upper=b_field.upper, p=p,
        obstacle=b_field, source=source, boundary=s_field, drift=psi,
        alpha=alpha, beta=beta, name="grid")
    return GridProblem(spec, b_field, s_field, bench, thickness, mask, value_scale)


def data_benchmark_losses(spec, surface_data, batch):
    """Loss terms obtained by inserting a data field in place of the network."""
    return energy.field_losses(
        spec, batch,
        surface_data(batch.interior),
        surface_data.gradient(batch.interior),
        surface_data(batch.boundary) if batch.boundary.shape[0] else np.empty(0))


def synthetic_ice_sheet(nrows=64, ncols=40, cell_size=5000.0, seed=0, noise=15.0):
    """Synthetic bedrock, thickness and surface rasters with ice-sheet-like
    geometry: an undulating bed, an ice dome with a smooth margin, a NODATA
    border strip, and a surface DEM carrying measurement noise of
    ``noise`` meters. Values are rounded to 0.1 m like the published grids.
    """
    rng = np.random.default_rng(seed)
    y, x = np.meshgrid(np.linspace(-1, 1, nrows), np.linspace(-1, 1, ncols), indexing="ij")
    bed = (400.0 * np.sin(2.5 * x + 0.3) * np.cos(1.7 * y) + 250.0 * np.cos(3.1 * y - 0.5)
           - 300.0 * (x ** 2 + y ** 2) + 150.0)
    r = np.sqrt((x / 0.8) ** 2 + (y / 0.85) ** 2)
    dome = np.where(r < 1.0, 2600.0 * np.clip(1.0 - r ** (4.0 / 3.0), 0.0, None) ** (3.0 / 8.0), 0.0)
    thick = np.maximum(dome - np.maximum(bed, 0.0) * 0.2, 0.0)
    surf = bed + thick + noise * rng.standard_normal(bed.shape)
    bed, thick, surf = (np.round(a, 1) for a in (bed, thick, surf))
    mask = np.zeros(bed.shape, dtype=bool)
    mask[:, 0] = True  # a NODATA strip along the western edge
    nodata = -9999.0
    grids = []
    for a in (bed, thick, surf):
        a = np.where(mask, nodata, a)
        grids.append(Grid(ncols, nrows, cell_size, (-200000.0, -3400000.0), nodata, a, mask.copy()))
    return tuple(grids)
