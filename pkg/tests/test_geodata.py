import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obstaclenet import geodata
from obstaclenet.energy import LossBreakdown, sample_batch, total_loss
from obstaclenet.geodata import (
    Grid, GridParseError, NormalizedField, build_problem, data_benchmark_losses, downsample,
    parse_grid, write_grid,
)
from obstaclenet.nnet import init
from obstaclenet.problems import exact_1d, exact_1d_derivative, get_problem

TINY = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5000\nNODATA_value -9999\n1 2\n3 -9999\n"


def round_trip(grid):
    buf = io.StringIO()
    write_grid(grid, buf)
    return parse_grid(buf.getvalue())


def test_tiny_grid():
    g = parse_grid(io.StringIO(TINY))
    assert (g.ncols, g.nrows, g.cell_size, g.origin, g.nodata) == (2, 2, 5000.0, (0.0, 0.0), -9999.0)
    assert g.values.size == 4 and g.mask.sum() == 1 and g.mask[1, 1]
    assert sorted(g.valid()) == [1.0, 2.0, 3.0]


def test_header_in_any_order_and_case():
    text = "CELLSIZE 5000\nNODATA_value -9999\nyllcorner 0\nNROWS 2\nxllcorner 0\nncols 2\n1 2\n3 -9999\n"
    g = parse_grid(text)
    assert np.array_equal(g.values, parse_grid(TINY).values)


def test_center_registration():
    g = parse_grid("ncols 1\nnrows 1\nxllcenter 2500\nyllcenter 2500\ncellsize 5000\n7\n")
    assert g.origin == (0.0, 0.0) and g.nodata is None and not g.mask.any()


@pytest.mark.parametrize("text,line", [
    ("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5\n1 2\n3\n", 7),
    ("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5\n1 2\n3 4 5\n", 7),
    ("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5\n1 2\n3 x\n", 7),
    ("ncols two\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5\n1 2\n3 4\n", 1),
    ("ncols 2\nnrows 2\nbogus 1\nyllcorner 0\ncellsize 5\n1 2\n3 4\n", 3),
])
def test_parse_errors_carry_location(text, line):
    with pytest.raises(GridParseError) as info:
        parse_grid(text)
    assert info.value.line == line


def test_parse_error_column():
    with pytest.raises(GridParseError) as info:
        parse_grid("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 5\n1 2\n3  zz\n")
    assert info.value.column == 4


def test_missing_header():
    with pytest.raises(GridParseError):
        parse_grid("ncols 2\nnrows 2\ncellsize 5\n1 2\n3 4\n")


def test_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(5, 7)) * 1000
    mask = rng.random((5, 7)) < 0.2
    vals[mask] = -9999.0
    g = Grid(7, 5, 5000.0, (-12345.5, 67890.25), -9999.0, vals, mask)
    back = round_trip(g)
    assert np.array_equal(back.values, g.values) and np.array_equal(back.mask, g.mask)
    assert back.origin == g.origin and back.cell_size == g.cell_size


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_round_trip_property(nrows, ncols, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(nrows, ncols)) * 10.0 ** rng.integers(-3, 4)
    g = Grid(ncols, nrows, 5000.0, (0.0, 0.0), -9999.0, vals, np.zeros((nrows, ncols), bool))
    assert np.array_equal(round_trip(g).values, vals)


def test_range_check_logs(caplog):
    g = Grid(2, 1, 5000.0, (0, 0), -9999.0, np.array([[-1000.0, 100.0]]), np.zeros((1, 2), bool))
    assert geodata.check_range(g, "bedrock") == 1
    assert "outside published range" in caplog.text
    ok = Grid(2, 1, 5000.0, (0, 0), -9999.0, np.array([[0.0, 3366.5]]), np.zeros((1, 2), bool))
    assert geodata.check_range(ok, "thickness") == 0


def _smooth_grid(nrows, ncols, cs=5000.0):
    y, x = np.mgrid[0:nrows, 0:ncols]
    vals = 1000 * np.sin(x / 9.0) * np.cos(y / 13.0) + 500
    return Grid(ncols, nrows, cs, (100000.0, -2000000.0), -9999.0, vals.astype(float),
                np.zeros((nrows, ncols), bool))


def test_interpolation_reproduces_nodes_and_inverts():
    g = _smooth_grid(11, 7)
    f = NormalizedField(g)
    nodes = f.node_coords()
    np.testing.assert_allclose(f(nodes), f.to_unit_values(g.values.reshape(-1)), rtol=0, atol=1e-15)
    xy = f.from_unit_coords(nodes)
    np.testing.assert_allclose(f.to_unit_coords(xy), nodes, atol=1e-12)
    v = np.array([-963.1, 0.0, 3239.0])
    np.testing.assert_allclose(f.from_unit_values(f.to_unit_values(v)), v, atol=1e-12)
    assert f.to_unit_values(3000.0) == pytest.approx(1.0)


def test_full_resolution_aspect_ratio():
    g = Grid(301, 561, 5000.0, (0, 0), -9999.0, np.zeros((561, 301)), np.zeros((561, 301), bool))
    f = NormalizedField(g)
    assert f.upper[1] == 1.0
    assert f.upper[0] / f.upper[1] == pytest.approx(301 / 561, rel=1e-15)


def test_interpolant_gradient_matches_finite_differences():
    f = NormalizedField(_smooth_grid(20, 15))
    rng = np.random.default_rng(1)
    pts = (0.1 + 0.8 * rng.random((50, 2))) * f.upper
    h = 1e-7
    fd = np.stack([(f(pts + [h, 0]) - f(pts - [h, 0])) / (2 * h),
                   (f(pts + [0, h]) - f(pts - [0, h])) / (2 * h)], axis=1)
    np.testing.assert_allclose(f.gradient(pts), fd, rtol=1e-5, atol=1e-6)


def test_masked_nodes_never_read():
    g = _smooth_grid(6, 6)
    g.mask[2, 3] = True
    g.values[2, 3] = -9999.0
    f = NormalizedField(g)
    assert f.filled == 1
    pts = f.node_coords()
    assert np.all(f(pts) > f.to_unit_values(-1000))


def test_downsample_factor_8_shape_and_accuracy():
    full = _smooth_grid(561, 301)
    small = downsample(full, 8)
    assert (small.ncols, small.nrows) == (38, 71)
    # kept cell centers coincide with their original positions
    xs, ys = small.cell_centers()
    xf, yf = full.cell_centers()
    np.testing.assert_allclose(xs, xf[::8])
    np.testing.assert_allclose(ys, yf[::8])
    coarse = NormalizedField(small)
    fine = NormalizedField(full)
    interior = (xf[None, :] <= xs[-1]) & (yf[:, None] >= ys[-1])
    pts = fine.node_coords()[interior.reshape(-1)]
    got = coarse.from_unit_values(coarse(coarse.to_unit_coords(fine.from_unit_coords(pts))))
    want = full.values.reshape(-1)[interior.reshape(-1)]
    # bilinear error bound: h^2/8 * (|f_xx| + |f_yy|) with h = 8 cells
    bound = 64 / 8 * (1000 / 81 + 1000 / 169)
    assert np.max(np.abs(got - want)) <= bound


def test_flat_problem_normalizes_to_zero():
    z = Grid(4, 3, 5000.0, (0, 0), -9999.0, np.zeros((3, 4)), np.zeros((3, 4), bool))
    gp = build_problem(z, z, 3.0)
    pts = np.random.default_rng(0).random((20, 2)) * gp.spec.upper
    assert np.all(gp.spec.obstacle(pts) == 0) and np.all(gp.spec.boundary(pts) == 0)


def test_build_problem_shape_mismatch():
    a = _smooth_grid(4, 5)
    b = _smooth_grid(5, 4)
    with pytest.raises(ValueError):
        build_problem(a, b, 3.0)


def test_drift_switch():
    b = _smooth_grid(8, 8)
    t = Grid(8, 8, 5000.0, b.origin, -9999.0, np.full((8, 8), 100.0), np.zeros((8, 8), bool))
    assert build_problem(b, t, 3.0).spec.drift is None
    gp = build_problem(b, t, 3.0, drift="bedrock")
    pts = np.array([[0.3, 0.4]])
    np.testing.assert_array_equal(gp.spec.drift(pts), gp.bedrock.gradient(pts))
    with pytest.raises(ValueError):
        build_problem(b, t, 3.0, drift="surface")


def test_sampler_avoids_masked_cells():
    bed, thick, surf = geodata.synthetic_ice_sheet(16, 12, seed=0)
    gp = build_problem(bed, thick, 3.0, surface=surf)
    pts = gp.sampler(np.random.default_rng(0), 2000)
    assert pts.shape == (2000, 2)
    # the western column is masked
    assert np.all(pts[:, 0] >= gp.bedrock.h)


def test_benchmark_with_obstacle_field_has_zero_obstacle_loss():
    bed, thick, surf = geodata.synthetic_ice_sheet(16, 12, seed=1)
    gp = build_problem(bed, thick, 3.0, surface=surf)
    batch = sample_batch(gp.spec, 500, 50, seed=0, sampler=gp.sampler)
    lb = data_benchmark_losses(gp.spec, gp.bedrock, batch)
    assert lb.loss2 == 0.0
    lb = data_benchmark_losses(gp.spec, gp.benchmark, batch)
    assert all(np.isfinite(lb.as_tuple())) and lb.loss2 > 0 and lb.loss3 > 0


class _ExactField:
    def __call__(self, x):
        return exact_1d(np.asarray(x)[:, 0])

    def gradient(self, x):
        return exact_1d_derivative(np.asarray(x)[:, 0])[:, None]


def test_benchmark_matches_energy_module():
    prob = get_problem("mms1d-p2")
    batch = sample_batch(prob.spec, 300, 2, seed=3)
    net = init(5, [1, 16, 16, 1])
    from obstaclenet.nnet import forward

    class NetField:
        def __call__(self, x):
            return forward(net, x).value

        def gradient(self, x):
            return forward(net, x).input_gradient

    a = data_benchmark_losses(prob.spec, NetField(), batch)
    b = total_loss(net, prob.spec, batch)
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        assert abs(x - y) <= 1e-10 * max(1.0, abs(y))
    exact = data_benchmark_losses(prob.spec, _ExactField(), batch)
    assert isinstance(exact, LossBreakdown) and exact.loss2 == 0 and exact.loss3 == 0
