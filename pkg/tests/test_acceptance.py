"""Acceptance criteria, one test each, at the stated tolerances.

Training criteria share runs through ``_RUNS`` so the sweep's (4000, 4000)
cell reuses the 1-D accuracy run with the same seed. Runtime is one to two
hours on a single core.
"""
import copy

import numpy as np
import pytest

from obstaclenet import geodata
from obstaclenet.energy import ProblemSpec, SampleBatch, loss_and_grad, sample_batch, total_loss
from obstaclenet.metrics import eval_grid_points, scaling_study, training_runner
from obstaclenet.nnet import evaluate, forward, init
from obstaclenet.optim import EvalGrid, TrainConfig, fit_mse, pretrain, train
from obstaclenet.oracle import make_grid, solve_pgd, solve_psor_1d
from obstaclenet.problems import get_problem

pytestmark = pytest.mark.acceptance

HIDDEN_1D = [128] * 5
TABLE_PAIRS = [(100.0, 100.0), (500.0, 100.0), (1000.0, 500.0), (4000.0, 4000.0), (5000.0, 4000.0)]
SEEDS = (0, 1, 2)

_RUNS = {}


def run_mms(name, alpha, beta, seed, sampling, cache=True):
    key = (name, alpha, beta, seed, sampling)
    if cache and key in _RUNS:
        return _RUNS[key]
    prob = get_problem(name, alpha, beta)
    pts = eval_grid_points(prob.spec.dim)
    net = init(seed, [prob.spec.dim] + HIDDEN_1D + [1], scheme="uniform")
    cfg = TrainConfig(iterations=2000, seed=seed, sampling=sampling, eval_every=100)
    rep = train(net, prob.spec, cfg, EvalGrid(pts, prob.exact(pts)))
    out = (rep, net)
    if cache:
        _RUNS[key] = out
    return out


def run_1d(alpha, beta, seed):
    return run_mms("mms1d-p2", alpha, beta, seed, "grid")


# -- 1: gradients -----------------------------------------------------------------

def _random_case(rng):
    dim = int(rng.integers(1, 3))
    p = float(rng.choice([2.0, 3.0, 4.0]))
    hidden = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))]
    net = init(int(rng.integers(1 << 30)), [dim, *hidden, 1], layer_norm=bool(rng.integers(2)),
               scheme=str(rng.choice(["he", "uniform"])))
    frozen = copy.deepcopy(net)
    c = rng.normal(size=dim)
    psi = rng.normal(size=dim)
    shift = float(rng.normal())
    spec = ProblemSpec(
        lower=np.zeros(dim), upper=np.ones(dim), p=p,
        # obstacle near the network output so the penalty is active at some points
        obstacle=lambda x: evaluate(frozen, x) + 0.3 * np.sin(3 * x @ c) + 0.05 * shift,
        source=lambda x: np.cos(2 * x @ c),
        boundary=lambda x: np.sin(x @ c),
        drift=lambda x: np.tile(psi, (x.shape[0], 1)),
        alpha=float(rng.uniform(1, 100)), beta=float(rng.uniform(1, 100)))
    n = int(rng.integers(2, 9))
    interior = rng.random((n, dim))
    boundary = np.array([[0.0], [1.0]]) if dim == 1 else np.array([[0.0, rng.random()], [1.0, rng.random()],
                                                                    [rng.random(), 0.0]])
    return net, spec, SampleBatch(interior, boundary)


def _clear_of_kinks(net, x, margin=1e-3):
    h = x
    ok = np.ones(x.shape[0], dtype=bool)
    for layer in net.layers[:-1]:
        z = h @ layer.weight.T + layer.bias
        if net.layer_norm:
            zc = z - z.mean(axis=1, keepdims=True)
            z = zc / np.sqrt((zc ** 2).mean(axis=1, keepdims=True) + net.eps) * layer.gain + layer.shift
        ok &= np.all(np.abs(z) >= margin, axis=1)
        h = np.maximum(z, 0) ** 2
    return ok


def _central(f, h):
    # fourth-order central stencil; narrow layer norms make the second-order one too coarse
    return (8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h)


def _gradient_errors(net, spec, batch, h=1e-5):
    x = batch.interior[_clear_of_kinks(net, batch.interior)]
    in_err = 0.0
    if x.shape[0]:
        ad_in = forward(net, x).input_gradient
        fd_in = np.stack([_central(lambda t: evaluate(net, x + t * e), h) for e in np.eye(x.shape[1])],
                         axis=1)
        in_err = float(np.max(np.abs(ad_in - fd_in) / np.maximum(np.abs(fd_in), 1e-3)))
    _, grads = loss_and_grad(net, spec, batch)
    ad, fd = [], []
    for a, g in zip(net.parameters(), grads):
        for idx in np.ndindex(a.shape):
            old = a[idx]

            def shifted(t):
                a[idx] = old + t
                value = total_loss(net, spec, batch).total
                a[idx] = old
                return value

            fd.append(_central(shifted, h))
        ad.append(g.ravel())
    ad, fd = np.concatenate(ad), np.array(fd)
    return in_err, float(np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-12))


def test_criterion_1_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    in_errs, par_errs = [], []
    for _ in range(100):
        a, b = _gradient_errors(*_random_case(rng))
        in_errs.append(a)
        par_errs.append(b)
    ok = max(in_errs) <= 1e-5 and max(par_errs) <= 1e-4
    verdict(1, "gradient correctness", ok,
            f"100 configs, worst input-gradient rel err {max(in_errs):.2e} (<= 1e-5), "
            f"worst parameter-gradient rel err {max(par_errs):.2e} (<= 1e-4)")
    assert ok


# -- 2: oracles -------------------------------------------------------------------

def test_criterion_2_oracle_validity(verdict):
    prob = get_problem("mms1d-p2")
    errs = []
    for cells in (512, 1024):
        grid = make_grid(prob.spec, cells)
        u = solve_psor_1d(grid)
        errs.append(float(np.max(np.abs(u - prob.exact(grid.points())))))
    ratio = errs[0] / errs[1]
    p3 = get_problem("mms2d-p3")
    grid = make_grid(p3.spec, 128)
    err2d = float(np.max(np.abs(solve_pgd(grid, p3.spec).reshape(-1) - p3.exact(grid.points()))))
    ok = errs[1] <= 1e-3 and 3.5 <= ratio <= 4.5 and err2d <= 5e-3
    verdict(2, "oracle validity", ok,
            f"PSOR 1024 cells max err {errs[1]:.2e} (<= 1e-3), 512->1024 ratio {ratio:.2f} (~4), "
            f"PGD 129x129 p=3 max err {err2d:.2e} (<= 5e-3)")
    assert ok


# -- 3, 4: 1-D training -------------------------------------------------------------

def test_criterion_3_1d_accuracy(verdict):
    errs = [run_1d(4000.0, 4000.0, s)[0].final_error for s in SEEDS]
    med = float(np.median(errs))
    ok = med <= 5e-3
    verdict(3, "1-D training accuracy", ok,
            f"relative L1 per seed {[round(e, 5) for e in errs]}, median {med:.4e} (<= 5e-3)")
    assert ok


def test_criterion_4_penalty_table_ordering(verdict):
    # seed 0 for every distinct pair, as the sweep command assigns them
    errs = {pair: run_1d(*pair, 0)[0].final_error for pair in TABLE_PAIRS}
    best = min(errs, key=errs.get)
    worst = max(errs, key=errs.get)
    ratio = errs[(100.0, 100.0)] / errs[(4000.0, 4000.0)]
    ok = best == (4000.0, 4000.0) and worst == (100.0, 100.0) and ratio >= 10
    table = ", ".join(f"({a:g},{b:g}): {e:.4f}" for (a, b), e in errs.items())
    verdict(4, "penalty table ordering", ok,
            f"{table}; best ({best[0]:g},{best[1]:g}), worst ({worst[0]:g},{worst[1]:g}), "
            f"worst/best ratio {ratio:.1f} (>= 10)")
    assert ok


# -- 5: scaling -----------------------------------------------------------------------

def test_criterion_5_sample_count_scaling(verdict):
    prob = get_problem("mms1d-p2")
    run = training_runner(prob, TrainConfig(iterations=2000, sampling="grid"), tuple(HIDDEN_1D))
    res = scaling_study(run, [2 ** k for k in range(6, 15)], list(SEEDS))
    ok = res.complete and -1.0 <= res.slope <= -0.5
    pts = ", ".join(f"{n}: {e:.4f}" for n, e in zip(res.counts, res.mean_errors))
    verdict(5, "sample-count scaling", ok,
            f"seed-mean relative L1 by N {{{pts}}}; fitted slope {res.slope:.3f} (in [-1.0, -0.5])"
            + (f"; failed cells {res.failed}" if res.failed else ""))
    assert ok


# -- 6: 2-D training ---------------------------------------------------------------------

@pytest.mark.parametrize("name", ["mms2d-p3", "mms2d-p4"])
def test_criterion_6_2d_training(verdict, name):
    rep, _ = run_mms(name, 100.0, 100.0, 0, "uniform")
    curve = rep.l1_error[~np.isnan(rep.l1_error)]
    loss2 = float(rep.losses[-1, 1])
    ok = (rep.final_error <= 5e-2 and loss2 <= 1e-6 and curve[-1] < curve[0]
          and rep.trailing_mean() <= rep.losses[100, 3])
    verdict(6, f"2-D training {name}", ok,
            f"relative L1 {rep.final_error:.4e} (<= 5e-2), final loss2 {loss2:.2e} (<= 1e-6), "
            f"L1 curve {curve[0]:.3f} -> {curve[-1]:.4f}")
    assert ok


# -- 7: ice-sheet pipeline ----------------------------------------------------------------

def test_criterion_7_ice_sheet_pipeline(verdict):
    bed, thick, surf = geodata.synthetic_ice_sheet(64, 40, seed=0)
    gp = geodata.build_problem(bed, thick, 3.0, 4000.0, 4000.0, surface=surf)
    net = init(0, [2] + HIDDEN_1D + [1], scheme="uniform")
    pretrain(net, gp.bedrock, TrainConfig(iterations=2000, seed=0), gp.spec.lower, gp.spec.upper,
             sampler=gp.sampler)
    nodes = gp.bedrock.node_coords()[~gp.mask.reshape(-1)]
    mse = fit_mse(net, gp.bedrock, nodes)
    bench = geodata.data_benchmark_losses(
        gp.spec, gp.benchmark, sample_batch(gp.spec, 65536, 256, 104729, None, gp.sampler))
    rep = train(net, gp.spec, TrainConfig(iterations=2000, seed=0), sampler=gp.sampler)
    tail = rep.losses[-100:].mean(axis=0)
    ok = mse < 1e-3 and tail[1] <= bench.loss2 and tail[2] <= bench.loss3
    verdict(7, "ice-sheet pipeline (synthetic 64x40)", ok,
            f"pretrain MSE {mse:.2e} (< 1e-3); trailing loss2 {tail[1]:.2e} vs data {bench.loss2:.2e}; "
            f"trailing loss3 {tail[2]:.2e} vs data {bench.loss3:.2e}")
    assert ok


# -- 8: determinism -------------------------------------------------------------------------

def test_criterion_8_determinism(verdict):
    first, net_a = run_1d(4000.0, 4000.0, 0)
    again, net_b = run_mms("mms1d-p2", 4000.0, 4000.0, 0, "grid", cache=False)
    same = (np.array_equal(first.losses, again.losses) and np.array_equal(first.lr, again.lr)
            and np.array_equal(first.l1_error, again.l1_error, equal_nan=True)
            and all(np.array_equal(a, b) for a, b in zip(net_a.parameters(), net_b.parameters())))
    verdict(8, "determinism", same,
            "repeated 1-D run (seed 0, 2000 iterations): report and parameters "
            + ("bit-identical" if same else "differ"))
    assert same


def test_mms_runs_trailing_mean_not_above_iteration_100():
    assert _RUNS, "run after the training criteria"
    for key, (rep, _) in _RUNS.items():
        assert rep.trailing_mean() <= rep.losses[100, 3], key
