import numpy as np
import pytest

from obstaclenet import energy
from obstaclenet.nnet import evaluate, init, load_checkpoint
from obstaclenet.optim import (
    AdamState, EvalGrid, TrainConfig, TrainingError, adam_step, fit_mse, lr_at, pretrain, train,
)
from obstaclenet.problems import get_problem, obstacle_1d


def test_lr_schedule_plateaus():
    assert lr_at(0, 5e-4) == 5e-4
    assert lr_at(499, 5e-4) == 5e-4
    assert lr_at(600, 5e-4) == 2.5e-4
    assert lr_at(750, 5e-4) == 1.25e-4
    assert lr_at(21999, 5e-4) == 1.25e-4
    values = [lr_at(i, 1.0) for i in range(1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, 1.0)


def test_adam_zero_gradient_is_identity():
    params = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [p.copy() for p in params]
    state = AdamState.zeros_like(params)
    adam_step(params, [np.zeros(2), np.zeros((2, 2))], state, 1e-3)
    assert state.step == 1
    for a, b in zip(params, before):
        assert np.array_equal(a, b)


def test_adam_constant_gradient_moves_by_lr():
    params = [np.zeros(3)]
    state = AdamState.zeros_like(params)
    g = np.array([3.0, -0.01, 250.0])
    prev = params[0].copy()
    for _ in range(200):
        adam_step(params, [g.copy()], state, 1e-3)
        step = params[0] - prev
        prev = params[0].copy()
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    ours = [p.copy()]
    state = AdamState.zeros_like(ours)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(ours, [g], state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(ours[0], ref, rtol=1e-13)


def test_adam_rejects_non_finite_before_update():
    params = [np.ones(2), np.ones(2)]
    state = AdamState.zeros_like(params)
    with pytest.raises(TrainingError):
        adam_step(params, [np.ones(2), np.array([np.nan, 0.0])], state, 0.1)
    assert state.step == 0 and np.all(params[0] == 1)


def test_adam_is_deterministic_over_100_steps():
    def run():
        net = init(3, [2, 8, 1])
        spec = get_problem("mms2d-p3").spec
        train(net, spec, TrainConfig(iterations=100, n_interior=32, n_boundary=16, seed=3))
        return net
    a, b = run(), run()
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)


def test_zero_iterations_leaves_network_unchanged():
    net = init(0, [1, 8, 1])
    before = [p.copy() for p in net.parameters()]
    rep = train(net, get_problem("mms1d-p2").spec, TrainConfig(iterations=0))
    assert rep.iterations == 0 and rep.losses.shape == (0, 4)
    for a, b in zip(before, net.parameters()):
        assert np.array_equal(a, b)


def test_report_shapes_and_eval_cadence(tmp_path):
    prob = get_problem("mms1d-p2")
    net = init(1, [1, 16, 16, 1])
    x = np.linspace(0, 1, 101)[:, None]
    cfg = TrainConfig(iterations=25, n_interior=64, seed=1, eval_every=10,
                      checkpoint_every=10, checkpoint_path=str(tmp_path / "c.npz"))
    rep = train(net, prob.spec, cfg, EvalGrid(x, prob.exact(x)))
    assert rep.losses.shape == (25, 4) and rep.lr.shape == (25,)
    assert np.flatnonzero(~np.isnan(rep.l1_error)).tolist() == [0, 10, 20, 24]
    assert rep.final_error == rep.l1_error[-1]
    back = load_checkpoint(tmp_path / "c.npz")
    for a, b in zip(back.parameters(), net.parameters()):
        assert np.array_equal(a, b)
    np.testing.assert_allclose(rep.losses[:, 3], rep.losses[:, 0] + prob.spec.alpha * rep.losses[:, 1]
                               + prob.spec.beta * rep.losses[:, 2], rtol=1e-12)


def test_non_finite_loss_aborts_with_partial_report():
    prob = get_problem("mms1d-p2")
    spec = prob.spec
    calls = {"n": 0}

    def source(x):
        calls["n"] += 1
        return np.full(x.shape[0], np.nan if calls["n"] > 3 else 0.0)

    bad = energy.ProblemSpec(spec.lower, spec.upper, 2.0, spec.obstacle, source, spec.boundary)
    with pytest.raises(TrainingError) as info:
        train(init(0, [1, 4, 1]), bad, TrainConfig(iterations=10, n_interior=8))
    rep = info.value.report
    assert rep is not None and "non-finite" in rep.status
    assert np.all(np.isfinite(rep.losses[:3])) and np.all(np.isnan(rep.losses[3:]))


def test_fixed_batch_and_pool_modes():
    spec = get_problem("mms2d-p3").spec
    for kw in ({"fixed_batch": True}, {"pool_size": 100}, {"sampling": "stratified"}):
        net = init(0, [2, 8, 1])
        rep = train(net, spec, TrainConfig(iterations=5, n_interior=64, n_boundary=8, **kw))
        assert np.all(np.isfinite(rep.losses))
    with pytest.raises(ValueError):
        TrainConfig(sampling="sobol").validate()


def test_pretrain_zero_target_from_zero_net():
    net = init(0, [1, 8, 1])
    for a in net.parameters():
        a[...] = 0.0
    history = []
    pretrain(net, lambda x: np.zeros(x.shape[0]), TrainConfig(iterations=3, n_interior=16),
             [0.0], [1.0], history=history)
    assert history[0] == 0.0


def test_pretrain_fits_scaled_obstacle():
    net = init(2, [1, 32, 32, 1], scheme="uniform")
    target = lambda x: obstacle_1d(x[:, 0]) / 10.0
    x = np.linspace(0, 1, 1001)[:, None]
    start = fit_mse(net, target, x)
    history = []
    pretrain(net, target, TrainConfig(iterations=1000, n_interior=256, seed=2), [0.0], [1.0],
             history=history)
    assert len(history) == 1000
    assert fit_mse(net, target, x) < 1e-3 < start
