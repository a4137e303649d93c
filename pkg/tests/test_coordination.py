import numpy as np
import pytest

from hetsim.cluster import PRESETS, WorkerSpec, hl_sweep_schedule, worker_rng
from hetsim.controller import ControllerConfig, controller_fixed_point
from hetsim.coordination import (
    AspSimulator,
    BspTrainer,
    ParameterServerState,
    bsp_aggregate,
    staleness_of,
    step_lr,
)
from hetsim.errors import ConfigError, ShapeError
from hetsim.metrics import iteration_density
from hetsim.numeric_core import (
    DatasetSpec,
    GradientUpdate,
    ParamVector,
    SoftmaxRegression,
    apply_update,
    compute_gradient,
    generate_dataset,
    loss,
)

DATA = generate_dataset(DatasetSpec(seed=0))
MODEL = SoftmaxRegression(8, 3)


def _workers(caps, **kw):
    return [WorkerSpec(i, c, **kw) for i, c in enumerate(caps)]


def _bsp(caps, policy="uniform", config=None, lr=0.1, seed=0, **kw):
    cfg = config or ControllerConfig()
    return BspTrainer(MODEL, DATA, _workers(caps), None, cfg, policy, step_lr(lr), seed, **kw)


def _asp(caps, policy="uniform", config=None, lr=0.1, seed=0, data=DATA, **kw):
    cfg = config or ControllerConfig()
    return AspSimulator(MODEL, data, _workers(caps), None, cfg, policy, step_lr(lr), seed, **kw)


# --- aggregation ----------------------------------------------------------------

def test_equal_batches_average():
    g = [np.arange(3.0) + i for i in range(4)]
    ups = [GradientUpdate(g[i], i, 32, 0) for i in range(4)]
    np.testing.assert_allclose(bsp_aggregate(ups, 128), sum(g) / 4)


def test_weighted_example():
    ups = [GradientUpdate(np.array([1.0, 0.0]), 0, 16, 0), GradientUpdate(np.array([0.0, 1.0]), 1, 112, 0)]
    np.testing.assert_allclose(bsp_aggregate(ups), [0.125, 0.875])


def test_aggregate_order_independent():
    rng = np.random.default_rng(0)
    ups = [GradientUpdate(rng.standard_normal(5), i, int(b), 0) for i, b in enumerate([3, 9, 20, 96])]
    a = bsp_aggregate(ups)
    b = bsp_aggregate(list(reversed(ups)))
    assert np.array_equal(a, b)


def test_aggregate_matches_union_batch():
    rng = np.random.default_rng(1)
    params = ParamVector(rng.standard_normal(MODEL.num_params))
    for _ in range(30):
        cuts = np.sort(rng.choice(np.arange(1, 128), 3, replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [128]]))
        idx = rng.integers(0, len(DATA), 128)
        parts = np.split(idx, cuts)
        ups = [compute_gradient(MODEL, params, DATA.batch(p), k) for k, p in enumerate(parts)]
        assert [u.batch_size for u in ups] == sizes.tolist()
        union = compute_gradient(MODEL, params, DATA.batch(idx)).grad
        np.testing.assert_allclose(bsp_aggregate(ups, 128), union, rtol=1e-10, atol=1e-15)


def test_aggregate_errors():
    with pytest.raises(ShapeError):
        bsp_aggregate([])
    with pytest.raises(ShapeError):
        bsp_aggregate([GradientUpdate(np.zeros(2), 0, 1, 0), GradientUpdate(np.zeros(3), 1, 1, 0)])
    with pytest.raises(ShapeError):
        bsp_aggregate([GradientUpdate(np.zeros(2), 0, 4, 0)], global_batch=8)


# --- BSP --------------------------------------------------------------------------

def test_hl1_plan_stable_and_loss_decreases():
    tr = _bsp(PRESETS["HL1-bsp"], "dynamic", iterations_per_epoch=10)
    before = loss(MODEL, tr.params, DATA.full())
    plan = tr.plan
    st = tr.run_epoch(0)
    assert tr.plan == plan
    assert st.loss < before
    assert st.mean_round_time == pytest.approx(32 / 12)


def test_round_time_is_max_plus_sync_cost():
    tr = _bsp(PRESETS["HL4-bsp"], sync_cost=0.25, iterations_per_epoch=3)
    tr.run_epoch(0)
    rounds = {}
    for ev in tr.events.of_kind("round"):
        rounds.setdefault(ev["iteration"], []).append(ev)
    for evs in rounds.values():
        assert evs[0]["round_time"] == max(e["compute_time"] for e in evs) + 0.25


def test_hl8_moves_toward_fixed_point():
    caps = PRESETS["HL8-bsp"]
    target = controller_fixed_point(dict(enumerate(caps)), 128).as_tuple()
    tr = _bsp(caps, "dynamic", iterations_per_epoch=4)
    assert tr.plan.as_tuple() == (32, 32, 32, 32)
    st0 = tr.run_epoch(0)
    assert st0.mean_round_time == 8.0
    dist = lambda p: sum(abs(a - b) for a, b in zip(p, target))
    assert dist(tr.plan.as_tuple()) < dist((32, 32, 32, 32))
    for e in range(1, 10):
        tr.run_epoch(e)
    assert all(abs(a - b) <= 1 for a, b in zip(tr.plan.as_tuple(), target))
    assert tr.plan.total == 128


def test_adjust_every_iterations():
    cfg = ControllerConfig(adjust_every_iterations=2)
    tr = _bsp(PRESETS["HL8-bsp"], "dynamic", config=cfg, iterations_per_epoch=10)
    tr.run_epoch(0)
    # five re-plans inside one epoch are enough to settle
    assert len(tr.adjustments) == 5 * 4
    target = controller_fixed_point(dict(enumerate(PRESETS["HL8-bsp"])), 128).as_tuple()
    assert all(abs(a - b) <= 1 for a, b in zip(tr.plan.as_tuple(), target))
    with pytest.raises(ConfigError):
        ControllerConfig(adjust_every_iterations=0)


def test_variable_policy_tracks_schedule():
    tr = BspTrainer(MODEL, DATA, _workers(PRESETS["HL1-bsp"]), hl_sweep_schedule(2), ControllerConfig(),
                    "variable", step_lr(0.1), 0, iterations_per_epoch=2)
    tr.run_epoch(0)
    assert tr.plan.as_tuple() == (32, 32, 32, 32)
    tr.run_epoch(2)
    assert tr.plan.as_tuple() == (32, 32, 21, 43)
    assert list(tr.events.of_kind("capacity_change"))


def test_controller_on_off_same_accuracy():
    on = _bsp(PRESETS["HL8-bsp"], "dynamic", iterations_per_epoch=10)
    off = _bsp(PRESETS["HL8-bsp"], "uniform", iterations_per_epoch=10)
    for e in range(10):
        a, b = on.run_epoch(e), off.run_epoch(e)
    assert abs(a.train_acc - b.train_acc) <= 0.02


def test_threads_match_single_threaded():
    runs = []
    for threads in (1, 4):
        tr = BspTrainer(MODEL, DATA, _workers(PRESETS["HL8-bsp"], noise_cv=0.05), None,
                        ControllerConfig(deadband=0.05), "deadband", step_lr(0.1), 11,
                        iterations_per_epoch=5, threads=threads)
        tr.keep_trajectory = True
        for e in range(4):
            tr.run_epoch(e)
        tr.close()
        runs.append(tr)
    assert len(runs[0].trajectory) == 20
    for a, b in zip(runs[0].trajectory, runs[1].trajectory):
        assert np.array_equal(a, b)
    assert runs[0].plan == runs[1].plan


def test_unknown_policy():
    with pytest.raises(ConfigError):
        _bsp(PRESETS["HL1-bsp"], "greedy")


# --- ASP --------------------------------------------------------------------------

def test_ps_overwrites_instead_of_averaging():
    ps = ParameterServerState(ParamVector(np.zeros(2)))
    ps.push(ParamVector(np.array([1.0, 1.0])), 0, 0, 1.0, 8)
    ps.push(ParamVector(np.array([5.0, -2.0])), 1, 0, 2.0, 8)
    assert np.array_equal(ps.params.values, [5.0, -2.0])
    assert [e.version_written for e in ps.update_log] == [1, 2]
    assert [e.staleness for e in ps.update_log] == [0, 1]


def test_single_worker_is_plain_sgd():
    sim = _asp((4.0,), config=ControllerConfig(global_batch=16))
    params0 = sim.params
    sim.run(total_iterations=25)
    assert staleness_of(sim.ps.update_log) == [0] * 25
    # replay: one worker, full LR, same data stream
    rng = worker_rng(0, 0, 0)
    p = params0
    for _ in range(25):
        batch = DATA.batch(rng.integers(0, len(DATA), 16))
        p = apply_update(p, compute_gradient(MODEL, p, batch).grad, 0.1)
    assert np.array_equal(p.values, sim.ps.params.values)


def test_versions_monotone_and_staleness_nonnegative():
    sim = _asp(PRESETS["HL4-asp"], "dynamic")
    sim.run(total_iterations=2000)
    versions = [e.version_written for e in sim.ps.update_log]
    assert versions == list(range(1, 2001))
    assert min(staleness_of(sim.ps.update_log)) >= 0
    times = [e.time for e in sim.ps.update_log]
    assert times == sorted(times)


def test_homogeneous_counts_equal():
    sim = _asp(PRESETS["HL1-asp"])
    sim.run(total_iterations=400)
    dens = iteration_density(sim.ps.update_log, sim.ids)
    assert set(dens.counts.values()) == {100}
    assert all(s == 0.25 for s in dens.shares.values())


def test_hl8_uniform_ratio():
    sim = _asp(PRESETS["HL8-asp"])
    sim.run(total_iterations=10_000)
    dens = iteration_density(sim.ps.update_log, sim.ids)
    assert dens.counts[3] / dens.counts[0] == pytest.approx(7.0, abs=0.01)
    assert dens.shares[3] == pytest.approx(0.7, abs=0.001)


def test_lr_scaling_follows_plan():
    sim = _asp(PRESETS["HL8-asp"], "dynamic")
    seen = []

    def check(_st):
        for w in sim.ids:
            assert sim.worker_lr(w, 0) == sim.lr(0) * (sim.plan[w] / sim.plan.total)
            assert sim.worker_lr(w, 0) / sim.lr(0) == pytest.approx(sim.plan[w] / sim.plan.total, rel=1e-15)
        seen.append(sim.plan.as_tuple())

    sim.run(total_iterations=3000, on_epoch=check)
    assert len(set(seen)) > 1
    assert sim.plan_changes


def test_asp_dynamic_reduces_skew():
    sim = _asp(PRESETS["HL8-asp"], "dynamic")
    sim.run(total_iterations=10_000)
    last = sim.plan_changes[-1]
    settled = [e for e in sim.ps.update_log if e.version_written > last]
    assert len(settled) > 1000
    assert iteration_density(settled, sim.ids).skew <= 1.15


def test_asp_needs_a_budget():
    sim = _asp(PRESETS["HL1-asp"])
    with pytest.raises(ConfigError):
        sim.run()
    with pytest.raises(ConfigError):
        sim.run(total_iterations=2)


def test_asp_epochs_count_samples():
    sim = _asp(PRESETS["HL2-asp"])
    stats = sim.run(max_epochs=3)
    assert [s.epoch for s in stats] == [0, 1, 2]
    assert sim.samples >= 3 * len(DATA)
    assert sum(s.iterations for s in stats) == len(sim.ps.update_log)
