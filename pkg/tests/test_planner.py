from dataclasses import replace

import numpy as np
import pytest

from noveltyplan import dataset as ds
from noveltyplan import evaluate as ev
from noveltyplan import planner as P
from noveltyplan import sim
from noveltyplan.nn import ContractError
from noveltyplan.world_model import rollout


def quadratic(target, log=None):
    def cost(x):
        if log is not None:
            log.append(x.copy())
        c = np.sum((x.astype(np.float64) - target) ** 2, axis=1)
        return P.BatchCosts(c, c, np.zeros((len(x), 1)))

    return cost


def test_config_validation():
    with pytest.raises(ValueError):
        P.PlanConfig(samples=8, elites=9)
    with pytest.raises(ValueError):
        P.PlanConfig(horizon=0)
    with pytest.raises(ValueError):
        P.PlanConfig(weight=-0.1)


def test_refit_examples():
    one = P.refit([[0.2, -0.4, 0.9]])
    np.testing.assert_array_equal(one.mean, [0.2, -0.4, 0.9])
    np.testing.assert_array_equal(one.var, [P.VAR_FLOOR] * 3)
    same = P.refit([[0.5, 0.5]] * 4)
    np.testing.assert_array_equal(same.var, [P.VAR_FLOOR] * 2)
    three = P.refit([[1.0, 0.0], [2.0, 0.0], [4.0, 0.3]])
    # hand computed: means 7/3 and 0.1; population variances 14/9 and 0.02
    np.testing.assert_allclose(three.mean, [7 / 3, 0.1], rtol=1e-15)
    np.testing.assert_allclose(three.var, [14 / 9, 0.02], rtol=1e-12)
    with pytest.raises(ContractError):
        P.refit(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_cem_recovers_quadratic_optimum(seed):
    target = np.random.default_rng(100 + seed).uniform(-0.8, 0.8, 12)  # T=3, F=1
    cfg = P.PlanConfig(horizon=3, iterations=50, seed=seed)
    res = P.cem(quadratic(target), 12, cfg)
    assert len(res.diagnostics) <= 50
    assert np.max(np.abs(res.actions - target)) <= 0.02


def test_cem_incumbent_monotone_and_samples_clipped():
    seen = []
    target = np.full(8, 3.0)  # outside the box; samples must still be clipped
    res = P.cem(quadratic(target, seen), 8, P.PlanConfig(iterations=6, seed=1))
    best = [d["best_total"] for d in res.diagnostics]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    allx = np.concatenate(seen)
    assert allx.min() >= -1 and allx.max() <= 1
    assert np.any(allx == 1.0)  # clipped, not truncated
    assert res.cost == min(float(np.min(np.sum((x.astype(np.float64) - 3.0) ** 2, axis=1))) for x in seen)


def test_cem_deterministic_across_workers():
    target = np.linspace(-0.5, 0.5, 20)
    a = P.cem(quadratic(target), 20, P.PlanConfig(seed=4))
    b = P.cem(quadratic(target), 20, P.PlanConfig(seed=4))
    c = P.cem(quadratic(target), 20, P.PlanConfig(seed=4, workers=4))
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.actions, c.actions)
    assert a.diagnostics == c.diagnostics


def test_cem_scale_invariance():
    target = np.linspace(-0.3, 0.6, 12)
    base = P.cem(quadratic(target), 12, P.PlanConfig(seed=2))

    def scaled(x):
        c = quadratic(target)(x)
        return P.BatchCosts(c.total * 7.5, c.goal * 7.5, c.novelty)

    other = P.cem(scaled, 12, P.PlanConfig(seed=2))
    np.testing.assert_array_equal(base.actions, other.actions)


def test_diagnostics_csv_columns():
    res = P.cem(quadratic(np.zeros(4)), 4, P.PlanConfig(iterations=3))
    text = P.diagnostics_csv(res.diagnostics)
    head = text.splitlines()[0]
    assert head == "iteration,best_total,best_goal,best_novelty,mean_total,mean_shift"
    assert len(text.splitlines()) == len(res.diagnostics) + 1


# --------------------------------------------------------------------------
# with trained models
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene(quick_artifacts):
    start, goal = ev.make_scene("granular", 12345, ds.GAPPED)
    enc = quick_artifacts.encoder
    return enc.encode(sim.render(start)), enc.encode(sim.render(goal))


def test_trajectory_cost_recomputation(quick_artifacts, scene):
    art = quick_artifacts
    z0, zg = scene
    acts = np.random.default_rng(0).uniform(-1, 1, (5, 4)).astype(np.float32)
    c = P.trajectory_cost(art.model, art.vae, z0, zg, acts, 0.4)
    preds = rollout(art.model, z0[None], acts)
    goal = np.mean((preds[-1].astype(np.float64) - zg) ** 2)
    nov = np.array([art.vae.score(p) for p in preds])
    assert c.goal == pytest.approx(goal, rel=1e-12)
    np.testing.assert_allclose(c.novelty, nov, rtol=1e-5)
    assert c.total == c.goal + 0.4 * np.sum(c.novelty)
    zero = P.trajectory_cost(art.model, art.vae, z0, zg, acts, 0.0)
    assert zero.total == zero.goal
    at_goal = P.trajectory_cost(art.model, art.vae, z0, preds[-1], acts, 0.4)
    assert at_goal.goal == 0.0 and at_goal.total == 0.4 * np.sum(at_goal.novelty)


def test_w0_equals_goal_only_planner(quick_artifacts, scene):
    art = quick_artifacts
    cfg = P.PlanConfig(weight=0.0, samples=64, elites=8, iterations=4, seed=3)
    with_vae = P.plan(art.model, art.vae, *scene, cfg)
    without = P.plan(art.model, None, *scene, cfg)
    np.testing.assert_array_equal(with_vae.actions, without.actions)
    assert with_vae.cost == without.cost


def test_plan_deterministic(quick_artifacts, scene):
    cfg = P.PlanConfig(samples=64, elites=8, iterations=4, seed=9)
    a = P.plan(quick_artifacts.model, quick_artifacts.vae, *scene, cfg)
    b = P.plan(quick_artifacts.model, quick_artifacts.vae, *scene, replace(cfg, workers=3))
    np.testing.assert_array_equal(a.actions, b.actions)
    assert a.actions.shape == (5, 4)


def test_large_weight_lowers_planned_novelty(quick_artifacts):
    art = quick_artifacts
    lower = []
    for seed in range(5):
        start, goal = ev.make_scene("granular", ev.scene_seed(0, seed), ds.GAPPED)
        z0, zg = art.encoder.encode(sim.render(start)), art.encoder.encode(sim.render(goal))
        cfg = P.PlanConfig(samples=64, elites=8, iterations=5, seed=seed)
        n0 = P.plan(art.model, art.vae, z0, zg, replace(cfg, weight=0.0)).novelty.mean()
        n100 = P.plan(art.model, art.vae, z0, zg, replace(cfg, weight=100.0)).novelty.mean()
        lower.append(n100 <= n0)
    assert all(lower)


def test_mpc_accounting(quick_artifacts):
    art = quick_artifacts
    start, goal = ev.make_scene("granular", 77, ds.GAPPED)
    cfg = P.PlanConfig(samples=32, elites=4, iterations=3, horizon=3, seed=1)
    once = P.mpc_run(art.model, art.vae, art.encoder, start, sim.render(goal), cfg, 3, 3, goal.positions)
    assert len(once.plan_costs) == 1 and len(once.actions) == 3
    trace = P.mpc_run(art.model, art.vae, art.encoder, start, sim.render(goal), cfg, 4, 1, goal.positions)
    assert len(trace.actions) == 4 and len(trace.states) == 5 and len(trace.plan_costs) == 4
    assert trace.chamfer_final == sim.chamfer(trace.states[-1].positions, goal.positions)
    # the executed actions reproduce the logged states
    s = start
    for a in trace.actions:
        s = sim.step(s, a)
    assert s == trace.states[-1]
    assert {d["replan"] for d in trace.diagnostics} == {0, 1, 2, 3}
    with pytest.raises(ValueError):
        P.mpc_run(art.model, art.vae, art.encoder, start, sim.render(goal), cfg, 3, 4)
