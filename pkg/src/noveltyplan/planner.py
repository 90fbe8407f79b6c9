"""CEM trajectory optimisation with a novelty-weighted cost, and the MPC loop around it."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import sim
from .nn import ContractError
from .world_model import Encoder, TransitionModel, rollout

VAR_FLOOR = 1e-4
# fixed evaluation chunk; results must not depend on the worker count
CHUNK = 32


@dataclass(frozen=True)
class PlanConfig:
    samples: int = 128
    elites: int = 16
    horizon: int = 5
    weight: float = 0.25
    iterations: int = 10
    threshold: float = 1e-3
    var_floor: float = VAR_FLOOR
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.elites <= self.samples:
            raise ValueError(f"need 1 <= elites <= samples, got {self.elites}/{self.samples}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.weight < 0:
            raise ValueError("novelty weight must be non-negative")


@dataclass
class TrajectoryDistribution:
    mean: np.ndarray
    var: np.ndarray
    iteration: int = 0


@dataclass
class CostBreakdown:
    goal: float
    novelty: np.ndarray  # per predicted step
    total: float


@dataclass
class BatchCosts:
    total: np.ndarray  # (n,)
    goal: np.ndarray  # (n,)
    novelty: np.ndarray  # (n, T)


def _batch_costs(model, vae, window, past, z_goal, actions, weight) -> BatchCosts:
    """Costs for a batch of flat trajectories, shape (n, T*F*4)."""
    n = len(actions)
    acts = actions.reshape(n, -1, 4)
    win = np.broadcast_to(window, (n,) + window.shape)
    pst = np.broadcast_to(past, (n,) + past.shape)
    preds = rollout(model, win, acts, pst)  # (n, T, D)
    goal = np.mean((preds[:, -1].astype(np.float64) - z_goal) ** 2, axis=-1)
    if vae is None:
        novelty = np.zeros(preds.shape[:2])
    else:
        novelty = np.asarray(vae.score(preds), dtype=np.float64).reshape(preds.shape[:2])
    total = goal + weight * novelty.sum(axis=1) if weight else goal.copy()
    return BatchCosts(total, goal, novelty)


def _initial_window(model: TransitionModel, z_start, past_actions=None):
    z = np.asarray(z_start, dtype=np.float32)
    if z.ndim == 1:
        z = np.repeat(z[None], model.window, axis=0)
    if past_actions is None:
        past = np.zeros(((model.window - 1) * model.frame_skip, 4), dtype=np.float32)
    else:
        past = np.asarray(past_actions, dtype=np.float32)
    return z, past


def trajectory_cost(model, vae, z_start, z_goal, actions, weight, past_actions=None) -> CostBreakdown:
    """Goal MSE of the final predicted latent plus ``weight`` times summed novelty."""
    window, past = _initial_window(model, z_start, past_actions)
    flat = np.asarray(actions, dtype=np.float32).reshape(1, -1)
    c = _batch_costs(model, vae, window, past, np.asarray(z_goal, dtype=np.float64), flat, weight)
    return CostBreakdown(float(c.goal[0]), c.novelty[0], float(c.total[0]))


def refit(elites, var_floor: float = VAR_FLOOR, iteration: int = 0) -> TrajectoryDistribution:
    """Element-wise mean and population variance of the elite set, variance floored."""
    e = np.asarray(elites, dtype=np.float64)
    if e.ndim != 2 or len(e) == 0:
        raise ContractError("refit needs a non-empty (k, dim) elite array")
    var = np.maximum(e.var(axis=0), var_floor)
    return TrajectoryDistribution(e.mean(axis=0), var, iteration)


@dataclass
class PlanResult:
    actions: np.ndarray  # (T*F, 4)
    cost: float
    goal: float
    novelty: np.ndarray
    diagnostics: list = field(default_factory=list)
    distribution: TrajectoryDistribution | None = None


DIAG_COLUMNS = ("iteration", "best_total", "best_goal", "best_novelty", "mean_total", "mean_shift")


def diagnostics_csv(rows) -> str:
    """Per-iteration CSV; rows carrying a ``replan`` key get a leading replan column."""
    rows = list(rows)
    lead = ("replan",) if rows and "replan" in rows[0] else ()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(lead + DIAG_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in lead] + [r["iteration"]] + [repr(float(r[c])) for c in DIAG_COLUMNS[1:]])
    return buf.getvalue()


CostFn = Callable[[np.ndarray], BatchCosts]


def cem(cost_fn: CostFn, dim: int, config: PlanConfig) -> PlanResult:
    """Cross-entropy method over flat action vectors in [-1, 1]^dim.

    All samples of an iteration are drawn before evaluation, and
    evaluation runs in fixed-size chunks, so the worker count cannot change
    the result. Returns the lowest-cost sample seen in any iteration.
    """
    rng = np.random.default_rng(config.seed)
    dist = TrajectoryDistribution(np.zeros(dim), np.ones(dim))
    best_x, best = None, None
    diags = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for it in range(config.iterations):
            noise = rng.standard_normal((config.samples, dim))
            samples = np.clip(dist.mean + np.sqrt(dist.var) * noise, -1.0, 1.0).astype(np.float32)
            chunks = [samples[i : i + CHUNK] for i in range(0, len(samples), CHUNK)]
            parts = list(pool.map(cost_fn, chunks)) if pool else [cost_fn(c) for c in chunks]
            costs = BatchCosts(
                np.concatenate([p.total for p in parts]),
                np.concatenate([p.goal for p in parts]),
                np.concatenate([p.novelty for p in parts]),
            )
            order = np.argsort(costs.total, kind="stable")
            top = order[0]
            if best is None or costs.total[top] < best[0]:
                best = (float(costs.total[top]), float(costs.goal[top]), costs.novelty[top].copy())
                best_x = samples[top].copy()
            new = refit(samples[order[: config.elites]], config.var_floor, it + 1)
            shift = float(np.linalg.norm(new.mean - dist.mean))
            diags.append(
                {
                    "iteration": it,
                    "best_total": best[0],
                    "best_goal": best[1],
                    "best_novelty": float(np.sum(best[2])),
                    "mean_total": float(np.mean(costs.total)),
                    "mean_shift": shift,
                }
            )
            dist = new
            if shift < config.threshold:
                break
    finally:
        if pool:
            pool.shutdown()
    return PlanResult(best_x, best[0], best[1], best[2], diags, dist)


def plan(model: TransitionModel, vae, z_start, z_goal, config: PlanConfig, past_actions=None) -> PlanResult:
    """Plan ``config.horizon`` model steps from ``z_start`` toward ``z_goal``."""
    window, past = _initial_window(model, z_start, past_actions)
    z_goal = np.asarray(z_goal, dtype=np.float64)
    weight = config.weight

    def cost_fn(chunk):
        return _batch_costs(model, vae, window, past, z_goal, chunk, weight)

    dim = config.horizon * model.frame_skip * 4
    res = cem(cost_fn, dim, config)
    res.actions = res.actions.reshape(-1, 4)
    return res


@dataclass
class MpcTrace:
    states: list
    actions: np.ndarray  # (budget, 4)
    plan_costs: list  # total cost of each accepted plan
    novelty: list  # predicted novelty of each executed model step
    chamfer_final: float | None = None
    diagnostics: list = field(default_factory=list)  # CEM rows of every replan


def mpc_run(
    model: TransitionModel,
    vae,
    encoder: Encoder,
    state: sim.ParticleState,
    goal_image,
    config: PlanConfig,
    budget: int,
    execute_per_replan: int = 1,
    goal_cloud=None,
    params: sim.SimParams = sim.DEFAULT_PARAMS,
) -> MpcTrace:
    """Plan, execute the first actions in the simulator, re-encode, repeat.

    ``execute_per_replan`` counts model steps (each F environment actions);
    ``budget`` counts environment actions.
    """
    if not 1 <= execute_per_replan <= config.horizon:
        raise ValueError("execute_per_replan must lie in [1, horizon]")
    f, h = model.frame_skip, model.window
    z_goal = encoder.encode(goal_image)
    grid = encoder.grid
    states = [state]
    latents = [encoder.encode(sim.render(state, grid))]
    executed: list = []
    plan_costs, novelty, diags = [], [], []
    replan = 0
    while len(executed) < budget:
        # window of H latents spaced F actions apart; pad with the oldest latent
        hist = [latents[max(0, len(latents) - 1 - k * f)] for k in range(h)][::-1]
        past = np.zeros(((h - 1) * f, 4), dtype=np.float32)
        n_past = min((h - 1) * f, len(executed))
        if n_past:
            past[-n_past:] = np.asarray(executed[-n_past:])
        cfg = replace(config, seed=config.seed + replan)
        res = plan(model, vae, np.stack(hist), z_goal, cfg, past)
        plan_costs.append(res.cost)
        diags.extend(dict(d, replan=replan) for d in res.diagnostics)
        n_exec = min(execute_per_replan * f, budget - len(executed))
        for i, a in enumerate(res.actions[:n_exec]):
            state = sim.step(state, a, params)
            states.append(state)
            executed.append(np.asarray(a, dtype=np.float32))
            latents.append(encoder.encode(sim.render(state, grid)))
            if (i + 1) % f == 0:
                novelty.append(float(res.novelty[i // f]))
        replan += 1
    trace = MpcTrace(states, np.asarray(executed, dtype=np.float32), plan_costs, novelty, diagnostics=diags)
    if goal_cloud is not None:
        trace.chamfer_final = sim.chamfer(states[-1].positions, goal_cloud)
    return trace
