"""Deterministic 2D pushing scenes (granular pile and rope) plus renderer and Chamfer metric.

Everything here is a pure function of its arguments: states are immutable
and ``step`` returns a new state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRANULAR = "granular"
ROPE = "rope"
KINDS = (GRANULAR, ROPE)


@dataclass(frozen=True)
class SimParams:
    n_granular: int = 16
    n_rope: int = 12
    particle_radius: float = 0.02
    pusher_radius: float = 0.06
    substeps: int = 16
    rope_rest: float = 0.05
    rope_passes: int = 8
    disk_center: tuple = (0.5, 0.5)
    disk_radius: float = 0.2

    @property
    def contact_radius(self) -> float:
        return self.pusher_radius + self.particle_radius


DEFAULT_PARAMS = SimParams()


@dataclass(frozen=True, eq=False)
class ParticleState:
    positions: np.ndarray  # (K, 2) float64, read-only
    kind: str
    radius: float = DEFAULT_PARAMS.particle_radius

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def __eq__(self, other):
        return (
            isinstance(other, ParticleState)
            and self.kind == other.kind
            and self.radius == other.radius
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self):
        return hash((self.kind, self.radius, self.positions.tobytes()))


def action_to_points(action) -> tuple[np.ndarray, np.ndarray]:
    """Clip a 4-vector to [-1, 1] and map it to pusher start/end in the unit square."""
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(4), -1.0, 1.0)
    return (a[:2] + 1) / 2, (a[2:] + 1) / 2


def reset(kind: str, seed: int, params: SimParams = DEFAULT_PARAMS) -> ParticleState:
    rng = np.random.default_rng(seed)
    if kind == GRANULAR:
        # uniform in the disk: sqrt on the radius sample
        r = params.disk_radius * np.sqrt(rng.uniform(size=params.n_granular))
        theta = rng.uniform(0, 2 * np.pi, size=params.n_granular)
        pos = np.asarray(params.disk_center) + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    elif kind == ROPE:
        length = params.rope_rest * (params.n_rope - 1)
        while True:
            anchor = rng.uniform(0.15, 0.85, size=2)
            theta = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(theta), np.sin(theta)])
            tip = anchor + length * direction
            if np.all(tip >= 0.05) and np.all(tip <= 0.95):
                break
        steps = np.arange(params.n_rope)[:, None] * params.rope_rest
        pos = anchor + steps * direction
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    # float32-representable start so stored clouds replay exactly
    pos = pos.astype(np.float32).astype(np.float64)
    return ParticleState(pos, kind, params.particle_radius)


def _push(pos: np.ndarray, center: np.ndarray, travel: np.ndarray, reach: float) -> None:
    d = pos - center
    dist = np.hypot(d[:, 0], d[:, 1])
    hit = dist < reach
    if not np.any(hit):
        return
    norm = np.linalg.norm(travel)
    fallback = travel / norm if norm > 0 else np.array([1.0, 0.0])
    for i in np.flatnonzero(hit):
        u = d[i] / dist[i] if dist[i] > 0 else fallback
        pos[i] = center + reach * u


def _project_links(xs: list, ys: list, rest: float, passes: int) -> None:
    """Gauss-Seidel distance constraints, clamped to the unit square after every pass.

    Works on plain floats, which is far faster than numpy scalars here.
    """
    n = len(xs)
    for _ in range(passes):
        for i in range(n - 1):
            dx = xs[i + 1] - xs[i]
            dy = ys[i + 1] - ys[i]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist == 0:
                continue
            k = 0.5 * (dist - rest) / dist
            xs[i] += k * dx
            ys[i] += k * dy
            xs[i + 1] -= k * dx
            ys[i + 1] -= k * dy
        # clamping inside the loop stops walls from crushing links
        for i in range(n):
            xs[i] = min(max(xs[i], 0.0), 1.0)
            ys[i] = min(max(ys[i], 0.0), 1.0)


def step(state: ParticleState, action, params: SimParams = DEFAULT_PARAMS) -> ParticleState:
    """Sweep the pusher disk from start to end and resolve contacts."""
    start, end = action_to_points(action)
    travel = end - start
    reach = params.pusher_radius + state.radius
    pos = state.positions.copy()
    for s in range(params.substeps + 1):
        center = start + travel * (s / params.substeps)
        _push(pos, center, travel, reach)
        np.clip(pos, 0.0, 1.0, out=pos)
        if state.kind == ROPE:
            xs, ys = pos[:, 0].tolist(), pos[:, 1].tolist()
            _project_links(xs, ys, params.rope_rest, params.rope_passes)
            pos[:, 0], pos[:, 1] = xs, ys
    return ParticleState(pos, state.kind, state.radius)


def render(state: ParticleState, grid: int = 32, edge: float = 3.0) -> np.ndarray:
    """Anti-aliased disks combined by max.

    Coverage falls off linearly across a band of ``edge`` pixels centred on
    the disk boundary.
    """
    img = np.zeros((grid, grid), dtype=np.float32)
    if len(state.positions) == 0:
        return img
    centers = (np.arange(grid) + 0.5) / grid
    px = state.positions * grid  # particle centers in pixel units
    r = state.radius * grid
    cx = centers * grid
    # rows index y, columns index x
    dy = cx[None, :, None] - px[:, 1][:, None, None]
    dx = cx[None, None, :] - px[:, 0][:, None, None]
    cover = np.clip(0.5 + (r - np.sqrt(dx * dx + dy * dy)) / edge, 0.0, 1.0)
    return cover.max(axis=0).astype(np.float32)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance with squared Euclidean nearest neighbours."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def rope_link_lengths(state: ParticleState) -> np.ndarray:
    return np.linalg.norm(np.diff(state.positions, axis=0), axis=1)
