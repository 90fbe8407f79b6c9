"""Random-policy episode generation, on-disk format and episode-level splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim

FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    pass


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def episode_seed(seed: int, index: int) -> int:
    return (int(seed) ^ _splitmix64(index)) & _MASK64


@dataclass(frozen=True)
class PolicySpec:
    """Uniform random actions, optionally with an excluded box.

    An action is inside the gap when ``lo < a <= hi`` on every coordinate.
    The default gap is the half-space start-x > 0.
    """

    kind: str = "uniform"
    gap_lo: tuple = (0.0, -np.inf, -np.inf, -np.inf)
    gap_hi: tuple = (np.inf, np.inf, np.inf, np.inf)

    def __post_init__(self):
        if self.kind not in ("uniform", "gapped"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def in_gap(self, actions) -> np.ndarray:
        a = np.asarray(actions).reshape(-1, 4)
        return np.all((a > np.asarray(self.gap_lo)) & (a <= np.asarray(self.gap_hi)), axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, 4))
        for i in range(n):
            while True:
                a = rng.uniform(-1.0, 1.0, size=4)
                if self.kind == "uniform" or not self.in_gap(a)[0]:
                    break
            out[i] = a
        return out.astype(np.float32)

    def sample_gap(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Actions drawn uniformly from inside the gap region."""
        lo = np.maximum(np.asarray(self.gap_lo), -1.0)
        hi = np.minimum(np.asarray(self.gap_hi), 1.0)
        return rng.uniform(lo, hi, size=(n, 4)).astype(np.float32)


# episodes per dataset when not given: a small granular set, a larger rope set
DEFAULT_EPISODES = {sim.GRANULAR: 100, sim.ROPE: 1000}

UNIFORM = PolicySpec("uniform")
GAPPED = PolicySpec("gapped")


@dataclass(frozen=True)
class Episode:
    observations: np.ndarray  # (T+1, G, G)
    actions: np.ndarray  # (T, 4)
    clouds: np.ndarray  # (T+1, K, 2)
    seed: int


@dataclass(eq=False)
class Dataset:
    kind: str
    observations: np.ndarray  # (E, T+1, G, G) float32
    actions: np.ndarray  # (E, T, 4) float32
    clouds: np.ndarray  # (E, T+1, K, 2) float32
    seeds: np.ndarray  # (E,) uint64
    policy: PolicySpec = field(default_factory=PolicySpec)
    radius: float = sim.DEFAULT_PARAMS.particle_radius
    base_seed: int = 0

    def __post_init__(self):
        e, t1 = self.observations.shape[:2]
        if self.actions.shape[:2] != (e, t1 - 1) or self.clouds.shape[:2] != (e, t1):
            raise DatasetError(
                "need T+1 observations and clouds per T actions: "
                f"obs {self.observations.shape}, actions {self.actions.shape}, clouds {self.clouds.shape}"
            )

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, i: int) -> Episode:
        return Episode(self.observations[i], self.actions[i], self.clouds[i], int(self.seeds[i]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.kind == other.kind
            and self.policy == other.policy
            and self.radius == other.radius
            and self.base_seed == other.base_seed
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("observations", "actions", "clouds", "seeds")
            )
        )

    @property
    def frames(self) -> int:
        return self.actions.shape[1]

    @property
    def grid(self) -> int:
        return self.observations.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.kind,
            self.observations[idx],
            self.actions[idx],
            self.clouds[idx],
            self.seeds[idx],
            self.policy,
            self.radius,
            self.base_seed,
        )


def simulate_episode(kind, seed, policy, frames, grid, params=sim.DEFAULT_PARAMS):
    state = sim.reset(kind, seed, params)
    actions = policy.sample(np.random.default_rng([seed, 1]), frames)
    states = [state]
    for a in actions:
        state = sim.step(state, a, params)
        states.append(state)
    obs = np.stack([sim.render(s, grid) for s in states])
    clouds = np.stack([s.positions for s in states]).astype(np.float32)
    return obs, actions, clouds


def generate(
    kind: str,
    policy: PolicySpec = UNIFORM,
    episodes: int | None = None,
    frames: int = 20,
    seed: int = 0,
    grid: int = 32,
    params: sim.SimParams = sim.DEFAULT_PARAMS,
) -> Dataset:
    if episodes is None:
        episodes = DEFAULT_EPISODES[kind]
    if episodes < 1 or frames < 2:
        raise ValueError("need at least one episode of at least two frames")
    seeds = np.array([episode_seed(seed, i) for i in range(episodes)], dtype=np.uint64)
    parts = [simulate_episode(kind, int(s), policy, frames, grid, params) for s in seeds]
    obs, acts, clouds = (np.stack(x) for x in zip(*parts))
    return Dataset(kind, obs, acts, clouds, seeds, policy, params.particle_radius, int(seed))


def replay(kind: str, cloud0, actions, radius=sim.DEFAULT_PARAMS.particle_radius, params=sim.DEFAULT_PARAMS):
    """Re-simulate ``actions`` from a stored initial cloud; returns float32 clouds."""
    state = sim.ParticleState(np.asarray(cloud0, dtype=np.float64), kind, radius)
    out = [state.positions]
    for a in actions:
        state = sim.step(state, a, params)
        out.append(state.positions)
    return np.stack(out).astype(np.float32)


def split(dataset: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < val_fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"fraction {val_fraction} of {n} episodes leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


# --------------------------------------------------------------------------
# storage
# --------------------------------------------------------------------------

_BLOBS = {
    "observations": ("observations.f32", "episode, frame, row, col"),
    "actions": ("actions.f32", "episode, step, [start_x, start_y, end_x, end_y]"),
    "clouds": ("clouds.f32", "episode, frame, particle, [x, y]"),
}


def _fmt_float(x: float) -> str:
    return repr(float(x))


def save(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    e, t1, g, _ = dataset.observations.shape
    k = dataset.clouds.shape[2]
    lines = [
        f"format_version: {FORMAT_VERSION}",
        f"env: {dataset.kind}",
        f"episodes: {e}",
        f"frames: {t1 - 1}",
        f"grid: {g}",
        f"particles: {k}",
        f"particle_radius: {_fmt_float(dataset.radius)}",
        f"base_seed: {dataset.base_seed}",
        f"policy: {dataset.policy.kind}",
        "gap_lo: " + " ".join(_fmt_float(v) for v in dataset.policy.gap_lo),
        "gap_hi: " + " ".join(_fmt_float(v) for v in dataset.policy.gap_hi),
        "episode_seeds: " + " ".join(str(int(s)) for s in dataset.seeds),
        "byte_order: little-endian float32, C order",
    ]
    for name, (fname, layout) in _BLOBS.items():
        arr = np.ascontiguousarray(getattr(dataset, name), dtype="<f4")
        (path / fname).write_bytes(arr.tobytes())
        lines.append(f"{name}_file: {fname}")
        lines.append(f"{name}_dims: {layout}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: Path) -> dict[str, str]:
    mf = path / "manifest.txt"
    if not mf.exists():
        raise DatasetError(f"{path}: no manifest.txt")
    out = {}
    for line in mf.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            out[key.strip()] = value.strip()
    return out


def load(path, verify_replay: bool = False) -> Dataset:
    path = Path(path)
    m = read_manifest(path)
    version = m.get("format_version")
    if version != str(FORMAT_VERSION):
        raise DatasetError(f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    e, t, g, k = (int(m[key]) for key in ("episodes", "frames", "grid", "particles"))
    shapes = {
        "observations": (e, t + 1, g, g),
        "actions": (e, t, 4),
        "clouds": (e, t + 1, k, 2),
    }
    arrays = {}
    for name, shape in shapes.items():
        fname = m.get(f"{name}_file", _BLOBS[name][0])
        raw = (path / fname).read_bytes()
        expected = 4 * int(np.prod(shape))
        if len(raw) != expected:
            raise DatasetError(f"{path / fname}: expected {expected} bytes, found {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    seeds = np.array([int(s) for s in m["episode_seeds"].split()], dtype=np.uint64)
    if len(seeds) != e:
        raise DatasetError(f"{path}: {len(seeds)} episode seeds for {e} episodes")
    policy = PolicySpec(
        m["policy"],
        tuple(float(v) for v in m["gap_lo"].split()),
        tuple(float(v) for v in m["gap_hi"].split()),
    )
    ds = Dataset(
        m["env"],
        arrays["observations"],
        arrays["actions"],
        arrays["clouds"],
        seeds,
        policy,
        float(m["particle_radius"]),
        int(m["base_seed"]),
    )
    if policy.kind == "gapped" and np.any(policy.in_gap(ds.actions)):
        raise DatasetError(f"{path}: gapped dataset contains actions inside its gap region")
    if verify_replay:
        for i in range(len(ds)):
            if not np.array_equal(replay(ds.kind, ds.clouds[i, 0], ds.actions[i], ds.radius), ds.clouds[i]):
                raise DatasetError(f"{path}: episode {i} does not replay to its stored clouds")
    return ds
