"""Seeded experiment driver: weight comparisons, OOD report and rollout strips."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import sim
from .planner import PlanConfig, mpc_run
from .vae import NoveltyVae, VaeConfig, load_vae, save_vae, train_vae
from .world_model import (
    Decoder,
    DynamicsConfig,
    Encoder,
    EncoderConfig,
    TransitionModel,
    load_autoencoder,
    load_transition,
    pretrain_encoder,
    rollout,
    save_autoencoder,
    save_transition,
    train_transition,
)

log = logging.getLogger(__name__)

WEIGHT_GRID = (0.0, 0.125, 0.25, 0.375, 0.5)
RESULT_COLUMNS = ("env", "w", "seed", "chamfer_final", "novelty_mean", "seconds")
# scene seeds live far from dataset episode seeds
SCENE_OFFSET = 1_000_003


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    env: str = sim.GRANULAR
    policy: ds.PolicySpec = ds.GAPPED
    weights: tuple = WEIGHT_GRID
    scenes: int = 5
    seeds: tuple = (0,)
    budget: int = 10
    execute_per_replan: int = 1
    goal_actions: int = 3
    plan: PlanConfig = field(default_factory=PlanConfig)
    # wall-clock goes to the timing file; the results CSV gets 0 unless set
    record_seconds: bool = False

    def __post_init__(self):
        if self.scenes < 1 or not self.seeds or not self.weights:
            raise ConfigurationError("need at least one scene, seed and weight")
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("weights must be non-negative")


@dataclass
class ResultRow:
    env: str
    w: float
    seed: int
    chamfer_final: float
    novelty_mean: float
    seconds: float = 0.0

    def __post_init__(self):
        if not self.chamfer_final >= 0:
            raise ValueError(f"chamfer distance must be non-negative, got {self.chamfer_final}")


@dataclass
class Artifacts:
    encoder: Encoder
    decoder: Decoder
    model: TransitionModel
    vae: NoveltyVae


# --------------------------------------------------------------------------
# training and storage of the full model stack
# --------------------------------------------------------------------------


def train_artifacts(
    data: ds.Dataset,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    dynamics_cfg: DynamicsConfig = DynamicsConfig(),
    vae_cfg: VaeConfig = VaeConfig(),
    val_fraction: float = 0.1,
    split_seed: int = 0,
) -> Artifacts:
    """Encoder, transition model and VAE from one dataset, validated on a held-out split."""
    train, val = ds.split(data, val_fraction, split_seed)
    enc, dec, _ = pretrain_encoder(train.observations, encoder_cfg)
    z_tr, z_va = enc.encode(train.observations), enc.encode(val.observations)
    model, _ = train_transition(z_tr, train.actions, dynamics_cfg, z_va, val.actions)
    d = enc.latent_dim
    vae, _ = train_vae(z_tr.reshape(-1, d), vae_cfg, z_va.reshape(-1, d))
    return Artifacts(enc, dec, model, vae)


def save_artifacts(art: Artifacts, directory) -> Path:
    directory = Path(directory)
    save_autoencoder(art.encoder, art.decoder, directory)
    save_transition(art.model, directory)
    save_vae(art.vae, directory)
    return directory


def load_artifacts(directory) -> Artifacts:
    directory = Path(directory)
    for name in ("encoder.ckpt", "dynamics.ckpt", "vae_encoder.ckpt"):
        if not (directory / name).exists():
            raise ConfigurationError(f"{directory}: missing checkpoint {name}")
    enc, dec = load_autoencoder(directory)
    art = Artifacts(enc, dec, load_transition(directory), load_vae(directory))
    check_dims(art)
    return art


def check_dims(art: Artifacts, grid: int | None = None) -> None:
    d = art.encoder.latent_dim
    if art.model.latent_dim != d or art.vae.latent_dim != d:
        raise ConfigurationError(
            f"latent dims disagree: encoder {d}, dynamics {art.model.latent_dim}, vae {art.vae.latent_dim}"
        )
    if grid is not None and art.encoder.grid != grid:
        raise ConfigurationError(f"encoder expects {art.encoder.grid}px renders, dataset has {grid}px")


# --------------------------------------------------------------------------
# scenes and goals
# --------------------------------------------------------------------------


def scene_seed(base: int, scene: int) -> int:
    return ds.episode_seed(base + SCENE_OFFSET, scene)


def make_scene(env: str, seed: int, policy: ds.PolicySpec, goal_actions: int = 3, params=sim.DEFAULT_PARAMS):
    """Initial state and a reachable goal state ``goal_actions`` random pushes away."""
    start = sim.reset(env, seed, params)
    goal = start
    for a in policy.sample(np.random.default_rng([seed, 7]), goal_actions):
        goal = sim.step(goal, a, params)
    return start, goal


def _run_scene(art: Artifacts, spec: ExperimentSpec, w: float, seed: int) -> tuple[ResultRow, float]:
    t0 = time.perf_counter()
    start, goal = make_scene(spec.env, seed, spec.policy, spec.goal_actions)
    cfg = replace(spec.plan, weight=w, seed=seed, workers=1)
    trace = mpc_run(
        art.model,
        art.vae,
        art.encoder,
        start,
        sim.render(goal, art.encoder.grid),
        cfg,
        spec.budget,
        spec.execute_per_replan,
        goal.positions,
    )
    secs = time.perf_counter() - t0
    row = ResultRow(spec.env, float(w), int(seed), trace.chamfer_final, float(np.mean(trace.novelty)))
    if spec.record_seconds:
        row.seconds = secs
    return row, secs


def jobs(spec: ExperimentSpec) -> list[tuple[float, int]]:
    """(weight, scene seed) pairs in output order."""
    return [(w, scene_seed(b, j)) for w in spec.weights for b in spec.seeds for j in range(spec.scenes)]


def _job(args):
    art, spec, w, seed = args
    return _run_scene(art, spec, w, seed)


def evaluate(art: Artifacts, spec: ExperimentSpec, workers: int = 1):
    """Run every (weight, scene) pair; returns (rows, wall-clock seconds per row).

    Rows come back in (weight, seed, scene) order whatever the worker count.
    """
    check_dims(art)
    todo = jobs(spec)
    if workers > 1:
        # artifacts are frozen, so scenes can share them across threads
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(_job, [(art, spec, w, s) for w, s in todo]))
    else:
        out = [_run_scene(art, spec, w, s) for w, s in todo]
    for (row, secs) in out:
        log.info("w=%g seed=%d cd=%.6f novelty=%.4f (%.1fs)", row.w, row.seed, row.chamfer_final, row.novelty_mean, secs)
    return [r for r, _ in out], [s for _, s in out]


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([r.env, repr(r.w), r.seed, repr(r.chamfer_final), repr(r.novelty_mean), repr(r.seconds)])
    return buf.getvalue()


def read_results(text: str) -> list[ResultRow]:
    rd = csv.DictReader(io.StringIO(text))
    if tuple(rd.fieldnames or ()) != RESULT_COLUMNS:
        raise ValueError(f"unexpected result columns {rd.fieldnames}")
    return [
        ResultRow(r["env"], float(r["w"]), int(r["seed"]), float(r["chamfer_final"]), float(r["novelty_mean"]), float(r["seconds"]))
        for r in rd
    ]


def summarize(rows) -> dict[float, tuple[float, float, int]]:
    """Per weight: (mean CD, sample std of CD, row count), in first-seen weight order."""
    by_w: dict[float, list] = {}
    for r in rows:
        by_w.setdefault(r.w, []).append(r.chamfer_final)
    out = {}
    for w, cds in by_w.items():
        sd = float(np.std(cds, ddof=1)) if len(cds) > 1 else 0.0
        out[w] = (float(np.mean(cds)), sd, len(cds))
    return out


def summary_text(rows) -> str:
    lines = []
    for w, (mean, sd, n) in summarize(rows).items():
        lines.append(f"w={w:g}: chamfer {mean:.6f} ± {sd:.6f} (n={n})")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# OOD separation
# --------------------------------------------------------------------------


def gap_states(env: str, policy: ds.PolicySpec, scenes: int = 50, steps: int = 60, seed: int = 0, grid: int = 32):
    """Renders of states reached by ``steps`` gap-region actions from fresh scenes.

    A single push rarely leaves the training manifold; a long run of gap
    actions drives the scene somewhere the gapped policy does not go.
    """
    rng = np.random.default_rng([seed, 99])
    imgs = []
    for i in range(scenes):
        s = sim.reset(env, scene_seed(seed + 1, i))
        for a in policy.sample_gap(rng, steps):
            s = sim.step(s, a)
        imgs.append(sim.render(s, grid))
    return np.stack(imgs)


@dataclass
class OodReport:
    median_id: float
    median_ood: float
    ratio: float
    edges: np.ndarray
    counts_id: np.ndarray
    counts_ood: np.ndarray

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count_id", "count_ood"))
        for i in range(len(self.counts_id)):
            w.writerow((repr(float(self.edges[i])), repr(float(self.edges[i + 1])), int(self.counts_id[i]), int(self.counts_ood[i])))
        return buf.getvalue()

    def text(self) -> str:
        return (
            f"median_id: {self.median_id!r}\nmedian_ood: {self.median_ood!r}\nratio: {self.ratio!r}\n"
        )


def ood_report(vae: NoveltyVae, id_latents, ood_latents, bins: int = 20) -> OodReport:
    zi = np.asarray(id_latents, dtype=np.float32).reshape(-1, vae.latent_dim)
    zo = np.asarray(ood_latents, dtype=np.float32).reshape(-1, vae.latent_dim)
    if len(zi) == 0 or len(zo) == 0:
        raise ValueError("ood_report needs non-empty ID and OOD latent sets")
    si, so = np.atleast_1d(vae.score(zi)), np.atleast_1d(vae.score(zo))
    mi, mo = float(np.median(si)), float(np.median(so))
    both = np.concatenate([si, so])
    edges = np.histogram_bin_edges(both, bins=bins)
    ci, _ = np.histogram(si, edges)
    co, _ = np.histogram(so, edges)
    ratio = mo / mi if mi > 0 else (1.0 if mo == 0 else np.inf)
    return OodReport(mi, mo, float(ratio), edges, ci, co)


# --------------------------------------------------------------------------
# rollout strip
# --------------------------------------------------------------------------


def strip_raster(model: TransitionModel, encoder: Encoder, decoder: Decoder, observations, actions) -> np.ndarray:
    """2G x (T+1)G raster: observed frames on top, decoded predictions below.

    The top-right tile is the final observation, i.e. the goal. Bottom tiles
    before the first prediction, and between frame-skipped predictions,
    show the decoded encoding of the observed frame.
    """
    obs = np.asarray(observations, dtype=np.float32)
    acts = np.asarray(actions, dtype=np.float32)
    t1, g = obs.shape[0], obs.shape[-1]
    h, f = model.window, model.frame_skip
    lat = encoder.encode(obs)
    bottom = decoder.decode(lat)
    t0 = (h - 1) * f
    n_steps = (t1 - 1 - t0) // f
    if n_steps > 0:
        pred = rollout(model, lat[0 : t0 + 1 : f], acts[t0 : t0 + n_steps * f], acts[:t0])
        bottom[t0 + f : t0 + n_steps * f + 1 : f] = decoder.decode(pred)
    top = np.concatenate(list(obs), axis=1)
    return np.concatenate([top, np.concatenate(list(bottom), axis=1)], axis=0).astype(np.float32)


def rollout_strip(model, encoder, decoder, episode: ds.Episode, out_path) -> np.ndarray:
    """Write the strip as .npy (exact) and .png (8-bit) next to ``out_path``."""
    from PIL import Image

    raster = strip_raster(model, encoder, decoder, episode.observations, episode.actions)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out.with_suffix(".npy"), raster)
    Image.fromarray(np.round(np.clip(raster, 0, 1) * 255).astype(np.uint8)).save(out.with_suffix(".png"))
    return raster
