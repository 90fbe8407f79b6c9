"""Command-line entry point: one subcommand per pipeline stage.

Every invocation writes into its own run directory (``runs/<time>-seed<N>``
unless ``--run-dir`` is given) together with the fully resolved config.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluate as ev
from . import sim
from .config import ConfigError, RunConfig, describe, validate
from .nn import CheckpointError, ContractError, ShapeError, TrainingAborted
from .planner import diagnostics_csv, mpc_run
from .vae import load_vae, save_vae, train_vae
from .world_model import (
    identity_mse,
    load_autoencoder,
    load_transition,
    one_step_mse,
    pretrain_encoder,
    reconstruction_mse,
    save_autoencoder,
    save_transition,
    train_transition,
)

log = logging.getLogger("noveltyplan")


class UsageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    # dedicated flags first, then generic --set overrides
    for key, attr in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, str(value))
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "data", None):
        # the dataset decides the environment and its policy
        m = ds.read_manifest(_require(args.data, "--data"))
        cfg.set("env.kind", m["env"])
        cfg.set("data.policy", m["policy"])
        cfg.set("data.gap_lo", m["gap_lo"])
        cfg.set("data.gap_hi", m["gap_hi"])
    return validate(cfg)


_FLAG_KEYS = {
    "seed": "seed",
    "env.kind": "env",
    "data.episodes": "episodes",
    "data.frames": "frames",
    "plan.weight": "weight",
}


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(args.runs_root) / f"{stamp}-seed{cfg['seed']}"
    path.mkdir(parents=True, exist_ok=True)
    (path / f"config-{args.command}.txt").write_text(cfg.dumps())
    return path


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} directory is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    return p


def _fresh(path: Path) -> Path:
    """Refuse to overwrite an earlier stage's output."""
    if path.exists():
        raise UsageError(f"{path} already exists; pick a new --run-dir")
    return path


def _load_data(args, cfg: RunConfig) -> ds.Dataset:
    return ds.load(_require(args.data, "--data"))


def _load_models(args) -> ev.Artifacts:
    enc_dir = _require(args.encoder or args.models, "--encoder/--models")
    dyn_dir = _require(args.dynamics or args.models, "--dynamics/--models")
    vae_dir = _require(args.vae or args.models, "--vae/--models")
    enc, dec = load_autoencoder(enc_dir)
    art = ev.Artifacts(enc, dec, load_transition(dyn_dir), load_vae(vae_dir))
    ev.check_dims(art)
    return art


def _split(data: ds.Dataset, cfg: RunConfig):
    return ds.split(data, cfg["data.val_fraction"], cfg["seed"])


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args, cfg, out: Path) -> str:
    episodes = cfg["data.episodes"] or None
    data = ds.generate(cfg["env.kind"], cfg.policy(), episodes, cfg["data.frames"], cfg["seed"], cfg["data.grid"])
    ds.save(data, _fresh(out / "data"))
    return f"wrote {len(data)} episodes to {out / 'data'}"


def cmd_train_encoder(args, cfg, out: Path) -> str:
    train, val = _split(_load_data(args, cfg), cfg)
    enc, dec, hist = pretrain_encoder(train.observations, cfg.encoder())
    save_autoencoder(enc, dec, _fresh(out / "encoder"))
    base = float(np.mean((val.observations - train.observations.mean(axis=(0, 1))) ** 2))
    mse = reconstruction_mse(enc, dec, val.observations)
    return f"held-out reconstruction MSE {mse:.6f} (mean-image baseline {base:.6f})"


def cmd_train_dynamics(args, cfg, out: Path) -> str:
    train, val = _split(_load_data(args, cfg), cfg)
    enc, _ = load_autoencoder(_require(args.encoder or args.models, "--encoder"))
    z_tr, z_va = enc.encode(train.observations), enc.encode(val.observations)
    dcfg = cfg.dynamics()
    model, hist = train_transition(z_tr, train.actions, dcfg, z_va, val.actions)
    save_transition(model, _fresh(out / "dynamics"))
    (out / "dynamics_curve.csv").write_text(
        "epoch,train,val\n"
        + "".join(f"{i},{t!r},{v!r}\n" for i, (t, v) in enumerate(zip(hist.train, hist.val[1:])))
    )
    mse = one_step_mse(model, z_va, val.actions)
    base = identity_mse(z_va, val.actions, dcfg.window, dcfg.frame_skip)
    return f"held-out one-step MSE {mse:.6f} (identity {base:.6f}), best epoch {hist.best_epoch}"


def cmd_train_vae(args, cfg, out: Path) -> str:
    train, val = _split(_load_data(args, cfg), cfg)
    enc, _ = load_autoencoder(_require(args.encoder or args.models, "--encoder"))
    d = enc.latent_dim
    z_tr = enc.encode(train.observations).reshape(-1, d)
    z_va = enc.encode(val.observations).reshape(-1, d)
    vae, hist = train_vae(z_tr, cfg.vae(), z_va)
    save_vae(vae, _fresh(out / "vae"))
    return f"final ELBO {hist[-1]:.6f}, held-out mean score {float(np.mean(vae.score(z_va))):.6f}"


def cmd_plan(args, cfg, out: Path) -> str:
    art = _load_models(args)
    seed = ev.scene_seed(cfg["seed"], args.scene)
    start, goal = ev.make_scene(cfg["env.kind"], seed, cfg.policy(), cfg["eval.goal_actions"])
    pcfg = cfg.plan(args.workers)
    trace = mpc_run(
        art.model,
        art.vae,
        art.encoder,
        start,
        sim.render(goal, art.encoder.grid),
        pcfg,
        cfg["eval.budget"],
        cfg["eval.execute_per_replan"],
        goal.positions,
    )
    (out / "plan_diagnostics.csv").write_text(diagnostics_csv(trace.diagnostics))
    lines = ["step,start_x,start_y,end_x,end_y,novelty"]
    for i, a in enumerate(trace.actions):
        nov = trace.novelty[i] if i < len(trace.novelty) else float("nan")
        lines.append(",".join([str(i)] + [repr(float(v)) for v in a] + [repr(nov)]))
    (out / "actions.csv").write_text("\n".join(lines) + "\n")
    return f"scene {args.scene}: final chamfer {trace.chamfer_final:.6f}"


def _evaluate(args, cfg, out: Path, weights) -> str:
    art = _load_models(args)
    spec = cfg.experiment(weights)
    rows, secs = ev.evaluate(art, spec, args.workers)
    (out / "results.csv").write_text(ev.results_csv(rows))
    (out / "summary.txt").write_text(ev.summary_text(rows))
    (out / "timing.csv").write_text(
        "w,seed,seconds\n" + "".join(f"{r.w!r},{r.seed},{s!r}\n" for r, s in zip(rows, secs))
    )
    return ev.summary_text(rows).rstrip()


def cmd_eval(args, cfg, out: Path) -> str:
    return _evaluate(args, cfg, out, None)


def cmd_sweep(args, cfg, out: Path) -> str:
    weights = cfg["eval.sweep_weights"] if args.weights is None else tuple(float(v) for v in args.weights.split(","))
    return _evaluate(args, cfg, out, weights)


def cmd_ood_report(args, cfg, out: Path) -> str:
    art = _load_models(args)
    policy = cfg.policy()
    if policy.kind != "gapped":
        raise UsageError("ood-report needs a gapped policy (data.policy = gapped)")
    grid = art.encoder.grid
    fresh = ds.generate(cfg["env.kind"], policy, cfg["eval.ood_episodes"], cfg["data.frames"], cfg["seed"] + 5000, grid)
    ood = ev.gap_states(cfg["env.kind"], policy, cfg["eval.ood_scenes"], cfg["eval.ood_steps"], cfg["seed"], grid)
    rep = ev.ood_report(art.vae, art.encoder.encode(fresh.observations), art.encoder.encode(ood))
    (out / "ood.txt").write_text(rep.text())
    (out / "ood_histogram.csv").write_text(rep.histogram_csv())
    return f"median ID {rep.median_id:.6f}, median OOD {rep.median_ood:.6f}, ratio {rep.ratio:.3f}"


def cmd_strip(args, cfg, out: Path) -> str:
    data = _load_data(args, cfg)
    enc, dec = load_autoencoder(_require(args.encoder or args.models, "--encoder"))
    model = load_transition(_require(args.dynamics or args.models, "--dynamics"))
    if enc.grid != data.grid or model.latent_dim != enc.latent_dim:
        raise UsageError("encoder, dynamics and dataset dimensions disagree")
    if not 0 <= args.episode < len(data):
        raise UsageError(f"episode {args.episode} out of range (dataset has {len(data)})")
    raster = ev.rollout_strip(model, enc, dec, data[args.episode], out / f"strip-{args.episode}")
    return f"wrote {raster.shape[1]}x{raster.shape[0]} strip to {out}"


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a random-policy dataset"),
    "train-encoder": (cmd_train_encoder, "pretrain and freeze the image autoencoder"),
    "train-dynamics": (cmd_train_dynamics, "train the latent transition model"),
    "train-vae": (cmd_train_vae, "train the novelty VAE on training latents"),
    "plan": (cmd_plan, "run one MPC episode on a scene"),
    "eval": (cmd_eval, "compare novelty weights over scenes"),
    "sweep": (cmd_sweep, "evaluate the full weight grid"),
    "ood-report": (cmd_ood_report, "VAE score separation on gap-region states"),
    "strip": (cmd_strip, "observed vs predicted rollout image"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--env", choices=sim.KINDS)
    common.add_argument("--run-dir", help="output directory (default: runs/<time>-seed<N>)")
    common.add_argument("--runs-root", default="runs")
    common.add_argument("--workers", type=int, default=1, help="parallel workers; never changes results")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--models", help="directory holding encoder, dynamics and VAE checkpoints")
    common.add_argument("--encoder")
    common.add_argument("--dynamics")
    common.add_argument("--vae")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="noveltyplan", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "gen-data":
            p.add_argument("--episodes", type=int)
            p.add_argument("--frames", type=int)
        if name == "plan":
            p.add_argument("--scene", type=int, default=0)
            p.add_argument("--weight", type=float)
        if name == "sweep":
            p.add_argument("--weights", help="comma-separated list (default: eval.sweep_weights)")
        if name == "strip":
            p.add_argument("--episode", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        sys.stdout.write(describe())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s"
    )
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = _resolve_config(args)
        out = _run_dir(args, cfg)
        msg = COMMANDS[args.command][0](args, cfg, out)
    except (
        ConfigError,
        UsageError,
        ds.DatasetError,
        CheckpointError,
        ShapeError,
        ContractError,
        TrainingAborted,
        ev.ConfigurationError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
