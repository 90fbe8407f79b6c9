import pytest

from noveltyplan import cli
from noveltyplan import evaluate as ev
from noveltyplan.config import KEYS, ConfigError, RunConfig, describe, validate

TINY = """
# small enough for a unit test
data.episodes = 30
data.frames = 8
encoder.epochs = 5
dynamics.epochs = 3
vae.epochs = 5
plan.samples = 16
plan.elites = 4
plan.iterations = 2
plan.horizon = 2
eval.scenes = 2
eval.budget = 2
eval.ood_scenes = 3
eval.ood_steps = 5
eval.ood_episodes = 3
"""


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig({"plan.sample": "3"})
    with pytest.raises(ConfigError, match="cfg.txt:2"):
        RunConfig.loads("seed = 1\nnope = 2\n", "cfg.txt")
    with pytest.raises(ConfigError):
        RunConfig.loads("seed 1\n")
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig({"seed": "x"})


def test_round_trip_and_describe():
    cfg = RunConfig.loads(TINY + "eval.weights = 0, 0.5\ndynamics.residual = false\n")
    back = RunConfig.loads(cfg.dumps())
    assert back == cfg
    assert back["eval.weights"] == (0.0, 0.5) and back["dynamics.residual"] is False
    assert RunConfig.loads(describe()) == RunConfig()
    assert len(cfg.dumps().splitlines()) == len(KEYS)


def test_typed_views():
    cfg = RunConfig.loads(TINY + "seed = 4\n")
    assert cfg.plan(3).workers == 3 and cfg.plan().seed == 4
    assert cfg.encoder().epochs == 5 and cfg.dynamics().seed == 4
    spec = cfg.experiment(ev.WEIGHT_GRID)
    assert spec.weights == ev.WEIGHT_GRID and spec.scenes == 2


def test_validate_rejects_bad_values():
    for text in ("env.kind = water", "data.policy = biased", "plan.elites = 500", "data.gap_lo = 0 0 0"):
        with pytest.raises(ConfigError):
            validate(RunConfig.loads(text))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.txt"
    conf.write_text(TINY)
    run = root / "run"
    base = ["--config", str(conf), "--run-dir", str(run)]
    models = ["--encoder", str(run / "encoder"), "--dynamics", str(run / "dynamics"), "--vae", str(run / "vae")]
    assert cli.main(["gen-data", *base]) == 0
    data = ["--data", str(run / "data")]
    for cmd in ("train-encoder", "train-dynamics", "train-vae"):
        assert cli.main([cmd, *base, *data, "--encoder", str(run / "encoder")]) == 0
    return root, conf, run, data, models


def test_pipeline_outputs(pipeline):
    _, _, run, _, _ = pipeline
    for name in ("data", "encoder", "dynamics", "vae", "dynamics_curve.csv", "config-gen-data.txt"):
        assert (run / name).exists()


def test_eval_bytes_reproducible_across_workers(pipeline):
    root, conf, _, data, models = pipeline
    outs = []
    for i, workers in enumerate((1, 2, 1)):
        out = root / f"eval{i}"
        args = ["eval", "--config", str(conf), "--run-dir", str(out), *data, *models, "--workers", str(workers)]
        assert cli.main(args) == 0
        outs.append((out / "results.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    rows = ev.read_results(outs[0].decode())
    assert len(rows) == 4 and {r.w for r in rows} == {0.0, 0.25}


def test_sweep_grid(pipeline):
    root, conf, _, data, models = pipeline
    out = root / "sweep"
    assert cli.main(["sweep", "--config", str(conf), "--run-dir", str(out), *data, *models, "--set", "eval.scenes=5"]) == 0
    rows = ev.read_results((out / "results.csv").read_text())
    assert len(rows) == 25
    assert sorted({r.w for r in rows}) == list(ev.WEIGHT_GRID)
    assert len((out / "summary.txt").read_text().splitlines()) == 5
    assert len((out / "timing.csv").read_text().splitlines()) == 26


def test_plan_ood_and_strip(pipeline):
    root, conf, _, data, models = pipeline
    out = root / "misc"
    common = ["--config", str(conf), "--run-dir", str(out), *data, *models]
    assert cli.main(["plan", *common, "--weight", "0.5", "--scene", "1"]) == 0
    lines = (out / "actions.csv").read_text().splitlines()
    assert lines[0] == "step,start_x,start_y,end_x,end_y,novelty" and len(lines) == 3
    assert (out / "plan_diagnostics.csv").read_text().startswith("replan,iteration,")
    assert cli.main(["ood-report", *common]) == 0
    assert (out / "ood.txt").read_text().startswith("median_id: ")
    assert cli.main(["strip", *common, "--episode", "2"]) == 0
    assert (out / "strip-2.png").exists()


def test_error_exit_codes(pipeline, capsys):
    root, conf, run, data, models = pipeline
    base = ["--config", str(conf), "--run-dir", str(root / "errs")]
    assert cli.main(["eval", *base, "--set", "plan.bogus=1", *models]) == 1
    assert cli.main(["eval", *base, "--models", str(root / "missing")]) == 1
    assert cli.main(["gen-data", "--config", str(conf), "--run-dir", str(run)]) == 1  # refuses to overwrite
    assert cli.main(["strip", *base, *data, *models, "--episode", "999"]) == 1
    assert cli.main(["eval", *base, *models, "--workers", "0"]) == 2
    assert cli.main([]) == 2
    err = capsys.readouterr().err
    assert err.count("error: ") == 5 and "Traceback" not in err
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])


def test_print_config(capsys):
    assert cli.main(["--print-config"]) == 0
    assert RunConfig.loads(capsys.readouterr().out) == RunConfig()
