import numpy as np
import pytest

from noveltyplan import dataset as ds
from noveltyplan import planner, sim
from noveltyplan import world_model as wm
from noveltyplan.nn import DenseNet, ShapeError


def test_input_dim_arithmetic():
    assert wm.TransitionModel.input_dim(32, 1, 1) == 36
    assert wm.TransitionModel.input_dim(32, 2, 2) == 80


def test_transition_model_validates_net():
    net = DenseNet.create([35, 8, 32], ["tanh", "identity"])
    with pytest.raises(ShapeError):
        wm.TransitionModel(net, 32)


def _model(d=6, h=2, f=2, seed=0):
    net = DenseNet.create([wm.TransitionModel.input_dim(d, h, f), 16, d], ["tanh", "identity"], seed=seed)
    for layer in net.layers:
        layer.weight[...] *= 2  # visible dynamics, not a near-identity map
    return wm.TransitionModel(net.freeze(), d, h, f, dropout=0.3)


def test_predict_pure_and_shaped(rng):
    m = _model()
    z = rng.standard_normal((2, 6)).astype(np.float32)
    a = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
    out = m.predict(z, a)
    assert out.shape == (6,)
    np.testing.assert_array_equal(out, m.predict(z, a))  # dropout is off at inference
    with pytest.raises(ShapeError):
        m.predict(z[:1], a)


def test_rollout_equals_chained_predicts(rng):
    m = _model()
    z = rng.standard_normal((2, 6)).astype(np.float32)
    past = rng.uniform(-1, 1, (2, 4)).astype(np.float32)
    acts = rng.uniform(-1, 1, (6, 4)).astype(np.float32)
    out = wm.rollout(m, z, acts, past)
    assert out.shape == (3, 6)
    window, hist = z.copy(), np.concatenate([past, acts])
    for t in range(3):
        nxt = m.predict(window, hist[2 * t : 2 * t + 4])
        np.testing.assert_array_equal(out[t], nxt)
        window = np.stack([window[1], nxt])
    one = wm.rollout(m, z, acts[:2], past)
    np.testing.assert_array_equal(one[0], m.predict(z, np.concatenate([past, acts[:2]])))


def test_rollout_edge_cases(rng):
    m = _model()
    z = rng.standard_normal((2, 6)).astype(np.float32)
    assert wm.rollout(m, z, np.zeros((0, 4))).shape == (0, 6)
    with pytest.raises(ShapeError):
        wm.rollout(m, z, np.zeros((3, 4)))


def test_make_windows_rejects_long_windows():
    z = np.zeros((2, 5, 3))
    a = np.zeros((2, 4, 4))
    with pytest.raises(ValueError, match="longer"):
        wm.make_windows(z, a, 3, 2)
    zs, acts, tgt = wm.make_windows(z, a, 2, 1)
    assert zs.shape == (2 * 3, 2, 3) and acts.shape == (6, 2, 4) and tgt.shape == (6, 3)


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------


def test_encoder_purity_and_batching(quick_artifacts, granular_small):
    enc = quick_artifacts.encoder
    img = granular_small.observations[0, 0]
    np.testing.assert_array_equal(enc.encode(img), enc.encode(img))
    np.testing.assert_array_equal(enc.encode(img[None])[0], enc.encode(img))
    zero = np.zeros((32, 32), np.float32)
    assert np.all(np.isfinite(enc.encode(zero)))
    np.testing.assert_array_equal(enc.encode(zero), enc.encode(zero.copy()))
    with pytest.raises(ShapeError):
        enc.encode(np.zeros((16, 16)))


def test_encoder_injective_on_training_images(quick_artifacts, granular_small):
    obs = granular_small.observations[:30].reshape(-1, 32, 32)
    distinct_imgs = np.unique(obs.reshape(len(obs), -1), axis=0)
    z = quick_artifacts.encoder.encode(distinct_imgs.reshape(-1, 32, 32))
    assert len(np.unique(z, axis=0)) == len(distinct_imgs)


def test_identical_images_identical_latents(quick_artifacts):
    s = sim.reset("granular", 11)
    a, b = sim.render(s), sim.render(sim.ParticleState(s.positions.copy(), "granular"))
    np.testing.assert_array_equal(quick_artifacts.encoder.encode(a), quick_artifacts.encoder.encode(b))


def test_pretrained_autoencoder_beats_mean_image(granular_small):
    tr, va = ds.split(granular_small, 0.1, 0)
    enc, dec, hist = wm.pretrain_encoder(tr.observations)
    assert enc.net.frozen and dec.net.frozen
    mean_img = tr.observations.reshape(-1, 32, 32).mean(axis=0)
    base_val = float(np.mean((va.observations - mean_img) ** 2))
    base_tr = float(np.mean((tr.observations - mean_img) ** 2))
    assert wm.reconstruction_mse(enc, dec, va.observations) < 0.5 * base_val
    assert wm.reconstruction_mse(enc, dec, tr.observations) < base_tr
    assert hist[-1] < hist[0]


def test_pretrain_needs_enough_images():
    with pytest.raises(ValueError):
        wm.pretrain_encoder(np.zeros((10, 32, 32), np.float32))


def test_autoencoder_round_trip(tmp_path, quick_artifacts):
    wm.save_autoencoder(quick_artifacts.encoder, quick_artifacts.decoder, tmp_path)
    enc, dec = wm.load_autoencoder(tmp_path)
    img = sim.render(sim.reset("granular", 0))
    np.testing.assert_array_equal(enc.encode(img), quick_artifacts.encoder.encode(img))
    z = enc.encode(img)
    np.testing.assert_array_equal(dec.decode(z), quick_artifacts.decoder.decode(z))
    side = (tmp_path / "encoder.txt").read_text()
    for key in ("latent_dim", "grid", "mean", "std"):
        assert key in side


# --------------------------------------------------------------------------
# transition training
# --------------------------------------------------------------------------


def _constant_fixture(encoder, episodes, seed):
    """Episodes whose pushes happen in a corner, far from every particle."""
    obs = []
    for i in range(episodes):
        s = sim.reset("granular", seed + i)
        frames = [sim.render(s)]
        for _ in range(6):
            s = sim.step(s, [-1, -1, -0.95, -1])
            frames.append(sim.render(s))
        obs.append(frames)
    z = encoder.encode(np.array(obs))
    acts = np.tile(np.array([-1, -1, -0.95, -1], np.float32), (episodes, 6, 1))
    return z, acts


@pytest.mark.parametrize("residual", [True, False])
def test_constant_state_fixture_is_learned(quick_artifacts, residual):
    enc = quick_artifacts.encoder
    z_tr, a_tr = _constant_fixture(enc, 40, 500)
    z_va, a_va = _constant_fixture(enc, 8, 900)
    assert np.all(z_tr == z_tr[:, :1])  # the fixture really is constant
    cfg = wm.DynamicsConfig(residual=residual, epochs=5 if residual else 60)
    model, _ = wm.train_transition(z_tr, a_tr, cfg, z_va, a_va)
    if residual:
        assert wm.one_step_mse(model, z_va, a_va) < 1e-4
        pred = model.predict(z_va[0, :1], a_va[0, :1])
        assert np.max(np.abs(pred - z_va[0, 0])) < 0.01
    else:
        # a plain regressor must learn the identity map from 40 scenes; it
        # explains most of the variance but stays far above 1e-4 on new scenes
        assert wm.one_step_mse(model, z_va, a_va) < 0.25 * float(np.var(z_va))


def test_transition_beats_identity_and_keeps_encoder_frozen(quick_artifacts, granular_small):
    art = quick_artifacts
    before = art.encoder.net.checksum()
    tr, va = ds.split(granular_small, 0.1, 0)
    z_tr, z_va = art.encoder.encode(tr.observations), art.encoder.encode(va.observations)
    model, hist = wm.train_transition(z_tr, tr.actions, wm.DynamicsConfig(epochs=6), z_va, va.actions)
    assert len(hist.train) == 6 and len(hist.val) == 7
    assert wm.one_step_mse(model, z_va, va.actions) < wm.identity_mse(z_va, va.actions)
    # compounding error: 10-step rollouts are worse than one step
    assert wm.k_step_mse(model, z_va, va.actions, 10) >= wm.one_step_mse(model, z_va, va.actions)
    planner.plan(model, art.vae, z_va[0, 0], z_va[0, 5], planner.PlanConfig(samples=32, elites=4, iterations=2))
    assert art.encoder.net.checksum() == before


def test_window_and_frame_skip_training(quick_artifacts, granular_small):
    z = quick_artifacts.encoder.encode(granular_small.observations[:20])
    cfg = wm.DynamicsConfig(window=2, frame_skip=2, epochs=2)
    model, _ = wm.train_transition(z, granular_small.actions[:20], cfg)
    assert model.net.in_dim == 2 * 64 + 2 * 4 * 2
    assert model.n_actions == 4


def test_transition_round_trip(tmp_path, quick_artifacts, rng):
    m = quick_artifacts.model
    wm.save_transition(m, tmp_path)
    back = wm.load_transition(tmp_path)
    assert (back.window, back.frame_skip, back.residual) == (m.window, m.frame_skip, m.residual)
    z = rng.standard_normal((1, 64)).astype(np.float32)
    a = rng.uniform(-1, 1, (1, 4)).astype(np.float32)
    np.testing.assert_array_equal(back.predict(z, a), m.predict(z, a))
