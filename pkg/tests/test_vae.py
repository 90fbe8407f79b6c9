import numpy as np
import pytest

from noveltyplan import dataset as ds
from noveltyplan import vae as V
from noveltyplan.nn import ShapeError


def test_kl_examples():
    assert V.kl_standard_normal([0.0], [0.0]) == 0.0
    assert V.kl_standard_normal([1.0], [0.0]) == 0.5
    mu, lv = np.array([0.3, -1.2]), np.array([0.4, -0.7])
    expected = 0.5 * np.sum(mu**2 + np.exp(lv) - lv - 1)
    assert V.kl_standard_normal(mu, lv) == pytest.approx(expected, rel=1e-15)


def test_reconstruction_mse_examples():
    assert V.reconstruction_mse([1, 2, 3], [1, 2, 3]) == 0.0
    assert V.reconstruction_mse([0, 0, 0, 0], [1, 0, 0, 0]) == 0.25


def test_shapes_are_validated():
    vae = V.build_vae(6, V.VaeConfig(bottleneck=2, hidden=5))
    with pytest.raises(ShapeError):
        vae.score(np.zeros(5))
    with pytest.raises(ShapeError):
        V.NoveltyVae(vae.encoder, V.build_vae(6, V.VaeConfig(bottleneck=3)).decoder)


def test_score_deterministic_nonnegative_and_batched(rng):
    vae = V.build_vae(6, V.VaeConfig(bottleneck=2, hidden=5))
    z = rng.standard_normal((7, 6)).astype(np.float32)
    s = vae.score(z)
    assert s.shape == (7,) and np.all(s >= 0)
    assert isinstance(vae.score(z[0]), float)
    assert vae.score(z[0]) == pytest.approx(s[0], rel=1e-6)
    np.testing.assert_array_equal(s, vae.score(z))
    # reconstruction uses the posterior mean, never a sample
    mu = vae.encoder.forward(z)[:, :2]
    np.testing.assert_array_equal(vae.reconstruct(z), vae.decoder.forward(mu))


def test_beta_zero_loss_is_reconstruction(rng):
    vae = V.build_vae(5, V.VaeConfig(bottleneck=2, hidden=4, beta=0.0))
    z = rng.standard_normal((8, 5)).astype(np.float32)
    eps = rng.standard_normal((8, 2)).astype(np.float32)
    loss, recon, kl, _, _ = V.elbo_loss_and_grads(vae, z, eps)
    assert kl > 0 and loss == recon


def test_elbo_gradients_match_finite_differences(rng):
    vae = V.build_vae(5, V.VaeConfig(bottleneck=2, hidden=4, beta=0.3), dtype=np.float64)
    z = rng.standard_normal((6, 5))
    eps = rng.standard_normal((6, 2))
    _, _, _, g_enc, g_dec = V.elbo_loss_and_grads(vae, z, eps)
    params = vae.encoder.parameters() + vae.decoder.parameters()
    grads = g_enc + g_dec
    h = 1e-6
    worst = 0.0
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = V.elbo_loss_and_grads(vae, z, eps)[0]
            p[idx] = old - h
            down = V.elbo_loss_and_grads(vae, z, eps)[0]
            p[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    assert worst < 1e-5


def test_train_vae_needs_samples():
    with pytest.raises(ValueError, match="at least 100"):
        V.train_vae(np.zeros((50, 4)))


def test_trained_vae_separates_box_latents(quick_artifacts, granular_small):
    vae, enc = quick_artifacts.vae, quick_artifacts.encoder
    _, va = ds.split(granular_small, 0.1, 0)
    z_id = enc.encode(va.observations).reshape(-1, 64)
    z_tr = enc.encode(granular_small.observations).reshape(-1, 64)
    box = np.random.default_rng(0).uniform(z_tr.min(axis=0), z_tr.max(axis=0), (1000, 64))
    assert np.mean(vae.score(z_id)) < 0.5 * np.mean(vae.score(box))
    assert vae.encoder.frozen and vae.decoder.frozen


def test_validation_selection_keeps_best_epoch(rng):
    z = rng.standard_normal((300, 6)).astype(np.float32) * [3, 1, 1, 0.1, 0.1, 0.1]
    zv = rng.standard_normal((60, 6)).astype(np.float32) * [3, 1, 1, 0.1, 0.1, 0.1]
    cfg = V.VaeConfig(bottleneck=2, hidden=8, epochs=15)
    picked, hist = V.train_vae(z, cfg, zv)
    last, _ = V.train_vae(z, cfg)
    assert len(hist) == 15
    assert np.mean(picked.score(zv)) <= np.mean(last.score(zv))


def test_vae_round_trip(tmp_path, quick_artifacts, rng):
    V.save_vae(quick_artifacts.vae, tmp_path)
    back = V.load_vae(tmp_path)
    assert back.beta == quick_artifacts.vae.beta
    z = rng.standard_normal((4, 64)).astype(np.float32)
    np.testing.assert_array_equal(back.score(z), quick_artifacts.vae.score(z))
    text = (tmp_path / "vae.txt").read_text()
    assert "bottleneck: 8" in text and "beta: 0.001" in text
