"""VAE over world-model latents; reconstruction MSE is the novelty score."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Adam, DenseNet, ShapeError, TrainingAborted, load_net, save_net

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    bottleneck: int = 8
    hidden: int = 64
    beta: float = 1e-3
    epochs: int = 200
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0


def kl_standard_normal(mu, logvar) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1, axis=-1)


def reconstruction_mse(y, z) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.mean((y - z) ** 2, axis=-1)


@dataclass
class NoveltyVae:
    encoder: DenseNet  # D -> 2M  (mu, logvar)
    decoder: DenseNet  # M -> D
    beta: float = 1e-3

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.decoder.in_dim:
            raise ShapeError(
                f"encoder emits {self.encoder.out_dim} values, decoder expects a {self.decoder.in_dim}-dim code"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ShapeError("decoder output does not match encoder input")

    @property
    def latent_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def bottleneck(self) -> int:
        return self.decoder.in_dim

    def reconstruct(self, z) -> np.ndarray:
        """Decode the posterior mean; no sampling."""
        z = np.asarray(z, dtype=np.float32)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"expected latent dim {self.latent_dim}, got {z.shape[-1]}")
        flat = z.reshape(-1, self.latent_dim)
        mu = self.encoder.forward(flat)[:, : self.bottleneck]
        return self.decoder.forward(mu).reshape(z.shape)

    def score(self, z) -> np.ndarray | float:
        """Per-latent reconstruction MSE; scalar for a single vector."""
        out = reconstruction_mse(self.reconstruct(z), z)
        return float(out) if np.ndim(out) == 0 else out

    __call__ = score


def elbo_loss_and_grads(vae: NoveltyVae, z: np.ndarray, eps: np.ndarray):
    """Batch-mean of recon MSE + beta * KL with a fixed reparameterization noise.

    Returns (loss, recon, kl, encoder grads, decoder grads).
    """
    m = vae.bottleneck
    b = len(z)
    stats, c_enc = vae.encoder.forward_cached(z)
    mu, logvar = stats[:, :m], stats[:, m:]
    sigma = np.exp(0.5 * logvar)
    code = mu + sigma * eps
    y, c_dec = vae.decoder.forward_cached(code)
    diff = y.astype(np.float64) - z
    recon = float(np.mean(diff * diff))
    kl = float(np.mean(kl_standard_normal(mu, logvar)))
    loss = recon + vae.beta * kl
    g_dec, dcode = vae.decoder.backward(c_dec, (2 * diff / diff.size).astype(z.dtype))
    dmu = dcode + vae.beta * mu / b
    dlogvar = dcode * eps * 0.5 * sigma + vae.beta * 0.5 * (np.exp(logvar) - 1) / b
    g_enc, _ = vae.encoder.backward(c_enc, np.concatenate([dmu, dlogvar], axis=1).astype(z.dtype))
    return loss, recon, kl, g_enc, g_dec


def build_vae(latent_dim: int, config: VaeConfig = VaeConfig(), dtype=np.float32) -> NoveltyVae:
    h, m = config.hidden, config.bottleneck
    enc = DenseNet.create([latent_dim, h, 2 * m], ["tanh", "identity"], seed=config.seed, dtype=dtype)
    dec = DenseNet.create([m, h, latent_dim], ["tanh", "identity"], seed=config.seed + 1, dtype=dtype)
    return NoveltyVae(enc, dec, config.beta)


def train_vae(latents, config: VaeConfig = VaeConfig(), val_latents=None) -> tuple[NoveltyVae, list]:
    """Fit by minibatch Adam on the reparameterized ELBO.

    With ``val_latents`` the parameters of the epoch with the lowest mean
    validation score are kept; otherwise the last epoch's.
    """
    z = np.asarray(latents, dtype=np.float32)
    if len(z) < 100:
        raise ValueError(f"need at least 100 latents to train the VAE, got {len(z)}")
    vae = build_vae(z.shape[1], config)
    opt = Adam(vae.encoder.parameters() + vae.decoder.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    zv = None if val_latents is None else np.asarray(val_latents, dtype=np.float32)
    best = (np.inf, None)
    for epoch in range(config.epochs):
        perm = rng.permutation(len(z))
        total = 0.0
        for s in range(0, len(z), config.batch):
            zb = z[perm[s : s + config.batch]]
            eps = rng.standard_normal((len(zb), config.bottleneck)).astype(np.float32)
            loss, _, _, g_enc, g_dec = elbo_loss_and_grads(vae, zb, eps)
            if not np.isfinite(loss):
                raise TrainingAborted(opt.step_count)
            opt.step(g_enc + g_dec)
            total += loss * len(zb)
        history.append(total / len(z))
        log.debug("vae epoch %d loss %.6f", epoch, history[-1])
        if zv is not None:
            v = float(np.mean(vae.score(zv)))
            if v < best[0]:
                best = (v, [p.copy() for p in vae.encoder.parameters() + vae.decoder.parameters()])
    if best[1] is not None:
        for p, b in zip(vae.encoder.parameters() + vae.decoder.parameters(), best[1]):
            p[...] = b
    vae.encoder.freeze()
    vae.decoder.freeze()
    return vae, history


def save_vae(vae: NoveltyVae, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_net(vae.encoder, directory / "vae_encoder.ckpt")
    save_net(vae.decoder, directory / "vae_decoder.ckpt")
    (directory / "vae.txt").write_text(
        f"latent_dim: {vae.latent_dim}\nbottleneck: {vae.bottleneck}\nbeta: {vae.beta!r}\n"
    )
    return directory


def load_vae(directory) -> NoveltyVae:
    directory = Path(directory)
    side = {}
    for line in (directory / "vae.txt").read_text().splitlines():
        k, _, v = line.partition(":")
        side[k.strip()] = v.strip()
    enc, _ = load_net(directory / "vae_encoder.ckpt")
    dec, _ = load_net(directory / "vae_decoder.ckpt")
    vae = NoveltyVae(enc.freeze(), dec.freeze(), float(side["beta"]))
    if vae.bottleneck != int(side["bottleneck"]) or vae.latent_dim != int(side["latent_dim"]):
        raise ShapeError(f"{directory}: VAE checkpoint does not match its sidecar")
    return vae
