"""Frozen observation encoder/decoder and the windowed latent transition model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, DenseNet, ShapeError, TrainingAborted, load_net, save_net

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class EncoderConfig:
    latent_dim: int = 64
    epochs: int = 150
    batch: int = 64
    lr: float = 3e-3
    weight_decay: float = 2e-6
    seed: int = 0


@dataclass
class DynamicsConfig:
    window: int = 1
    frame_skip: int = 1
    hidden: int = 128
    residual: bool = True
    epochs: int = 40
    batch: int = 64
    lr: float = 1e-3
    dropout: float = 0.0
    seed: int = 0


def _write_sidecar(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k}: {v}\n" for k, v in values.items()))


def _read_sidecar(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(":")
            out[k.strip()] = v.strip()
    return out


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()], dtype=np.float32)


def _fmt(arr) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


# --------------------------------------------------------------------------
# encoder / decoder
# --------------------------------------------------------------------------


@dataclass
class Encoder:
    """Image -> standardized latent. Immutable once built."""

    net: DenseNet
    grid: int
    mean: np.ndarray
    std: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.net.out_dim

    def encode(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32)
        single = img.ndim == 2
        if img.shape[-2:] != (self.grid, self.grid):
            raise ShapeError(f"expected {self.grid}x{self.grid} image, got {img.shape}")
        flat = img.reshape(-1, self.grid * self.grid)
        z = (self.net.forward(flat) - self.mean) / self.std
        z = z.astype(np.float32)
        return z[0] if single else z.reshape(img.shape[:-2] + (self.latent_dim,))

    __call__ = encode

    def raw(self, images) -> np.ndarray:
        return self.net.forward(np.asarray(images, dtype=np.float32).reshape(-1, self.grid**2))


@dataclass
class Decoder:
    """Standardized latent -> image, for visualising predictions."""

    net: DenseNet
    grid: int
    mean: np.ndarray
    std: np.ndarray

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        single = z.ndim == 1
        raw = z.reshape(-1, z.shape[-1]) * self.std + self.mean
        img = self.net.forward(raw).reshape(-1, self.grid, self.grid)
        return img[0] if single else img.reshape(z.shape[:-1] + (self.grid, self.grid))

    __call__ = decode


def pretrain_encoder(observations, config: EncoderConfig = EncoderConfig()) -> tuple[Encoder, Decoder, list]:
    """Train an image autoencoder by pixel MSE, then freeze both halves.

    The encoder is a single linear map G*G -> D and the decoder a linear map
    followed by a sigmoid. Deeper dense encoders memorise the few thousand
    training frames and generalise worse than this one. Returns the
    encoder, decoder and per-epoch mean training loss.
    """
    obs = np.asarray(observations, dtype=np.float32)
    grid = obs.shape[-1]
    x = obs.reshape(-1, grid * grid)
    if len(x) < 100:
        raise ValueError(f"need at least 100 observations to pretrain the encoder, got {len(x)}")
    d = config.latent_dim
    enc = DenseNet.create([grid * grid, d], ["identity"], seed=config.seed)
    dec = DenseNet.create([d, grid * grid], ["sigmoid"], seed=config.seed + 1)
    params = enc.parameters() + dec.parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), config.batch):
            xb = x[perm[s : s + config.batch]]
            z, c_enc = enc.forward_cached(xb)
            y, c_dec = dec.forward_cached(z)
            diff = y.astype(np.float64) - xb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingAborted(opt.step_count)
            g_dec, dz = dec.backward(c_dec, (2 * diff / diff.size).astype(np.float32))
            g_enc, _ = enc.backward(c_enc, dz)
            grads = g_enc + g_dec
            if config.weight_decay:
                # decoder only: encoder weights on never-lit pixels keep their
                # random init, so unseen content still moves the latent
                n = len(g_enc)
                grads = grads[:n] + [g + config.weight_decay * p for g, p in zip(grads[n:], params[n:])]
            opt.step(grads)
            total += loss * len(xb)
        history.append(total / len(x))
        log.debug("encoder epoch %d loss %.6f", epoch, history[-1])
    raw = enc.forward(x).astype(np.float64)
    mean = raw.mean(axis=0).astype(np.float32)
    std = np.maximum(raw.std(axis=0), STD_FLOOR).astype(np.float32)
    enc.freeze()
    dec.freeze()
    return Encoder(enc, grid, mean, std), Decoder(dec, grid, mean, std), history


def reconstruction_mse(encoder: Encoder, decoder: Decoder, observations) -> float:
    obs = np.asarray(observations, dtype=np.float32)
    rec = decoder.decode(encoder.encode(obs))
    return float(np.mean((rec.astype(np.float64) - obs) ** 2))


def save_autoencoder(encoder: Encoder, decoder: Decoder, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_net(encoder.net, directory / "encoder.ckpt")
    save_net(decoder.net, directory / "decoder.ckpt")
    _write_sidecar(
        directory / "encoder.txt",
        {
            "latent_dim": encoder.latent_dim,
            "grid": encoder.grid,
            "latent_mean": _fmt(encoder.mean),
            "latent_std": _fmt(encoder.std),
        },
    )
    return directory


def load_autoencoder(directory) -> tuple[Encoder, Decoder]:
    directory = Path(directory)
    side = _read_sidecar(directory / "encoder.txt")
    enc, _ = load_net(directory / "encoder.ckpt")
    dec, _ = load_net(directory / "decoder.ckpt")
    grid, d = int(side["grid"]), int(side["latent_dim"])
    mean, std = _floats(side["latent_mean"]), _floats(side["latent_std"])
    if enc.in_dim != grid * grid or enc.out_dim != d or dec.in_dim != d or dec.out_dim != grid * grid:
        raise ShapeError(f"{directory}: autoencoder dims do not match grid {grid} / latent {d}")
    if mean.shape != (d,) or std.shape != (d,):
        raise ShapeError(f"{directory}: normalization statistics are not {d}-dimensional")
    enc.freeze()
    dec.freeze()
    return Encoder(enc, grid, mean, std), Decoder(dec, grid, mean, std)


# --------------------------------------------------------------------------
# transition model
# --------------------------------------------------------------------------


@dataclass
class TransitionModel:
    """Predicts z_{i+1} from H latents and the H*F actions that follow them.

    With ``residual`` set, the net output is added to the most recent
    latent in the window; otherwise it is the prediction itself.
    """

    net: DenseNet
    latent_dim: int
    window: int = 1
    frame_skip: int = 1
    dropout: float = 0.0
    residual: bool = True

    def __post_init__(self):
        if self.net.in_dim != self.input_dim(self.latent_dim, self.window, self.frame_skip):
            raise ShapeError(
                f"net input {self.net.in_dim} != H*D + H*4*F = {self.input_dim(self.latent_dim, self.window, self.frame_skip)}"
            )
        if self.net.out_dim != self.latent_dim:
            raise ShapeError(f"net output {self.net.out_dim} != latent dim {self.latent_dim}")

    @staticmethod
    def input_dim(latent_dim: int, window: int, frame_skip: int) -> int:
        return window * latent_dim + window * 4 * frame_skip

    @property
    def n_actions(self) -> int:
        return self.window * self.frame_skip

    def _inputs(self, latents, actions) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(latents, dtype=np.float32)
        a = np.asarray(actions, dtype=np.float32)
        h, d = self.window, self.latent_dim
        if z.shape[-2:] != (h, d) or a.shape[-2:] != (self.n_actions, 4) or z.shape[:-2] != a.shape[:-2]:
            raise ShapeError(
                f"window needs latents (..., {h}, {d}) and actions (..., {self.n_actions}, 4); "
                f"got {z.shape} and {a.shape}"
            )
        b = int(np.prod(z.shape[:-2]))
        x = np.concatenate([z.reshape(b, h * d), a.reshape(b, self.n_actions * 4)], axis=1)
        return x, z.reshape(b, h, d)[:, -1]

    def predict(self, latents, actions) -> np.ndarray:
        """Single window (H, D) + (H*F, 4), or a batch with leading dims."""
        x, last = self._inputs(latents, actions)
        out = self.net.forward(x)
        if self.residual:
            out = last + out
        return out.reshape(np.shape(latents)[:-2] + (self.latent_dim,))

    __call__ = predict


def rollout(model: TransitionModel, latents, actions, past_actions=None) -> np.ndarray:
    """Autoregressive prediction of T latents from T*F actions.

    ``latents`` is the initial window (..., H, D); ``past_actions`` holds the
    (H-1)*F actions already taken inside that window (zeros if omitted).
    Leading batch dimensions are carried through.
    """
    z = np.asarray(latents, dtype=np.float32)
    a = np.asarray(actions, dtype=np.float32)
    f, h = model.frame_skip, model.window
    batch = z.shape[:-2]
    if a.shape[-1] != 4 or a.shape[-2] % f:
        raise ShapeError(f"action count {a.shape[-2]} is not divisible by frame skip {f}")
    steps = a.shape[-2] // f
    if past_actions is None:
        past = np.zeros(batch + ((h - 1) * f, 4), dtype=np.float32)
    else:
        past = np.asarray(past_actions, dtype=np.float32)
    preds = []
    for t in range(steps):
        acts = np.concatenate([past, a[..., t * f : (t + 1) * f, :]], axis=-2)
        nxt = model.predict(z, acts)
        preds.append(nxt)
        z = np.concatenate([z[..., 1:, :], nxt[..., None, :]], axis=-2)
        past = acts[..., f:, :]
    if not preds:
        return np.zeros(batch + (0, model.latent_dim), dtype=np.float32)
    return np.stack(preds, axis=-2)


def make_windows(latents, actions, window: int, frame_skip: int):
    """Teacher-forced training windows from (E, T+1, D) latents and (E, T, 4) actions."""
    latents = np.asarray(latents, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    e, t1, d = latents.shape
    span = window * frame_skip
    if span > t1 - 1:
        raise ValueError(f"window H*F = {span} is longer than the {t1 - 1}-step episodes")
    zs, acts, targets = [], [], []
    for t in range(t1 - span):
        zs.append(latents[:, t : t + span : frame_skip])
        acts.append(actions[:, t : t + span])
        targets.append(latents[:, t + span])
    zs = np.stack(zs, axis=1).reshape(-1, window, d)
    acts = np.stack(acts, axis=1).reshape(-1, span, 4)
    targets = np.stack(targets, axis=1).reshape(-1, d)
    return zs, acts, targets


@dataclass
class TrainingHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)  # index 0 is before training
    best_epoch: int | None = None


def train_transition(
    latents,
    actions,
    config: DynamicsConfig = DynamicsConfig(),
    val_latents=None,
    val_actions=None,
) -> tuple[TransitionModel, TrainingHistory]:
    """Teacher-forced next-latent regression.

    The output layer starts at zero, so the untrained model is the identity
    predictor. With validation episodes, the parameters from the epoch with
    the lowest held-out one-step MSE are kept.
    """
    zs, acts, targets = make_windows(latents, actions, config.window, config.frame_skip)
    d = zs.shape[-1]
    h = config.hidden
    n_in = TransitionModel.input_dim(d, config.window, config.frame_skip)
    net = DenseNet.create([n_in, h, h, d], ["tanh", "tanh", "identity"], seed=config.seed)
    if config.residual:
        net.layers[-1].weight[:] = 0
    model = TransitionModel(net, d, config.window, config.frame_skip, config.dropout, config.residual)
    x, last = model._inputs(zs, acts)
    resid = targets - last if config.residual else targets
    opt = Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    hist = TrainingHistory()
    best = None
    if val_latents is not None:
        hist.val.append(one_step_mse(model, val_latents, val_actions))
        best = (hist.val[0], [p.copy() for p in net.parameters()])
    for epoch in range(config.epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), config.batch):
            idx = perm[s : s + config.batch]
            xb = x[idx]
            if config.dropout > 0:
                keep = rng.uniform(size=xb.shape) >= config.dropout
                xb = xb * keep / np.float32(1 - config.dropout)
            pred, cache = net.forward_cached(xb)
            diff = pred.astype(np.float64) - resid[idx]
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingAborted(opt.step_count)
            grads, _ = net.backward(cache, (2 * diff / diff.size).astype(np.float32))
            opt.step(grads)
            total += loss * len(idx)
        hist.train.append(total / len(x))
        if best is not None:
            hist.val.append(one_step_mse(model, val_latents, val_actions))
            if hist.val[-1] < best[0]:
                best = (hist.val[-1], [p.copy() for p in net.parameters()])
            log.info("dynamics epoch %d train %.6f val %.6f", epoch, hist.train[-1], hist.val[-1])
        else:
            log.info("dynamics epoch %d train %.6f", epoch, hist.train[-1])
    if best is not None:
        for p, saved in zip(net.parameters(), best[1]):
            p[...] = saved
        hist.best_epoch = int(np.argmin(hist.val)) - 1
    net.freeze()
    return model, hist


def one_step_mse(model: TransitionModel, latents, actions) -> float:
    zs, acts, targets = make_windows(latents, actions, model.window, model.frame_skip)
    pred = model.predict(zs, acts)
    return float(np.mean((pred.astype(np.float64) - targets) ** 2))


def identity_mse(latents, actions, window: int = 1, frame_skip: int = 1) -> float:
    """Baseline that predicts the most recent latent in the window."""
    zs, _, targets = make_windows(latents, actions, window, frame_skip)
    return float(np.mean((zs[:, -1].astype(np.float64) - targets) ** 2))


def k_step_mse(model: TransitionModel, latents, actions, k: int) -> float:
    """Open-loop k-step rollout error from every admissible start (H=1 windows)."""
    latents = np.asarray(latents, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    f, h = model.frame_skip, model.window
    span = k * f
    errs = []
    for t in range((h - 1) * f, latents.shape[1] - span):
        window = latents[:, t - (h - 1) * f : t + 1 : f]
        past = actions[:, t - (h - 1) * f : t]
        pred = rollout(model, window, actions[:, t : t + span], past)
        errs.append(np.mean((pred[:, -1].astype(np.float64) - latents[:, t + span]) ** 2))
    return float(np.mean(errs))


def save_transition(model: TransitionModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_net(model.net, directory / "dynamics.ckpt")
    _write_sidecar(
        directory / "dynamics.txt",
        {
            "latent_dim": model.latent_dim,
            "window": model.window,
            "frame_skip": model.frame_skip,
            "dropout": repr(model.dropout),
            "residual": int(model.residual),
        },
    )
    return directory


def load_transition(directory) -> TransitionModel:
    directory = Path(directory)
    side = _read_sidecar(directory / "dynamics.txt")
    net, _ = load_net(directory / "dynamics.ckpt")
    net.freeze()
    return TransitionModel(
        net,
        int(side["latent_dim"]),
        int(side["window"]),
        int(side["frame_skip"]),
        float(side["dropout"]),
        bool(int(side["residual"])),
    )
