"""Small dense-network substrate with closed-form backprop.

Parameters and activations are float32; losses accumulate in float64.
Gradient checks run on a float64 copy of the network, since central
differences at eps=1e-5 are meaningless in single precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input does not match the network's dimensions."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class TrainingAborted(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


def _activate(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0)
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(pre)
        pos = pre >= 0
        out[pos] = 1 / (1 + np.exp(-pre[pos]))
        e = np.exp(pre[~pos])
        out[~pos] = e / (1 + e)
        return out
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(out)
    if kind == "relu":
        return (pre > 0).astype(out.dtype)
    if kind == "tanh":
        return 1 - out * out
    if kind == "sigmoid":
        return out * (1 - out)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    """Per-layer inputs, pre-activations and outputs of one forward pass."""

    inputs: list
    pre: list
    outputs: list
    batched: bool


class DenseNet:
    """Feed-forward stack of dense layers.

    ``forward`` accepts either a single vector or a (batch, in) matrix and
    returns the matching shape. The network holds no per-call state, so a
    frozen net can be shared between threads.
    """

    def __init__(self, layers: Sequence[Layer], seed: int = 0):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {layers[i].in_dim} inputs but layer "
                    f"{i - 1} produces {layers[i - 1].out_dim}"
                )
        self.layers = list(layers)
        self.seed = int(seed)
        self._frozen = False

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        seed: int = 0,
        dtype=np.float32,
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            s = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-s, s, size=(n_out, n_in)).astype(dtype)
            layers.append(Layer(w, np.zeros(n_out, dtype=dtype), act))
        return cls(layers, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def frozen(self) -> bool:
        return self._frozen

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "DenseNet":
        for p in self.parameters():
            p.flags.writeable = False
        self._frozen = True
        return self

    def copy(self, dtype=None) -> "DenseNet":
        dtype = dtype or self.dtype
        layers = [
            Layer(l.weight.astype(dtype, copy=True), l.bias.astype(dtype, copy=True), l.activation)
            for l in self.layers
        ]
        return type(self)(layers, seed=self.seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=self.dtype)
        batched = x.ndim == 2
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got shape {np.shape(x)}")
        return x, batched

    def forward(self, x) -> np.ndarray:
        h, batched = self._as_batch(x)
        for layer in self.layers:
            h = _activate(layer.activation, h @ layer.weight.T + layer.bias)
        return h if batched else h[0]

    __call__ = forward

    def forward_cached(self, x) -> tuple[np.ndarray, ForwardCache]:
        h, batched = self._as_batch(x)
        cache = ForwardCache([], [], [], batched)
        for layer in self.layers:
            cache.inputs.append(h)
            pre = h @ layer.weight.T + layer.bias
            h = _activate(layer.activation, pre)
            cache.pre.append(pre)
            cache.outputs.append(h)
        return (h if batched else h[0]), cache

    def backward(
        self, cache: ForwardCache | None, upstream
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)``.

        Returns parameter gradients in ``parameters()`` order (summed over
        the batch) and the gradient with respect to the input.
        """
        if cache is None or len(cache.inputs) != len(self.layers):
            raise ContractError("backward called without a matching forward_cached pass")
        g = np.asarray(upstream, dtype=self.dtype)
        if not cache.batched:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise ShapeError(
                f"upstream gradient shape {g.shape} != output shape {cache.outputs[-1].shape}"
            )
        grads: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _activation_grad(layer.activation, cache.pre[i], cache.outputs[i])
            grads.append(g.sum(axis=0))
            grads.append(g.T @ cache.inputs[i])
            g = g @ layer.weight
        grads.reverse()
        return grads, (g if cache.batched else g[0])


@dataclass
class Adam:
    """Adam optimizer state bound to a list of parameter arrays."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(self.step_count, "gradient")
        self.step_count += 1
        if self.lr == 0:
            return
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all elements; returns (loss, d loss / d pred)."""
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff))
    return loss, (2 * diff / diff.size).astype(pred.dtype)


LossFn = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def train_step(net: DenseNet, opt: Adam, inputs, targets, loss: str | LossFn = "mse") -> float:
    """One optimizer step on a batch; returns the loss before the update."""
    if net.frozen:
        raise ContractError("cannot train a frozen network")
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if len(inputs) == 0:
        raise ShapeError("empty batch")
    if len(inputs) != len(targets):
        raise ShapeError(f"{len(inputs)} inputs vs {len(targets)} targets")
    loss_fn = mse_loss if loss == "mse" else loss
    pred, cache = net.forward_cached(inputs)
    value, dpred = loss_fn(pred, targets)
    if not np.isfinite(value):
        raise TrainingAborted(opt.step_count)
    grads, _ = net.backward(cache, dpred)
    opt.step(grads)
    return value


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------


def _activation_diff(kind: str, mid: np.ndarray, half: np.ndarray) -> np.ndarray:
    """act(mid + half) - act(mid - half) without subtracting two nearly equal numbers."""
    if kind == "identity":
        return 2 * half
    if kind == "relu":
        hi, lo = mid + half, mid - half
        direct = np.maximum(hi, 0) - np.maximum(lo, 0)
        return np.where((hi > 0) & (lo > 0), 2 * half, direct)
    with np.errstate(over="ignore"):
        if kind == "tanh":
            return np.sinh(2 * half) / (np.cosh(mid + half) * np.cosh(mid - half))
        if kind == "sigmoid":
            # sigmoid(x) = (1 + tanh(x / 2)) / 2
            return np.sinh(half) / (2 * np.cosh((mid + half) / 2) * np.cosh((mid - half) / 2))
    raise ValueError(f"unknown activation {kind!r}")


def _tail_difference(net: DenseNet, start: int, mid: np.ndarray, half: np.ndarray) -> np.ndarray:
    """out(+) - out(-) for pre-activations ``mid +- half`` of layer ``start``; arrays are (P, B, out).

    Both the midpoint and the half-difference are pushed through the
    remaining layers, so tiny differences keep their relative precision.
    """
    for k, layer in enumerate(net.layers[start:]):
        if k:
            # one 2-D product; stacked 3-D matmul is far slower
            shape, w = mid.shape[:-1] + (layer.weight.shape[0],), layer.weight.T
            mid = (mid.reshape(-1, w.shape[0]) @ w + layer.bias).reshape(shape)
            half = (half.reshape(-1, w.shape[0]) @ w).reshape(shape)
        diff = _activation_diff(layer.activation, mid, half)
        if start + k == len(net.layers) - 1:
            return diff
        plus = _activate(layer.activation, mid + half)
        mid, half = plus - diff / 2, diff / 2
    raise AssertionError("unreachable")


def grad_check(
    net: DenseNet,
    x,
    eps: float = 1e-5,
    upstream=None,
    seed: int = 0,
    chunk: int = 4096,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar checked is ``sum(upstream * net(x))`` with a seeded Gaussian
    ``upstream`` unless one is given. Every parameter is perturbed; the
    perturbation of layer l only changes its pre-activation, so all
    perturbations of a layer are propagated through the remaining layers
    as one stacked batch.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    # the copy keeps the subclass, so an overridden backward is what gets checked
    net64 = net.copy(np.float64)
    xb, batched = net64._as_batch(x)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal((len(xb), net.out_dim))
    up = np.asarray(upstream, dtype=np.float64).reshape(len(xb), net.out_dim)

    _, cache = net64.forward_cached(xb)
    for i, out in enumerate(cache.outputs):
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite activation in layer {i}")
    grads, _ = net64.backward(cache, up)

    worst = 0.0
    for li, layer in enumerate(net64.layers):
        a = cache.inputs[li]  # (B, in)
        pre = cache.pre[li]  # (B, out)
        n_out, n_in = layer.weight.shape
        gw, gb = grads[2 * li], grads[2 * li + 1]
        # weights in row-major order, then biases (column -1)
        rows_all = np.concatenate([np.repeat(np.arange(n_out), n_in), np.arange(n_out)])
        cols_all = np.concatenate([np.tile(np.arange(n_in), n_out), -np.ones(n_out, dtype=int)])
        a_ext = np.concatenate([a, np.ones((len(xb), 1))], axis=1)  # column -1 -> 1.0
        numeric = np.empty(len(rows_all))
        last = li == len(net64.layers) - 1
        for s in range(0, len(rows_all), chunk):
            rows = rows_all[s : s + chunk]
            delta = eps * a_ext[:, cols_all[s : s + chunk]].T  # (P, B)
            if last:
                # a last-layer parameter moves a single output column
                diff = _activation_diff(layer.activation, pre[:, rows].T, delta)
                numeric[s : s + len(rows)] = np.sum(diff * up[:, rows].T, axis=1) / (2 * eps)
                continue
            mid = np.broadcast_to(pre, (len(rows),) + pre.shape)
            half = np.zeros_like(mid)
            half[np.arange(len(rows)), :, rows] = delta
            diff = _tail_difference(net64, li, mid, half)
            if not np.all(np.isfinite(diff)):
                raise FloatingPointError(f"non-finite perturbed output in layer {li}")
            numeric[s : s + len(rows)] = np.einsum("pbo,bo->p", diff, up) / (2 * eps)
        analytic = np.concatenate([gw.ravel(), gb.ravel()])
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_net(net: DenseNet, path, extra: dict | None = None) -> None:
    """Text header, ``end_header`` line, then little-endian float32 blob."""
    lines = [
        f"format_version: {CHECKPOINT_VERSION}",
        f"seed: {net.seed}",
        f"n_layers: {len(net.layers)}",
    ]
    for i, layer in enumerate(net.layers):
        lines.append(f"layer{i}: {layer.in_dim} {layer.out_dim} {layer.activation}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    lines.append(f"blob_bytes: {len(blob)}")
    lines.append("end_header")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + blob)


def load_net(path) -> tuple[DenseNet, dict]:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing end_header")
    header: dict[str, str] = {}
    for line in raw[:cut].decode().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
    blob = raw[cut + len(marker) :]
    if int(header.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    n_layers = int(header["n_layers"])
    specs = []
    for i in range(n_layers):
        n_in, n_out, act = header.pop(f"layer{i}").split()
        specs.append((int(n_in), int(n_out), act))
    for i in range(1, n_layers):
        if specs[i][0] != specs[i - 1][1]:
            raise CheckpointError(f"{path}: layer {i} input {specs[i][0]} != layer {i-1} output {specs[i-1][1]}")
    expected = 4 * sum(n_out * n_in + n_out for n_in, n_out, _ in specs)
    if len(blob) != expected or int(header.get("blob_bytes", -1)) != expected:
        raise CheckpointError(f"{path}: expected {expected} parameter bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    layers, off = [], 0
    for n_in, n_out, act in specs:
        w = flat[off : off + n_in * n_out].reshape(n_out, n_in).copy()
        off += n_in * n_out
        b = flat[off : off + n_out].copy()
        off += n_out
        layers.append(Layer(w, b, act))
    net = DenseNet(layers, seed=int(header["seed"]))
    extra = {
        k: v
        for k, v in header.items()
        if k not in ("format_version", "seed", "n_layers", "blob_bytes")
    }
    return net, extra
