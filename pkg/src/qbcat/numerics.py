"""Dense-network substrate: Mish/sigmoid layers with batch norm, manual backprop,
SGD-with-momentum and Adam updates.

Everything works on plain numpy arrays. Training runs in float32; pass
``dtype=np.float64`` when building a network for gradient checks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def softplus(x):
    return np.logaddexp(0.0, x)


def _tanh_softplus(x):
    # tanh(log(1 + e^x)) = w / (w + 2) with w = e^x (e^x + 2); saturated to 1 past x = 20
    n = np.exp(np.minimum(x, 20.0))
    w = n * (n + 2.0)
    return w / (w + 2.0), n


def mish(x):
    """x * tanh(softplus(x)); works on scalars and arrays."""
    return x * _tanh_softplus(x)[0]


def mish_grad(x):
    t, n = _tanh_softplus(x)
    return t + x * (1.0 - t * t) * (n / (1.0 + n))


class Activation(enum.Enum):
    MISH = "mish"
    SIGMOID = "sigmoid"

    def __call__(self, z):
        if self is Activation.MISH:
            return mish(z)
        return expit(z)

    def grad(self, z, out):
        if self is Activation.MISH:
            return mish_grad(z)
        return out * (1.0 - out)


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class DenseLayer:
    """Affine map, batch norm, activation. ``weight`` is stored (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    activation: Activation

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: Activation, rng: np.random.Generator,
             dtype=np.float32) -> "DenseLayer":
        bound = math.sqrt(6.0 / (n_in + n_out))
        return cls(
            weight=rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype),
            bias=np.zeros(n_out, dtype),
            bn_gamma=np.ones(n_out, dtype),
            bn_beta=np.zeros(n_out, dtype),
            bn_running_mean=np.zeros(n_out, dtype),
            bn_running_var=np.ones(n_out, dtype),
            activation=activation,
        )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias,
                "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn_running_mean": self.bn_running_mean, "bn_running_var": self.bn_running_var}


def dense_forward(layer: DenseLayer, batch: np.ndarray, mode: Mode = Mode.EVAL):
    """Returns ``(output, cache)``. Train mode uses batch statistics and
    updates the running statistics in place."""
    if batch.ndim != 2 or batch.shape[1] != layer.n_in:
        raise ValueError(f"expected (*, {layer.n_in}) input, got {batch.shape}")
    z = batch @ layer.weight.T + layer.bias
    if mode is Mode.TRAIN:
        if batch.shape[0] < 2:
            raise ValueError("train-mode batch norm needs at least 2 rows")
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        layer.bn_running_mean *= 1.0 - BN_MOMENTUM
        layer.bn_running_mean += BN_MOMENTUM * mean
        layer.bn_running_var *= 1.0 - BN_MOMENTUM
        layer.bn_running_var += BN_MOMENTUM * var
    else:
        mean = layer.bn_running_mean
        var = layer.bn_running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    y = xhat * layer.bn_gamma + layer.bn_beta
    out = layer.activation(y)
    check_finite(out, "dense layer output")
    cache = (batch, y, xhat, inv_std, out, mode)
    return out, cache


def dense_backward(layer: DenseLayer, grad_out: np.ndarray, cache):
    """Returns ``(grad_input, grads)`` with grads keyed like ``parameters()``."""
    batch, y, xhat, inv_std, out, mode = cache
    dy = grad_out * layer.activation.grad(y, out)
    grads = {"bn_gamma": (dy * xhat).sum(axis=0), "bn_beta": dy.sum(axis=0)}
    dxhat = dy * layer.bn_gamma
    if mode is Mode.TRAIN:
        n = batch.shape[0]
        dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dz = dxhat * inv_std
    grads["weight"] = dz.T @ batch
    grads["bias"] = dz.sum(axis=0)
    return dz @ layer.weight, grads


class MLP:
    """Two or more dense layers; the last uses a sigmoid, the rest Mish."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = Activation.SIGMOID if i == len(sizes) - 2 else Activation.MISH
            self.layers.append(DenseLayer.init(a, b, act, rng, dtype))

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers().items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL):
        caches = []
        for layer in self.layers:
            x, c = dense_forward(layer, x, mode)
            caches.append(c)
        return x, caches

    def backward(self, grad: np.ndarray, caches, prefix: str = ""):
        grads = {}
        for i in reversed(range(len(self.layers))):
            grad, g = dense_backward(self.layers[i], grad, caches[i])
            for k, v in g.items():
                grads[f"{prefix}{i}.{k}"] = v
        return grad, grads


# --- optimizers --------------------------------------------------------------

class OptimKind(enum.Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"
    PER_CLASS_GD = "per_class_gd"


@dataclass
class OptimState:
    kind: OptimKind
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class CosineAnneal:
    total_steps: int

    def factor(self, t: int) -> float:
        t = min(t, self.total_steps)
        return 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))


def _check_shapes(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {g.shape}")


def sgd_momentum_step(params: dict, grads: dict, state: OptimState, lr: float,
                      momentum: float, weight_decay: float, decay: set[str] | None = None):
    """In-place update. ``decay`` names the parameters that receive weight
    decay; ``None`` means all of them."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_shapes(params, grads)
    for name, g in grads.items():
        w = params[name]
        if weight_decay and (decay is None or name in decay):
            g = g + weight_decay * w
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(w)
        v *= momentum
        v += g
        w -= lr * v
    state.step += 1


def adam_step(params: dict, grads: dict, state: OptimState, lr: float,
              schedule: CosineAnneal | None = None, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_shapes(params, grads)
    eff_lr = lr * (schedule.factor(state.step) if schedule else 1.0)
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = params[name]
        m = state.buffers.get("m." + name)
        if m is None:
            m = state.buffers["m." + name] = np.zeros_like(w)
            state.buffers["v." + name] = np.zeros_like(w)
        v = state.buffers["v." + name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= (eff_lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    state.step = t
