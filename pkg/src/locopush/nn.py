"""Feed-forward networks with hand-written backprop.

Inputs are batched along the first axis; a 1-D input is treated as a batch
of one and the output is squeezed back.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)
INPUT_CLIP = 5.0


class Activation(str, enum.Enum):
    TANH = "tanh"
    ELU = "elu"


def _act(name, z):
    if name == Activation.TANH:
        return np.tanh(z)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _act_grad(name, z, h):
    if name == Activation.TANH:
        return 1.0 - h * h
    return np.where(z > 0, 1.0, h + 1.0)


@dataclass
class MlpParams:
    layer_dims: list
    weights: list  # weights[i] has shape (in, out)
    biases: list
    activation: Activation = Activation.TANH
    # Fixed input standardization (x - in_shift) / in_scale, clipped; None is identity.
    in_shift: Optional[np.ndarray] = None
    in_scale: Optional[np.ndarray] = None

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_dims), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation,
                         None if self.in_shift is None else self.in_shift.copy(),
                         None if self.in_scale is None else self.in_scale.copy())

    def validate(self) -> None:
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: expected weight {shape}, got {w.shape} / bias {b.shape}")
        for name in ("in_shift", "in_scale"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != (self.layer_dims[0],):
                raise ValueError(f"{name}: expected shape ({self.layer_dims[0]},), got {np.shape(v)}")
        if self.in_scale is not None and not np.all(self.in_scale > 0):
            raise ValueError("in_scale must be positive")


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator, activation=Activation.TANH,
             final_gain: float = 0.01, hidden_gain: float = np.sqrt(2.0)) -> MlpParams:
    dims = [int(d) for d in layer_dims]
    ws, bs = [], []
    for i in range(len(dims) - 1):
        gain = final_gain if i == len(dims) - 2 else hidden_gain
        ws.append(orthogonal(rng, dims[i], dims[i + 1], gain))
        bs.append(np.zeros(dims[i + 1]))
    return MlpParams(dims, ws, bs, Activation(activation))


@dataclass
class MlpCache:
    inputs: list  # input to each layer
    pre: list  # pre-activations of hidden layers
    squeeze: bool
    shapes: tuple
    in_grad: Optional[np.ndarray] = None  # d(normalized input)/dx, where standardized


def mlp_forward(p: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[-1] != p.layer_dims[0]:
        raise ValueError(f"input dim {x.shape[-1]} != {p.layer_dims[0]}")
    inputs, pre = [], []
    in_grad = None
    if p.in_shift is not None:
        z = (x - p.in_shift) / p.in_scale
        h = np.clip(z, -INPUT_CLIP, INPUT_CLIP)
        in_grad = (np.abs(z) < INPUT_CLIP) / p.in_scale
    else:
        h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = _act(p.activation, z)
        else:
            h = z
    cache = MlpCache(inputs, pre, squeeze, tuple(w.shape for w in p.weights), in_grad)
    return (h[0] if squeeze else h), cache


def mlp_backward(p: MlpParams, cache: MlpCache, dy) -> tuple[list, np.ndarray]:
    """Return (gradients as [dW0, db0, dW1, ...], dL/dx)."""
    if cache.shapes != tuple(w.shape for w in p.weights):
        raise ValueError("stale cache: parameter shapes changed since the forward pass")
    g = np.asarray(dy, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    if g.shape != (cache.inputs[0].shape[0], p.layer_dims[-1]):
        raise ValueError(f"dL/dy shape {g.shape} does not match the cached batch")
    grads = [None] * (2 * len(p.weights))
    for i in range(len(p.weights) - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ p.weights[i].T
        if i > 0:
            z = cache.pre[i - 1]
            g = g * _act_grad(p.activation, z, cache.inputs[i])
    if cache.in_grad is not None:
        g = g * cache.in_grad
    return grads, (g[0] if cache.squeeze else g)


# ---------------------------------------------------------------- policy / value

@dataclass
class GaussianPolicy:
    mean_net: MlpParams
    log_std: np.ndarray

    @classmethod
    def create(cls, rng: np.random.Generator, obs_dim: int = 81, act_dim: int = 9,
               hidden: Sequence[int] = (256, 128), activation=Activation.TANH,
               init_log_std: float = 0.0) -> "GaussianPolicy":
        net = init_mlp([obs_dim, *hidden, act_dim], rng, activation, final_gain=0.01)
        return cls(net, np.full(act_dim, float(init_log_std)))

    def params(self) -> list:
        return self.mean_net.arrays() + [self.log_std]

    def set_params(self, arrays: list) -> None:
        n = len(self.mean_net.weights)
        for i in range(n):
            self.mean_net.weights[i] = arrays[2 * i]
            self.mean_net.biases[i] = arrays[2 * i + 1]
        self.log_std = arrays[2 * n]
        self.clamp()

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.mean_net, obs)[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))


@dataclass
class ValueNet:
    net: MlpParams

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int = 101, hidden: Sequence[int] = (256, 128),
               activation=Activation.TANH, final_gain: float = 1.0) -> "ValueNet":
        return cls(init_mlp([in_dim, *hidden, 1], rng, activation, final_gain=final_gain))

    def params(self) -> list:
        return self.net.arrays()

    def set_params(self, arrays: list) -> None:
        for i in range(len(self.net.weights)):
            self.net.weights[i] = arrays[2 * i]
            self.net.biases[i] = arrays[2 * i + 1]

    def copy(self) -> "ValueNet":
        return ValueNet(self.net.copy())

    def __call__(self, obs) -> np.ndarray:
        return mlp_forward(self.net, obs)[0][..., 0]


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    return float(np.sum(HALF_LOG_2PIE + log_std))


def policy_sample(pi: GaussianPolicy, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mean = pi.mean(obs)
    eps = rng.standard_normal(mean.shape)
    action = mean + pi.std * eps
    return action, gaussian_log_prob(mean, pi.log_std, action)


def policy_log_prob_entropy(pi: GaussianPolicy, obs, action) -> tuple[np.ndarray, float]:
    mean = pi.mean(obs)
    return gaussian_log_prob(mean, pi.log_std, action), gaussian_entropy(pi.log_std)


def policy_log_prob_grad(pi: GaussianPolicy, obs, action, dlogp, dentropy: float = 0.0,
                         dmean_extra: Optional[np.ndarray] = None):
    """Gradients of sum(dlogp * log_prob) + dentropy * entropy w.r.t. policy params.

    ``dmean_extra`` adds an upstream gradient directly on the mean output.
    Returns (grads list matching ``pi.params()``, log_prob).
    """
    mean, cache = mlp_forward(pi.mean_net, obs)
    ls = np.clip(pi.log_std, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * ls)
    diff = np.asarray(action) - mean
    logp = np.sum(-0.5 * diff * diff * inv_var - ls - HALF_LOG_2PI, axis=-1)
    w = np.asarray(dlogp, dtype=np.float64)[..., None]
    dmean = w * diff * inv_var
    if dmean_extra is not None:
        dmean = dmean + dmean_extra
    dls = w * (diff * diff * inv_var - 1.0)
    dls = dls.reshape(-1, ls.size).sum(axis=0) + dentropy
    grads, _ = mlp_backward(pi.mean_net, cache, dmean)
    return grads + [dls], logp


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[list] = None
    v: Optional[list] = None
    t: int = 0

    def step(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(np.ascontiguousarray(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)))
        return out

    def state(self) -> dict:
        return {"m": [a.copy() for a in self.m] if self.m else None,
                "v": [a.copy() for a in self.v] if self.v else None, "t": self.t}

    def load(self, st: dict) -> None:
        self.m = [a.copy() for a in st["m"]] if st["m"] is not None else None
        self.v = [a.copy() for a in st["v"]] if st["v"] is not None else None
        self.t = int(st["t"])


def global_norm(grads: list) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list, max_norm: float) -> tuple[list, float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [g * s for g in grads]
    return grads, norm


def param_checksum(arrays: list) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()
