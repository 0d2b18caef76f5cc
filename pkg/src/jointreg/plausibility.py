"""Adversarial plausibility prior.

A small MLP scores body parameters. It is trained with least-squares targets
(initial estimates -> 1, optimized parameters -> 0) and the energy pulls optimized
parameters toward a score of 1. Features are the rotation matrices of the non-root
joints (so the score ignores global orientation) followed by the shape coefficients.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .body_model import BodyParams, rodrigues, rodrigues_jacobian
from .dataio.container import read_container, write_container
from .errors import DimensionError
from .optim import AdamConfig, AdamState, adam_step

DISC_ADAM = AdamConfig(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)


def feature_dim(n_joints: int, n_shape: int, include_shape: bool = True) -> int:
    return 9 * (n_joints - 1) + (n_shape if include_shape else 0)


def featurize(params: BodyParams, include_shape: bool = True) -> np.ndarray:
    rots = rodrigues(params.pose[1:]).reshape(-1)
    return np.concatenate([rots, params.shape]) if include_shape else rots


def featurize_jacobian(params: BodyParams, include_shape: bool = True) -> np.ndarray:
    """d feature / d (pose, shape), shape (feature_dim, 3K + B)."""
    k, b = params.pose.shape[0], params.shape.shape[0]
    jac = np.zeros((feature_dim(k, b, include_shape), 3 * k + b))
    dr = rodrigues_jacobian(params.pose[1:])  # (K-1) x 3 x 3 x 3
    for j in range(1, k):
        jac[9 * (j - 1) : 9 * j, 3 * j : 3 * j + 3] = dr[j - 1].reshape(3, 9).T
    if include_shape:
        jac[9 * (k - 1) :, 3 * k :] = np.eye(b)
    return jac


@dataclass(frozen=True, eq=False)
class Discriminator:
    """Fully connected scorer: leaky-ReLU hidden layers, raw scalar output."""

    n_joints: int
    n_shape: int
    layers: tuple  # ((W, b), ...), W is out x in
    include_shape: bool = True
    slope: float = 0.01
    seed: int | None = None

    @classmethod
    def create(cls, n_joints, n_shape, hidden=(64, 64), include_shape=True, seed=0, slope=0.01):
        rng = np.random.default_rng(seed)
        dims = [feature_dim(n_joints, n_shape, include_shape), *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)))
        return cls(n_joints, n_shape, tuple(layers), include_shape, slope, seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden(self) -> tuple:
        return tuple(w.shape[0] for w, _ in self.layers[:-1])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat_params(self, vec) -> "Discriminator":
        vec = np.asarray(vec, dtype=np.float64)
        layers, pos = [], 0
        for w, b in self.layers:
            nw = vec[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            nb = vec[pos : pos + b.size].copy()
            pos += b.size
            layers.append((nw, nb))
        if pos != vec.size:
            raise DimensionError(f"expected {pos} parameters, got {vec.size}")
        return Discriminator(self.n_joints, self.n_shape, tuple(layers), self.include_shape, self.slope, self.seed)

    def _forward(self, x):
        acts = [x]
        h = x
        for w, b in self.layers[:-1]:
            a = h @ w.T + b
            h = np.where(a > 0, a, self.slope * a)
            acts.append(h)
        w, b = self.layers[-1]
        return (h @ w.T + b)[:, 0], acts

    def score(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise DimensionError(f"feature length {x.shape[1]} != discriminator input {self.input_dim}")
        return self._forward(x)[0]

    def _backward(self, acts, dout):
        """Gradients of sum(dout * output) w.r.t. flat params and inputs."""
        grads = []
        delta = dout[:, None]  # B x 1
        for idx in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[idx]
            h_in = acts[idx]
            grads.append((delta.T @ h_in, delta.sum(axis=0)))
            delta = delta @ w
            if idx > 0:
                delta = delta * np.where(acts[idx] > 0, 1.0, self.slope)
        grads.reverse()
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return flat, delta


def disc_forward(d: Discriminator, feature):
    """Score of one feature vector with gradients w.r.t. the weights and the feature."""
    x = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != d.input_dim:
        raise DimensionError(f"feature length {x.shape[1]} != discriminator input {d.input_dim}")
    out, acts = d._forward(x)
    g_params, g_x = d._backward(acts, np.ones(1))
    return float(out[0]), g_params, g_x[0]


def disc_loss(d: Discriminator, real, fake, with_grad: bool = False):
    """0.5 * (mean (1 - D(real))^2 + mean D(fake)^2)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator batches must be non-empty")
    out_r, acts_r = d._forward(real)
    out_f, acts_f = d._forward(fake)
    loss = 0.5 * (np.mean((1.0 - out_r) ** 2) + np.mean(out_f**2))
    if not with_grad:
        return float(loss)
    g_r, _ = d._backward(acts_r, -(1.0 - out_r) / len(real))
    g_f, _ = d._backward(acts_f, out_f / len(fake))
    return float(loss), g_r + g_f


def disc_update(d: Discriminator, real, fake, state: AdamState | None = None, config: AdamConfig = DISC_ADAM):
    """One Adam step on the least-squares discriminator loss. Returns (d, state, loss before the step)."""
    loss, grad = disc_loss(d, real, fake, with_grad=True)
    params = d.flat_params()
    if state is None:
        state = AdamState.zeros(params.size)
    state, params = adam_step(state, params, grad, config)
    return d.with_flat_params(params), state, loss


def adv_energy(d: Discriminator, params: BodyParams):
    """(1 - D(features))^2 and its gradient w.r.t. the (pose, shape) vector."""
    if params.pose.shape[0] != d.n_joints or params.shape.shape[0] != d.n_shape:
        raise DimensionError("body parameters do not match the discriminator")
    f = featurize(params, d.include_shape)
    out, _, g_f = disc_forward(d, f)
    energy = (1.0 - out) ** 2
    grad = -2.0 * (1.0 - out) * (g_f @ featurize_jacobian(params, d.include_shape))
    return float(energy), grad


class ReplayBuffer:
    """The most recent ``capacity`` feature vectors, sampled with a seeded generator."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.items = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, feature) -> None:
        self.items.append(np.asarray(feature, dtype=np.float64))

    def sample(self, rng, batch_size: int) -> np.ndarray:
        if not self.items:
            raise ValueError("replay buffer is empty")
        n = min(batch_size, len(self.items))
        idx = rng.choice(len(self.items), size=n, replace=False)
        return np.stack([self.items[i] for i in np.sort(idx)])


def save_discriminator(path, d: Discriminator, state: AdamState | None = None) -> None:
    arrays = {}
    for i, (w, b) in enumerate(d.layers):
        arrays[f"layer{i}/weight"] = w
        arrays[f"layer{i}/bias"] = b
    if state is not None:
        arrays["adam/m"] = state.m
        arrays["adam/v"] = state.v
    header = {
        "kind": "discriminator",
        "n_joints": d.n_joints,
        "n_shape": d.n_shape,
        "include_shape": d.include_shape,
        "hidden": list(d.hidden),
        "slope": d.slope,
        "seed": d.seed,
        "adam_t": state.t if state is not None else 0,
    }
    write_container(path, arrays, header)


def load_discriminator(path):
    c = read_container(path)
    h = c.header
    layers = []
    i = 0
    while f"layer{i}/weight" in c:
        layers.append((c[f"layer{i}/weight"], c[f"layer{i}/bias"]))
        i += 1
    d = Discriminator(h["n_joints"], h["n_shape"], tuple(layers), h["include_shape"], h["slope"], h.get("seed"))
    state = AdamState(c["adam/m"], c["adam/v"], h["adam_t"]) if "adam/m" in c else None
    return d, state
