"""Feed-forward neural controllers: evaluation, Lipschitz upper bounds,
supervised imitation fitting, and JSON persistence.

Networks here are small (two hidden layers, tens of units), so training is
plain minibatch SGD with hand-derived gradients; no ML framework involved.
The imitation fitter produces the demo controllers that stand in for
externally-trained ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .poly import Box

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")

# global Lipschitz constant of each activation
ACT_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0, "sigmoid": 0.25, "identity": 1.0}


class NetError(Exception):
    pass


class ImitationError(NetError):
    """Raised when fitting fails to reach the configured error threshold."""

    def __init__(self, msg: str, mse: float):
        super().__init__(msg)
        self.mse = mse


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative wrt pre-activation z; a = act(z) is passed to avoid recompute
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


class FeedForwardNet:
    """Sequence of (W, b, activation) layers; immutable once built."""

    def __init__(self, layers: Sequence[tuple]):
        if not layers:
            raise NetError("network needs at least one layer")
        self.layers = []
        prev = None
        for W, b, act in layers:
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float)
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise NetError(f"bad layer shapes W{W.shape} b{b.shape}")
            if act not in ACTIVATIONS:
                raise NetError(f"unknown activation {act!r}")
            if prev is not None and W.shape[1] != prev:
                raise NetError(
                    f"layer dimension chain broken: {W.shape[1]} != {prev}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NetError("non-finite weights")
            prev = W.shape[0]
            self.layers.append((W, b, act))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise NetError(f"input shape {x.shape}, expected ({self.input_dim},)")
        a = x
        for W, b, act in self.layers:
            a = _act(act, W @ a + b)
        if not np.all(np.isfinite(a)):
            raise NetError("non-finite network output (corrupt weights?)")
        return a

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        A = np.asarray(X, dtype=float)
        if A.ndim != 2 or A.shape[1] != self.input_dim:
            raise NetError(f"batch shape {A.shape}, expected (N, {self.input_dim})")
        for W, b, act in self.layers:
            A = _act(act, A @ W.T + b)
        return A

    def forward_cached(self, X: np.ndarray):
        """Batch forward that keeps pre/post-activations for backprop."""
        A = np.asarray(X, dtype=float)
        cache = [(None, A)]
        for W, b, act in self.layers:
            Z = A @ W.T + b
            A = _act(act, Z)
            cache.append((Z, A))
        return A, cache

    def backprop(self, cache, dout: np.ndarray):
        """Gradients of sum-reduced loss wrt all W, b given d(loss)/d(output).

        Returns a list of (dW, db) matching self.layers.
        """
        grads = [None] * len(self.layers)
        delta = np.asarray(dout, dtype=float)
        for li in range(len(self.layers) - 1, -1, -1):
            W, b, act = self.layers[li]
            Z, A_out = cache[li + 1]
            A_in = cache[li][1]
            delta = delta * _act_grad(act, Z, A_out)
            grads[li] = (delta.T @ A_in, delta.sum(axis=0))
            if li > 0:
                delta = delta @ W
        return grads

    def updated(self, grads, lr: float) -> "FeedForwardNet":
        """New network after one gradient-descent step."""
        return FeedForwardNet(
            [
                (W - lr * dW, b - lr * db, act)
                for (W, b, act), (dW, db) in zip(self.layers, grads)
            ]
        )

    def precompose_affine(self, scale: np.ndarray, offset: np.ndarray) -> "FeedForwardNet":
        """Exact network computing net(scale * x + offset) (scale is a vector)."""
        W0, b0, act0 = self.layers[0]
        W0n = W0 * np.asarray(scale, dtype=float)
        b0n = b0 + W0 @ np.asarray(offset, dtype=float)
        return FeedForwardNet([(W0n, b0n, act0)] + self.layers[1:])

    # -- Lipschitz ------------------------------------------------------

    def lipschitz_upper(self, norm: str = "inf") -> float:
        """Product of per-layer operator norms times activation constants.

        A valid global Lipschitz upper bound; inf-norm by default to pair
        with box partitions.
        """
        if norm not in ("inf", "2"):
            raise NetError("norm must be 'inf' or '2'")
        L = 1.0
        for W, _b, act in self.layers:
            if norm == "inf":
                opn = float(np.max(np.sum(np.abs(W), axis=1)))
            else:
                opn = float(np.linalg.norm(W, 2))
            L *= opn * ACT_LIPSCHITZ[act]
        return L

    # -- persistence ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "layers": [
                {"w": [list(row) for row in W], "b": list(b), "act": act}
                for W, b, act in self.layers
            ]
        }

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def from_json_dict(d: dict) -> "FeedForwardNet":
        try:
            layers = [(l["w"], l["b"], l["act"]) for l in d["layers"]]
        except (KeyError, TypeError) as exc:
            raise NetError(f"malformed network dict: {exc}") from exc
        return FeedForwardNet(layers)

    @staticmethod
    def load(path: str) -> "FeedForwardNet":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetError(f"malformed network file {path}: {exc}") from exc
        return FeedForwardNet.from_json_dict(d)

    def __eq__(self, other):
        return (
            isinstance(other, FeedForwardNet)
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(W1, W2) and np.array_equal(b1, b2) and a1 == a2
                for (W1, b1, a1), (W2, b2, a2) in zip(self.layers, other.layers)
            )
        )


@dataclass
class ImitationConfig:
    """Settings for supervised imitation of an analytic control law."""

    target: str = "custom"
    n_samples: int = 4096
    epochs: int = 400
    lr: float = 0.05
    seed: int = 0
    hidden: tuple = (32, 32)
    hidden_act: str = "tanh"
    output_act: str = "identity"
    output_scale: float = 1.0
    output_offset: float = 0.0
    batch_size: int = 128
    mse_threshold: float = 1e-2

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def init_net(
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int,
    rng: np.random.Generator,
    hidden_act: str = "tanh",
    output_act: str = "identity",
) -> FeedForwardNet:
    """Glorot-uniform initialized MLP."""
    dims = [input_dim, *hidden, output_dim]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = hidden_act if i < len(dims) - 2 else output_act
        layers.append((W, b, act))
    return FeedForwardNet(layers)


def fit_imitation(
    target: Callable[[np.ndarray], np.ndarray],
    box: Box,
    cfg: ImitationConfig,
) -> FeedForwardNet:
    """Fit an MLP to ``target`` on ``box`` by minibatch SGD on the MSE.

    ``target`` maps an (N, n) batch of states to (N, m) controls.
    Deterministic given cfg.seed.  Raises ImitationError (with the final
    held-out MSE attached) if the configured threshold is not met.
    """
    rng = np.random.default_rng(cfg.seed)
    X = box.sample(rng, cfg.n_samples)
    Y = np.asarray(target(X), dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not np.all(np.isfinite(Y)):
        raise NetError("target produced non-finite samples")

    # fixed held-out grid, 33 points per axis
    axes = [np.linspace(lo, hi, 33) for lo, hi in zip(box.lo, box.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Xg = np.column_stack([m.ravel() for m in mesh])
    Yg = np.asarray(target(Xg), dtype=float)
    if Yg.ndim == 1:
        Yg = Yg[:, None]

    # learn the residual after output scaling so tanh saturation is easy to hit
    net = init_net(
        box.nvars, cfg.hidden, Y.shape[1], rng,
        hidden_act=cfg.hidden_act, output_act=cfg.output_act,
    )
    n = cfg.n_samples
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = X[idx], (Y[idx] - cfg.output_offset) / cfg.output_scale
            out, cache = net.forward_cached(xb)
            dout = 2.0 * (out - yb) / len(idx)
            grads = net.backprop(cache, dout)
            net = net.updated(grads, cfg.lr)

    if cfg.output_scale != 1.0 or cfg.output_offset != 0.0:
        W, b, act = net.layers[-1]
        if act != "identity":
            # wrap saturated output in an exact affine read-out layer
            eye = np.eye(net.output_dim) * cfg.output_scale
            off = np.full(net.output_dim, cfg.output_offset)
            net = FeedForwardNet(net.layers + [(eye, off, "identity")])
        else:
            net = FeedForwardNet(
                net.layers[:-1] + [(W * cfg.output_scale, b * cfg.output_scale + cfg.output_offset, act)]
            )

    mse = float(np.mean((net.forward_batch(Xg) - Yg) ** 2))
    if mse > cfg.mse_threshold:
        raise ImitationError(
            f"imitation MSE {mse:.3e} above threshold {cfg.mse_threshold:.3e}"
            f" (target={cfg.target!r}, seed={cfg.seed})",
            mse,
        )
    return net
