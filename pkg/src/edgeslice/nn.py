"""Minimal dense-network substrate: forward, exact reverse-mode gradients,
adaptive-moment updates and soft target tracking.

Everything is float64 numpy; no external autodiff.  The actor/critic
networks of the offloading agent and the forecaster's dense pieces are all
built on these primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError

_ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (lambda z: 1.0 / (1.0 + np.exp(-z)),
                lambda z: (s := 1.0 / (1.0 + np.exp(-z))) * (1.0 - s)),
    "elu": (lambda z: np.where(z > 0.0, z, np.expm1(z)),
            lambda z: np.where(z > 0.0, 1.0, np.exp(z))),
}


def activation(name: str):
    """(f, df/dz) pair for a supported activation tag."""
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; "
                         f"supported: {sorted(_ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# Generic adaptive-moment state over a dict of named arrays
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers with bias correction, keyed by array name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def apply(self, params: dict, grads: dict, lr: float) -> None:
        """In-place adaptive-moment update of params given matching grads.

        lr == 0 is a strict no-op (moments untouched)."""
        if lr == 0.0:
            return
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Dense feed-forward network
# ---------------------------------------------------------------------------

class Network:
    """Ordered dense layers with per-layer activations.

    Parameters live in ``params`` as float64 arrays named ``w0, b0, w1, ...``
    with weight shape (fan_in, fan_out).  Inputs are (batch, in) or (in,).
    """

    def __init__(self, dims, activations, params: dict, adam: AdamState | None = None):
        if len(dims) < 2:
            raise ValueError("need at least an input and an output dimension")
        if len(activations) != len(dims) - 1:
            raise ValueError("one activation tag per layer required")
        for tag in activations:
            activation(tag)
        self.dims = tuple(int(d) for d in dims)
        self.activations = tuple(activations)
        self.params = params
        self.adam = adam if adam is not None else AdamState()

    @classmethod
    def initialize(cls, dims, activations, rng: np.random.Generator) -> "Network":
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"b{i}"] = rng.uniform(-bound, bound, size=(fan_out,))
        return cls(dims, activations, params)

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def copy(self) -> "Network":
        return Network(self.dims, self.activations,
                       {k: v.copy() for k, v in self.params.items()})

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, return_cache: bool = False):
        """Layer-wise affine + activation composition; pure and deterministic."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.dims[0]:
            raise ValueError(f"input dim {h.shape[1]} != network input {self.dims[0]}")
        pre = []
        post = [h]
        for i in range(self.num_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            f, _ = activation(self.activations[i])
            h = f(z)
            pre.append(z)
            post.append(h)
        out = h[0] if squeeze else h
        if return_cache:
            return out, {"pre": pre, "post": post, "squeeze": squeeze}
        return out

    def backward(self, cache: dict, upstream: np.ndarray):
        """Exact reverse-mode gradients of forward for a cached pass.

        upstream is dLoss/dOutput with the output's shape.  Returns
        (grads dict matching params, dLoss/dInput)."""
        if cache is None:
            raise ValueError("backward requires the cache from a forward pass")
        upstream = np.asarray(upstream, dtype=float)
        delta = upstream[None, :] if cache["squeeze"] else upstream
        grads = {}
        for i in reversed(range(self.num_layers)):
            _, df = activation(self.activations[i])
            delta = delta * df(cache["pre"][i])
            grads[f"w{i}"] = cache["post"][i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"w{i}"].T
        dinput = delta[0] if cache["squeeze"] else delta
        return grads, dinput

    # -- updates -------------------------------------------------------------

    def apply_gradients(self, grads: dict, lr: float) -> None:
        """One adaptive-moment step along -grads."""
        self.adam.apply(self.params, grads, lr)


def soft_update(target: Network, online: Network, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise in place."""
    if target.dims != online.dims or target.activations != online.activations:
        raise ValueError("target and online architectures differ")
    for name, p in online.params.items():
        target.params[name] *= (1.0 - tau)
        target.params[name] += tau * p


def gradient_check(net: Network, x: np.ndarray, loss_upstream, step: float = 1e-4):
    """Max relative error between analytic and central-difference gradients.

    loss_upstream(y) must return (scalar loss, dLoss/dy).  Used by tests as
    the independent oracle for backward()."""
    y, cache = net.forward(x, return_cache=True)
    _, upstream = loss_upstream(y)
    grads, _ = net.backward(cache, upstream)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp, _ = loss_upstream(net.forward(x))
            flat[k] = orig - step
            lm, _ = loss_upstream(net.forward(x))
            flat[k] = orig
            numeric = (lp - lm) / (2.0 * step)
            analytic = grads[name].ravel()[k]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
