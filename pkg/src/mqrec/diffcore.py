"""Dense MLPs with hand-written backward passes, AdamW, and gradient routing.

Parameters live in plain ``dict[str, ndarray]`` so optimizers, serializers
and gradient checks can walk them uniformly.  Training arithmetic is float64.
"""

from __future__ import annotations

import enum
from typing import Callable

import numpy as np

__all__ = [
    "NumericError",
    "TrainingError",
    "Mlp",
    "mlp_forward_backward",
    "AdamW",
    "adamw_step",
    "GradRoute",
    "route_gradient",
    "finite_difference_check",
    "round_to_float32",
]


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


def _require_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def round_to_float32(params: dict) -> None:
    """Snap float64 parameters onto float32-representable values, in place."""
    for arr in params.values():
        arr[...] = arr.astype(np.float32).astype(np.float64)


class Mlp:
    """``in -> hidden -> hidden -> out`` with ReLU on hidden layers.

    Weights are stored ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(B, in)`` maps through ``x @ W + b``.
    """

    def __init__(self, weights: list, biases: list):
        if len(weights) != len(biases):
            raise ValueError("one bias per weight matrix")
        for a, b in zip(weights[:-1], weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"inconsistent layer dims {a.shape} -> {b.shape}")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias length must equal layer output dim")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, dims, rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, dims) -> "Mlp":
        return cls([np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]])

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, grad_out, prefix: str = ""):
        """Gradients for parameters and inputs given the upstream gradient."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {grad_out.shape} != output {acts[-1].shape}")
        grads = {}
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"{prefix}W{i}"] = acts[i].T @ g
            grads[f"{prefix}b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_forward_backward(m: Mlp, x, upstream_grad=None):
    """Evaluate ``m`` on ``x`` and, when an upstream gradient is given, backprop it.

    Returns ``(outputs, param_grads, input_grads)``; the gradient entries are
    ``None`` when ``upstream_grad`` is absent.
    """
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, "MLP input")
    out, acts = m.forward(x)
    if upstream_grad is None:
        return out, None, None
    grads, gin = m.backward(acts, upstream_grad)
    return out, grads, gin


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied as ``p *= 1 - lr * weight_decay`` before the moment
    update, so a zero gradient shrinks parameters geometrically.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        for k, g in grads.items():
            if k not in self.params:
                raise ValueError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {k!r} shape {self.params[k].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(state: AdamW, grads: dict) -> dict:
    state.step(grads)
    return state.params


class GradRoute(enum.Enum):
    NORMAL = "normal"
    STOP_GRADIENT = "stop_gradient"
    STRAIGHT_THROUGH = "straight_through"


def route_gradient(route: GradRoute, value, upstream):
    """Gradient that crosses an edge of the given kind.

    ``value`` is the forward quantity on the edge; it only fixes the shape.
    """
    value = np.asarray(value)
    upstream = np.asarray(upstream, dtype=np.float64)
    if value.shape != upstream.shape:
        raise ValueError(f"shape mismatch {value.shape} vs {upstream.shape}")
    if route is GradRoute.STOP_GRADIENT:
        return np.zeros_like(upstream)
    # straight-through and normal edges both pass the upstream gradient as-is
    return upstream.copy()


def finite_difference_check(f: Callable[[], float], params: dict, grads: dict,
                            step: float = 1e-5, eps: float = 1e-6,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error ``|numeric - analytic| / (|analytic| + eps)``.

    ``f`` is called with no arguments and must read the arrays in ``params``,
    which are perturbed in place and restored.  ``max_entries`` subsamples
    coordinates per array for large parameters.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    worst = 0.0
    for name, arr in params.items():
        g = grads[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * step)
            err = abs(numeric - gflat[i]) / (abs(gflat[i]) + eps)
            worst = max(worst, err)
    return worst
