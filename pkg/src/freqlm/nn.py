"""Dense-network primitives with hand-derived backward passes.

Everything operates on plain numpy arrays and preserves the input dtype,
so the same code runs in float32 for training and float64 for gradient
checks.
"""

from __future__ import annotations

import numpy as np

# tanh-form GELU constants
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gelu_forward(x: np.ndarray):
    """tanh-approximated GELU; returns (out, tanh cache for backward)."""
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def gelu(x: np.ndarray) -> np.ndarray:
    return gelu_forward(x)[0]


def gelu_backward(x: np.ndarray, dout: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """d gelu / dx times dout; pass the forward's tanh cache to skip
    recomputing the transcendental."""
    if t is None:
        t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    d = t * t
    np.subtract(1.0, d, out=d)  # 1 - tanh^2
    u = x * x
    u *= 3.0 * _GELU_A
    u += 1.0
    u *= _GELU_C
    u *= x
    u *= d
    u += 1.0
    u += t
    u *= 0.5
    u *= dout
    return u


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis; returns (out, cache) for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc**2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta
    return out, (xhat, inv, gamma)


def layer_norm_backward(dout: np.ndarray, cache):
    """Gradients w.r.t. the layer_norm input, gamma, and beta."""
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
    dbeta = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gamma
    dx = inv / d * (
        d * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def global_norm(arrays) -> float:
    """Euclidean norm of all arrays stacked into one flat vector."""
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
