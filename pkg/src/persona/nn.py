"""Dense/conv layer algebra with hand-derived backward passes, losses, and Adam.

Everything is float64 and operates on plain numpy arrays. Layer inputs may be
a single example or a batch (leading batch axis); backward passes return
gradients for the same shapes they were given. Convolution is
cross-correlation (no kernel flip), stride 1, valid padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class GradientError(FloatingPointError):
    """A non-finite gradient reached the optimizer."""


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None, ...], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}- or {ndim}-dimensional input, got shape {x.shape}")
    return x, False


# --- layers -------------------------------------------------------------------


def dense_forward(x, w, b):
    """y = W x + b for x (in,) or (B, in); w is (out, in)."""
    x2, single = _as_batch(x, 2)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"bad dense parameter shapes W{w.shape} b{b.shape}")
    if x2.shape[1] != w.shape[1]:
        raise ShapeError(f"dense input has {x2.shape[1]} features, weights expect {w.shape[1]}")
    y = x2 @ w.T + b
    return y[0] if single else y


def dense_backward(dy, x, w):
    """Given dL/dy, return (dL/dx, dL/dW, dL/db)."""
    dy2, single = _as_batch(dy, 2)
    x2, _ = _as_batch(x, 2)
    dx = dy2 @ w
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    return (dx[0] if single else dx), dw, db


def conv1d_forward(x, k, b):
    """Valid cross-correlation: y[c,t] = b[c] + sum_{i,j} k[c,i,j] x[i,t+j].

    x is (C_in, L) or (B, C_in, L); k is (C_out, C_in, kw).
    """
    x3, single = _as_batch(x, 3)
    c_out, c_in, kw = k.shape
    if x3.shape[1] != c_in:
        raise ShapeError(f"conv input has {x3.shape[1]} channels, kernel expects {c_in}")
    if x3.shape[2] < kw:
        raise ShapeError(f"conv input length {x3.shape[2]} shorter than kernel {kw}")
    windows = np.lib.stride_tricks.sliding_window_view(x3, kw, axis=2)
    y = np.einsum("bitk,oik->bot", windows, k, optimize=True) + b[:, None]
    return y[0] if single else y


def conv1d_backward(dy, x, k):
    """Given dL/dy, return (dL/dx, dL/dk, dL/db)."""
    dy3, single = _as_batch(dy, 3)
    x3, _ = _as_batch(x, 3)
    kw = k.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x3, kw, axis=2)
    dk = np.einsum("bot,bitk->oik", dy3, windows, optimize=True)
    db = dy3.sum(axis=(0, 2))
    # dx is the full correlation of dy with the flipped kernel.
    dy_padded = np.pad(dy3, ((0, 0), (0, 0), (kw - 1, kw - 1)))
    dy_windows = np.lib.stride_tricks.sliding_window_view(dy_padded, kw, axis=2)
    dx = np.einsum("botk,oik->bit", dy_windows, k[:, :, ::-1], optimize=True)
    return (dx[0] if single else dx), dk, db


def maxpool1d_forward(x):
    """Window-2 stride-2 max pooling; a trailing odd element is dropped.

    Returns (y, argmax) where argmax holds 0/1 winner positions per window
    (ties go to the lower index) for the backward pass.
    """
    x3, single = _as_batch(x, 3)
    n_batch, channels, length = x3.shape
    if length < 2:
        raise ShapeError(f"maxpool needs length >= 2, got {length}")
    t = length // 2
    pairs = x3[:, :, : 2 * t].reshape(n_batch, channels, t, 2)
    arg = pairs.argmax(axis=3)
    y = np.take_along_axis(pairs, arg[..., None], axis=3)[..., 0]
    return (y[0] if single else y), arg


def maxpool1d_backward(dy, arg, input_len):
    """Route dL/dy to each window's argmax position; zeros elsewhere."""
    dy3, single = _as_batch(dy, 3)
    arg3 = arg if arg.ndim == 3 else arg[None, ...]
    n_batch, channels, t = dy3.shape
    scattered = np.zeros((n_batch, channels, t, 2))
    np.put_along_axis(scattered, arg3[..., None], dy3[..., None], axis=3)
    dx = np.zeros((n_batch, channels, input_len))
    dx[:, :, : 2 * t] = scattered.reshape(n_batch, channels, 2 * t)
    return dx[0] if single else dx


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(dy, x):
    # Subgradient at exactly 0 is defined as 0.
    return np.asarray(dy) * (np.asarray(x) > 0)


# --- losses -------------------------------------------------------------------


def softmax(z):
    """Max-shifted softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, y):
    """Mean negative log-probability of the true classes; p is clamped at 1e-12."""
    p2, _ = _as_batch(p, 2)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != p2.shape[0]:
        raise ShapeError(f"{p2.shape[0]} probability rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= p2.shape[1]):
        raise ShapeError(f"class index out of range for {p2.shape[1]} classes")
    picked = np.clip(p2[np.arange(p2.shape[0]), y], 1e-12, None)
    return float(-np.log(picked).mean())


def cross_entropy_grad_logits(p, y):
    """dL/dz for softmax followed by cross_entropy: (p - onehot(y)) / batch."""
    p2, single = _as_batch(p, 2)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    grad = p2.copy()
    grad[np.arange(p2.shape[0]), y] -= 1.0
    grad /= p2.shape[0]
    return grad[0] if single else grad


def mse(pred, target):
    """Mean squared error over the batch."""
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    return float(((pred - target) ** 2).mean())


def mse_grad(pred, target):
    """dL/dpred = 2 (pred - target) / batch."""
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    return 2.0 * (pred - target) / pred.shape[0]


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_init(param: np.ndarray) -> AdamState:
    return AdamState(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns the new parameter array."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite gradient; aborting the update")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a dict of named parameter arrays; lr is mutable for decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, value in params.items():
            st = self.state.setdefault(name, adam_init(value))
            params[name] = adam_step(
                value, grads[name], st, self.lr, self.beta1, self.beta2, self.eps
            )


# --- gradient checking ---------------------------------------------------------


def grad_check(loss_fn, grad_fn, params: dict, h=1e-5, max_coords=1000, seed=0):
    """Max relative error between grad_fn and central finite differences.

    loss_fn(params) -> float must be deterministic; grad_fn(params) -> dict of
    gradients aligned with params. Checks every coordinate, or a seeded sample
    of max_coords when there are more.
    """
    analytic = grad_fn(params)
    names = sorted(params)
    coords = [(name, i) for name in names for i in range(params[name].size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in chosen]
    worst = 0.0
    for name, i in coords:
        flat = params[name].flat
        orig = flat[i]
        flat[i] = orig + h
        loss_plus = loss_fn(params)
        flat[i] = orig - h
        loss_minus = loss_fn(params)
        flat[i] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        ana = analytic[name].flat[i]
        denom = max(abs(numeric), abs(ana))
        if denom < 1e-8:
            continue  # both effectively zero; finite-difference noise dominates
        worst = max(worst, abs(numeric - ana) / denom)
    return worst
