"""Small numpy neural-network kernel.

Every op works on a single vector or on a batch of row vectors (last axis is
the feature axis). Backward functions take the cached forward values and the
upstream gradient and return gradients w.r.t. inputs and parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12
LOG_CLAMP = 1e-12

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def init_dense(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator,
               dtype=np.float32) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    s = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-s, s, size=(out_dim, in_dim)).astype(dtype)
    return DenseLayer(w, np.zeros(out_dim, dtype=dtype), activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"dense layer expects dim {layer.in_dim}, got {x.shape[-1]}")
    z = x @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def dense_backward(layer: DenseLayer, x: np.ndarray, out: np.ndarray, grad_out: np.ndarray):
    """Return (grad_weights, grad_bias, grad_x). Batched inputs sum over rows."""
    g = grad_out
    if layer.activation == "relu":
        g = g * (out > 0)
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(g)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = g @ layer.weights.astype(np.float64)
    return grad_w, grad_b, grad_x


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, NORM_EPS)


def l2_normalize_backward(x: np.ndarray, y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Jacobian of x/||x|| is (I - y y^T)/||x||; below the epsilon the map is x/eps.
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    proj = np.sum(y * grad_out, axis=-1, keepdims=True)
    return np.where(norm > NORM_EPS,
                    (grad_out - y * proj) / np.maximum(norm, NORM_EPS),
                    grad_out / NORM_EPS)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None,
                    training: bool):
    """Inverted dropout. Returns (output, mask) where mask already carries the
    1/(1-rate) scale, so the backward pass is ``grad * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def fuse_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"fusion inputs differ in shape: {a.shape} vs {b.shape}")
    return a * b


def fuse_multiply_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    return grad_out * b, grad_out * a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(index, num_classes: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (num_classes,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def cross_entropy(pred: np.ndarray, label: np.ndarray):
    """-sum(y * log(max(p, 1e-12))) over the class axis."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"prediction/label shapes differ: {pred.shape} vs {label.shape}")
    return -np.sum(label * np.log(np.maximum(pred, LOG_CLAMP)), axis=-1)


def softmax_cross_entropy_backward(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Gradient of cross_entropy(softmax(z), y) w.r.t. the logits z."""
    return pred - label


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   0, lr, beta1, beta2, epsilon)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Parameters keep their dtype; moments are float64."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_params.append((p.astype(np.float64) - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.epsilon)
    return new_params, new_state
