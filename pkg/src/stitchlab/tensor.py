"""Dense float64 kernel: softmax/CE, affine layers and their gradients, SGD, seeded RNG.

Tensors are plain ``numpy.ndarray`` objects of rank 1 or 2 in float64. Every
public function validates finiteness of what it returns so NaN/Inf never leak
into downstream stages silently.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from stitchlab.errors import InvalidInputError, NumericError

EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64, numpy's documented stable bit generator)."""
    if seed < 0 or seed >= 2**64:
        raise InvalidInputError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise InvalidInputError(f"{name}: rank {arr.ndim} > 2")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: non-finite values")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: produced non-finite values")
    return x


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction. Accepts a vector or a batch."""
    z = as_tensor(logits, "logits")
    if z.size == 0 or z.shape[-1] < 1:
        raise InvalidInputError("logits must have at least one entry")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return check_finite(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), "log_softmax")


def check_distribution(p, tol: float = 1e-9) -> np.ndarray:
    p = as_tensor(p, "distribution")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise InvalidInputError("not a probability distribution")
    return p


def cross_entropy(pred, label: int) -> float:
    """-log(pred[label] + EPS) for a single distribution."""
    p = as_tensor(pred, "pred")
    if p.ndim != 1:
        raise InvalidInputError("cross_entropy expects a single distribution")
    if not 0 <= label < p.shape[0]:
        raise InvalidInputError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-np.log(p[label] + EPS))


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean CE over a batch of distributions."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise InvalidInputError("probs/labels shape mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise InvalidInputError("label out of range")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(picked + EPS)))


def softmax_ce_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean CE w.r.t. the logits that produced ``probs``."""
    grad = probs.copy()
    grad[np.arange(labels.shape[0]), labels] -= 1.0
    return grad / labels.shape[0]


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise InvalidInputError(
            f"affine shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}"
        )
    return check_finite(x @ weight + bias, "affine")


def affine_backward(x, weight, upstream):
    """Gradients of y = xW + b.

    Returns ``(grad_weight, grad_bias, grad_input)``.
    """
    x = np.atleast_2d(as_tensor(x, "input"))
    weight = np.atleast_2d(as_tensor(weight, "weight"))
    upstream = np.atleast_2d(as_tensor(upstream, "upstream"))
    if (
        x.shape[1] != weight.shape[0]
        or upstream.shape[1] != weight.shape[1]
        or upstream.shape[0] != x.shape[0]
    ):
        raise InvalidInputError(
            f"affine_backward shape mismatch: x{x.shape} W{weight.shape} g{upstream.shape}"
        )
    grad_w = x.T @ upstream
    grad_b = upstream.sum(axis=0)
    grad_x = upstream @ weight.T
    return grad_w, grad_b, grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (pre > 0)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain SGD. Returns new arrays; inputs are left untouched."""
    if lr <= 0:
        raise InvalidInputError(f"lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise InvalidInputError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise InvalidInputError(f"shape mismatch {p.shape} vs {g.shape}")
        out.append(check_finite(p - lr * g, "sgd_step"))
    return out


def affine_lstsq(src, tgt, ridge: float = 1e-8):
    """Ridge least squares for ``tgt ~ src @ W + b`` via the normal equations.

    The ridge term also regularises the bias column; with ``ridge > 0`` the
    system is positive definite, so rank-deficient ``src`` still solves.
    """
    src = np.atleast_2d(as_tensor(src, "src"))
    tgt = np.atleast_2d(as_tensor(tgt, "tgt"))
    if src.shape[0] != tgt.shape[0]:
        raise InvalidInputError(f"row count mismatch: {src.shape[0]} vs {tgt.shape[0]}")
    if ridge < 0:
        raise InvalidInputError("ridge must be non-negative")
    design = np.hstack([src, np.ones((src.shape[0], 1))])
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    rhs = design.T @ tgt
    try:
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        beta = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    check_finite(beta, "affine_lstsq")
    return beta[:-1], beta[-1]
