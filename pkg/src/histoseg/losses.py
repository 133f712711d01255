"""Softmax, pixelwise cross-entropy, and the Adam optimizer.

The loss is averaged over every pixel of the batch. The fused
softmax/cross-entropy gradient (softmax(z) - onehot) / n_pixels avoids
materializing d(loss)/d(probabilities).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError

Array = np.ndarray

PROB_FLOOR = 1e-12


def _check_logits(logits: Array) -> Array:
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise ContractError(f"logits must be 4-d NHWC, got shape {logits.shape}")
    if logits.shape[3] < 2:
        raise ContractError(
            f"need at least 2 classes on the channel axis, got {logits.shape[3]}"
        )
    return logits


def _check_labels(labels: Array, logits: Array) -> Array:
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:3]:
        raise ContractError(
            f"labels shape {labels.shape} does not match logits spatial shape "
            f"{logits.shape[:3]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {labels.dtype}")
    k = logits.shape[3]
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ContractError(
            f"label values must lie in [0, {k - 1}]; pixel {where} has "
            f"{int(labels[where])}"
        )
    return labels


def softmax(logits: Array) -> Array:
    """Channelwise softmax with max subtraction for stability.

    Args:
        logits: (n, h, w, k) real-valued scores.

    Returns:
        Probabilities of the same shape; each pixel's channel vector
        sums to 1.
    """
    logits = _check_logits(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=3, keepdims=True)


def cross_entropy(probs: Array, labels: Array) -> float:
    """Mean negative log probability of the true class over all pixels.

    Probabilities are clamped below at 1e-12 before the log.
    """
    probs = np.asarray(probs)
    if probs.ndim != 4:
        raise ContractError(f"probs must be 4-d NHWC, got shape {probs.shape}")
    labels = _check_labels(labels, probs)
    n, h, w, _ = probs.shape
    ni, yi, xi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    p = probs[ni, yi, xi, labels]
    p = np.maximum(p, PROB_FLOOR)
    return float(-np.log(p).mean())


def softmax_cross_entropy(logits: Array, labels: Array) -> float:
    """Cross-entropy of softmax(logits) against integer labels."""
    return cross_entropy(softmax(logits), labels)


def softmax_ce_gradient(logits: Array, labels: Array) -> Array:
    """Gradient of softmax_cross_entropy with respect to the logits.

    Uses the fused closed form (softmax(z) - onehot(labels)) / n_pixels
    where n_pixels counts every pixel in the batch.
    """
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits)
    p = softmax(logits)
    n, h, w, _ = p.shape
    grad = p.copy()
    ni, yi, xi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    grad[ni, yi, xi, labels] -= 1.0
    grad /= float(n * h * w)
    return grad


def softmax_ce_with_grad(logits: Array, labels: Array) -> tuple[float, Array]:
    """Loss and logit gradient in one pass (softmax evaluated once)."""
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits)
    p = softmax(logits)
    n, h, w, _ = p.shape
    ni, yi, xi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    picked = np.maximum(p[ni, yi, xi, labels], PROB_FLOOR)
    loss = float(-np.log(picked).mean())
    grad = p
    grad[ni, yi, xi, labels] -= 1.0
    grad /= float(n * h * w)
    return loss, grad


def pixel_accuracy(logits: Array, labels: Array) -> float:
    """Fraction of pixels where argmax(logits) equals the label."""
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits)
    pred = logits.argmax(axis=3)
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter.

    One AdamState drives one list of parameter arrays; `step` is shared
    across them, as all parameters update together once per batch.
    """

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.alpha}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def init(cls, params: list[Array], alpha: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        """Zero moments shaped like each parameter array."""
        state = cls(alpha=alpha, beta1=beta1, beta2=beta2, epsilon=epsilon)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[Array], grads: list[Array], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to params in place.

    theta <- theta - alpha * m_hat / (sqrt(v_hat) + epsilon), with
    m_hat = m / (1 - beta1^t) and v_hat = v / (1 - beta2^t).
    """
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ContractError(
            f"parameter/gradient/state length mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g in zip(params, grads):
        if np.asarray(g).shape != p.shape:
            raise ContractError(
                f"gradient shape {np.asarray(g).shape} does not match "
                f"parameter shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
            p.dtype, copy=False)
