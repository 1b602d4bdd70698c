"""Tempered-sigmoid binary cross entropy with positive-class weights.

The tempered sigmoid is sigmoid(x / tau) with tau = exp(-logit_scale), so
temperature scaling is just an elementwise multiply by exp(logit_scale)
before a standard BCE-with-logits. The loss is fused with the sigmoid via
softplus so it stays finite for arbitrarily large scaled logits, and the
mean is taken over both the batch and the label axes.

Per element, with z = x * exp(logit_scale) and positive weight p:

    loss = p * y * softplus(-z) + (1 - y) * softplus(z)
    d(loss)/dz = p * y * (sigmoid(z) - 1) + (1 - y) * sigmoid(z)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, scale_by_exp


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free sigmoid for any finite float64 input."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) computed without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True)
class TemperedScale:
    """Log-parameterized temperature: tau = exp(-logit_scale)."""

    logit_scale: float

    @property
    def tau(self) -> float:
        return float(np.exp(-self.logit_scale))


@dataclass
class LossBatch:
    """Raw cosine logits, binary targets and per-class positive weights."""

    raw_logits: np.ndarray
    targets: np.ndarray
    pos_weights: np.ndarray | None = None

    def __post_init__(self):
        self.raw_logits = np.asarray(self.raw_logits, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.raw_logits.ndim != 2:
            raise ValueError("raw_logits must be a 2-D matrix")
        if self.targets.shape != self.raw_logits.shape:
            raise ValueError(f"targets shape {self.targets.shape} does not match "
                             f"logits shape {self.raw_logits.shape}")
        if not np.all(np.isfinite(self.raw_logits)):
            raise FloatingPointError("raw_logits contain non-finite values")
        if not np.all((self.targets == 0.0) | (self.targets == 1.0)):
            raise ValueError("targets must be binary")
        n_classes = self.raw_logits.shape[1]
        if self.pos_weights is None:
            self.pos_weights = np.ones(n_classes)
        self.pos_weights = np.asarray(self.pos_weights, dtype=np.float64)
        if self.pos_weights.shape != (n_classes,):
            raise ValueError(f"pos_weights must have length {n_classes}")
        if not np.all(self.pos_weights > 0.0):
            raise ValueError("pos_weights must be strictly positive")


def fused_bce_node(scaled_logits: Node, targets: np.ndarray,
                   pos_weights: np.ndarray) -> Node:
    """Mean positive-weighted BCE over already-scaled logits, as a graph op.

    Consumes the scaled-logits node so gradients flow back through whatever
    produced it (including the logit_scale parameter via scale_by_exp).
    """
    z = scaled_logits.value
    y = np.asarray(targets, dtype=np.float64)
    p = np.asarray(pos_weights, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits shape {z.shape}")
    n_total = z.size
    elementwise = p * y * softplus(-z) + (1.0 - y) * softplus(z)
    out = Node(scaled_logits.tape, "fused_bce",
               np.array([[elementwise.sum() / n_total]]), (scaled_logits,))

    def backward():
        sig = stable_sigmoid(z)
        grad = (p * y * (sig - 1.0) + (1.0 - y) * sig) / n_total
        scaled_logits.grad += out.grad[0, 0] * grad

    out._backward = backward
    return out


def tempered_bce(batch: LossBatch, scale: TemperedScale,
                 tape: Tape | None = None) -> Node:
    """Build the full loss graph from a batch and a temperature.

    Registers ``raw_logits`` and ``logit_scale`` as tape parameters so the
    returned scalar node is differentiable with respect to both.
    """
    if tape is None:
        tape = Tape()
    raw = tape.parameter(batch.raw_logits, "raw_logits")
    logit_scale = tape.parameter([[scale.logit_scale]], "logit_scale")
    scaled = scale_by_exp(raw, logit_scale)
    return fused_bce_node(scaled, batch.targets, batch.pos_weights)


def analytic_grad_logits(batch: LossBatch, scale: TemperedScale) -> np.ndarray:
    """Closed-form gradient of the per-element (unreduced) loss w.r.t. raw logits.

    For unit positive weights this is (sigmoid(x / tau) - y) / tau; the
    general form weights the positive branch by p.
    """
    inv_tau = float(np.exp(scale.logit_scale))
    sig = stable_sigmoid(batch.raw_logits * inv_tau)
    y = batch.targets
    return inv_tau * (sig * (1.0 - y) - batch.pos_weights * y * (1.0 - sig))


def hardness_profile(tau_values, gap: float) -> np.ndarray:
    """Gradient magnitude |d(loss)/dx| = gap / tau at a fixed prediction gap.

    The gap is |sigmoid(x / tau) - y|; smaller temperatures penalize hard
    samples more steeply.
    """
    taus = np.asarray(tau_values, dtype=np.float64)
    if np.any(taus <= 0.0):
        raise ValueError("temperatures must be strictly positive")
    if not 0.0 <= gap <= 1.0:
        raise ValueError("gap must lie in [0, 1]")
    return gap / taus
