"""Write operations: loss constraints and optimizer step rules.

The adversarial constraint is realised with a gradient-reversal pass: the
task discriminator trains normally while the shared encoder receives the
reversed (scaled) gradient, a single-optimizer equivalent of the min-max
formulation.  The orthogonality constraint penalises overlap between the
shared and private feature blocks of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .registry import ParamRegistry, ParamTensor
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients of the combined training objective."""

    task: float = 1.0
    adv: float = 0.05
    diff: float = 0.01
    gp: float = 1.0

    def __post_init__(self):
        if self.task <= 0:
            raise ValueError("loss weights: task weight must be positive")
        if min(self.adv, self.diff, self.gp) < 0:
            raise ValueError("loss weights: weights must be non-negative")


def task_loss(result, labels) -> Tensor:
    """Mean cross entropy of a read result over its batch."""
    logits = result.logits if hasattr(result, "logits") else result
    return T.mean(T.softmax_cross_entropy(logits, labels))


def adversarial_loss(shared_features: Tensor, task_index_labels, discriminator, lam_grl: float) -> Tensor:
    """Cross entropy of a linear task discriminator over shared features.

    Discriminator parameters receive the ordinary gradient; everything
    upstream of the features receives it reversed and scaled by ``lam_grl``.
    """
    w, b = discriminator
    if w.shape[1] < 2:
        raise ValueError(f"adversarial loss needs >= 2 tasks, discriminator has {w.shape[1]} outputs")
    if lam_grl < 0:
        raise ValueError("lam_grl must be non-negative")
    reversed_feats = T.grad_reverse(shared_features, lam_grl)
    logits = T.add(T.matmul(reversed_feats, w), b)
    return T.mean(T.softmax_cross_entropy(logits, task_index_labels))


def orthogonality_loss(shared: Tensor, private: Tensor) -> Tensor:
    """Squared Frobenius norm of the shared-private feature cross product."""
    if shared.data.ndim != 2 or private.data.ndim != 2 or shared.shape[0] != private.shape[0]:
        raise ShapeError(f"orthogonality_loss: batch dims differ ({shared.shape} vs {private.shape})")
    return T.frobenius_sq(T.matmul(T.transpose(shared), private))


@dataclass
class OptimizerState:
    """Step rule plus per-parameter accumulators.

    ``sgd``: p <- p - lr * g.  ``adadelta``: the diagonal accumulator
    variant with decay ``rho`` and stabiliser ``eps``; ``lr`` scales the
    proposed delta (1.0 for the textbook rule).
    """

    rule: str = "sgd"
    lr: float = 0.1
    rho: float = 0.95
    eps: float = 1e-6
    _accum: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.rule not in ("sgd", "adadelta"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if self.lr <= 0:
            raise ValueError("optimizer: lr must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("optimizer: rho must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("optimizer: eps must be positive")

    def _apply(self, pt: ParamTensor, grad: np.ndarray) -> None:
        if self.rule == "sgd":
            pt.tensor.assign(pt.tensor.data - self.lr * grad)
            return
        eg2, ed2 = self._accum.get(pt.id, (np.zeros_like(grad), np.zeros_like(grad)))
        eg2 = self.rho * eg2 + (1.0 - self.rho) * grad * grad
        delta = -np.sqrt(ed2 + self.eps) / np.sqrt(eg2 + self.eps) * grad
        ed2 = self.rho * ed2 + (1.0 - self.rho) * delta * delta
        self._accum[pt.id] = (eg2, ed2)
        pt.tensor.assign(pt.tensor.data + self.lr * delta)


def step(state: OptimizerState, registry: ParamRegistry, task_id: str, grads: Mapping[str, object]) -> None:
    """Apply one optimizer step; write permissions are enforced by the registry."""
    registry.apply_update(task_id, grads, state._apply)
