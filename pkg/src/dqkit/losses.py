"""Loss assembly for joint distillation and quantization.

Components:
  * pred_loss   - KL(teacher softened by temperature || student) over positions.
  * hidden_loss - lambda-weighted mean MSE between matched hidden layers,
                  teacher side projected to the student width.
  * cross_entropy - token-level CE with padding masked.
  * total_loss  - alpha * (pred + hidden) + gamma * quant + (1 - alpha) * CE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigurationError, DimensionError, ParameterError
from .matching import MatchingPlan
from .tensor import (Tensor, add, log_softmax, matmul, mean, mul, scale, sub,
                     tsum)


@dataclass
class LossWeights:
    alpha: float = 0.5
    gamma: float = 1.0
    temperature: float = 1.0
    lam: tuple = ()  # per-student-layer weights; empty means all 1.0
    symmetric_temperature: bool = False  # soften both sides and rescale by t^2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if self.temperature <= 0.0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        self.lam = tuple(float(x) for x in self.lam)

    def lam_for(self, n_layers: int) -> tuple:
        if not self.lam:
            return (1.0,) * n_layers
        if len(self.lam) != n_layers:
            raise ConfigurationError(
                f"lambda has {len(self.lam)} entries for {n_layers} student layers"
            )
        return self.lam


@dataclass
class LossBreakdown:
    l_pred: float
    l_hidn: float
    l_kd: float
    l_quan: float
    l_ce: float
    l_model: float

    def check_identities(self, weights: LossWeights, tol: float = 1e-12) -> None:
        if abs(self.l_kd - (self.l_pred + self.l_hidn)) > tol:
            raise AssertionError("l_kd != l_pred + l_hidn")
        expect = (weights.alpha * self.l_kd + weights.gamma * self.l_quan
                  + (1.0 - weights.alpha) * self.l_ce)
        if abs(self.l_model - expect) > tol:
            raise AssertionError("l_model != alpha*l_kd + gamma*l_quan + (1-alpha)*l_ce")


def zero_scalar() -> Tensor:
    return Tensor(0.0)


def pred_loss(z_t, z_s: Tensor, t: float = 1.0, symmetric: bool = False) -> Tensor:
    """KL divergence from softened teacher logits to student logits, mean over
    positions. Teacher logits are divided by t; the student's are not, unless
    the symmetric variant (both softened, scaled by t^2) is requested."""
    if t <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {t}")
    zt = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float64)
    if zt.shape != z_s.shape:
        raise DimensionError(f"logit shapes differ: {zt.shape} vs {z_s.shape}")
    soft = zt / t
    soft = soft - np.max(soft, axis=-1, keepdims=True)
    logp_t = soft - np.log(np.sum(np.exp(soft), axis=-1, keepdims=True))
    p_t = np.exp(logp_t)
    logq = log_softmax(scale(z_s, 1.0 / t) if symmetric else z_s, axis=-1)
    per_elem = mul(Tensor(p_t), sub(Tensor(logp_t), logq))
    n_positions = int(np.prod(zt.shape[:-1])) if zt.ndim > 1 else 1
    loss = scale(tsum(per_elem), 1.0 / n_positions)
    if symmetric:
        loss = scale(loss, t * t)
    return loss


def hidden_loss(student_hiddens, teacher_hiddens, plan: MatchingPlan,
                w_a: Tensor, lam=None) -> Tensor:
    """(1/M) * sum_i lam_i * MSE(student layer i, projected teacher layer f(i))."""
    m = len(student_hiddens)
    n = len(teacher_hiddens)
    if len(plan.f) != m:
        raise ConfigurationError(f"plan covers {len(plan.f)} layers, student has {m}")
    if any(j > n for j in plan.f):
        raise ConfigurationError(f"plan {plan.f} exceeds teacher depth {n}")
    lam = tuple(lam) if lam is not None else (1.0,) * m
    if len(lam) != m:
        raise ConfigurationError(f"lambda has {len(lam)} entries for {m} layers")
    total = None
    for i, j in enumerate(plan.f):
        h_t = teacher_hiddens[j - 1]
        h_t = h_t if isinstance(h_t, Tensor) else Tensor(h_t)
        proj = matmul(h_t, w_a)
        d = sub(student_hiddens[i], proj)
        term = scale(mean(mul(d, d)), lam[i])
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / m)


def cross_entropy(logits: Tensor, labels, pad_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of the labels, padding positions masked."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.data.shape[0] != labels.shape[0]:
        raise AlignmentError(
            f"logits {logits.data.shape} vs {labels.shape[0]} labels"
        )
    mask = np.ones(labels.shape[0], dtype=bool)
    if pad_id is not None:
        mask = labels != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise AlignmentError("all label positions are padding")
    pick = np.zeros(logits.data.shape)
    pick[np.nonzero(mask)[0], labels[mask]] = 1.0
    logp = log_softmax(logits, axis=-1)
    return scale(tsum(mul(logp, Tensor(pick))), -1.0 / n_valid)


def total_loss(l_pred: Tensor, l_hidn: Tensor, l_quan: Tensor, l_ce: Tensor,
               weights: LossWeights):
    """Assemble the joint objective; returns (scalar tensor, breakdown)."""
    l_kd = add(l_pred, l_hidn)
    l_model = add(add(scale(l_kd, weights.alpha), scale(l_quan, weights.gamma)),
                  scale(l_ce, 1.0 - weights.alpha))
    breakdown = LossBreakdown(
        l_pred=l_pred.item(), l_hidn=l_hidn.item(), l_kd=l_kd.item(),
        l_quan=l_quan.item(), l_ce=l_ce.item(), l_model=l_model.item(),
    )
    return l_model, breakdown
