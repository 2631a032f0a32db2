"""Student-to-teacher layer matching for hidden-layer distillation.

Three strategies:
  * DM    - per student layer, pick the teacher layer with minimum projected MSE.
  * RDM   - same costs, but the mapping must be strictly increasing in depth;
            solved exactly by dynamic programming on the total cost.
  * QUANT - pick teacher layers whose bridged weights best approximate the
            student's quantized weights.

All teacher layer indices in a plan are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, absolute, matmul, mean, sub


@dataclass
class MatchingPlan:
    f: tuple  # teacher layer index (1-based) per student layer
    strategy: str  # DM | RDM | QUANT | STATIC
    cost_matrix: np.ndarray = field(repr=False)
    refresh_step: int = 0

    def __post_init__(self):
        self.f = tuple(int(j) for j in self.f)
        n = self.cost_matrix.shape[1]
        if any(j < 1 or j > n for j in self.f):
            raise ConfigurationError(f"plan maps outside teacher depth {n}: {self.f}")


@dataclass
class MatchProjections:
    """Learned projection matrices used in matching costs and losses.

    w_a bridges teacher hidden width to student hidden width; w1/w2 bridge a
    teacher layer weight to the shape of the student's quantized layer weight.
    """

    w_a: Tensor
    w1: Tensor
    w2: Tensor

    @classmethod
    def near_identity(cls, d_teacher, d_student, dff_teacher, dff_student, rng,
                      noise: float = 0.01) -> "MatchProjections":
        def init(rows, cols):
            m = np.eye(rows, cols) + noise * rng.standard_normal((rows, cols))
            return Tensor(m, requires_grad=True)

        return cls(
            w_a=init(d_teacher, d_student),
            w1=init(d_student, d_teacher),
            w2=init(dff_teacher, dff_student),
        )

    def tensors(self) -> dict:
        return {"proj.w_a": self.w_a, "proj.w1": self.w1, "proj.w2": self.w2}


def hidden_cost_matrix(student_hiddens, teacher_hiddens, w_a) -> np.ndarray:
    """cost[i][j] = MSE(projected teacher layer j, student layer i), averaged
    over tokens. Pure numpy; used only for plan selection, not for gradients."""
    m, n = len(student_hiddens), len(teacher_hiddens)
    if m > n:
        raise ConfigurationError(f"student deeper than teacher ({m} > {n})")
    w_a = w_a.data if isinstance(w_a, Tensor) else np.asarray(w_a)
    s = [h.data if isinstance(h, Tensor) else np.asarray(h) for h in student_hiddens]
    t = [h.data if isinstance(h, Tensor) else np.asarray(h) for h in teacher_hiddens]
    cost = np.empty((m, n))
    for j in range(n):
        proj = t[j] @ w_a
        for i in range(m):
            cost[i, j] = np.mean((proj - s[i]) ** 2)
    return cost


def match_dm(cost: np.ndarray, refresh_step: int = 0) -> MatchingPlan:
    """Row-wise argmin; ties go to the smallest teacher index."""
    cost = np.asarray(cost, dtype=np.float64)
    f = tuple(int(np.argmin(row)) + 1 for row in cost)
    return MatchingPlan(f=f, strategy="DM", cost_matrix=cost, refresh_step=refresh_step)


def match_rdm(cost: np.ndarray, refresh_step: int = 0) -> MatchingPlan:
    """Minimum total cost over strictly increasing mappings, O(M*N) DP.

    Ties resolve to the lexicographically smallest mapping, and strict
    monotonicity forces f(i) >= i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if m > n:
        raise ConfigurationError(f"student deeper than teacher ({m} > {n})")
    # best[i][j]: optimal cost of matching student layers i..M-1 given f(i)=j.
    best = np.full((m, n), np.inf)
    suffmin = np.full((m, n + 1), np.inf)  # suffmin[i][j] = min_{j'>=j} best[i][j']
    for i in range(m - 1, -1, -1):
        hi = n - (m - 1 - i)  # leave room for the remaining student layers
        for j in range(i, hi):
            tail = suffmin[i + 1][j + 1] if i + 1 < m else 0.0
            best[i][j] = cost[i, j] + tail
        for j in range(n - 1, -1, -1):
            suffmin[i][j] = min(best[i][j], suffmin[i][j + 1])
    f = []
    prev = -1
    for i in range(m):
        target = suffmin[i][prev + 1]
        j = prev + 1
        while best[i][j] != target:
            j += 1
        f.append(j + 1)
        prev = j
    return MatchingPlan(f=tuple(f), strategy="RDM", cost_matrix=cost,
                        refresh_step=refresh_step)


def quant_bridge_loss(w_t_layer, w1: Tensor, w2: Tensor, codes, alpha) -> Tensor:
    """Mean absolute difference between the bridged teacher weight
    w1 @ W_T @ w2 and the student's dequantized weight."""
    w_t = w_t_layer if isinstance(w_t_layer, Tensor) else Tensor(w_t_layer)
    q_s = Tensor(np.asarray(codes, dtype=np.float64) * alpha)
    bridged = matmul(matmul(w1, w_t), w2)
    if bridged.shape != q_s.shape:
        raise DimensionError(
            f"bridged teacher weight {bridged.shape} vs quantized student {q_s.shape}"
        )
    return mean(absolute(sub(bridged, q_s)))


def bridge_cost_matrix(teacher_layer_weights, student_quant, w1, w2) -> np.ndarray:
    """cost[i][j] = |w1 @ W_T^j @ w2 - Q_S^i| averaged elementwise (numpy)."""
    w1 = w1.data if isinstance(w1, Tensor) else np.asarray(w1)
    w2 = w2.data if isinstance(w2, Tensor) else np.asarray(w2)
    m, n = len(student_quant), len(teacher_layer_weights)
    if m > n:
        raise ConfigurationError(f"student deeper than teacher ({m} > {n})")
    cost = np.empty((m, n))
    for j, wt in enumerate(teacher_layer_weights):
        wt = wt.data if isinstance(wt, Tensor) else np.asarray(wt)
        bridged = w1 @ wt @ w2
        for i, (codes, alpha) in enumerate(student_quant):
            q_s = np.asarray(codes, dtype=np.float64) * alpha
            cost[i, j] = np.mean(np.abs(bridged - q_s))
    return cost


def match_quant(teacher_layer_weights, student_quant, w1, w2,
                monotone: bool = False, refresh_step: int = 0) -> MatchingPlan:
    """Quantization-guided matching: per student layer, the teacher layer
    whose bridged weight is closest to the student's quantized weight."""
    cost = bridge_cost_matrix(teacher_layer_weights, student_quant, w1, w2)
    if monotone:
        plan = match_rdm(cost, refresh_step=refresh_step)
    else:
        plan = match_dm(cost, refresh_step=refresh_step)
    return MatchingPlan(f=plan.f, strategy="QUANT", cost_matrix=cost,
                        refresh_step=refresh_step)
