"""Objective terms for online distillation with a gated branch ensemble.

Every term is a mean over the batch. Probabilities that reach a log are
floored at ``PROB_FLOOR``; each floored entry increments ``clamp_counter``
so dead classes show up in diagnostics instead of as Inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, make_op

DEFAULT_TEMPERATURE = 3.0
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


class ClampCounter:
    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


clamp_counter = ClampCounter()


def check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0 or not math.isfinite(T):
        raise ConfigError(f"temperature must be positive and finite, got {T}")
    return T


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y).astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for a batch of {n}")
    return y


def softmax(z: Tensor) -> Tensor:
    """Class posterior over the last axis (max-subtracted)."""
    return tn.softmax(z, axis=-1)


def soft_targets(z: Tensor, T: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Temperature-softened posterior ``softmax(z / T)``."""
    T = check_temperature(T)
    if T == 1.0:
        return tn.softmax(z, axis=-1)
    return tn.softmax(tn.scale(z, 1.0 / T), axis=-1)


def cross_entropy(p: Tensor, y) -> Tensor:
    """Mean of ``-log p[y]`` for probability rows ``p``."""
    p = tn.as_tensor(p)
    n = p.shape[0]
    y = _labels(y, n)
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise DimensionError("label out of range")
    picked = tn.getitem(p, (np.arange(n), y))
    low = picked.data < PROB_FLOOR
    if low.any():
        clamp_counter.add(low.sum())
        picked = tn.clamp_min(picked, PROB_FLOOR)
    return tn.scale(tn.mean(tn.log(picked)), -1.0)


def softmax_cross_entropy(z: Tensor, y) -> Tensor:
    """Fused ``cross_entropy(softmax(z), y)``; gradient is ``(p - onehot(y)) / N``."""
    z = tn.as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {z.shape}")
    n, c = z.shape
    y = _labels(y, n)
    if np.any(y < 0) or np.any(y >= c):
        raise DimensionError("label out of range")
    if not np.isfinite(z.data).all():
        raise NumericError("softmax_cross_entropy: non-finite logits")
    logp = tn.log_softmax_array(z.data)
    picked = logp[np.arange(n), y]
    low = picked < LOG_FLOOR
    if low.any():
        clamp_counter.add(low.sum())
        picked = np.maximum(picked, LOG_FLOOR)
    out = np.asarray(-picked.mean(), dtype=z.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1
        return (grad * (g / n),)

    return make_op("softmax_cross_entropy", out, (z,), bw)


def _floored_log(p: Tensor) -> Tensor:
    low = p.data < PROB_FLOOR
    if low.any():
        clamp_counter.add(low.sum())
        p = tn.clamp_min(p, PROB_FLOOR)
    return tn.log(p)


def _plogp(pe: np.ndarray) -> np.ndarray:
    return np.where(pe > 0, pe * np.log(np.maximum(pe, PROB_FLOOR)), 0.0).astype(pe.dtype)


def kl_distill(teacher_soft: Tensor, branch_softs: Sequence[Tensor]) -> Tensor:
    """``sum_i KL(teacher || branch_i)`` averaged over the batch.

    The teacher distribution is a constant target: no gradient reaches it.
    """
    pe = tn.as_tensor(teacher_soft).data
    n = pe.shape[0]
    neg_entropy = float(_plogp(pe).sum()) / n
    total = None
    for pi in branch_softs:
        pi = tn.as_tensor(pi)
        if pi.shape != pe.shape:
            raise DimensionError(f"branch soft target {pi.shape} vs teacher {pe.shape}")
        cross = tn.scale(tn.sum(tn.mul(Tensor(pe), _floored_log(pi))), -1.0 / n)
        term = tn.add(cross, neg_entropy)
        total = term if total is None else tn.add(total, term)
    return total


def kl_from_logits(teacher_logits: Tensor, branch_logits: Sequence[Tensor],
                   T: float = DEFAULT_TEMPERATURE, detach_teacher: bool = True) -> Tensor:
    """Same quantity as :func:`kl_distill` on ``soft_targets(., T)``, computed
    in log space for stability. With ``detach_teacher=False`` gradients also
    flow into the teacher logits through every KL term.
    """
    T = check_temperature(T)
    inv_t = 1.0 / T
    ze = tn.as_tensor(teacher_logits)
    if detach_teacher:
        ze = Tensor(ze.data)
    log_pe = tn.log_softmax(tn.scale(ze, inv_t))
    pe = tn.exp(log_pe)
    n = ze.shape[0]
    total = None
    for zi in branch_logits:
        log_pi = tn.log_softmax(tn.scale(zi, inv_t))
        low = log_pi.data < LOG_FLOOR
        if low.any():
            clamp_counter.add(low.sum())
            log_pi = tn.clamp_min(log_pi, LOG_FLOOR)
        term = tn.scale(tn.sum(tn.mul(pe, tn.sub(log_pe, log_pi))), 1.0 / n)
        total = term if total is None else tn.add(total, term)
    return total


@dataclass
class LossBreakdown:
    """Per-batch loss components; ``total`` reconstructs as
    ``sum(branch_ce) + teacher_ce + temperature**2 * kl``.
    """

    branch_ce: list[float]
    teacher_ce: float
    kl: float
    total: float
    temperature: float = DEFAULT_TEMPERATURE
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    def reconstruct(self) -> float:
        return sum(self.branch_ce) + self.teacher_ce + self.temperature ** 2 * self.kl


def total_loss(outputs, y, T: float = DEFAULT_TEMPERATURE, no_distill: bool = False,
               no_gating: bool = False, kl_backprop_teacher: bool = False) -> LossBreakdown:
    """Assemble branch CEs, teacher CE and the T^2-weighted KL term.

    ``outputs`` needs ``branch_logits`` (list of N x C) and ``teacher_logits``.
    ``no_gating`` rebuilds the teacher as the plain mean of branch logits;
    ``no_distill`` drops the KL term entirely.
    """
    T = check_temperature(T)
    zs = list(outputs.branch_logits)
    if not zs:
        raise DimensionError("no branch logits")
    if no_gating:
        ze = tn.scale(zs[0] if len(zs) == 1 else _sum_all(zs), 1.0 / len(zs))
    else:
        ze = outputs.teacher_logits
    branch_ce = [softmax_cross_entropy(z, y) for z in zs]
    teacher_ce = softmax_cross_entropy(ze, y)
    loss = _sum_all(branch_ce + [teacher_ce])
    kl_value = 0.0
    if not no_distill:
        kl = kl_from_logits(ze, zs, T, detach_teacher=not kl_backprop_teacher)
        kl_value = kl.item()
        loss = tn.add(loss, tn.scale(kl, T * T))
    return LossBreakdown(
        branch_ce=[c.item() for c in branch_ce],
        teacher_ce=teacher_ce.item(),
        kl=kl_value,
        total=loss.item(),
        temperature=T,
        loss=loss,
    )


def kd_loss(student_logits: Tensor, teacher_logits, y, T: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Offline distillation objective: CE + T^2 * KL(teacher_soft || student_soft).

    The teacher logits are treated as constants.
    """
    T = check_temperature(T)
    ce = softmax_cross_entropy(student_logits, y)
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    kl = kl_from_logits(Tensor(teacher), [student_logits], T)
    return tn.add(ce, tn.scale(kl, T * T))


def _sum_all(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = tn.add(acc, t)
    return acc
