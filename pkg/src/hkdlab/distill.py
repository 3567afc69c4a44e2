"""Distillation objectives for the two tiers of the hierarchy.

All losses are sums over sentences, target steps and vocabulary entries; rows
past a sentence's end are masked out.  Every ``*_kd_loss`` returns the value
together with its gradient with respect to the *student logits*; the
``*_total_loss`` functions backpropagate that into a parameter gradient.
Teachers are always treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SpecError
from .model import (
    Batch,
    SequenceModel,
    StepDistributions,
    forward,
    forward_backward,
    nll_dlogits,
    nll_from_dists,
    perplexity_from_dists,
)


@dataclass(frozen=True)
class Lambda2Schedule:
    start: float = 0.5
    end: float = 3.0
    total_steps: int = 1
    shape: str = "linear"


@dataclass
class DistillationPlan:
    lam: float = 0.6
    lam1: float = 0.5
    lam2: Lambda2Schedule = Lambda2Schedule()
    check_every: int = 2
    threshold: float = 1.0
    flags: dict[str, bool] | None = None
    temperature: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise SpecError("plan.lambda", f"{self.lam} is outside [0, 1]")
        if self.lam2.start > self.lam2.end:
            raise SpecError("plan.lambda2", "start must not exceed end")
        if self.check_every < 1:
            raise SpecError("plan.check_every", "must be >= 1")
        if self.temperature <= 0:
            raise SpecError("plan.temperature", "must be positive")


@dataclass
class TeacherWeights:
    alpha: np.ndarray
    delta: np.ndarray

    @property
    def perplexities(self) -> np.ndarray:
        return -self.delta


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    nll: float
    kd: float | None
    student: StepDistributions


def _same_shape(q: StepDistributions, p: StepDistributions) -> None:
    if q.log_probs.shape != p.log_probs.shape:
        raise SpecError("teacher_dists", f"shape {q.log_probs.shape} != student shape {p.log_probs.shape}")


def _cross_entropy(q: StepDistributions, p: StepDistributions) -> float:
    qp = np.exp(q.log_probs)
    # 0 * log 0 terms are 0 even if the student assigns zero mass
    terms = np.where(qp > 0, qp * p.log_probs, 0.0)
    return float(-(terms.sum(axis=-1) * p.mask).sum())


def selective_kd_loss(teacher: StepDistributions, student: StepDistributions) -> tuple[float, np.ndarray]:
    """``-sum Q(v|.) log P(v|.)`` over sentences, steps and vocabulary."""
    _same_shape(teacher, student)
    q = np.exp(teacher.log_probs)
    p = np.exp(student.log_probs)
    dlogits = (q.sum(axis=-1, keepdims=True) * p - q) * student.mask[..., None]
    return _cross_entropy(teacher, student), dlogits


def adaptive_kd_loss(
    teachers: Sequence[StepDistributions], student: StepDistributions, alpha: Sequence[float]
) -> tuple[float, np.ndarray]:
    """Alpha-weighted sum of per-teacher KD terms."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(teachers) == 0 or alpha.shape != (len(teachers),):
        raise SpecError("alpha", f"{alpha.size} weights for {len(teachers)} teachers")
    value = 0.0
    dlogits = np.zeros_like(student.log_probs)
    for a, q in zip(alpha, teachers):
        v, d = selective_kd_loss(q, student)
        value += a * v
        dlogits += a * d
    return value, dlogits


def teacher_distributions(teacher: SequenceModel, batch: Batch, temperature: float = 1.0) -> StepDistributions:
    d = forward(teacher, batch)
    if temperature != 1.0:
        z = d.log_probs / temperature
        z -= z.max(axis=-1, keepdims=True)
        d = StepDistributions(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), d.gold, d.mask)
    return d


def selective_total_loss(
    batch: Batch,
    student: SequenceModel,
    teacher: SequenceModel | StepDistributions,
    lam: float,
    temperature: float = 1.0,
) -> LossResult:
    """``(1 - lam) * NLL + lam * KD`` against a single bilingual teacher."""
    if not 0.0 <= lam <= 1.0:
        raise SpecError("lambda", f"{lam} is outside [0, 1]")
    q = teacher if isinstance(teacher, StepDistributions) else teacher_distributions(teacher, batch, temperature)

    def combine(d):
        nll = nll_from_dists(d)
        kd, dkd = selective_kd_loss(q, d)
        return (1.0 - lam) * nll + lam * kd, (1.0 - lam) * nll_dlogits(d) + lam * dkd, (nll, kd)

    value, grad, dists, (nll, kd) = forward_backward(student, batch, combine)
    return LossResult(value, grad, nll, kd, dists)


def nll_total_loss(batch: Batch, student: SequenceModel) -> LossResult:
    value, grad, dists, _ = forward_backward(student, batch, lambda d: (nll_from_dists(d), nll_dlogits(d), None))
    return LossResult(value, grad, value, None, dists)


def weights_from_perplexities(perplexities: Sequence[float]) -> TeacherWeights:
    delta = -np.asarray(perplexities, dtype=np.float64)
    if delta.size == 0:
        raise SpecError("teacher_assistants", "need at least one teacher-assistant")
    z = delta - delta.max()
    e = np.exp(z)
    return TeacherWeights(e / e.sum(), delta)


def contribution_weights(teacher_assistants: Sequence[SequenceModel | StepDistributions], batch: Batch | None = None) -> TeacherWeights:
    """Softmax over negative perplexities of each teacher-assistant on ``batch``."""
    if len(teacher_assistants) == 0:
        raise SpecError("teacher_assistants", "need at least one teacher-assistant")
    ppl = []
    for ta in teacher_assistants:
        d = ta if isinstance(ta, StepDistributions) else forward(ta, batch)
        ppl.append(perplexity_from_dists(d))
    return weights_from_perplexities(ppl)


def adaptive_total_loss(
    batch: Batch,
    student: SequenceModel,
    teacher_assistants: Sequence[SequenceModel | StepDistributions],
    alpha: Sequence[float],
    lam1: float,
    lam2: float,
    temperature: float = 1.0,
) -> LossResult:
    """``lam1 * NLL + lam2 * adaptive KD``."""
    qs = [
        ta if isinstance(ta, StepDistributions) else teacher_distributions(ta, batch, temperature)
        for ta in teacher_assistants
    ]

    def combine(d):
        nll = nll_from_dists(d)
        kd, dkd = adaptive_kd_loss(qs, d, alpha)
        return lam1 * nll + lam2 * kd, lam1 * nll_dlogits(d) + lam2 * dkd, (nll, kd)

    value, grad, dists, (nll, kd) = forward_backward(student, batch, combine)
    return LossResult(value, grad, nll, kd, dists)


def anneal_lambda2(step: int, schedule: Lambda2Schedule) -> float:
    if step < 0:
        raise SpecError("step", "must be >= 0")
    frac = min(1.0, step / max(1, schedule.total_steps))
    if schedule.shape == "linear":
        w = frac
    elif schedule.shape == "sigmoid":
        # logistic ramp rescaled so that w(0) = 0 and w(1) = 1 exactly
        k = 10.0
        lo, hi = 1 / (1 + math.exp(k / 2)), 1 / (1 + math.exp(-k / 2))
        w = (1 / (1 + math.exp(-k * (frac - 0.5))) - lo) / (hi - lo)
    else:
        raise SpecError("plan.lambda2.shape", f"unknown schedule {schedule.shape!r}")
    return schedule.start + (schedule.end - schedule.start) * w
