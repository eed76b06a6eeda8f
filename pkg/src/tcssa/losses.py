"""Auxiliary routing losses, the classification task loss and their combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import InvalidConfigError, InvalidInputError, as_matrix, log_sum_exp_rows
from .router import RoutingStats


@dataclass(frozen=True)
class LossConstants:
    delta: float = 1e-9
    epsilon: float = 1e-8
    alpha: float = 1e-4
    lam: float = 0.1
    entropy_coeff: float = 0.5

    def __post_init__(self):
        for name in ("delta", "epsilon", "alpha", "entropy_coeff"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise InvalidConfigError("lambda must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    switch: float
    entropy: float
    z: float
    total: float
    lam: float

    def as_dict(self) -> dict[str, float]:
        return {
            "task": self.task,
            "switch": self.switch,
            "entropy": self.entropy,
            "z": self.z,
            "total": self.total,
            "lambda": self.lam,
        }


def switch_loss(stats: RoutingStats) -> float:
    k = stats.mean_prob.size
    return float(k * np.dot(stats.mean_prob, stats.load_fraction))


def entropy_loss(stats: RoutingStats, epsilon: float = 1e-8) -> float:
    p = stats.mean_prob
    k = p.size
    if k < 2:
        raise InvalidConfigError("entropy loss needs K >= 2 (log K = 0)")
    h = -np.sum(p * np.log(p + epsilon))
    return float(1.0 - h / np.log(k))


def z_loss(logits, alpha: float = 1e-4) -> float:
    lse = log_sum_exp_rows(logits)
    return float(alpha * np.mean(lse * lse))


def task_loss_cross_entropy(class_logits, labels) -> float:
    z = as_matrix(class_logits, "class logits")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size != z.shape[0]:
        raise InvalidInputError("one label per row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise InvalidInputError("label out of range")
    lse = log_sum_exp_rows(z)
    return float(np.mean(lse - z[np.arange(labels.size), labels]))


def total_loss(task: float, stats: RoutingStats, logits, constants: LossConstants = LossConstants()) -> LossBreakdown:
    sw = switch_loss(stats)
    ent = entropy_loss(stats, constants.epsilon)
    z = z_loss(logits, constants.alpha)
    return combine(task, sw, ent, z, constants)


def combine(task, sw, ent, z, constants: LossConstants) -> LossBreakdown:
    lam = constants.lam
    total = task + lam * (sw + constants.entropy_coeff * ent + z)
    return LossBreakdown(float(task), float(sw), float(ent), float(z), float(total), float(lam))
