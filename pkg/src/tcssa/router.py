"""Linear gate, Top-k slot selection and utilization statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import InvalidConfigError, ShapeError, as_matrix, softmax_rows


@dataclass
class GateParams:
    weight: np.ndarray  # K x D

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "gate weight")
        if self.weight.shape[0] < 2:
            raise InvalidConfigError("the gate needs at least 2 slots")

    @property
    def n_slots(self) -> int:
        return self.weight.shape[0]


@dataclass
class RoutingTable:
    """Per-patch selected slots (best first) and their truncated weights."""

    slots: np.ndarray  # N x top_k, int64
    weights: np.ndarray  # N x top_k
    n_slots: int

    @property
    def n_patches(self) -> int:
        return self.slots.shape[0]

    @property
    def top_k(self) -> int:
        return self.slots.shape[1]

    def dense(self) -> np.ndarray:
        """The N x K matrix of truncated weights (zero off the selection)."""
        out = np.zeros((self.n_patches, self.n_slots))
        np.put_along_axis(out, self.slots, self.weights, axis=1)
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n_patches, self.n_slots), dtype=bool)
        np.put_along_axis(out, self.slots, True, axis=1)
        return out

    def take(self, rows) -> "RoutingTable":
        return RoutingTable(self.slots[rows], self.weights[rows], self.n_slots)


@dataclass
class RoutingStats:
    mean_prob: np.ndarray  # P_k
    load_fraction: np.ndarray  # f_k
    n_patches: int

    @property
    def max_load(self) -> float:
        return float(self.load_fraction.max())


def gate_forward(x, gate: GateParams) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "features")
    if x.shape[1] != gate.weight.shape[1]:
        raise ShapeError(
            f"feature dim {x.shape[1]} does not match gate dim {gate.weight.shape[1]}"
        )
    logits = x @ gate.weight.T
    return logits, softmax_rows(logits)


def top_k_select(probs, top_k: int = 2) -> RoutingTable:
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    n_slots = probs.shape[1]
    if top_k < 1 or top_k > n_slots:
        raise InvalidConfigError(f"top_k={top_k} must lie in [1, {n_slots}]")
    idx, val = _kernels.topk(probs, top_k)
    return RoutingTable(idx, val, n_slots)


def routing_stats(probs, table: RoutingTable) -> RoutingStats:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (table.n_patches, table.n_slots):
        raise ShapeError(
            f"probs {probs.shape} vs table ({table.n_patches}, {table.n_slots})"
        )
    n = probs.shape[0]
    counts = np.bincount(table.slots.ravel(), minlength=table.n_slots)
    return RoutingStats(
        mean_prob=probs.mean(axis=0),
        load_fraction=counts / (n * table.top_k),
        n_patches=n,
    )
