"""Weighted slot pooling, slot MLP refinement and the end-to-end compressor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import (
    ACTIVATIONS,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
    as_matrix,
)
from .router import RoutingStats, RoutingTable, gate_forward, routing_stats, top_k_select

DELTA = 1e-9


@dataclass
class SlotMlpParams:
    """Two-layer MLP applied to every slot row.

    Shared weights have shapes (D, H), (H,), (H, D'), (D',).  Per-slot weights
    carry a leading K axis: (K, D, H), (K, H), (K, H, D'), (K, D').
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"
    residual: bool = False

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"slot MLP {name} is not finite")
            setattr(self, name, arr)
        if self.activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}")
        if self.w1.shape[-1] < 1:
            raise InvalidConfigError("hidden width must be >= 1")
        if self.residual and self.in_dim != self.out_dim:
            raise InvalidConfigError("residual slot MLP needs D' == D")

    @property
    def per_slot(self) -> bool:
        return self.w1.ndim == 3

    @property
    def in_dim(self) -> int:
        return self.w1.shape[-2]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[-1]


@dataclass
class SlotTokens:
    tokens: np.ndarray  # K x D'

    @property
    def n_slots(self) -> int:
        return self.tokens.shape[0]


@dataclass
class CompressConfig:
    top_k: int = 2
    delta: float = DELTA


def aggregate_slots(x, table: RoutingTable, delta: float = DELTA) -> np.ndarray:
    """c_k = sum_j w_jk x_j / (sum_j w_jk + delta); empty slots give zeros."""
    x = as_matrix(x, "features")
    if table.n_patches != x.shape[0]:
        raise ShapeError(f"table has {table.n_patches} patches, features {x.shape[0]}")
    item = np.zeros(x.shape[0], dtype=np.int64)
    num, den = _kernels.scatter_slots(x, table.slots, table.weights, item, 1, table.n_slots)
    return num[0] / (den[0] + delta)[:, None]


def mlp_hidden(raw: np.ndarray, mlp: SlotMlpParams) -> np.ndarray:
    """Pre-activations of the first layer; raw is (..., K, D)."""
    if mlp.per_slot:
        return np.einsum("...kd,kdh->...kh", raw, mlp.w1) + mlp.b1
    return raw @ mlp.w1 + mlp.b1


def mlp_output(act: np.ndarray, mlp: SlotMlpParams) -> np.ndarray:
    if mlp.per_slot:
        return np.einsum("...kh,khe->...ke", act, mlp.w2) + mlp.b2
    return act @ mlp.w2 + mlp.b2


def refine_slots(raw, mlp: SlotMlpParams) -> SlotTokens:
    raw = as_matrix(raw, "raw slots")
    if raw.shape[1] != mlp.in_dim:
        raise ShapeError(f"raw slot dim {raw.shape[1]} vs MLP input {mlp.in_dim}")
    if mlp.per_slot and mlp.w1.shape[0] != raw.shape[0]:
        raise ShapeError(f"{raw.shape[0]} slots vs {mlp.w1.shape[0]} per-slot MLPs")
    fn, _ = ACTIVATIONS[mlp.activation]
    out = mlp_output(fn(mlp_hidden(raw, mlp)), mlp)
    if mlp.residual:
        out = out + raw
    return SlotTokens(out)


def compress(batch, params, config: CompressConfig | None = None):
    """Compress each item of `batch` (a list of N_i x D arrays) to K tokens.

    Returns three lists: SlotTokens, RoutingTable and RoutingStats per item.
    """
    config = config or CompressConfig()
    tokens, tables, stats = [], [], []
    for x in batch:
        if np.asarray(x).size == 0:
            raise InvalidInputError("cannot compress an item with no patches")
        x = as_matrix(x, "features")
        _, probs = gate_forward(x, params.gate)
        table = top_k_select(probs, config.top_k)
        raw = aggregate_slots(x, table, config.delta)
        tokens.append(refine_slots(raw, params.slot_mlp))
        tables.append(table)
        stats.append(routing_stats(probs, table))
    return tokens, tables, stats


def compression_ratio(n_patches: int, n_slots: int) -> float:
    return n_patches / n_slots


__all__ = [
    "CompressConfig",
    "DELTA",
    "RoutingStats",
    "SlotMlpParams",
    "SlotTokens",
    "aggregate_slots",
    "compress",
    "compression_ratio",
    "refine_slots",
]
