"""Full trainable state: gate, slot MLP and classification head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import SlotMlpParams
from .numerics import RngState, ShapeError, gaussian_sample
from .router import GateParams

FIELDS = ("gate", "w1", "b1", "w2", "b2", "head_w", "head_b")


@dataclass
class ModelParams:
    gate: GateParams
    slot_mlp: SlotMlpParams
    head_w: np.ndarray  # D' x C
    head_b: np.ndarray  # C

    def __post_init__(self):
        self.head_w = np.asarray(self.head_w, dtype=np.float64)
        self.head_b = np.asarray(self.head_b, dtype=np.float64)
        d_in = self.gate.weight.shape[1]
        if self.slot_mlp.in_dim != d_in:
            raise ShapeError(f"slot MLP input {self.slot_mlp.in_dim} vs features {d_in}")
        if self.slot_mlp.per_slot and self.slot_mlp.w1.shape[0] != self.n_slots:
            raise ShapeError("per-slot MLP count differs from the slot count")
        if self.head_w.shape[0] != self.slot_mlp.out_dim or self.head_b.shape != (self.head_w.shape[1],):
            raise ShapeError("head shapes do not match the slot token dim")

    @property
    def n_slots(self) -> int:
        return self.gate.n_slots

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        m = self.slot_mlp
        return {
            "gate": self.gate.weight,
            "w1": m.w1,
            "b1": m.b1,
            "w2": m.w2,
            "b2": m.b2,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        """A new ModelParams with every entry taken from `vec` (same order as flat())."""
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = {}, 0
        for name, arr in self.arrays().items():
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return self.from_arrays(out, self.slot_mlp.activation, self.slot_mlp.residual)

    @classmethod
    def from_arrays(cls, arrays, activation="gelu", residual=False) -> "ModelParams":
        return cls(
            gate=GateParams(arrays["gate"]),
            slot_mlp=SlotMlpParams(
                arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                activation=activation, residual=residual,
            ),
            head_w=arrays["head_w"],
            head_b=arrays["head_b"],
        )

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())


def init_params(
    rng: RngState,
    d: int,
    n_slots: int,
    n_classes: int,
    hidden: int | None = None,
    d_out: int | None = None,
    per_slot: bool = False,
    activation: str = "gelu",
    residual: bool = False,
) -> ModelParams:
    """Gaussian weights with stddev 1/sqrt(fan_in), zero biases."""
    hidden = hidden or 2 * d
    d_out = d_out or d
    lead = (n_slots,) if per_slot else ()

    def normal(shape, fan_in):
        return gaussian_sample(rng, shape, 0.0, 1.0 / np.sqrt(fan_in))

    return ModelParams(
        gate=GateParams(normal((n_slots, d), d)),
        slot_mlp=SlotMlpParams(
            normal(lead + (d, hidden), d),
            np.zeros(lead + (hidden,)),
            normal(lead + (hidden, d_out), hidden),
            np.zeros(lead + (d_out,)),
            activation=activation,
            residual=residual,
        ),
        head_w=normal((d_out, n_classes), d_out),
        head_b=np.zeros(n_classes),
    )
