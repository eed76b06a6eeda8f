"""Dense float64 helpers, stable reductions and the seeded generator."""
from __future__ import annotations

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite or otherwise unusable numeric input."""


class InvalidConfigError(ValueError):
    """Raised for inconsistent sizes or hyperparameters."""


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared inside a computation."""

    def __init__(self, layer: str, message: str = "non-finite values"):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return `data` as a C-contiguous 2-D float64 array with finite entries."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_sum_exp_rows(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    if z.shape[1] == 0:
        raise InvalidInputError("log-sum-exp over zero columns")
    m = z.max(axis=1)
    if z.shape[1] == 1:
        return m.copy()
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


class RngState:
    """Seeded Philox stream.

    Philox is counter based, so the stream depends only on the seed and the
    number of draws, not on the platform.  ``split`` hands out independent
    child streams for parallel or per-purpose use.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int = 1) -> list["RngState"]:
        children = []
        for child_seq in self._seq.spawn(n):
            child = RngState.__new__(RngState)
            child.seed = self.seed
            child._seq = child_seq
            child._gen = np.random.Generator(np.random.Philox(child_seq))
            children.append(child)
        return children

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def gaussian_sample(rng: RngState, n, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise InvalidInputError("stddev must be non-negative")
    out = rng.generator.standard_normal(n)
    return mean + stddev * out
