"""Problem generation, quantization and recovery metrics for real 1-bit CS.

All randomness is drawn from ``numpy.random.Generator`` objects built from an
explicit seed; nothing touches numpy's global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DegenerateError, InvalidArgumentError

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a generator for ``seed``; generators are passed through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed: SeedLike, count: int) -> list[np.random.SeedSequence]:
    """Split ``seed`` into ``count`` independent child seed sequences."""
    if isinstance(seed, np.random.Generator):
        return seed.bit_generator.seed_seq.spawn(count)
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return seed.spawn(count)


@dataclass(frozen=True)
class SparseSignal:
    values: np.ndarray
    support: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.support.shape[0]


def generate_sparse_signal(n: int, k: int, seed: SeedLike = None) -> SparseSignal:
    """Draw a length-``n`` signal with ``k`` standard-normal entries.

    The support is a uniformly random ``k``-subset of ``range(n)``. A drawn
    value of exactly zero is redrawn so the support size always equals ``k``.
    """
    if not 0 < k <= n:
        raise InvalidArgumentError(f"need 0 < k <= n, got k={k}, n={n}")
    rng = make_rng(seed)
    support = np.sort(rng.choice(n, size=k, replace=False))
    vals = rng.standard_normal(k)
    while np.any(vals == 0.0):
        zero = vals == 0.0
        vals[zero] = rng.standard_normal(int(zero.sum()))
    values = np.zeros(n)
    values[support] = vals
    return SparseSignal(values=values, support=support)


def generate_gaussian_matrix(m: int, n: int, seed: SeedLike = None) -> np.ndarray:
    """M x N matrix with i.i.d. N(0, 1/M) entries."""
    if m <= 0 or n <= 0:
        raise InvalidArgumentError(f"matrix dimensions must be positive, got {m}x{n}")
    rng = make_rng(seed)
    return rng.standard_normal((m, n)) / np.sqrt(m)


def quantize(v) -> np.ndarray:
    """Element-wise sign with ``sign(0) = -1``, returned as float64 +-1."""
    v = np.asarray(v, dtype=float)
    return np.where(v > 0.0, 1.0, -1.0)


def measure(phi: np.ndarray, x, noise_std: float = 0.0, seed: SeedLike = None) -> np.ndarray:
    """Return ``quantize(phi @ x + noise)`` with Gaussian noise of std ``noise_std``."""
    values = x.values if isinstance(x, SparseSignal) else np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or values.ndim != 1 or phi.shape[1] != values.shape[0]:
        raise InvalidArgumentError(
            f"cannot measure a length-{values.shape} signal with a {phi.shape} matrix")
    if noise_std < 0:
        raise InvalidArgumentError("noise_std must be nonnegative")
    z = phi @ values
    if noise_std > 0:
        z = z + noise_std * make_rng(seed).standard_normal(z.shape[0])
    return quantize(z)


def nmse(estimate, truth) -> float:
    """Normalized squared error ``||estimate - truth||^2 / ||truth||^2`` (linear)."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise InvalidArgumentError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    denom = float(np.dot(truth.ravel(), truth.ravel()))
    if denom == 0.0:
        raise InvalidArgumentError("truth has zero norm")
    diff = (estimate - truth).ravel()
    return float(np.dot(diff, diff)) / denom


def to_db(ratio: float) -> float:
    """``10 log10(ratio)``; a zero ratio maps to ``-inf``."""
    if ratio <= 0.0:
        return float("-inf")
    return 10.0 * float(np.log10(ratio))


def nmse_db(estimate, truth) -> float:
    return to_db(nmse(estimate, truth))


def unit_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateError("cannot normalize a zero (or non-finite) vector")
    return v / norm


@dataclass(frozen=True)
class SignalDataset:
    """Rows of ``measurements`` are the y^d; rows of ``signals`` the unit-norm x^d."""

    measurements: np.ndarray
    signals: np.ndarray

    def __len__(self) -> int:
        return self.measurements.shape[0]

    def subset(self, idx) -> "SignalDataset":
        return SignalDataset(self.measurements[idx], self.signals[idx])


def make_signal_dataset(phi: np.ndarray, size: int, k: int, seed: SeedLike = None,
                        noise_std: float = 0.0) -> SignalDataset:
    """Draw ``size`` (y, x) pairs for a fixed sensing matrix.

    Signals are scaled to unit norm because 1-bit measurements carry no
    amplitude information.
    """
    if size <= 0:
        raise InvalidArgumentError("dataset size must be positive")
    m, n = phi.shape
    ys = np.empty((size, m))
    xs = np.empty((size, n))
    for d, child in enumerate(spawn_seeds(seed, size)):
        rng = np.random.default_rng(child)
        sig = generate_sparse_signal(n, k, rng)
        x = unit_normalize(sig.values)
        xs[d] = x
        ys[d] = measure(phi, x, noise_std, rng)
    return SignalDataset(ys, xs)
