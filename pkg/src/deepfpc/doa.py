"""1-bit direction-of-arrival estimation on a uniform linear array.

Complex snapshots are quantized component-wise and lifted to the real model
``z~ = sign(L~ s~ + n~)`` with ``L~ = [[Re L, -Im L], [Im L, Re L]]``. Each
snapshot is then an independent real 1-bit CS problem.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import fpc, network
from .errors import DegenerateError, InsufficientSnapshotsError, InvalidArgumentError
from .sensing import SeedLike, SignalDataset, make_rng, quantize, spawn_seeds

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UlaGeometry:
    sensors: int
    spacing: float = 0.5  # wavelengths

    def __post_init__(self):
        if self.sensors < 2:
            raise InvalidArgumentError("a ULA needs at least two sensors")
        if not self.spacing > 0:
            raise InvalidArgumentError("element spacing must be positive")


@dataclass(frozen=True)
class AngularGrid:
    """Candidate directions in degrees, strictly increasing, within [-90, 90)."""

    angles: np.ndarray
    kind: str = "uniform"

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        object.__setattr__(self, "angles", a)
        if a.ndim != 1 or a.size < 1:
            raise InvalidArgumentError("grid must be a non-empty vector")
        if np.any(np.diff(a) <= 0):
            raise InvalidArgumentError("grid angles must be strictly increasing")
        if a[0] < -90 or a[-1] >= 90:
            raise InvalidArgumentError("grid angles must lie in [-90, 90)")
        if self.kind not in ("uniform", "orthogonal"):
            raise InvalidArgumentError(f"unknown grid kind {self.kind!r}")

    def __len__(self) -> int:
        return self.angles.size

    def nearest(self, theta: float) -> int:
        return int(np.argmin(np.abs(self.angles - theta)))


def uniform_grid(size: int, start: float = -90.0, stop: float = 90.0) -> AngularGrid:
    """``size`` angles ``start + i * (stop - start) / size``; 180 points give a 1 degree grid."""
    if size < 1:
        raise InvalidArgumentError("grid size must be positive")
    step = (stop - start) / size
    return AngularGrid(start + step * np.arange(size), "uniform")


def orthogonal_grid(m_sensors: int) -> AngularGrid:
    """``M`` angles with ``sin(theta_i) = 2 i / M - 1``, i = 0..M-1.

    With half-wavelength spacing the steering columns on this grid are
    mutually orthogonal.
    """
    if m_sensors < 2:
        raise InvalidArgumentError("need at least two sensors")
    s = 2.0 * np.arange(m_sensors) / m_sensors - 1.0
    return AngularGrid(np.degrees(np.arcsin(s)), "orthogonal")


def steering_vectors(geometry: UlaGeometry, angles_deg) -> np.ndarray:
    """Columns ``exp(-j 2 pi d m sin(theta))``, m = 0..M-1."""
    m = np.arange(geometry.sensors)[:, None]
    s = np.sin(np.radians(np.asarray(angles_deg, dtype=float)))[None, :]
    return np.exp(-2j * np.pi * geometry.spacing * m * s)


def lift_matrix(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat)
    return np.block([[mat.real, -mat.imag], [mat.imag, mat.real]])


def lift_vector(v: np.ndarray) -> np.ndarray:
    """Stack real over imaginary parts (along axis 0, so matrices lift column-wise)."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=0)


def unlift_vector(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    half = v.shape[0] // 2
    return v[:half] + 1j * v[half:]


@dataclass(frozen=True)
class SteeringMatrix:
    entries: np.ndarray
    lifted: np.ndarray
    geometry: UlaGeometry
    grid: AngularGrid


def steering_matrix(geometry: UlaGeometry, grid: AngularGrid) -> SteeringMatrix:
    entries = steering_vectors(geometry, grid.angles)
    return SteeringMatrix(entries, np.ascontiguousarray(lift_matrix(entries)), geometry, grid)


@dataclass(frozen=True)
class DoaScenario:
    """``snr_db=None`` means noise-free."""

    geometry: UlaGeometry
    grid: AngularGrid
    true_doas: Sequence[float]
    snapshots: int
    snr_db: Optional[float] = None
    seed: SeedLike = 0

    def __post_init__(self):
        doas = np.asarray(self.true_doas, dtype=float)
        object.__setattr__(self, "true_doas", doas)
        if doas.ndim != 1 or doas.size < 1:
            raise InvalidArgumentError("need at least one true DOA")
        if self.snapshots < 1:
            raise InvalidArgumentError("need at least one snapshot")
        lo, hi = self.grid.angles[0], self.grid.angles[-1]
        if np.any(doas < lo - 1e-9) or np.any(doas > hi + 1e-9):
            raise InvalidArgumentError(f"true DOAs must lie inside the grid range [{lo}, {hi}]")

    def with_seed(self, seed) -> "DoaScenario":
        return DoaScenario(self.geometry, self.grid, self.true_doas, self.snapshots,
                           self.snr_db, seed)


@dataclass
class SnapshotSet:
    quantized: np.ndarray          # M x L complex, entries +-1 +-1j
    lifted: np.ndarray             # 2M x L real
    source_indices: np.ndarray
    snapped: list = field(default_factory=list)
    noise: Optional[np.ndarray] = None
    sources: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return self.lifted.shape[1]

    @property
    def lifted_columns(self) -> list:
        return [self.lifted[:, t] for t in range(self.count)]


def complex_sign(v: np.ndarray) -> np.ndarray:
    return quantize(v.real) + 1j * quantize(v.imag)


def _complex_normal(rng, shape, variance=1.0):
    return np.sqrt(variance / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_snapshots(scenario: DoaScenario, steering: Optional[SteeringMatrix] = None):
    """Draw ``L`` quantized snapshots; returns ``(SnapshotSet, S~)`` with ``S~`` of shape 2N x L.

    Source amplitudes are unit-variance circular complex Gaussians and the
    noise variance is ``10^(-SNR/10)``. Off-grid DOAs are snapped to the
    nearest grid point and listed in ``SnapshotSet.snapped``.
    """
    grid = scenario.grid
    if steering is None:
        steering = steering_matrix(scenario.geometry, grid)
    rng = make_rng(scenario.seed)
    idx = np.array([grid.nearest(a) for a in scenario.true_doas])
    snapped = [(float(a), float(grid.angles[i])) for a, i in zip(scenario.true_doas, idx)
               if abs(grid.angles[i] - a) > 1e-9]
    if snapped:
        log.debug("snapped off-grid DOAs to grid: %s", snapped)
    if len(set(idx.tolist())) < idx.size:
        raise InvalidArgumentError("two true DOAs snap to the same grid point")
    M, N, L = scenario.geometry.sensors, len(grid), scenario.snapshots
    sources = _complex_normal(rng, (idx.size, L))
    S = np.zeros((N, L), dtype=complex)
    S[idx] = sources
    clean = steering.entries @ S
    noise = None
    if scenario.snr_db is not None:
        noise = _complex_normal(rng, (M, L), 10.0 ** (-scenario.snr_db / 10.0))
        clean = clean + noise
    Z = complex_sign(clean)
    snaps = SnapshotSet(Z, np.ascontiguousarray(lift_vector(Z)), idx, snapped, noise, sources)
    return snaps, lift_vector(S)


Solver = Union[fpc.FpcConfig, network.UnfoldedModel]


def _solve_column(steering: SteeringMatrix, z: np.ndarray, solver: Solver) -> np.ndarray:
    if isinstance(solver, network.UnfoldedModel):
        out, _ = network.forward(solver, z[None, :])
        return out[0]
    return fpc.solve(steering.lifted, z, solver)


def recover_spectrum(snapshots: SnapshotSet, steering: SteeringMatrix, solver: Solver,
                     failures: Optional[list] = None) -> np.ndarray:
    """Solve every lifted snapshot independently; column ``t`` of the result is snapshot ``t``.

    Columns whose solve degenerates are left at zero and their indices are
    appended to ``failures`` when given.
    """
    two_m, two_n = steering.lifted.shape
    if snapshots.lifted.shape[0] != two_m:
        raise InvalidArgumentError("snapshots do not match the steering matrix")
    if isinstance(solver, network.UnfoldedModel) and (solver.m, solver.n) != (two_m, two_n):
        raise InvalidArgumentError(
            f"model is {solver.m}x{solver.n}, problem is {two_m}x{two_n}")
    L = snapshots.count
    out = np.zeros((two_n, L))
    if isinstance(solver, fpc.FpcConfig):
        rows = fpc.solve_rows(steering.lifted, snapshots.lifted.T, solver)
        out[:] = rows.T
        return out
    for t in range(L):
        try:
            out[:, t] = _solve_column(steering, snapshots.lifted[:, t], solver)
        except DegenerateError:
            if failures is None:
                raise
            failures.append(t)
    return out


def recover_spectrum_columnwise(snapshots: SnapshotSet, steering: SteeringMatrix,
                                solver: Solver) -> np.ndarray:
    """Reference path: one independent solve per snapshot."""
    return np.stack([_solve_column(steering, snapshots.lifted[:, t], solver)
                     for t in range(snapshots.count)], axis=1)


def multi_snapshot_objective(S, lifted_steering, Z, lam: float) -> float:
    """``||S||_{1,1} + lam * ||max(-(Z * (L~ S)), 0)||_{1,1}``."""
    S = np.asarray(S, dtype=float)
    Lt = np.asarray(lifted_steering, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if S.ndim != 2 or Lt.ndim != 2 or Z.ndim != 2:
        raise InvalidArgumentError("all arguments must be matrices")
    if Lt.shape[1] != S.shape[0] or Z.shape != (Lt.shape[0], S.shape[1]):
        raise InvalidArgumentError(
            f"incompatible shapes S{S.shape}, L~{Lt.shape}, Z{Z.shape}")
    return float(np.abs(S).sum() + lam * np.maximum(-(Z * (Lt @ S)), 0.0).sum())


def spectrum_power(spectrum: np.ndarray) -> np.ndarray:
    """Per-angle power ``sum_t (Re^2 + Im^2)`` of a lifted 2N x L spectrum."""
    spectrum = np.atleast_2d(np.asarray(spectrum, dtype=float))
    if spectrum.shape[0] == 1:
        spectrum = spectrum.T
    n = spectrum.shape[0] // 2
    return (spectrum[:n] ** 2 + spectrum[n:] ** 2).sum(axis=1)


def pick_peaks(power: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` strongest local maxima, ascending.

    A local maximum strictly exceeds its neighbours (one neighbour at the
    boundary). Missing peaks are filled with the largest remaining entries.
    """
    power = np.asarray(power, dtype=float)
    n = power.size
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"cannot pick {k} peaks from {n} bins")
    left = np.r_[-np.inf, power[:-1]]
    right = np.r_[power[1:], -np.inf]
    peaks = np.flatnonzero((power > left) & (power > right))
    # stable sort keeps lower angles first among equal powers
    chosen = peaks[np.argsort(-power[peaks], kind="stable")][:k].tolist()
    if len(chosen) < k:
        taken = set(chosen)
        for i in np.argsort(-power, kind="stable"):
            if i not in taken:
                chosen.append(int(i))
                taken.add(int(i))
                if len(chosen) == k:
                    break
    return np.sort(np.asarray(chosen, dtype=int))


def extract_doas(spectrum: np.ndarray, grid: AngularGrid, k: int) -> np.ndarray:
    """Angles (degrees, ascending) of the ``k`` strongest spectral peaks."""
    if k > len(grid):
        raise InvalidArgumentError(f"k={k} exceeds grid size {len(grid)}")
    power = spectrum_power(spectrum)
    if power.size != len(grid):
        raise InvalidArgumentError("spectrum does not match the grid")
    return grid.angles[pick_peaks(power, k)]


def mae(estimates, truth) -> float:
    """Mean absolute DOA error after sorting each run's estimates and the truth."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.sort(np.asarray(truth, dtype=float).ravel())
    if est.shape[1] != truth.size:
        raise InvalidArgumentError(f"each run needs {truth.size} estimates, got {est.shape[1]}")
    return float(np.abs(np.sort(est, axis=1) - truth[None, :]).mean())


def music_pseudospectrum(snapshots: SnapshotSet, geometry: UlaGeometry, grid: AngularGrid,
                         k: int) -> np.ndarray:
    """``1 / ||E_n^H a(theta)||^2`` from the covariance of the quantized snapshots."""
    M = geometry.sensors
    Z = snapshots.quantized
    if Z.shape[0] != M:
        raise InvalidArgumentError("snapshots do not match the array")
    if not 1 <= k < M:
        raise InvalidArgumentError(f"need 1 <= k < M={M}, got k={k}")
    if Z.shape[1] < k:
        raise InsufficientSnapshotsError(f"{Z.shape[1]} snapshots for {k} sources")
    R = Z @ Z.conj().T / Z.shape[1]
    R = 0.5 * (R + R.conj().T)
    _, vecs = np.linalg.eigh(R)
    En = vecs[:, :M - k]
    proj = En.conj().T @ steering_vectors(geometry, grid.angles)
    denom = np.einsum("ij,ij->j", proj.conj(), proj).real
    return 1.0 / np.maximum(denom, np.finfo(float).tiny)


def music_1bit(snapshots: SnapshotSet, geometry: UlaGeometry, grid: AngularGrid,
               k: int) -> np.ndarray:
    return grid.angles[pick_peaks(music_pseudospectrum(snapshots, geometry, grid, k), k)]


def make_doa_dataset(steering: SteeringMatrix, size: int, k_range=(2, 10),
                     seed: SeedLike = None) -> SignalDataset:
    """Noise-free single-snapshot training pairs with a random number of on-grid sources.

    Targets are the lifted source vectors scaled to unit norm.
    """
    lo, hi = k_range
    N = len(steering.grid)
    if not 1 <= lo <= hi <= N:
        raise InvalidArgumentError(f"bad source-count range {k_range}")
    ys = np.empty((size, steering.lifted.shape[0]))
    xs = np.empty((size, 2 * N))
    for d, child in enumerate(spawn_seeds(seed, size)):
        rng = np.random.default_rng(child)
        k = int(rng.integers(lo, hi + 1))
        idx = rng.choice(N, size=k, replace=False)
        s = np.zeros(N, dtype=complex)
        s[idx] = _complex_normal(rng, k)
        x = lift_vector(s)
        xs[d] = x / np.linalg.norm(x)
        ys[d] = quantize(steering.lifted @ x)
    return SignalDataset(ys, xs)


# --- scenario files ------------------------------------------------------------

SCENARIO_KEYS = {"sensors", "spacing", "grid", "grid_size", "doas", "snapshots", "snr_db", "seed"}


class ScenarioParseError(InvalidArgumentError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def parse_scenario(text: str) -> DoaScenario:
    """Parse ``key = value`` lines (``#`` comments allowed) into a scenario.

    Keys: sensors, spacing, grid (uniform|orthogonal), grid_size, doas
    (comma-separated degrees), snapshots, snr_db (number or ``none``), seed.
    """
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCENARIO_KEYS:
            raise ScenarioParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ScenarioParseError(f"duplicate key {key!r}", lineno)
        values[key], lines[key] = value, lineno

    def get(key, conv, default=None):
        if key not in values:
            if default is None:
                raise ScenarioParseError(f"missing required key {key!r}")
            return default
        try:
            return conv(values[key])
        except ValueError as exc:
            raise ScenarioParseError(f"bad value for {key}: {exc}", lines[key]) from None

    def snr(v):
        return None if v.lower() in ("none", "inf", "noise-free") else float(v)

    def doas(v):
        return [float(a) for a in v.split(",") if a.strip()]

    sensors = get("sensors", int)
    kind = get("grid", str, "uniform")
    try:
        geometry = UlaGeometry(sensors, get("spacing", float, 0.5))
        if kind == "uniform":
            grid = uniform_grid(get("grid_size", int, 180))
        elif kind == "orthogonal":
            grid = orthogonal_grid(sensors)
        else:
            raise ScenarioParseError(f"unknown grid kind {kind!r}", lines.get("grid"))
        return DoaScenario(geometry, grid, get("doas", doas), get("snapshots", int),
                           get("snr_db", snr, "none") if "snr_db" in values else None,
                           get("seed", int, 0))
    except ScenarioParseError:
        raise
    except InvalidArgumentError as exc:
        raise ScenarioParseError(str(exc)) from None


def format_scenario(scenario: DoaScenario) -> str:
    g = scenario.grid
    lines = [f"sensors = {scenario.geometry.sensors}",
             f"spacing = {scenario.geometry.spacing!r}",
             f"grid = {g.kind}"]
    if g.kind == "uniform":
        lines.append(f"grid_size = {len(g)}")
    lines += [f"doas = {', '.join(repr(float(a)) for a in scenario.true_doas)}",
              f"snapshots = {scenario.snapshots}",
              f"snr_db = {'none' if scenario.snr_db is None else repr(float(scenario.snr_db))}",
              f"seed = {int(scenario.seed)}"]
    return "\n".join(lines) + "\n"


def write_spectrum_csv(path, grid: AngularGrid, power) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle", "power"])
        for a, p in zip(grid.angles, np.asarray(power, dtype=float)):
            w.writerow([repr(float(a)), repr(float(p))])
