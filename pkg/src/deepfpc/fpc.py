"""Fixed-point continuation with the one-sided l1 consistency penalty.

Each iteration takes a gradient step on the consistency term, soft-thresholds
with ``nu = tau / lam`` and projects back onto the unit sphere. An outer loop
grows ``lam`` geometrically (``lam_i = c * lam_{i-1}``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _backend
from .errors import DegenerateError, InvalidArgumentError
from .sensing import quantize, unit_normalize

log = logging.getLogger(__name__)

PENALTIES = ("one_sided_l1", "one_sided_l2")


@dataclass(frozen=True)
class FpcConfig:
    """Hyperparameters of the continuation schedule.

    The defaults are the DOA settings: ``c = lambda0 = 1.1``, ``tau = 0.01``,
    200 inner and 20 outer iterations.
    """

    tau: float = 0.01
    lambda0: float = 1.1
    continuation_factor: float = 1.1
    inner_iters: int = 200
    outer_iters: int = 20

    def __post_init__(self):
        if not (self.tau > 0 and self.lambda0 > 0):
            raise InvalidArgumentError("tau and lambda0 must be positive")
        if not self.continuation_factor >= 1:
            raise InvalidArgumentError("continuation_factor must be >= 1")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise InvalidArgumentError("iteration counts must be >= 1")

    def lambdas(self) -> np.ndarray:
        """The lambda used in each outer stage."""
        return self.lambda0 * self.continuation_factor ** np.arange(self.outer_iters)

    @property
    def total_iters(self) -> int:
        return self.inner_iters * self.outer_iters


@dataclass(frozen=True)
class FpcState:
    x: np.ndarray
    iteration: int = 0
    lam: float = float("nan")
    degenerate: bool = False


def soft_threshold(v, nu: float) -> np.ndarray:
    """``sign(v) * max(|v| - nu, 0)`` element-wise."""
    if nu < 0:
        raise InvalidArgumentError(f"threshold must be nonnegative, got {nu}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - nu, 0.0)


def _check_dims(phi, x, y=None):
    phi = np.asarray(phi, dtype=float)
    x = np.asarray(x, dtype=float)
    if phi.ndim != 2 or x.shape != (phi.shape[1],):
        raise InvalidArgumentError(f"signal of shape {x.shape} does not fit matrix {phi.shape}")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (phi.shape[0],):
            raise InvalidArgumentError(
                f"measurements of shape {y.shape} do not fit matrix {phi.shape}")
    return phi, x, y


def one_sided_gradient(phi, x, y) -> np.ndarray:
    """Gradient ``phi^T (sign(phi x) - y)`` of the one-sided l1 consistency term."""
    phi, x, y = _check_dims(phi, x, y)
    return phi.T @ (quantize(phi @ x) - y)


def objective(phi, x, y, lam: float, penalty: str = "one_sided_l1") -> float:
    """``||x||_1 + lam * sum h([diag(y) phi x]_i)``.

    ``h(z) = max(0, -z)`` for ``one_sided_l1`` and its square for
    ``one_sided_l2``. Only the l1 variant has a solver.
    """
    phi, x, y = _check_dims(phi, x, y)
    if penalty not in PENALTIES:
        raise InvalidArgumentError(f"unknown penalty {penalty!r}")
    violation = np.maximum(0.0, -(y * (phi @ x)))
    if penalty == "one_sided_l2":
        violation = violation * violation
    return float(np.abs(x).sum() + lam * violation.sum())


def default_init(phi, y) -> np.ndarray:
    """Warm start ``phi^T y / ||phi^T y||``."""
    v = np.asarray(phi, dtype=float).T @ np.asarray(y, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        # phi^T y can vanish for adversarial inputs; any unit vector is valid.
        v = np.ones_like(v)
        norm = np.sqrt(v.shape[0])
    return v / norm


def fpc_step(state: FpcState, phi, y, tau: float, nu: float) -> FpcState:
    """One soft-thresholded gradient step followed by sphere projection.

    If shrinkage annihilates the iterate, the step is retried once with
    ``nu / 2``; if that is also zero the iterate is returned unchanged with
    ``degenerate=True``.
    """
    phi, x, y = _check_dims(phi, state.x, y)
    if tau <= 0 or nu < 0:
        raise InvalidArgumentError("need tau > 0 and nu >= 0")
    x = np.array(x, dtype=float)
    flagged = _backend.fpc_iterations(phi, y, x, tau, nu, 1)
    return FpcState(x=x, iteration=state.iteration + 1, lam=state.lam,
                    degenerate=bool(flagged))


def solve(phi, y, config: FpcConfig = FpcConfig(), x0: Optional[np.ndarray] = None,
          return_state: bool = False):
    """Run the full outer/inner continuation schedule and return a unit vector.

    Raises
    ------
    DegenerateError
        If every step of the final stage was degenerate even after restarting
        that stage from the default warm start.
    """
    phi = np.ascontiguousarray(phi, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if x0 is None:
        x = default_init(phi, y)
    else:
        x = np.ascontiguousarray(unit_normalize(x0))
    _check_dims(phi, x, y)
    flagged_total = 0
    lam = config.lambda0
    for lam in config.lambdas():
        nu = config.tau / lam
        flagged = _backend.fpc_iterations(phi, y, x, config.tau, nu, config.inner_iters)
        if flagged == config.inner_iters:
            log.warning("FPC stage lambda=%g fully degenerate; restarting from warm start", lam)
            x = default_init(phi, y)
            flagged = _backend.fpc_iterations(phi, y, x, config.tau, nu, config.inner_iters)
            if flagged == config.inner_iters:
                raise DegenerateError(f"shrinkage annihilates every iterate at lambda={lam:g}")
        flagged_total += flagged
    if return_state:
        return FpcState(x=x, iteration=config.total_iters, lam=float(lam),
                        degenerate=flagged_total > 0)
    return x


def solve_rows(phi, ys, config: FpcConfig = FpcConfig(), x0s=None) -> np.ndarray:
    """Solve independent problems (rows of ``ys``) sharing ``phi``.

    Every row runs the exact same arithmetic as :func:`solve`, so the result is
    bit-identical to looping over rows.
    """
    phi = np.ascontiguousarray(phi, dtype=float)
    ys = np.ascontiguousarray(np.atleast_2d(ys), dtype=float)
    if ys.shape[1] != phi.shape[0]:
        raise InvalidArgumentError(f"measurements of width {ys.shape[1]} do not fit {phi.shape}")
    if x0s is None:
        xs = np.stack([default_init(phi, y) for y in ys])
    else:
        xs = np.stack([unit_normalize(x0) for x0 in x0s])
    xs = np.ascontiguousarray(xs)
    redo = set()
    for lam in config.lambdas():
        nu = config.tau / lam
        flags = _backend.fpc_iterations_rows(phi, ys, xs, config.tau, nu, config.inner_iters)
        redo.update(np.flatnonzero(flags == config.inner_iters).tolist())
    for t in sorted(redo):
        # rare: rerun this row through solve's restart logic
        xs[t] = solve(phi, ys[t], config, None if x0s is None else x0s[t])
    return xs


def with_iterations(config: FpcConfig, iters: int) -> FpcConfig:
    """A single-stage config running ``iters`` iterations at ``lambda0``."""
    return replace(config, inner_iters=iters, outer_iters=1)
