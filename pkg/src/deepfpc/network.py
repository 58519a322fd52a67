"""Unfolded FPC network with hand-written reverse-mode gradients.

Layer ``r`` maps ``x -> S_{nu_r}(x + C tanh(kappa B x) + A y)``; the output
of the last layer is projected onto the unit sphere (optionally after every
layer). Batches are stored row-wise: ``y`` is ``(D, M)``, signals ``(D, N)``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateError, InvalidArgumentError, ModelFormatError

TYING_MODES = ("tied_abc_untied_nu", "untied_all", "tied_all")
MAGIC = b"DFPC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIdBB")
DEGENERATE_NORM = 1e-12


@dataclass
class UnfoldedModel:
    """Trainable parameters of an ``R``-layer network.

    ``A`` and ``C`` are ``(N, M)``, ``B`` is ``(M, N)``. When the tying mode is
    ``untied_all`` each carries a leading layer axis of length ``R``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    nu: np.ndarray
    kappa: float
    normalize_per_layer: bool = False
    tying: str = "tied_abc_untied_nu"

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        if self.tying not in TYING_MODES:
            raise InvalidArgumentError(f"unknown tying mode {self.tying!r}")
        if self.nu.ndim != 1 or self.nu.shape[0] < 1:
            raise InvalidArgumentError("nu must be a non-empty vector")
        if np.any(self.nu < 0):
            raise InvalidArgumentError("thresholds must be nonnegative")
        if not self.kappa > 0:
            raise InvalidArgumentError("kappa must be positive")
        lead = (self.layers,) if self.untied_abc else ()
        n, m = self.A.shape[-2:]
        for name, arr, shape in (("A", self.A, (n, m)), ("B", self.B, (m, n)),
                                 ("C", self.C, (n, m))):
            if arr.shape != lead + shape:
                raise InvalidArgumentError(
                    f"{name} has shape {arr.shape}, expected {lead + shape}")

    @property
    def layers(self) -> int:
        return self.nu.shape[0]

    @property
    def untied_abc(self) -> bool:
        return self.tying == "untied_all"

    @property
    def m(self) -> int:
        return self.A.shape[-1]

    @property
    def n(self) -> int:
        return self.A.shape[-2]

    def weights(self, r: int):
        """``(A, B, C)`` used by layer ``r`` (0-based)."""
        if self.untied_abc:
            return self.A[r], self.B[r], self.C[r]
        return self.A, self.B, self.C

    def copy(self) -> "UnfoldedModel":
        return UnfoldedModel(self.A.copy(), self.B.copy(), self.C.copy(), self.nu.copy(),
                             self.kappa, self.normalize_per_layer, self.tying)


def init_from_fpc(phi, tau: float, lam: float, kappa: float, layers: int,
                  normalize_per_layer: bool = False,
                  tying: str = "tied_abc_untied_nu") -> UnfoldedModel:
    """Network whose layers reproduce FPC iterations as ``kappa`` grows.

    ``A = tau phi^T``, ``B = phi``, ``C = -tau phi^T`` and every threshold is
    ``tau / lam``.
    """
    if tau <= 0 or lam <= 0 or kappa <= 0:
        raise InvalidArgumentError("tau, lam and kappa must be positive")
    if layers < 1:
        raise InvalidArgumentError("need at least one layer")
    phi = np.asarray(phi, dtype=float)
    A = tau * phi.T
    B = phi.copy()
    C = -tau * phi.T
    if tying == "untied_all":
        A, B, C = (np.repeat(w[None], layers, axis=0) for w in (A, B, C))
    return UnfoldedModel(np.ascontiguousarray(A), np.ascontiguousarray(B),
                         np.ascontiguousarray(C), np.full(layers, tau / lam),
                         float(kappa), normalize_per_layer, tying)


@dataclass
class ForwardTape:
    """Intermediate values cached by :func:`forward` for :func:`backward`."""

    y: np.ndarray
    inputs: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    shrunk: list = field(default_factory=list)
    layer_norms: list = field(default_factory=list)
    final: Optional[np.ndarray] = None
    final_norm: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None
    squeeze: bool = False
    allow_dead: bool = False

    def __len__(self) -> int:
        return len(self.preacts)


def _as_rows(v, width: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != width:
        raise InvalidArgumentError(f"{name} has shape {v.shape}, expected (*, {width})")
    return v


def _normalize_rows(u: np.ndarray, on_degenerate: str):
    norms = np.sqrt(np.einsum("ij,ij->i", u, u))
    dead = norms < DEGENERATE_NORM
    if dead.any():
        if on_degenerate == "raise":
            raise DegenerateError("network output vanished before normalization")
        safe = np.where(dead, 1.0, norms)
        return np.where(dead[:, None], 0.0, u / safe[:, None]), norms
    return u / norms[:, None], norms


def forward(model: UnfoldedModel, y, x0=None, layers: Optional[int] = None,
            on_degenerate: str = "raise"):
    """Run the first ``layers`` layers (default all) and normalize.

    Returns ``(output, tape)``. A 1-D ``y`` gives a 1-D output. With
    ``on_degenerate="zero"`` rows whose output vanishes are returned as zero
    vectors instead of raising.
    """
    if on_degenerate not in ("raise", "zero"):
        raise InvalidArgumentError(f"bad on_degenerate {on_degenerate!r}")
    layers = model.layers if layers is None else layers
    if not 1 <= layers <= model.layers:
        raise InvalidArgumentError(f"layers must be in 1..{model.layers}, got {layers}")
    squeeze = np.asarray(y).ndim == 1
    Y = _as_rows(y, model.m, "y")
    X = np.zeros((Y.shape[0], model.n)) if x0 is None else _as_rows(x0, model.n, "x0")
    if X.shape[0] == 1 and Y.shape[0] > 1:
        X = np.repeat(X, Y.shape[0], axis=0)
    tape = ForwardTape(y=Y, squeeze=squeeze, allow_dead=on_degenerate == "zero")
    for r in range(layers):
        A, B, C = model.weights(r)
        T = np.tanh(model.kappa * (X @ B.T))
        P = X + T @ C.T + Y @ A.T
        U = np.sign(P) * np.maximum(np.abs(P) - model.nu[r], 0.0)
        tape.inputs.append(X)
        tape.activations.append(T)
        tape.preacts.append(P)
        tape.shrunk.append(U)
        if model.normalize_per_layer:
            X, norms = _normalize_rows(U, on_degenerate)
            tape.layer_norms.append(norms)
        else:
            X = U
    tape.final = X
    if model.normalize_per_layer:
        out = X
        tape.final_norm = tape.layer_norms[-1]
    else:
        out, tape.final_norm = _normalize_rows(X, on_degenerate)
    tape.output = out
    return (out[0] if squeeze else out), tape


def infer(model: UnfoldedModel, ys, x0=None, layers: Optional[int] = None) -> np.ndarray:
    """Outputs for a batch; vanished outputs come back as zero rows."""
    out, _ = forward(model, np.atleast_2d(ys), x0, layers, on_degenerate="zero")
    return out


def loss(outputs, truths) -> float:
    """Mean over the batch of squared l2 errors."""
    outputs = np.asarray(outputs, dtype=float)
    truths = np.asarray(truths, dtype=float)
    outputs = np.atleast_2d(outputs)
    truths = np.atleast_2d(truths)
    if outputs.shape != truths.shape:
        raise InvalidArgumentError(f"shape mismatch {outputs.shape} vs {truths.shape}")
    if outputs.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    diff = outputs - truths
    return float(np.einsum("ij,ij->i", diff, diff).mean())


@dataclass
class ParameterGradients:
    dA: np.ndarray
    dB: np.ndarray
    dC: np.ndarray
    dnu: np.ndarray

    def blocks(self):
        return {"A": self.dA, "B": self.dB, "C": self.dC, "nu": self.dnu}


def _normalize_backward(g, u, norms):
    """Row-wise ``(I - x x^T) g / ||u||`` with ``x = u / ||u||``; zero for dead rows."""
    dead = norms < DEGENERATE_NORM
    safe = np.where(dead, 1.0, norms)
    xhat = u / safe[:, None]
    proj = g - xhat * np.einsum("ij,ij->i", xhat, g)[:, None]
    out = proj / safe[:, None]
    out[dead] = 0.0
    return out


def backward(model: UnfoldedModel, tape: ForwardTape, y, truth) -> ParameterGradients:
    """Gradients of the batch-mean squared error w.r.t. ``A, B, C, nu``.

    For a single sample this is the gradient of ``||x* - truth||^2``.
    Thresholds of layers beyond the taped depth get zero gradient.
    """
    Y = _as_rows(y, model.m, "y")
    if Y.shape != tape.y.shape or not np.array_equal(Y, tape.y):
        raise InvalidArgumentError("tape was recorded for different measurements")
    if len(tape) > model.layers or tape.inputs[0].shape[1] != model.n:
        raise InvalidArgumentError("tape does not match the model")
    truth = _as_rows(truth, model.n, "truth")
    if truth.shape[0] != Y.shape[0]:
        raise InvalidArgumentError("truth batch size differs from measurement batch size")
    D = Y.shape[0]
    kappa = model.kappa

    dA = np.zeros_like(model.A)
    dB = np.zeros_like(model.B)
    dC = np.zeros_like(model.C)
    dnu = np.zeros(model.layers)

    G = 2.0 * (tape.output - truth) / D
    if not model.normalize_per_layer:
        if np.any(tape.final_norm < DEGENERATE_NORM) and not tape.allow_dead:
            raise DegenerateError("cannot differentiate through a vanished output")
        G = _normalize_backward(G, tape.final, tape.final_norm)

    for r in reversed(range(len(tape))):
        A, B, C = model.weights(r)
        X, T, P, U = tape.inputs[r], tape.activations[r], tape.preacts[r], tape.shrunk[r]
        if model.normalize_per_layer:
            G = _normalize_backward(G, U, tape.layer_norms[r])
        live = np.abs(P) > model.nu[r]
        G_P = np.where(live, G, 0.0)
        dnu[r] = -np.sum(np.sign(P) * G_P)
        gA = G_P.T @ Y
        gC = G_P.T @ T
        G_Bx = (G_P @ C) * (kappa * (1.0 - T * T))
        gB = G_Bx.T @ X
        if model.untied_abc:
            dA[r] += gA
            dB[r] += gB
            dC[r] += gC
        else:
            dA += gA
            dB += gB
            dC += gC
        G = G_P + G_Bx @ B
    return ParameterGradients(dA, dB, dC, dnu)


def accumulate(grads: Sequence[ParameterGradients]) -> ParameterGradients:
    """Entry-wise mean, summed in list order."""
    if len(grads) == 0:
        raise InvalidArgumentError("nothing to accumulate")
    first = grads[0]
    total = ParameterGradients(first.dA.copy(), first.dB.copy(), first.dC.copy(),
                               first.dnu.copy())
    for g in grads[1:]:
        if g.dA.shape != total.dA.shape or g.dnu.shape != total.dnu.shape:
            raise InvalidArgumentError("gradient shapes differ")
        total.dA += g.dA
        total.dB += g.dB
        total.dC += g.dC
        total.dnu += g.dnu
    k = float(len(grads))
    return ParameterGradients(total.dA / k, total.dB / k, total.dC / k, total.dnu / k)


# --- serialization -----------------------------------------------------------

def to_bytes(model: UnfoldedModel) -> bytes:
    """Little-endian binary encoding: header, then A, B, C row-major, then nu."""
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, model.m, model.n, model.layers,
                           float(model.kappa), int(model.normalize_per_layer),
                           TYING_MODES.index(model.tying)))
    for arr in (model.A, model.B, model.C, model.nu):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> UnfoldedModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("file too short for a model header")
    magic, version, m, n, layers, kappa, per_layer, tying = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if tying >= len(TYING_MODES):
        raise ModelFormatError(f"unknown tying code {tying}")
    mode = TYING_MODES[tying]
    copies = layers if mode == "untied_all" else 1
    sizes = [copies * n * m, copies * m * n, copies * n * m, layers]
    expected = _HEADER.size + 8 * sum(sizes)
    if len(data) != expected:
        raise ModelFormatError(f"expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    lead = (layers,) if mode == "untied_all" else ()
    A = parts[0].reshape(lead + (n, m))
    B = parts[1].reshape(lead + (m, n))
    C = parts[2].reshape(lead + (n, m))
    return UnfoldedModel(A, B, C, parts[3].copy(), kappa, bool(per_layer), mode)


def save_model(model: UnfoldedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_model(path) -> UnfoldedModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
