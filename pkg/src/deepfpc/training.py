"""Layer-wise training of :class:`~deepfpc.network.UnfoldedModel` with ADAM.

Stage ``r`` first trains only the new threshold ``nu_r`` (warm-started from
``nu_{r-1}``) and then fine-tunes everything active in the first ``r``
layers. The tanh sharpness ``kappa`` follows a schedule keyed to the global
epoch counter.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import network
from .errors import InvalidArgumentError
from .network import ParameterGradients, UnfoldedModel
from .sensing import SignalDataset

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "stage", "phase", "kappa", "step", "loss")


def default_kappa_schedule(epochs_per_stage: int, start: float = 5.0, cap: float = 200.0,
                           ) -> tuple:
    """``start`` at epoch 0, doubled every ``epochs_per_stage // 2`` epochs up to ``cap``."""
    every = max(1, epochs_per_stage // 2)
    sched = [(0, start)]
    kappa = start
    while kappa < cap:
        kappa = min(2 * kappa, cap)
        sched.append((sched[-1][0] + every, kappa))
    return tuple(sched)


@dataclass
class TrainConfig:
    batch_size: int = 50
    base_step: float = 1e-3
    step_decay: float = 0.95
    epochs_per_stage: int = 40
    kappa_schedule: Optional[Sequence] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    # Per-block multipliers on the step size; ADAM steps are scale-free, so
    # blocks whose entries are much smaller than ``base_step`` need a smaller step.
    block_scale: Optional[dict] = None

    def __post_init__(self):
        if self.kappa_schedule is None:
            self.kappa_schedule = default_kappa_schedule(self.epochs_per_stage)
        self.kappa_schedule = tuple((int(e), float(k)) for e, k in self.kappa_schedule)
        epochs = [e for e, _ in self.kappa_schedule]
        kappas = [k for _, k in self.kappa_schedule]
        if not epochs or epochs[0] != 0:
            raise InvalidArgumentError("kappa schedule must start at epoch 0")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise InvalidArgumentError("kappa schedule epochs must be strictly increasing")
        if any(b < a for a, b in zip(kappas, kappas[1:])) or kappas[0] <= 0:
            raise InvalidArgumentError("kappa schedule must be positive and non-decreasing")
        if self.batch_size < 1 or self.epochs_per_stage < 1:
            raise InvalidArgumentError("batch_size and epochs_per_stage must be >= 1")
        if not (self.base_step > 0 and 0 < self.step_decay <= 1):
            raise InvalidArgumentError("need base_step > 0 and step_decay in (0, 1]")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise InvalidArgumentError("invalid ADAM constants")

    def kappa_at(self, epoch: int) -> float:
        kappa = self.kappa_schedule[0][1]
        for start, value in self.kappa_schedule:
            if epoch >= start:
                kappa = value
        return kappa

    @property
    def final_kappa(self) -> float:
        return self.kappa_schedule[-1][1]

    def step_at(self, epoch_in_phase: int) -> float:
        return self.base_step * self.step_decay ** epoch_in_phase

    def scale_for(self, block: str) -> float:
        return (self.block_scale or {}).get(block, 1.0)


@dataclass(frozen=True)
class TyingDescriptor:
    """How parameters are shared across layers during training."""

    mode: str
    shared_abc: bool
    shared_nu: bool

    def prepare(self, model: UnfoldedModel) -> UnfoldedModel:
        """Return a copy of ``model`` stored in this mode's layout."""
        m = model.copy()
        R = m.layers
        if self.shared_abc and m.untied_abc:
            raise InvalidArgumentError("cannot tie an already untied model")
        if not self.shared_abc and not m.untied_abc:
            m = UnfoldedModel(*(np.repeat(w[None], R, axis=0) for w in (m.A, m.B, m.C)),
                              m.nu, m.kappa, m.normalize_per_layer, "untied_all")
        if self.shared_nu:
            m.nu = np.full(R, m.nu[0])
        m.tying = self.mode
        return m

    def reduce_nu_grad(self, dnu: np.ndarray, active: int) -> np.ndarray:
        """Tied thresholds receive the sum of per-layer gradients."""
        if not self.shared_nu:
            return dnu
        return np.full_like(dnu, dnu[:active].sum())


def tie_variant(model: UnfoldedModel, mode: str = "tied_abc_untied_nu") -> TyingDescriptor:
    if mode not in network.TYING_MODES:
        raise InvalidArgumentError(f"unknown tying mode {mode!r}")
    return TyingDescriptor(mode, shared_abc=mode != "untied_all", shared_nu=mode == "tied_all")


@dataclass
class AdamState:
    """First/second moments and per-entry step counts for every block."""

    m: dict
    v: dict
    t: dict

    @classmethod
    def zeros_like(cls, model: UnfoldedModel) -> "AdamState":
        blocks = _blocks(model)
        return cls({k: np.zeros_like(b) for k, b in blocks.items()},
                   {k: np.zeros_like(b) for k, b in blocks.items()},
                   {k: np.zeros(b.shape, dtype=np.int64) for k, b in blocks.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         {k: a.copy() for k, a in self.t.items()})

    def save(self, path) -> None:
        arrays = {}
        for name in ("m", "v", "t"):
            for k, a in getattr(self, name).items():
                arrays[f"{name}_{k}"] = a
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "AdamState":
        with np.load(path) as data:
            parts = {"m": {}, "v": {}, "t": {}}
            for key in data.files:
                name, block = key.split("_", 1)
                parts[name][block] = data[key]
        return cls(parts["m"], parts["v"], parts["t"])


def _blocks(model: UnfoldedModel) -> dict:
    return {"A": model.A, "B": model.B, "C": model.C, "nu": model.nu}


def _full_mask(model: UnfoldedModel) -> dict:
    return {k: np.ones(b.shape, dtype=bool) for k, b in _blocks(model).items()}


def adam_update(model: UnfoldedModel, grads: ParameterGradients, state: AdamState,
                step: float, config: TrainConfig, trainable: Optional[dict] = None):
    """One ADAM step on the entries selected by ``trainable`` (default: all).

    Returns ``(new_model, new_state)``; inputs are left untouched. Thresholds
    are clamped at zero after the step.
    """
    grads_by_block = grads.blocks()
    params = _blocks(model)
    trainable = _full_mask(model) if trainable is None else trainable
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    new_params, new_state = {}, state.copy()
    for name, p in params.items():
        g = grads_by_block[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise InvalidArgumentError(f"shape mismatch in block {name}")
        mask = trainable.get(name)
        if mask is None or not np.any(mask):
            new_params[name] = p.copy()
            continue
        mask = np.broadcast_to(mask, p.shape)
        m_, v_, t_ = new_state.m[name], new_state.v[name], new_state.t[name]
        t_[mask] += 1
        m_[mask] = b1 * m_[mask] + (1 - b1) * g[mask]
        v_[mask] = b2 * v_[mask] + (1 - b2) * g[mask] ** 2
        tm = t_[mask]
        mhat = m_[mask] / (1 - b1 ** tm)
        vhat = v_[mask] / (1 - b2 ** tm)
        q = p.copy()
        q[mask] -= step * config.scale_for(name) * mhat / (np.sqrt(vhat) + eps)
        new_params[name] = q
    new_params["nu"] = np.maximum(new_params["nu"], 0.0)
    new_model = UnfoldedModel(new_params["A"], new_params["B"], new_params["C"],
                              new_params["nu"], model.kappa, model.normalize_per_layer,
                              model.tying)
    return new_model, new_state


def dataset_loss(model: UnfoldedModel, dataset: SignalDataset, layers: Optional[int] = None,
                 kappa: Optional[float] = None) -> float:
    """Mean squared error over the whole dataset (vanished outputs count as zero)."""
    if kappa is not None and kappa != model.kappa:
        model = model.copy()
        model.kappa = kappa
    out = network.infer(model, dataset.measurements, layers=layers)
    return network.loss(out, dataset.signals)


@dataclass
class Trainer:
    """Owns the optimizer state, epoch counter and log of one training run."""

    config: TrainConfig
    tying: TyingDescriptor = field(default_factory=lambda: TyingDescriptor(
        "tied_abc_untied_nu", True, False))
    epoch: int = 0
    history: list = field(default_factory=list)
    adam: Optional[AdamState] = None

    def __post_init__(self):
        self._rng = np.random.default_rng(self.config.seed)

    def _trainable(self, model: UnfoldedModel, r: int, phase: int) -> dict:
        R = model.layers
        nu = np.zeros(R, dtype=bool)
        if self.tying.shared_nu:
            nu[:] = True
        elif phase == 1:
            nu[r - 1] = True
        else:
            nu[:r] = True
        if phase == 1:
            abc = False
        elif model.untied_abc:
            abc = np.zeros((R, 1, 1), dtype=bool)
            abc[:r] = True
        else:
            abc = True
        mask = {"nu": nu}
        for name in "ABC":
            mask[name] = np.broadcast_to(np.asarray(abc), getattr(model, name).shape).copy()
        return mask

    def _run_phase(self, model, dataset, r, phase):
        cfg = self.config
        trainable = self._trainable(model, r, phase)
        size = len(dataset)
        D = min(cfg.batch_size, size)
        start_model, start_adam = model.copy(), self.adam.copy()
        for e in range(cfg.epochs_per_stage):
            model.kappa = cfg.kappa_at(self.epoch)
            step = cfg.step_at(e)
            order = self._rng.permutation(size)
            for lo in range(0, size, D):
                idx = order[lo:lo + D]
                Y, X = dataset.measurements[idx], dataset.signals[idx]
                _, tape = network.forward(model, Y, layers=r, on_degenerate="zero")
                grads = network.backward(model, tape, Y, X)
                grads.dnu = self.tying.reduce_nu_grad(grads.dnu, r)
                model, self.adam = adam_update(model, grads, self.adam, step, cfg, trainable)
            loss = dataset_loss(model, dataset, layers=r)
            self.history.append({"epoch": self.epoch, "stage": r, "phase": phase,
                                 "kappa": model.kappa, "step": step, "loss": loss})
            self.epoch += 1
        before = dataset_loss(start_model, dataset, layers=r, kappa=model.kappa)
        after = self.history[-1]["loss"]
        if after > before:
            log.info("stage %d phase %d raised the loss (%.3g > %.3g); reverting", r, phase,
                     after, before)
            start_model.kappa = model.kappa
            model, self.adam = start_model, start_adam
            self.history[-1]["loss"] = before
        return model

    def train_stage(self, model: UnfoldedModel, dataset: SignalDataset, r: int) -> UnfoldedModel:
        if not 1 <= r <= model.layers:
            raise InvalidArgumentError(f"stage {r} outside 1..{model.layers}")
        if len(dataset) < 1:
            raise InvalidArgumentError("empty dataset")
        model = model.copy()
        if self.adam is None:
            self.adam = AdamState.zeros_like(model)
        if r > 1 and not self.tying.shared_nu:
            model.nu[r - 1] = model.nu[r - 2]
        model = self._run_phase(model, dataset, r, 1)
        model = self._run_phase(model, dataset, r, 2)
        return model

    def train(self, model: UnfoldedModel, dataset: SignalDataset,
              callback: Optional[Callable] = None) -> UnfoldedModel:
        if len(dataset) < self.config.batch_size:
            raise InvalidArgumentError(
                f"dataset of {len(dataset)} pairs is smaller than the batch size")
        model = self.tying.prepare(model)
        for r in range(1, model.layers + 1):
            model = self.train_stage(model, dataset, r)
            log.info("stage %d done: loss %.4g", r, self.history[-1]["loss"])
            if callback is not None:
                callback(r, model)
        model.kappa = self.config.final_kappa
        return model

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})


def train_stage(model: UnfoldedModel, dataset: SignalDataset, config: TrainConfig, r: int,
                tying: str = "tied_abc_untied_nu") -> UnfoldedModel:
    """Run both phases of stage ``r`` with a fresh optimizer."""
    return Trainer(config, tie_variant(model, tying)).train_stage(model, dataset, r)


def train(model: UnfoldedModel, dataset: SignalDataset, config: TrainConfig,
          tying: str = "tied_abc_untied_nu", callback: Optional[Callable] = None
          ) -> UnfoldedModel:
    """Train stages ``1..R`` in order and return the final model."""
    return Trainer(config, tie_variant(model, tying)).train(model, dataset, callback)
