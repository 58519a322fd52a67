"""Seeded reproductions of the signal-recovery and DOA experiments.

Every experiment returns an :class:`ExperimentResult` whose rows depend only
on the preset, the overrides and the seed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend, doa, fpc, network, training
from .errors import DeepFpcError, InvalidArgumentError
from .sensing import (SignalDataset, generate_gaussian_matrix, make_signal_dataset, nmse,
                      to_db)

log = logging.getLogger(__name__)

EXPERIMENTS = ("fig3_nmse_vs_layers", "table1_tying", "fig4_mae_sweeps",
               "fig6_grid_comparison", "train", "recover")
RESULT_FIELDS = ("experiment", "condition", "sweep_variable", "sweep_value", "method",
                 "metric", "metric_value", "run_count")

# independent RNG streams derived from the user seed
_PHI, _TRAIN, _TEST, _TRAINER, _MC = 1, 2, 3, 4, 5


class MissingModelError(DeepFpcError):
    """A pre-trained model named in the configuration does not exist."""


def stream(seed: int, *ids: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *ids])


def stream_int(seed: int, *ids: int) -> int:
    return int(stream(seed, *ids).generate_state(1, dtype=np.uint64)[0])


@dataclass
class SignalPreset:
    n: int = 100
    m: int = 200
    k: int = 5
    train_size: int = 3000
    test_size: int = 300
    layers: int = 8
    tau: float = 0.03
    lam: float = 1.1
    noise_std: float = 0.0
    epochs_per_stage: int = 10
    batch_size: int = 50
    base_step: float = 1e-3
    step_decay: float = 0.95
    matrix_step_scale: float = 3e-5
    kappa_start: float = 5.0
    kappa_cap: float = 200.0
    table1_layers: int = 8

    def train_config(self, seed: int) -> training.TrainConfig:
        sched = training.default_kappa_schedule(self.epochs_per_stage, self.kappa_start,
                                                self.kappa_cap)
        s = self.matrix_step_scale
        return training.TrainConfig(
            batch_size=self.batch_size, base_step=self.base_step, step_decay=self.step_decay,
            epochs_per_stage=self.epochs_per_stage, kappa_schedule=sched,
            seed=stream_int(seed, _TRAINER), block_scale={"A": s, "B": s, "C": s})

    def fpc_config(self, iters: int) -> fpc.FpcConfig:
        return fpc.FpcConfig(self.tau, self.lam, 1.0, iters, 1)


@dataclass
class DoaPreset:
    sensors: int = 16
    grid_size: int = 90
    doas: tuple = (-16.7, -4.2, 1.6)
    runs: int = 50
    snr_list: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    snr_sweep_snapshots: tuple = (3, 10)
    snapshot_list: tuple = (5, 10, 20)
    snapshot_sweep_snr: tuple = (5.0, 20.0)
    fig6_snr: float = 20.0
    panels: tuple = ("a", "b", "c", "d")
    train_size: int = 3000
    k_min: int = 2
    k_max: int = 10
    layers: int = 8
    tau: float = 0.01
    lambda0: float = 1.1
    continuation_factor: float = 1.1
    inner_iters: int = 200
    outer_iters: int = 20
    # step used to initialise the network; the FPC baseline keeps ``tau``
    net_tau: float = 0.03
    epochs_per_stage: int = 10
    batch_size: int = 50
    base_step: float = 1e-3
    step_decay: float = 0.95
    matrix_step_scale: float = 3e-3
    kappa_start: float = 5.0
    kappa_cap: float = 200.0

    def fpc_config(self) -> fpc.FpcConfig:
        return fpc.FpcConfig(self.tau, self.lambda0, self.continuation_factor,
                             self.inner_iters, self.outer_iters)

    def train_config(self, seed: int) -> training.TrainConfig:
        sched = training.default_kappa_schedule(self.epochs_per_stage, self.kappa_start,
                                                self.kappa_cap)
        s = self.matrix_step_scale
        return training.TrainConfig(
            batch_size=self.batch_size, base_step=self.base_step, step_decay=self.step_decay,
            epochs_per_stage=self.epochs_per_stage, kappa_schedule=sched,
            seed=stream_int(seed, _TRAINER), block_scale={"A": s, "B": s, "C": s})

    def geometry(self) -> doa.UlaGeometry:
        return doa.UlaGeometry(self.sensors)

    def grid(self, kind: str = "uniform") -> doa.AngularGrid:
        if kind == "orthogonal":
            return doa.orthogonal_grid(self.sensors)
        return doa.uniform_grid(self.grid_size)


SIGNAL_PRESETS = {
    "desk": SignalPreset(),
    "paper": SignalPreset(n=500, m=1000, k=25, train_size=1000, test_size=1000, layers=20,
                          epochs_per_stage=40, table1_layers=20),
}
DOA_PRESETS = {
    "desk": DoaPreset(),
    "paper": DoaPreset(sensors=40, grid_size=180, doas=(-40.0, -16.7, -4.2, 1.6, 15.7, 60.0),
                       runs=500, snapshot_list=(1, 3, 5, 10, 20, 30), k_max=10,
                       train_size=1000, epochs_per_stage=40),
}


def _coerce(current, raw):
    if isinstance(raw, str):
        if isinstance(current, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], str):
                return tuple(items)
            if current and isinstance(current[0], int) and not isinstance(current[0], bool):
                return tuple(int(p) for p in items)
            return tuple(float(p) for p in items)
        return raw
    if isinstance(current, tuple):
        return tuple(raw)
    return type(current)(raw) if current is not None else raw


def apply_overrides(preset, overrides: dict):
    """Return a copy of ``preset`` with matching keys replaced; unknown keys are ignored."""
    names = {f.name: f for f in dataclasses.fields(preset)}
    changes = {}
    for key, raw in (overrides or {}).items():
        if key in names:
            try:
                changes[key] = _coerce(getattr(preset, key), raw)
            except ValueError as exc:
                raise InvalidArgumentError(f"bad override {key}={raw!r}: {exc}") from None
    return dataclasses.replace(preset, **changes)


@dataclass
class ExperimentSpec:
    name: str
    scale: str = "desk"
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    output_path: Optional[str] = None
    jobs: int = 1

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise InvalidArgumentError(f"unknown experiment {self.name!r}")
        if self.scale not in ("desk", "paper"):
            raise InvalidArgumentError(f"unknown scale {self.scale!r}")

    def signal_preset(self) -> SignalPreset:
        return apply_overrides(SIGNAL_PRESETS[self.scale], self.overrides)

    def doa_preset(self) -> DoaPreset:
        return apply_overrides(DOA_PRESETS[self.scale], self.overrides)

    def config_hash(self) -> str:
        blob = json.dumps({"name": self.name, "scale": self.scale, "seed": self.seed,
                           "overrides": {k: str(v) for k, v in sorted(self.overrides.items())}},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def model_path(self, key: str) -> Optional[str]:
        path = self.overrides.get(key)
        if path is None:
            return None
        if not os.path.exists(path):
            raise MissingModelError(f"model file {path!r} ({key}) not found; "
                                    f"run `deepfpc train` first")
        return path


@dataclass
class ExperimentResult:
    experiment: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def add(self, condition, sweep_variable, sweep_value, method, metric, value, runs):
        self.rows.append({"experiment": self.experiment, "condition": condition,
                          "sweep_variable": sweep_variable, "sweep_value": sweep_value,
                          "method": method, "metric": metric, "metric_value": float(value),
                          "run_count": int(runs)})

    def value(self, method: str, metric: str, sweep_value=None, condition=None) -> float:
        for row in self.rows:
            if (row["method"] == method and row["metric"] == metric
                    and (sweep_value is None or row["sweep_value"] == sweep_value)
                    and (condition is None or row["condition"] == condition)):
                return row["metric_value"]
        raise KeyError((method, metric, sweep_value, condition))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def write(self, path) -> None:
        self.to_csv(path)
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(self.metadata, fh, indent=2, sort_keys=True)


def _result(spec: ExperimentSpec) -> ExperimentResult:
    return ExperimentResult(spec.name, metadata={
        "seed": spec.seed, "scale": spec.scale, "config_hash": spec.config_hash(),
        "overrides": {k: str(v) for k, v in spec.overrides.items()},
        "backend": _backend.BACKEND,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")})


def _mean_nmse_db(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Average of per-sample NMSE in dB."""
    return float(np.mean([to_db(nmse(e, t)) for e, t in zip(estimates, truths)]))


# --- signal recovery ------------------------------------------------------------

@dataclass
class SignalProblem:
    phi: np.ndarray
    train: SignalDataset
    test: SignalDataset


def signal_problem(preset: SignalPreset, seed: int) -> SignalProblem:
    phi = generate_gaussian_matrix(preset.m, preset.n, stream(seed, _PHI))
    train = make_signal_dataset(phi, preset.train_size, preset.k, stream(seed, _TRAIN))
    test = make_signal_dataset(phi, preset.test_size, preset.k, stream(seed, _TEST),
                               preset.noise_std)
    return SignalProblem(phi, train, test)


def fpc_curve(phi, dataset: SignalDataset, preset: SignalPreset, max_iters: int) -> list:
    """Mean test NMSE (dB) of FPC truncated after 1..max_iters iterations."""
    ys = np.ascontiguousarray(dataset.measurements)
    xs = np.ascontiguousarray(np.stack([fpc.default_init(phi, y) for y in ys]))
    nu = preset.tau / preset.lam
    curve = []
    for _ in range(max_iters):
        _backend.fpc_iterations_rows(phi, ys, xs, preset.tau, nu, 1)
        curve.append(_mean_nmse_db(xs, dataset.signals))
    return curve


def train_signal_model(problem: SignalProblem, preset: SignalPreset, seed: int, layers: int,
                       normalize_per_layer: bool = False, tying: str = "tied_abc_untied_nu",
                       callback=None):
    """Return ``(model, trainer)`` after layer-wise training on the problem's training set."""
    cfg = preset.train_config(seed)
    model = network.init_from_fpc(problem.phi, preset.tau, preset.lam,
                                  cfg.kappa_schedule[0][1], layers, normalize_per_layer)
    trainer = training.Trainer(cfg, training.tie_variant(model, tying))
    model = trainer.train(model, problem.train, callback)
    return model, trainer


def evaluate_model(model, dataset: SignalDataset, layers=None, kappa=None) -> float:
    if kappa is not None:
        model = model.copy()
        model.kappa = kappa
    return _mean_nmse_db(network.infer(model, dataset.measurements, layers=layers),
                         dataset.signals)


def run_fig3(spec: ExperimentSpec) -> ExperimentResult:
    """NMSE versus number of layers / iterations for FPC and both DeepFPC variants."""
    preset = spec.signal_preset()
    problem = signal_problem(preset, spec.seed)
    res = _result(spec)
    R = preset.layers
    for r, v in enumerate(fpc_curve(problem.phi, problem.test, preset, R), start=1):
        res.add("", "layers", r, "fpc_l1", "nmse_db", v, preset.test_size)

    variants = (("deepfpc_final_norm", False, "model_final"),
                ("deepfpc_per_layer_norm", True, "model_per_layer"))
    final_kappa = preset.train_config(spec.seed).final_kappa
    for method, per_layer, key in variants:
        path = spec.model_path(key)
        if path is not None:
            model = network.load_model(path)
            for r in range(1, min(R, model.layers) + 1):
                res.add("", "layers", r, method, "nmse_db",
                        evaluate_model(model, problem.test, r), preset.test_size)
            continue
        curve = []

        def record(r, model, curve=curve):
            curve.append(evaluate_model(model, problem.test, r, final_kappa))

        t0 = time.perf_counter()
        model, trainer = train_signal_model(problem, preset, spec.seed, R, per_layer,
                                            callback=record)
        res.metadata[f"{method}_train_seconds"] = time.perf_counter() - t0
        for r, v in enumerate(curve, start=1):
            res.add("", "layers", r, method, "nmse_db", v, preset.test_size)
        res.artifacts[method] = model
    return res


def run_table1(spec: ExperimentSpec) -> ExperimentResult:
    """Recovery quality (and wall-clock) of the three parameter-tying variants."""
    preset = spec.signal_preset()
    problem = signal_problem(preset, spec.seed)
    res = _result(spec)
    R = preset.table1_layers
    for mode in network.TYING_MODES:
        t0 = time.perf_counter()
        model, _ = train_signal_model(problem, preset, spec.seed, R, tying=mode)
        seconds = time.perf_counter() - t0
        res.add("", "tying", mode, mode, "nmse_db", evaluate_model(model, problem.test),
                preset.test_size)
        # wall-clock is informative only; it is excluded from determinism checks
        res.metadata[f"{mode}_train_seconds"] = seconds
        res.artifacts[mode] = model
    return res


# --- DOA ---------------------------------------------------------------------------

@dataclass
class DoaMethods:
    steering: doa.SteeringMatrix
    fpc_config: fpc.FpcConfig
    model: Optional[network.UnfoldedModel]
    music: bool = True


def _doa_trial(args):
    """One Monte-Carlo run: estimates of every method on the same snapshots."""
    methods, scenario, k = args
    snaps, _ = doa.simulate_snapshots(scenario, methods.steering)
    grid = methods.steering.grid
    out = {}
    spec_fpc = doa.recover_spectrum(snaps, methods.steering, methods.fpc_config)
    out["fpc_l1"] = doa.extract_doas(spec_fpc, grid, k)
    if methods.model is not None:
        failed = []
        spec_net = doa.recover_spectrum(snaps, methods.steering, methods.model, failed)
        out["deepfpc"] = doa.extract_doas(spec_net, grid, k)
    if methods.music and snaps.count >= k:
        out["music_1bit"] = doa.music_1bit(snaps, methods.steering.geometry, grid, k)
    return out


def monte_carlo_mae(methods: DoaMethods, base: doa.DoaScenario, runs: int, seed_ids: tuple,
                    seed: int, jobs: int = 1) -> dict:
    """MAE per method over ``runs`` independently seeded scenarios."""
    k = base.true_doas.size
    tasks = [(methods, base.with_seed(stream(seed, _MC, *seed_ids, j)), k) for j in range(runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_doa_trial, tasks, chunksize=max(1, runs // (4 * jobs))))
    else:
        trials = [_doa_trial(t) for t in tasks]
    return {name: doa.mae(np.stack([t[name] for t in trials]), base.true_doas)
            for name in trials[0]}


def train_doa_model(preset: DoaPreset, steering: doa.SteeringMatrix, seed: int,
                    grid_tag: int = 0):
    data = doa.make_doa_dataset(steering, preset.train_size, (preset.k_min, preset.k_max),
                                stream(seed, _TRAIN, grid_tag))
    cfg = preset.train_config(seed)
    model = network.init_from_fpc(steering.lifted, preset.net_tau, preset.lambda0,
                                  cfg.kappa_schedule[0][1], preset.layers)
    trainer = training.Trainer(cfg)
    return trainer.train(model, data), trainer, data


def _doa_model(spec, preset, steering, key, grid_tag, res):
    path = spec.model_path(key)
    if path is not None:
        model = network.load_model(path)
        if (model.m, model.n) != steering.lifted.shape:
            raise InvalidArgumentError(f"model in {path} does not match the DOA problem")
        return model
    t0 = time.perf_counter()
    model, _, _ = train_doa_model(preset, steering, spec.seed, grid_tag)
    res.metadata[f"{key}_train_seconds"] = time.perf_counter() - t0
    res.artifacts[key] = model
    return model


def run_fig4(spec: ExperimentSpec) -> ExperimentResult:
    """MAE versus SNR (panels a, b) and versus snapshot count (panels c, d)."""
    preset = spec.doa_preset()
    geometry, grid = preset.geometry(), preset.grid("uniform")
    steering = doa.steering_matrix(geometry, grid)
    res = _result(spec)
    model = _doa_model(spec, preset, steering, "model_uniform", 0, res)
    methods = DoaMethods(steering, preset.fpc_config(), model)
    points = []
    if "a" in preset.panels or "b" in preset.panels:
        for p, L in zip("ab", preset.snr_sweep_snapshots):
            if p in preset.panels:
                points += [(f"L={L}", "snr_db", snr, L, snr) for snr in preset.snr_list]
    for p, snr in zip("cd", preset.snapshot_sweep_snr):
        if p in preset.panels:
            points += [(f"snr_db={snr:g}", "snapshots", L, L, snr) for L in preset.snapshot_list]
    for cond, var, value, L, snr in points:
        base = doa.DoaScenario(geometry, grid, preset.doas, int(L), float(snr))
        # seeds depend only on the point itself, so panel subsets reproduce full runs
        ids = (400, hash_str(cond), hash_str(f"{var}={value!r}"))
        maes = monte_carlo_mae(methods, base, preset.runs, ids, spec.seed, spec.jobs)
        for name, v in maes.items():
            res.add(cond, var, value, name, "mae_deg", v, preset.runs)
    return res


def run_fig6(spec: ExperimentSpec) -> ExperimentResult:
    """MAE versus snapshot count on the uniform and the orthogonal grid."""
    preset = spec.doa_preset()
    geometry = preset.geometry()
    res = _result(spec)
    for tag, kind in enumerate(("uniform", "orthogonal")):
        grid = preset.grid(kind)
        steering = doa.steering_matrix(geometry, grid)
        model = _doa_model(spec, preset, steering, f"model_{kind}", tag, res)
        methods = DoaMethods(steering, preset.fpc_config(), model)
        for L in preset.snapshot_list:
            base = doa.DoaScenario(geometry, grid, preset.doas, int(L), preset.fig6_snr)
            ids = (600, tag, hash_str(f"snapshots={L!r}"))
            maes = monte_carlo_mae(methods, base, preset.runs, ids, spec.seed, spec.jobs)
            for name, v in maes.items():
                res.add(f"grid={kind}", "snapshots", L, name, "mae_deg", v, preset.runs)
    return res


def hash_str(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


RUNNERS = {"fig3_nmse_vs_layers": run_fig3, "table1_tying": run_table1,
           "fig4_mae_sweeps": run_fig4, "fig6_grid_comparison": run_fig6}


def run(spec: ExperimentSpec) -> ExperimentResult:
    result = RUNNERS[spec.name](spec)
    if spec.output_path:
        result.write(spec.output_path)
    return result
