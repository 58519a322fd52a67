"""Command-line entry point: ``deepfpc {train,recover,fig3,table1,fig4,fig6}``.

Exit codes: 0 success, 2 configuration/input error, 3 missing model,
4 numeric failure. ``DEEPFPC_THREADS`` caps BLAS/OpenMP threads.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import _backend, doa, experiments, fpc, network
from .errors import DegenerateError, InvalidArgumentError, ModelFormatError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING_MODEL, EXIT_NUMERIC = 0, 2, 3, 4

DESK_HELP = """\
desk scale presets (use --set key=value or --config FILE to change):
  signal (fig3, table1, train --kind signal):
    N=100, M=200, K=5, 3000 train / 300 test pairs, R=8 layers,
    tau=0.03, lambda=1.1, 10 epochs per training phase, batch 50
  DOA (fig4, fig6, train --kind doa):
    M=16 sensors, N=90 (2 degree) uniform grid or 16-point orthogonal grid,
    K=3 sources at -16.7, -4.2, 1.6 degrees, J=50 Monte-Carlo runs,
    snapshots {5, 10, 20}, SNR -10..30 dB, 8-layer model (init tau=0.03)
    trained on 3000 noise-free pairs with 2-10 sources; FPC uses tau=0.01,
    c=lambda0=1.1, 200 inner x 20 outer iterations
--scale paper: N=500, M=1000, K=25, 1000/1000 pairs, R=20; DOA M=40, N=180,
  K=6 at [-40, -16.7, -4.2, 1.6, 15.7, 60], J=500 (hours of CPU time)
"""


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def read_config_file(path) -> dict:
    """``key = value`` lines (``#`` comments) or a JSON object."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            return {k: (",".join(map(str, v)) if isinstance(v, list) else str(v))
                    for k, v in json.loads(text).items()}
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = value
    return values


def read_matrix_csv(path) -> np.ndarray:
    """Numeric CSV, one vector per row; a non-numeric first row is treated as a header."""
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise CliError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            if len(rows[-1]) != len(rows[0]):
                raise CliError(f"{path}:{lineno}: expected {len(rows[0])} columns, "
                               f"found {len(rows[-1])}")
    if not rows:
        raise CliError(f"{path}: no data rows")
    return np.asarray(rows)


def write_matrix_csv(path, mat) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(mat):
            w.writerow([repr(float(v)) for v in row])


def _overrides(args) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return values


MODEL_KEYS = ("model_final", "model_per_layer", "model_uniform", "model_orthogonal")


def _check_keys(overrides, *templates) -> None:
    known = set(MODEL_KEYS)
    for t in templates:
        known.update(f.name for f in dataclasses.fields(t))
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise CliError(f"unknown configuration key(s): {', '.join(unknown)}")


def _spec(args, name) -> experiments.ExperimentSpec:
    overrides = _overrides(args)
    if name in ("fig3_nmse_vs_layers", "table1_tying") or getattr(args, "kind", "") == "signal":
        _check_keys(overrides, experiments.SignalPreset)
    else:
        _check_keys(overrides, experiments.DoaPreset)
    return experiments.ExperimentSpec(name, args.scale, overrides, args.seed, args.out,
                                      args.jobs)


def cmd_experiment(args, name) -> int:
    spec = _spec(args, name)
    result = experiments.run(spec)
    model_dir = getattr(args, "save_models", None)
    if model_dir:
        os.makedirs(model_dir, exist_ok=True)
        for key, model in result.artifacts.items():
            network.save_model(model, os.path.join(model_dir, f"{key}.dfpc"))
    if not args.out:
        w = csv.DictWriter(sys.stdout, fieldnames=experiments.RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.rows:
            w.writerow(row)
    return EXIT_OK


def cmd_train(args) -> int:
    """Train a model; writes the model, ``.log.csv``, ``.adam.npz`` and the training set."""
    if not args.out:
        raise CliError("train needs --out MODEL_PATH")
    spec = _spec(args, "train")
    out = args.out
    if args.kind == "signal":
        preset = spec.signal_preset()
        problem = experiments.signal_problem(preset, spec.seed)
        model, trainer = experiments.train_signal_model(
            problem, preset, spec.seed, preset.layers, args.per_layer_norm, tying=args.tying)
        dataset = problem.train
        write_matrix_csv(out + ".phi.csv", problem.phi)
    else:
        preset = spec.doa_preset()
        steering = doa.steering_matrix(preset.geometry(), preset.grid(args.grid))
        model, trainer, dataset = experiments.train_doa_model(
            preset, steering, spec.seed, 0 if args.grid == "uniform" else 1)
        with open(out + ".scenario.txt", "w") as fh:
            fh.write(doa.format_scenario(doa.DoaScenario(
                preset.geometry(), preset.grid(args.grid), preset.doas,
                preset.snapshot_list[0], None, spec.seed)))
    network.save_model(model, out)
    trainer.write_log(out + ".log.csv")
    trainer.adam.save(out + ".adam.npz")
    write_matrix_csv(out + ".train_y.csv", dataset.measurements)
    write_matrix_csv(out + ".train_x.csv", dataset.signals)
    final = network.loss(network.infer(model, dataset.measurements), dataset.signals)
    print(f"trained {model.layers}-layer model ({args.kind}); final training loss {final!r}")
    return EXIT_OK


def _load_model(path) -> network.UnfoldedModel:
    if not os.path.exists(path):
        raise CliError(f"model file {path!r} not found", EXIT_MISSING_MODEL)
    try:
        return network.load_model(path)
    except ModelFormatError as exc:
        raise CliError(f"{path}: {exc}") from None


def _fpc_from_overrides(overrides) -> fpc.FpcConfig:
    base = fpc.FpcConfig()
    try:
        return experiments.apply_overrides(base, overrides)
    except (InvalidArgumentError, TypeError) as exc:
        raise CliError(f"bad FPC configuration: {exc}") from None


def cmd_recover(args) -> int:
    """Recover signals from a measurement CSV, or a DOA spectrum from a scenario file."""
    if not args.out:
        raise CliError("recover needs --out PATH")
    overrides = _overrides(args)
    _check_keys(overrides, fpc.FpcConfig)
    model = _load_model(args.model) if args.model else None
    if args.scenario:
        try:
            with open(args.scenario) as fh:
                scenario = doa.parse_scenario(fh.read())
        except OSError as exc:
            raise CliError(f"{args.scenario}: {exc.strerror}") from None
        except doa.ScenarioParseError as exc:
            raise CliError(f"{args.scenario}: {exc}") from None
        steering = doa.steering_matrix(scenario.geometry, scenario.grid)
        snaps, _ = doa.simulate_snapshots(scenario, steering)
        solver = model if model is not None else _fpc_from_overrides(overrides)
        spectrum = doa.recover_spectrum(snaps, steering, solver)
        doa.write_spectrum_csv(args.out, scenario.grid, doa.spectrum_power(spectrum))
        est = doa.extract_doas(spectrum, scenario.grid, scenario.true_doas.size)
        print("estimated DOAs:", ", ".join(f"{a:g}" for a in est))
        return EXIT_OK
    if not args.measurements:
        raise CliError("recover needs --measurements CSV or --scenario FILE")
    ys = read_matrix_csv(args.measurements)
    if model is not None:
        if ys.shape[1] != model.m:
            raise CliError(f"{args.measurements}: rows have {ys.shape[1]} entries, "
                           f"model expects {model.m}")
        xs = network.infer(model, ys)
    else:
        if not args.phi:
            raise CliError("FPC recovery needs --phi CSV (the sensing matrix)")
        phi = read_matrix_csv(args.phi)
        if ys.shape[1] != phi.shape[0]:
            raise CliError(f"{args.measurements}: rows have {ys.shape[1]} entries, "
                           f"sensing matrix has {phi.shape[0]} rows")
        xs = fpc.solve_rows(phi, ys, _fpc_from_overrides(overrides))
    write_matrix_csv(args.out, xs)
    if args.truth:
        truth = read_matrix_csv(args.truth)
        print(f"loss {network.loss(xs, truth)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepfpc", description="1-bit sparse recovery: FPC-l1, DeepFPC, 1-bit DOA.",
        epilog=DESK_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path (CSV for experiments, model for train)")
        p.add_argument("--config", help="key = value file (or JSON) of preset overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one preset field; beats --config")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for Monte-Carlo runs")

    for name, help_ in (("fig3", "NMSE versus layers/iterations"),
                        ("table1", "parameter tying comparison"),
                        ("fig4", "DOA MAE versus SNR and snapshots"),
                        ("fig6", "DOA MAE on uniform versus orthogonal grid")):
        p = sub.add_parser(name, help=help_, epilog=DESK_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        common(p)
        p.add_argument("--save-models", metavar="DIR", help="write trained models here")

    p = sub.add_parser("train", help="train a DeepFPC model", epilog=DESK_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--kind", choices=("signal", "doa"), default="signal")
    p.add_argument("--grid", choices=("uniform", "orthogonal"), default="uniform")
    p.add_argument("--tying", choices=network.TYING_MODES, default="tied_abc_untied_nu")
    p.add_argument("--per-layer-norm", action="store_true")

    p = sub.add_parser("recover", help="recover signals or a DOA spectrum",
                       epilog=DESK_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--model", help="DeepFPC model file; omit to use FPC")
    p.add_argument("--measurements", help="CSV, one measurement vector per row")
    p.add_argument("--phi", help="CSV sensing matrix (FPC only)")
    p.add_argument("--truth", help="optional CSV of true signals; prints the loss")
    p.add_argument("--scenario", help="DOA scenario file; writes an angle,power CSV")
    return parser


COMMANDS = {"fig3": "fig3_nmse_vs_layers", "table1": "table1_tying",
            "fig4": "fig4_mae_sweeps", "fig6": "fig6_grid_comparison"}


def _thread_limit():
    value = os.environ.get("DEEPFPC_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger(__name__).info("kernel backend: %s", _backend.BACKEND)
    try:
        with _thread_limit():
            if args.command == "train":
                return cmd_train(args)
            if args.command == "recover":
                return cmd_recover(args)
            return cmd_experiment(args, COMMANDS[args.command])
    except CliError as exc:
        print(f"deepfpc: error: {exc}", file=sys.stderr)
        return exc.code
    except experiments.MissingModelError as exc:
        print(f"deepfpc: error: {exc}", file=sys.stderr)
        return EXIT_MISSING_MODEL
    except DegenerateError as exc:
        print(f"deepfpc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        print(f"deepfpc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
