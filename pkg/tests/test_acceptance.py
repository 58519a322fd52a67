"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Criteria 4 to 7 train models at desk scale and take several minutes each.
Set ``DEEPFPC_FULL_SCALE=1`` to also run the hours-long full-size check.
"""
import os
import time

import numpy as np
import pytest

from deepfpc import doa, experiments, fpc, network
from deepfpc.fpc import FpcState, fpc_step
from deepfpc.sensing import generate_gaussian_matrix, quantize

from . import test_properties
from .conftest import record_acceptance
from .gradcheck import finite_difference_check, kink_free_instance


def _check(criterion, title, passed, detail, started, budget):
    elapsed = time.perf_counter() - started
    ok = bool(passed) and elapsed < budget
    record_acceptance(criterion, title, ok, f"{detail}; {elapsed:.1f} s (budget {budget:g} s)")
    assert passed, detail
    assert elapsed < budget, f"took {elapsed:.1f} s"


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    cases = 0
    for seed in range(3):
        for per_layer in (False, True):
            for tying in ("tied_abc_untied_nu", "untied_all"):
                model, y, truth = kink_free_instance(seed, per_layer, tying, m=12, n=6, layers=3)
                worst = max(worst, max(finite_difference_check(model, y, truth).values()))
                cases += 1
    _check(1, "backward vs central differences", worst <= 1e-4,
           f"max relative error {worst:.2e} over {cases} instances (tol 1e-4)", t0, 10)


def _fpc_oracle_instance(rng, m=40, n=20, layers=10, tau=0.1, lam=1.0):
    phi = generate_gaussian_matrix(m, n, rng)
    y = quantize(rng.standard_normal(m))
    x0 = rng.standard_normal(n)
    x0 /= np.linalg.norm(x0)
    states = [FpcState(x0)]
    for _ in range(layers):
        states.append(fpc_step(states[-1], phi, y, tau, tau / lam))
    margin = min(np.min(np.abs(phi @ s.x)) for s in states[:-1])
    return phi, y, x0, states[-1].x, margin


def test_criterion_2_fpc_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    errors = []
    while len(errors) < 20:
        phi, y, x0, ref, margin = _fpc_oracle_instance(rng)
        if margin < 1e-4:
            continue  # tanh(kappa u) is not yet sign(u) this close to zero
        model = network.init_from_fpc(phi, 0.1, 1.0, 1e6, 10, normalize_per_layer=True)
        out, _ = network.forward(model, y, x0=x0)
        errors.append(np.max(np.abs(out - ref)))
    worst = max(errors)
    _check(2, "kappa=1e6 network equals FPC steps", worst <= 1e-6,
           f"max-norm error {worst:.2e} over 20 instances (tol 1e-6)", t0, 5)


def test_criterion_3_decomposition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m2, n2, L = 2 * rng.integers(2, 10), 2 * rng.integers(3, 20), rng.integers(1, 8)
        Lt = rng.standard_normal((m2, n2))
        S = rng.standard_normal((n2, L)) * (rng.random((n2, L)) < 0.3)
        Z = quantize(rng.standard_normal((m2, L)))
        lam = rng.uniform(0.1, 5)
        total = sum(fpc.objective(Lt, S[:, t], Z[:, t], lam) for t in range(L))
        worst = max(worst, abs(doa.multi_snapshot_objective(S, Lt, Z, lam) - total))
    geo, grid = doa.UlaGeometry(16), doa.uniform_grid(90)
    steer = doa.steering_matrix(geo, grid)
    snaps, _ = doa.simulate_snapshots(doa.DoaScenario(geo, grid, [-30, 0, 30], 6, 10.0, 3),
                                      steer)
    cfg = fpc.FpcConfig(inner_iters=50, outer_iters=4)
    model = network.init_from_fpc(steer.lifted, 0.01, 1.1, 100.0, 8)
    same = all(np.array_equal(doa.recover_spectrum(snaps, steer, s),
                              doa.recover_spectrum_columnwise(snaps, steer, s))
               for s in (cfg, model))
    _check(3, "multi-snapshot decomposition", worst <= 1e-12 and same,
           f"max |objective - sum| {worst:.1e} (tol 1e-12); batch bit-identical: {same}", t0, 10)


def test_criterion_4_fig3_ordering():
    t0 = time.perf_counter()
    res = experiments.run(experiments.ExperimentSpec("fig3_nmse_vs_layers", seed=0))
    fpc8 = res.value("fpc_l1", "nmse_db", 8)
    final8 = res.value("deepfpc_final_norm", "nmse_db", 8)
    per8 = res.value("deepfpc_per_layer_norm", "nmse_db", 8)
    ok = final8 <= fpc8 - 1.0 and final8 < per8
    _check(4, "desk fig3: DeepFPC >= 1 dB below FPC at 8, final-norm beats per-layer", ok,
           f"FPC {fpc8:.2f} dB, DeepFPC final-norm {final8:.2f} dB, per-layer {per8:.2f} dB",
           t0, 30 * 60)


@pytest.mark.skipif(os.environ.get("DEEPFPC_FULL_SCALE") != "1",
                    reason="full-size run takes hours; set DEEPFPC_FULL_SCALE=1")
def test_criterion_4_full_scale_value():
    t0 = time.perf_counter()
    res = experiments.run(experiments.ExperimentSpec("table1_tying", scale="paper", seed=0))
    v = res.value("tied_abc_untied_nu", "nmse_db")
    _check(4, "full-size tied-ABC/untied-nu NMSE", abs(v - (-18.63)) <= 1.5,
           f"{v:.2f} dB vs -18.63 +- 1.5", t0, 24 * 3600)


def test_criterion_5_table1_ordering():
    t0 = time.perf_counter()
    res = experiments.run(experiments.ExperimentSpec("table1_tying", seed=0))
    tied_nu = res.value("tied_abc_untied_nu", "nmse_db")
    untied = res.value("untied_all", "nmse_db")
    tied_all = res.value("tied_all", "nmse_db")
    roundtrip = all(network.to_bytes(network.from_bytes(network.to_bytes(m))) ==
                    network.to_bytes(m) for m in res.artifacts.values())
    ok = (abs(tied_nu - untied) <= 1.0 and tied_nu <= tied_all - 1.0
          and untied <= tied_all - 1.0 and roundtrip)
    _check(5, "desk table1 tying ordering", ok,
           f"tied-ABC/untied-nu {tied_nu:.2f} dB, untied-all {untied:.2f} dB, "
           f"tied-all {tied_all:.2f} dB; models round-trip: {roundtrip}", t0, 90 * 60)


def test_criterion_6_fig4_high_snr_ordering():
    t0 = time.perf_counter()
    spec = experiments.ExperimentSpec("fig4_mae_sweeps", seed=0, overrides={"panels": "d"})
    res = experiments.run(spec)
    parts, ok = [], True
    for L in (5, 10, 20):
        d = res.value("deepfpc", "mae_deg", L, "snr_db=20")
        f = res.value("fpc_l1", "mae_deg", L, "snr_db=20")
        m = res.value("music_1bit", "mae_deg", L, "snr_db=20")
        ok &= d < f and d < m
        parts.append(f"L={L}: DeepFPC {d:.3f}, FPC {f:.3f}, MUSIC {m:.3f}")
    _check(6, "desk fig4(d) MAE ordering at 20 dB", ok, "; ".join(parts), t0, 45 * 60)


def test_criterion_7_grid_sensitivity():
    t0 = time.perf_counter()
    res = experiments.run(experiments.ExperimentSpec("fig6_grid_comparison", seed=0))
    parts, ok = [], True
    for L in (5, 10, 20):
        fu = res.value("fpc_l1", "mae_deg", L, "grid=uniform")
        fo = res.value("fpc_l1", "mae_deg", L, "grid=orthogonal")
        du = res.value("deepfpc", "mae_deg", L, "grid=uniform")
        do = res.value("deepfpc", "mae_deg", L, "grid=orthogonal")
        rel_f = abs(fo - fu) / fu if fu > 0 else np.inf
        rel_d = abs(do - du) / du if du > 0 else (0.0 if do == 0 else np.inf)
        ok &= fo < fu and rel_d < rel_f and du < fu and do < fo
        parts.append(f"L={L}: FPC {fu:.3f}->{fo:.3f} ({rel_f:.0%}), "
                     f"DeepFPC {du:.3f}->{do:.3f} ({rel_d:.0%})")
    _check(7, "desk fig6 grid sensitivity (uniform -> orthogonal)", ok, "; ".join(parts),
           t0, 45 * 60)


def test_criterion_8_property_suites():
    t0 = time.perf_counter()
    names = sorted(n for n in dir(test_properties) if n.startswith("test_"))
    failures = []
    for name in names:
        try:
            getattr(test_properties, name)()
        except Exception as exc:  # report every failing property, not just the first
            failures.append(f"{name}: {type(exc).__name__}")
    _check(8, "property suites (200 cases each)", not failures,
           f"{len(names) - len(failures)}/{len(names)} properties hold"
           + (f"; failing: {', '.join(failures)}" if failures else ""), t0, 60)
