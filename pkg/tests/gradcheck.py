"""Central finite-difference oracle for :func:`deepfpc.network.backward`."""
import numpy as np

from deepfpc import network
from deepfpc.network import backward, forward, init_from_fpc
from deepfpc.sensing import generate_gaussian_matrix, make_signal_dataset

STEP = 1e-6
KINK_MARGIN = 1e-3


def _objective(model, y, truth):
    out, _ = forward(model, y)
    return np.sum((out - truth) ** 2)


def kink_distance(model, y):
    _, tape = forward(model, y)
    return min(float(np.min(np.abs(np.abs(p) - model.nu[r])))
               for r, p in enumerate(tape.preacts))


def kink_free_instance(seed, per_layer=False, tying="tied_abc_untied_nu", m=12, n=6, layers=3):
    """Seeded (model, y, truth) whose pre-activations avoid the shrinkage kinks."""
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        phi = generate_gaussian_matrix(m, n, seed=rng)
        model = init_from_fpc(phi, 0.3, 1.0, 2.0, layers, per_layer, tying)
        model.nu = model.nu * rng.uniform(0.5, 1.5, layers)
        model.A = model.A + 0.05 * rng.standard_normal(model.A.shape)
        data = make_signal_dataset(phi, 1, 2, seed=rng)
        y, truth = data.measurements[0], data.signals[0]
        try:
            if kink_distance(model, y) >= KINK_MARGIN:
                return model, y, truth
        except network.DegenerateError:
            continue
    raise RuntimeError("no kink-free instance found")


def finite_difference_check(model, y, truth, step=STEP):
    """Max relative error per block between analytic and numeric gradients."""
    _, tape = forward(model, y)
    grads = backward(model, tape, y, truth).blocks()
    worst = {}
    for name in ("A", "B", "C", "nu"):
        param = getattr(model, name)
        num = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + step
            fp = _objective(model, y, truth)
            param[idx] = orig - step
            fm = _objective(model, y, truth)
            param[idx] = orig
            num[idx] = (fp - fm) / (2 * step)
        scale = np.maximum(np.abs(num), np.abs(grads[name]))
        # entries with negligible gradient are compared absolutely
        rel = np.abs(num - grads[name]) / np.maximum(scale, 1e-6)
        worst[name] = float(rel.max())
    return worst
