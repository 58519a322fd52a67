"""Pure-numpy implementation of the FPC inner loop (fallback backend)."""
import numpy as np


def _shrink(v, nu):
    u = np.sign(v) * np.maximum(np.abs(v) - nu, 0.0)
    return u, float(np.dot(u, u))


def fpc_iterations(phi, y, x, tau, nu, iters):
    """Run ``iters`` FPC updates on ``x`` in place; return the degenerate-step count."""
    flagged = 0
    for _ in range(iters):
        g = phi.T @ (np.where(phi @ x > 0.0, 1.0, -1.0) - y)
        v = x - tau * g
        u, sq = _shrink(v, nu)
        if sq == 0.0:
            u, sq = _shrink(v, 0.5 * nu)
        if sq == 0.0:
            flagged += 1
            continue
        x[:] = u * (1.0 / np.sqrt(sq))
    return flagged


def fpc_iterations_rows(phi, ys, xs, tau, nu, iters):
    flags = np.zeros(ys.shape[0], dtype=np.int64)
    for t in range(ys.shape[0]):
        flags[t] = fpc_iterations(phi, ys[t], xs[t], tau, nu, iters)
    return flags
