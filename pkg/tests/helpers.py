"""Independent oracles shared by the test modules."""

import numpy as np

# fourth-order central stencil; at this step truncation (~h^4) and rounding
# (~eps/h) are both near 1e-13 for O(1) losses
FD_STEP = 1e-3
# denominators below this are treated as this value, so entries whose true
# gradient is ~0 are judged on absolute error
REL_FLOOR = 1e-6


def central_difference(f, arrays, step=FD_STEP):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arrays``
    (perturbed in place and restored), five-point central stencil."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            vals = []
            for k in (2, 1, -1, -2):
                arr[idx] = old + k * step
                vals.append(f())
            arr[idx] = old
            g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=REL_FLOOR):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def softmax(x, tau=1.0):
    z = np.asarray(x, float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_terms(p):
    """(mean per-row entropy, entropy of the mean row) with plain numpy."""
    p = np.asarray(p, float)
    lp = np.log(np.maximum(p, 1e-12))
    cond = -np.sum(p * lp) / p.shape[0]
    pbar = p.mean(axis=0)
    marg = -np.sum(pbar * np.log(np.maximum(pbar, 1e-12)))
    return cond, marg
