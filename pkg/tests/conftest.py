"""Shared test helpers: double-precision finite-difference gradient checks."""

import numpy as np

from flowvid import tensor as T


def numeric_grad(f, arrays, eps=1e-6):
    """Central-difference gradient of scalar f with respect to each array.

    `f` receives plain float64 numpy arrays and must return a python float.
    """
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            bumped = [a.copy() for a in arrays]
            bumped[k][idx] += eps
            hi = f(*bumped)
            bumped[k][idx] -= 2 * eps
            lo = f(*bumped)
            g[idx] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_grads(taped_f, arrays, rtol=1e-4, eps=1e-6):
    """Compare tape gradients of a scalar-valued taped function against
    central differences, in float64. `taped_f` receives Tensors."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = taped_f(*leaves)
    grads = T.backward(loss, tape, leaves=leaves)

    def plain(*arrs):
        ts = [T.Tensor(a) for a in arrs]
        return float(taped_f(*ts).data)

    numeric = numeric_grad(plain, arrays, eps=eps)
    worst = 0.0
    for leaf, ng in zip(leaves, numeric):
        worst = max(worst, rel_err(grads[id(leaf)], ng))
    assert worst < rtol, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst
