"""Central-difference gradient oracle.

Estimates d loss / d theta by perturbing raw parameter arrays one entry at
a time and re-running a closure that computes the scalar loss. The closure
must be a pure function of the parameter values (seeded data, no hidden
state), otherwise the estimate is meaningless.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-4
REL_FLOOR = 1e-6


def fd_gradient(loss_fn: Callable[[], float], param: Tensor,
                indices: Sequence[tuple] | None = None,
                step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences for one parameter tensor.

    ``indices`` restricts the estimate to a subset of entries (flat grad of
    the same shape is still returned, unestimated entries are NaN).
    """
    flat = param.data.reshape(-1)
    if indices is None:
        todo = range(flat.size)
        out = np.zeros(flat.size)
    else:
        todo = [np.ravel_multi_index(ix, param.shape) for ix in indices]
        out = np.full(flat.size, np.nan)
    with no_grad():
        for i in todo:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def rel_error(approx: np.ndarray, exact: np.ndarray,
              floor: float = REL_FLOOR) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    mask = ~np.isnan(a)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    err = np.abs(a - b) / denom
    return float(err[mask].max()) if mask.any() else 0.0


def check_gradients(loss_fn: Callable[[], float], params: dict[str, Tensor],
                    grads: dict[str, np.ndarray], step: float = DEFAULT_STEP,
                    samples_per_param: int | None = None,
                    seed: int = 0) -> dict[str, float]:
    """Compare analytic grads against central differences, per parameter.

    Returns the worst relative error for each parameter name. With
    ``samples_per_param`` set, only a random subset of entries is probed,
    which keeps large checks tractable.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    report: dict[str, float] = {}
    for name, p in params.items():
        if samples_per_param is not None and p.size > samples_per_param:
            flat_ix = rng.choice(p.size, size=samples_per_param, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in flat_ix]
        else:
            indices = None
        fd = fd_gradient(loss_fn, p, indices=indices, step=step)
        report[name] = rel_error(fd, grads[name])
    return report
