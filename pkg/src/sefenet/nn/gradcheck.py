"""Central finite-difference gradient checks for layer stacks."""
from __future__ import annotations

import numpy as np

from .network import backward, forward


# multiple of machine epsilon allowed for accumulated rounding in one forward pass
_ROUNDOFF_FACTOR = 64


def _rel_error(analytic, numeric, noise=0.0):
    """Relative error after discounting ``noise``, the finite-difference round-off.

    Entries whose true gradient is exactly zero (a conv bias feeding a
    train-mode batch norm, say) produce a numeric estimate made of rounding
    alone; subtracting the round-off bound keeps those from reading as
    O(1) relative errors.
    """
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.maximum(np.abs(analytic - numeric) - noise, 0.0) / scale


def check_stack_gradients(stack, params, x, *, mode="train", seed=0, eps=1e-5,
                          max_entries=40, rng=None) -> float:
    """Max relative error of backward() against central differences.

    The scalar objective is ``sum(out * r)`` for a fixed random ``r``.
    Checks the input gradient and up to ``max_entries`` randomly chosen
    entries of every parameter array. Differences below the round-off
    level of the objective are not counted as error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out, cache = forward(stack, params, x, mode, seed)
    r = rng.standard_normal(out.shape)
    dx, grads = backward(cache, r)
    # the objective is summed from out.size products of this magnitude
    noise = _ROUNDOFF_FACTOR * np.finfo(out.dtype).eps * float(np.sum(np.abs(out * r))) / eps

    def objective():
        y, _ = forward(stack, params, x, mode, seed)
        return float(np.sum(y * r))

    worst = 0.0
    targets = [("input", x, dx)]
    for name, p in params.params.items():
        for pname, arr in p.items():
            targets.append((f"{name}.{pname}", arr, grads[name][pname]))
    for _, arr, analytic in targets:
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up = objective()
            flat[j] = orig - eps
            down = objective()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(_rel_error(analytic.reshape(-1)[j], numeric, noise)))
    return worst
