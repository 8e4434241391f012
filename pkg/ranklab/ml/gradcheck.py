# ranklab/ml/gradcheck.py
from typing import Callable, Sequence

import numpy as np

from core.errors import ContractError
from ml.tensor import Tensor, backward, get_dtype, no_grad, param_key


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """
    Compare backward() against central differences on every coordinate of
    `params` and return the maximum relative error. Relative error is
    |analytic − numeric| / max(|analytic|, |numeric|, floor), so coordinates
    whose true gradient is zero are judged on an absolute scale.

    `loss_fn` must rebuild the loss from the current parameter values.
    Never raises on a large error; it only reports it.
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    if get_dtype() is not np.float64:
        raise ContractError("finite_diff_check: needs float64 precision")

    params = list(params)
    grads = backward(loss_fn(), params)

    worst = 0.0
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        analytic = grads[param_key(p)].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with no_grad():
                flat[i] = original + step
                plus = loss_fn().item()
                flat[i] = original - step
                minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
