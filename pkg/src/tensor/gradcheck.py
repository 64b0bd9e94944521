"""Central finite-difference check of analytic gradients."""

from typing import Callable, Optional, Sequence

import numpy as np

from src.tensor.core import Tensor, backward, tape, zero_grad
from src.tensor.random import make_rng


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-3,
    samples_per_param: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Maximum relative error between backprop and central differences.

    The error for one coordinate is |a - n| / max(|a|, |n|, floor); ``floor``
    keeps round-off on near-zero gradients from dominating. When
    ``samples_per_param`` is set, only that many seeded coordinates of each
    parameter are probed.
    """
    zero_grad(params)
    with tape() as graph:
        loss = f()
    backward(graph, loss, params)
    analytic = [param.grad.copy() for param in params]

    rng = make_rng(seed, "gradcheck")
    worst = 0.0
    for param, grad in zip(params, analytic):
        param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        if samples_per_param is not None and samples_per_param < flat.size:
            coords = rng.choice(flat.size, size=samples_per_param, replace=False)
        else:
            coords = np.arange(flat.size)

        for i in coords:
            original = flat[i]
            flat[i] = original + step
            plus = f().item()
            flat[i] = original - step
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            error = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), abs(numeric), floor)
            worst = max(worst, error)
    return worst
