"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, backward, no_grad


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, Tensor(weights)))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, or the absolute error when both are ~0."""
    diff = float(np.linalg.norm(a - b))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return diff / scale if scale > 1e-10 else diff


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest relative error between tape and finite-difference gradients.

    Non-scalar outputs are reduced with fixed random weights so every output
    element contributes. ``wrt`` selects which inputs to check (default all).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    weights = None if probe.size == 1 else np.random.default_rng(seed).normal(size=probe.shape)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = _scalarize(fn(*tensors), weights)
    backward(loss)

    def value(i, arr):
        with no_grad():
            args = [Tensor(arr if j == i else a) for j, a in enumerate(arrays)]
            return _scalarize(fn(*args), weights).item()

    worst = 0.0
    for i in wrt:
        base = arrays[i]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for k in range(base.size):
            bumped = base.copy().reshape(-1)
            orig = bumped[k]
            bumped[k] = orig + eps
            up = value(i, bumped.reshape(base.shape))
            bumped[k] = orig - eps
            down = value(i, bumped.reshape(base.shape))
            flat[k] = (up - down) / (2 * eps)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(base)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def model_gradcheck(model, loss_fn: Callable[[], Tensor], names: Sequence[str] | None = None,
                    eps: float = 1e-5, max_entries: int = 40, seed: int = 0) -> float:
    """Finite-difference check of ``loss_fn`` against a model's parameters.

    Checks up to ``max_entries`` randomly chosen entries per named parameter
    (all parameters by default). ``loss_fn`` must rebuild the graph on every
    call and must be deterministic.
    """
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    names = list(params) if names is None else list(names)
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for name in names:
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        picks = rng.choice(p.size, size=min(max_entries, p.size), replace=False)
        num = np.zeros(len(picks))
        ana = np.zeros(len(picks))
        flat = p.data.reshape(-1)
        for j, k in enumerate(picks):
            orig = flat[k]
            with no_grad():
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
            flat[k] = orig
            num[j] = (up - down) / (2 * eps)
            ana[j] = analytic.reshape(-1)[k]
        worst = max(worst, relative_error(ana, num))
    return worst
