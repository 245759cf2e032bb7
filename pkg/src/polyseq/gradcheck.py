"""Central finite-difference checks for the reverse-mode engine."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .matching import sinkhorn_normalize

FD_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, index, step: float = FD_STEP) -> float:
    """d fn / d x[index] by central difference, restoring ``x`` afterwards."""
    old = x[index]
    x[index] = old + step
    hi = fn()
    x[index] = old - step
    lo = fn()
    x[index] = old
    return (hi - lo) / (2.0 * step)


def check_function(fn: Callable[..., T.Tensor], inputs: list[np.ndarray], step: float = FD_STEP,
                   seed: int = 0) -> float:
    """Max relative error of the gradient of ``sum(fn(*inputs) * w)`` for a random fixed ``w``.

    Every entry of every input is perturbed, so keep inputs small.
    """
    leaves = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    w = np.random.default_rng(seed).normal(size=fn(*leaves).shape)
    with T.Tape() as tape:
        out = fn(*leaves)
        loss = T.sum(T.mul(out, T.Tensor(w)))
    T.backward(tape, loss)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)

        def f():
            return float(np.sum(fn(*leaves).values * w))

        numeric = np.zeros(leaf.shape)
        for idx in np.ndindex(*leaf.shape):
            numeric[idx] = numeric_grad(f, leaf.values, idx, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_parameters(loss_fn: Callable[[], T.Tensor], params: dict[str, T.Tensor], samples: list[tuple[str, tuple]],
                     step: float = FD_STEP) -> list[tuple[str, tuple, float, float, float]]:
    """Compare analytic and numeric gradients for selected parameter entries.

    Returns ``(name, index, analytic, numeric, rel_err)`` rows, where the
    relative error is taken against the largest of the two magnitudes
    (floored at 1e-8).
    """
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    T.backward(tape, loss)
    rows = []
    for name, idx in samples:
        p = params[name]
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0

        def f():
            return float(loss_fn().values)

        numeric = numeric_grad(f, p.values, idx, step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        rows.append((name, idx, analytic, numeric, err))
    return rows


def _rand(*shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def primitive_cases() -> dict[str, tuple[Callable[..., T.Tensor], list[np.ndarray]]]:
    """Small (function, inputs) cases covering every differentiable operation.

    Sinkhorn is a composite of log-softmax and transposes, checked here as a
    unit because the permutation loss depends on it.
    """
    rand = _rand
    return {
        "add": (lambda a, b: T.add(a, b), [rand(3, 4), rand(3, 4, seed=1)]),
        "add_broadcast": (lambda a, b: T.add(a, b), [rand(2, 3, 4), rand(4, seed=1)]),
        "mul": (lambda a, b: T.mul(a, b), [rand(3, 5), rand(3, 5, seed=1)]),
        "mul_broadcast": (lambda a, b: T.mul(a, b), [rand(2, 5), rand(5, seed=1)]),
        "scale": (lambda a: T.scale(a, -2.5), [rand(4, 3)]),
        "matmul": (lambda a, b: T.matmul(a, b), [rand(4, 5), rand(5, 3, seed=1)]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [rand(2, 3, 4), rand(2, 4, 2, seed=1)]),
        "matmul_lead": (lambda a, b: T.matmul(a, b), [rand(2, 3, 4), rand(4, 5, seed=1)]),
        "reshape": (lambda a: T.reshape(a, (6, 2)), [rand(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [rand(2, 3, 2)]),
        "transpose_last": (lambda a: T.transpose(a), [rand(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), [rand(3, 2), rand(3, 4, seed=1)]),
        "getitem_slice": (lambda a: T.getitem(a, (slice(None), slice(1, 5, 2))), [rand(3, 7)]),
        "getitem_fancy": (lambda a: T.getitem(a, np.array([0, 2, 2, 1])), [rand(3, 4)]),
        "repeat": (lambda a: T.repeat(a, 1, 3), [rand(2, 4)]),
        "softmax": (lambda a: T.softmax(a), [rand(3, 5, lo=-3, hi=3)]),
        "log_softmax": (lambda a: T.log_softmax(a), [rand(3, 5, lo=-3, hi=3)]),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [rand(3, 6), rand(6, seed=1), rand(6, seed=2)]),
        "gelu": (lambda a: T.gelu(a), [rand(4, 5, lo=-3, hi=3)]),
        "embedding": (lambda t: T.embedding(np.array([[0, 3, 3], [1, 2, 0]]), t), [rand(4, 5)]),
        "sum": (lambda a: T.sum(a, axis=1), [rand(3, 4)]),
        "sum_all": (lambda a: T.sum(a), [rand(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=0), [rand(3, 4)]),
        "exp": (lambda a: T.exp(a), [rand(3, 4)]),
        "log": (lambda a: T.log(a), [rand(3, 4, lo=0.5, hi=2.0)]),
        "clamp_min": (lambda a: T.clamp_min(a, 0.1), [rand(5, 7, lo=0.0, hi=1.0)]),
        "cross_entropy": (lambda a: T.cross_entropy(a, np.array([[1, 0, 4], [2, 2, 3]])), [rand(2, 3, 5)]),
        "linear": (lambda x, w, b: T.linear(x, w, b), [rand(2, 3, 4), rand(4, 5, seed=1), rand(5, seed=2)]),
        "sinkhorn": (lambda s: sinkhorn_normalize(s, 10, 0.5).entries, [rand(4, 4, lo=-2, hi=2)]),
    }
