"""Finite-difference gradient oracle and the op-by-op checking suite.

Central differences at float64 are the reference every backward rule is
held against; the suite is what the ``gradcheck`` CLI command runs and what
the acceptance tests call.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .tensor import (Tensor, attention, bilinear_resize, conv2d,
                     conv_transpose2d, gelu, layernorm, log_softmax, matmul,
                     relu, softmax, tsum)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-case elementwise |a-b| / max(|a|,|b|); absolute below ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(denom < floor, diff, diff / np.maximum(denom, floor))
    return float(rel.max()) if rel.size else 0.0


def check_gradients(build: Callable[..., Tensor], arrays: list[np.ndarray],
                    eps: float = 1e-5) -> float:
    """Compare backward() against finite differences for one scalar graph.

    ``build`` maps Tensor arguments to a scalar Tensor; every entry of
    ``arrays`` is treated as a differentiable leaf. Returns the worst
    relative error across all leaves.
    """
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    loss.backward()
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        def scalar_f(x, _idx=idx):
            probe = [Tensor(leaf2.data) for leaf2 in leaves]
            probe[_idx] = Tensor(x)
            return build(*probe).item()

        fd = finite_diff_grad(scalar_f, leaf.data.copy(), eps=eps)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(got, fd))
    return worst


def projection(rng: np.random.Generator, shape: tuple[int, ...]):
    """Fixed random weights that turn an op output into a scalar loss."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=shape))
    return lambda t: tsum(t * w)


def run_op_suite(tolerance: float = 1e-4, seeds: int = 10,
                 verbose: bool = False) -> list[tuple[str, float, bool]]:
    """Gradient-check every differentiable engine op over random inputs.

    Returns (name, worst_rel_error, passed) per op; losses and heads have
    their own end-to-end checks (see run_full_suite).
    """
    results = []

    def record(name, err):
        ok = err <= tolerance
        results.append((name, err, ok))
        if verbose:
            print(f"  {name:<24s} rel_err={err:.3e} {'ok' if ok else 'FAIL'}")

    def sweep(name, case):
        worst = 0.0
        for seed in range(seeds):
            worst = max(worst, case(np.random.default_rng(1000 + seed)))
        record(name, worst)

    def matmul_case(rng):
        proj = projection(rng, (3, 2))
        return check_gradients(
            lambda a, b: proj(matmul(a, b)),
            [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))])

    def conv2d_case(rng):
        proj = projection(rng, (2, 3, 5, 5))
        return check_gradients(
            lambda x, w, b: proj(conv2d(x, w, b, stride=1, pad=1)),
            [rng.uniform(-1, 1, (2, 2, 5, 5)), rng.uniform(-1, 1, (3, 2, 3, 3)),
             rng.uniform(-1, 1, (3,))])

    def conv2d_stride_case(rng):
        proj = projection(rng, (1, 2, 3, 3))
        return check_gradients(
            lambda x, w, b: proj(conv2d(x, w, b, stride=2, pad=0)),
            [rng.uniform(-1, 1, (1, 2, 6, 6)), rng.uniform(-1, 1, (2, 2, 2, 2)),
             rng.uniform(-1, 1, (2,))])

    def convt_case(rng):
        proj = projection(rng, (2, 2, 8, 8))
        return check_gradients(
            lambda x, w, b: proj(conv_transpose2d(x, w, b, stride=2)),
            [rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, (3, 2, 2, 2)),
             rng.uniform(-1, 1, (2,))])

    def layernorm_case(rng):
        proj = projection(rng, (4, 6))
        return check_gradients(
            lambda x, g, b: proj(layernorm(x, g, b, eps=1e-6)),
            [rng.uniform(-1, 1, (4, 6)), rng.uniform(0.5, 1.5, (6,)),
             rng.uniform(-0.5, 0.5, (6,))])

    def softmax_case(rng):
        proj = projection(rng, (3, 5))
        return check_gradients(lambda x: proj(softmax(x, axis=-1)),
                               [rng.uniform(-1, 1, (3, 5))])

    def log_softmax_case(rng):
        proj = projection(rng, (3, 5))
        return check_gradients(lambda x: proj(log_softmax(x, axis=-1)),
                               [rng.uniform(-1, 1, (3, 5))])

    def relu_case(rng):
        # keep inputs away from the kink where central differences break down
        x = rng.uniform(0.2, 1.0, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5))
        proj = projection(rng, (4, 5))
        return check_gradients(lambda t: proj(relu(t)), [x])

    def gelu_case(rng):
        proj = projection(rng, (4, 5))
        return check_gradients(lambda x: proj(gelu(x)),
                               [rng.uniform(-2, 2, (4, 5))])

    def attention_case(rng):
        proj = projection(rng, (3, 4))
        return check_gradients(
            lambda q, k, v, w: proj(attention(q, k, v, w, heads=2)),
            [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (5, 4)),
             rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (4, 4))])

    def resize_case(rng):
        proj = projection(rng, (1, 2, 7, 5))
        return check_gradients(lambda x: proj(bilinear_resize(x, 7, 5)),
                               [rng.uniform(-1, 1, (1, 2, 4, 3))])

    sweep("matmul", matmul_case)
    sweep("conv2d", conv2d_case)
    sweep("conv2d_stride2", conv2d_stride_case)
    sweep("conv_transpose2d", convt_case)
    sweep("layernorm", layernorm_case)
    sweep("softmax", softmax_case)
    sweep("log_softmax", log_softmax_case)
    sweep("relu", relu_case)
    sweep("gelu", gelu_case)
    sweep("attention", attention_case)
    sweep("bilinear_resize", resize_case)

    return results


def run_full_suite(tolerance: float = 1e-4, verbose: bool = True) -> bool:
    """Op suite plus losses, two-way attention, and head end-to-end checks.

    Returns True when everything is inside tolerance. Model-level checks
    live in segheads.heads / segheads.training to avoid circular imports,
    so they are injected here lazily.
    """
    from .training import gradcheck_losses
    from .heads import gradcheck_heads

    start = time.time()
    results = list(run_op_suite(tolerance=tolerance, verbose=verbose))
    results += gradcheck_losses(tolerance=tolerance, verbose=verbose)
    results += gradcheck_heads(tolerance=tolerance, verbose=verbose)
    ok = all(r[2] for r in results)
    if verbose:
        status = "all ops within tolerance" if ok else "TOLERANCE VIOLATION"
        print(f"gradcheck: {len(results)} checks in {time.time() - start:.1f}s: {status}")
    return ok
