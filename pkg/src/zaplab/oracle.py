"""Independent verification routines used by the test suite.

Everything here is a deliberately separate route to the same answer: plain
loops and central finite differences, no code shared with the production
tensor engine or optimizers. These run on tiny instances only; speed is a
non-goal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class FiniteDiffSpec:
    """Central-difference settings and the tolerance policy used with them."""

    step: float = 1e-5
    rel_tol: float = 1e-4
    abs_floor: float = 1e-8


def fd_gradient(fn, params, spec=FiniteDiffSpec()):
    """Central-difference gradient of a scalar function of numpy arrays.

    ``fn`` takes a list of arrays and returns a float; it must be
    deterministic and finite near ``params``. Returns one array per parameter.
    """
    grads = []
    work = [p.astype(np.float64).copy() for p in params]
    h = spec.step
    for k, p in enumerate(work):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(work))
            flat[i] = orig - h
            f_minus = float(fn(work))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"non-finite evaluation at parameter {k}, index {i}")
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a, b, abs_floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def unrolled_meta_oracle(pipeline, params, spec=FiniteDiffSpec()):
    """Numeric gradient of an inner-loop-plus-outer-loss pipeline at its start.

    ``pipeline`` maps the initial parameter arrays to the outer loss, running
    whatever adaptation steps it likes internally; it is treated as a black
    box and differentiated by central differences. Intended for toy models
    (<= a few hundred parameters) and short unrolls.
    """
    return fd_gradient(pipeline, params, spec)


def brute_conv(x, kernel, stride=1, pad=1):
    """Loopwise 2-d cross-correlation over a batch, zero padding.

    x: (N, C, H, W); kernel: (F, C, KH, KW). Mirrors the production conv's
    contract but computes everything with explicit nested loops.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    assert ck == c, "channel mismatch"
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[ni, ci, yi * stride + p, xi * stride + q] * kernel[fi, ci, p, q]
                    out[ni, fi, yi, xi] = acc
    return out


class ReferenceAdam:
    """Second, clean-room Adam used only to cross-check the production one.

    Works on a single flat vector; bias correction is folded into the step
    size rather than applied to the moments, which is an algebraically equal
    but structurally different formulation.
    """

    def __init__(self, dim, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def step(self, theta, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        # lr_t * m / (sqrt(v) + eps') with the corrections moved into lr_t, as
        # in the compact form of the update rule
        lr_t = lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        return theta - lr_t * self.m / (np.sqrt(self.v) + self.eps * np.sqrt(1.0 - b2**self.t))
