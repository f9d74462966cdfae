"""SGD and Adam updates over lists of parameter tensors.

SGD comes in two forms: an in-place step for ordinary training, and a
functional step that returns new graph nodes so a later loss can be
differentiated back through the update to the starting parameters. Both
produce identical values for identical inputs.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, mul, sub


def sgd_step_inplace(params, grads, lr):
    """theta <- theta - lr * g, elementwise, mutating the parameter data."""
    for p, g in zip(params, grads, strict=True):
        if p.data.shape != g.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape} vs grad {g.data.shape}")
        p.data -= lr * g.data


def sgd_step_functional(params, grads, lr):
    """One SGD step as new graph nodes: returns [p - lr*g for p, g].

    The gradients must have been produced with ``create_graph=True`` (or carry
    a graph of their own); otherwise the returned parameters could not pass
    gradient back to the starting point and the call is a contract violation.
    """
    out = []
    for p, g in zip(params, grads, strict=True):
        if p.data.shape != g.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape} vs grad {g.data.shape}")
        if g.created_graph is not True and g._vjp is None:
            raise ValueError("functional SGD needs gradients produced with create_graph=True")
        step = Tensor(np.asarray(lr, dtype=p.dtype))
        out.append(sub(p, mul(step, g)))
    return out


class AdamState:
    """First/second moment estimates for one parameter list.

    Shapes mirror the parameters; ``t`` increases by one per step. One state
    belongs to exactly one training phase.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def reset_rows(self, param_index, rows):
        """Zero the moment entries for the given leading-axis rows.

        Used when the corresponding weights are resampled: fresh weights
        should not inherit momentum accumulated by the old ones.
        """
        rows = list(rows)
        self.m[param_index][rows] = 0.0
        self.v[param_index][rows] = 0.0


def adam_step(state, params, grads, lr):
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads, strict=True)):
        if p.data.shape != g.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape} vs grad {g.data.shape}")
        gd = g.data if isinstance(g, Tensor) else g
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * gd
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * gd * gd
        m_hat = state.m[i] / (1.0 - b1**state.t)
        v_hat = state.v[i] / (1.0 - b2**state.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
