"""Runnable gradient-verification suites (also exposed via the CLI).

Each check compares an analytic gradient against the central finite
difference oracle on randomized small instances, or against a closed form.
Returns (name, passed, worst relative error) triples so callers can print
one line per check.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .models import ArchitectureSpec, build_convnet
from .optim import sgd_step_functional
from .oracle import FiniteDiffSpec, fd_gradient, rel_error, unrolled_meta_oracle


def _check_op(name, build, arg_shapes, rng, tol=1e-4, step=1e-5):
    """FD-check the op's gradient through a random linear projection.

    A projection keeps the surrogate loss sensitive to every output (a plain
    sum-of-squares would be blind to normalization ops, whose squared output
    is nearly constant).
    """
    args = [rng.standard_normal(s) for s in arg_shapes]
    proj = Tensor(rng.standard_normal(build(*[Tensor(a) for a in args]).shape))

    def run(arrs):
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        out = build(*ts)
        return ts, ad.tsum(ad.mul(out, proj))

    ts, loss = run(args)
    grads = backward(loss, ts)
    fd = fd_gradient(lambda arrs: float(run(arrs)[1].data), args, FiniteDiffSpec(step=step))
    worst = max(rel_error(g.data, f) for g, f in zip(grads, fd))
    return (name, worst < tol, worst)


def op_checks(seed=0):
    rng = np.random.default_rng(seed)
    checks = [
        ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
        ("div", lambda a, b: ad.div(a, ad.add(ad.mul(b, b), Tensor(np.ones((3, 4))))), [(3, 4), (3, 4)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [(3, 5), (5, 4)]),
        ("linear", lambda x, w, b: ad.linear(x, w, b), [(4, 6), (3, 6), (3,)]),
        ("relu", lambda a: ad.relu(a), [(5, 5)]),
        ("conv2d", lambda x, k: ad.conv2d(x, k), [(2, 3, 6, 6), (4, 3, 3, 3)]),
        ("maxpool2d", lambda x: ad.maxpool2d(x), [(2, 3, 6, 6)]),
        ("instance_norm", lambda x: ad.instance_norm(x), [(2, 3, 5, 5)]),
        ("flatten", lambda x: ad.flatten(x), [(3, 2, 4, 4)]),
        ("exp", lambda a: ad.exp(a), [(3, 3)]),
        ("log", lambda a: ad.log(ad.add(ad.mul(a, a), Tensor(np.ones((3, 3))))), [(3, 3)]),
        ("sqrt", lambda a: ad.sqrt(ad.add(ad.mul(a, a), Tensor(np.ones((3, 3))))), [(3, 3)]),
        ("sum", lambda a: ad.tsum(a, axis=1, keepdims=True), [(3, 4)]),
        ("mean", lambda a: ad.tmean(a, axis=(1, 2), keepdims=True), [(2, 3, 4)]),
    ]
    results = [_check_op(name, build, shapes, rng) for name, build, shapes in checks]

    # softmax cross entropy against finite differences
    logits = rng.standard_normal((5, 7))
    targets = rng.integers(0, 7, size=5)

    def ce(arrs):
        return float(ad.softmax_cross_entropy(Tensor(arrs[0], requires_grad=True), targets).data)

    lt = Tensor(logits, requires_grad=True)
    (g,) = backward(ad.softmax_cross_entropy(lt, targets), [lt])
    fd = fd_gradient(ce, [logits], FiniteDiffSpec(step=1e-6))
    worst = rel_error(g.data, fd[0])
    results.append(("softmax_cross_entropy", worst < 1e-4, worst))
    return results


def network_check(seed=0, channels=6, size=14, tol=1e-4):
    """Full forward+loss gradient vs finite differences on a small model."""
    rng = np.random.default_rng(seed)
    spec = ArchitectureSpec(input_shape=(1, size, size), num_blocks=3, num_classes=5,
                            channels=channels, final_pool=False)
    model = build_convnet(spec, np.random.default_rng(seed + 1))
    x = rng.standard_normal((2, 1, size, size))
    y = rng.integers(0, 5, size=2)
    loss = ad.softmax_cross_entropy(model.forward(x), y)
    grads = backward(loss, model.param_list())

    def f(arrs):
        for name, arr in zip(model.param_names(), arrs):
            model.params[name].data = arr.copy()
        return float(ad.softmax_cross_entropy(model.forward(x), y).data)

    orig = [p.data.copy() for p in model.param_list()]
    fd = fd_gradient(f, orig, FiniteDiffSpec(step=1e-6))
    f(orig)
    worst = max(rel_error(g.data, fg) for g, fg in zip(grads, fd))
    return ("network_forward_loss", worst < tol, worst)


def meta_checks(seed=0, tol=1e-3):
    """Meta-gradients through K functional inner steps vs the unrolled oracle
    and the closed-form quadratic."""
    results = []
    rng = np.random.default_rng(seed)

    # closed form: K steps on L=0.5*t^2 then outer 0.5*t_K^2 gives (1-eta)^(2K)*t0
    for k in (1, 2, 3):
        eta = 0.1
        t0 = ad.tensor((), [2.0], requires_grad=True)
        cur = t0
        for _ in range(k):
            inner = ad.mul(Tensor(np.asarray(0.5)), ad.mul(cur, cur))
            (g,) = backward(inner, [cur], create_graph=True)
            (cur,) = sgd_step_functional([cur], [g], eta)
        outer = ad.mul(Tensor(np.asarray(0.5)), ad.mul(cur, cur))
        (g0,) = backward(outer, [t0])
        expected = (1 - eta) ** (2 * k) * 2.0
        err = abs(float(g0.data) - expected) / abs(expected)
        results.append((f"quadratic_meta_K{k}", err < 1e-10, err))

    # small random model: analytic meta-gradient vs FD of the whole pipeline
    spec = ArchitectureSpec(input_shape=(1, 8, 8), num_blocks=3, num_classes=3,
                            channels=2, final_pool=False)
    model = build_convnet(spec, np.random.default_rng(seed + 2))
    x_in = rng.standard_normal((3, 1, 8, 8))
    y_in = rng.integers(0, 3, size=3)
    x_out = rng.standard_normal((5, 1, 8, 8))
    y_out = rng.integers(0, 3, size=5)
    names = model.param_names()
    eta = 0.05

    for k in (1, 2, 3):
        def pipeline(arrs, k=k):
            cur = {n: Tensor(a.copy(), requires_grad=True) for n, a in zip(names, arrs)}
            start = [cur[n] for n in names]
            for i in range(k):
                xi = x_in[i : i + 1]
                yi = y_in[i : i + 1]
                loss = ad.softmax_cross_entropy(model.forward(xi, params=cur), yi)
                grads = backward(loss, [cur[n] for n in names], create_graph=True)
                cur = dict(zip(names, sgd_step_functional([cur[n] for n in names], grads, eta)))
            return float(ad.softmax_cross_entropy(model.forward(x_out, params=cur), y_out).data)

        arrs = [p.data.copy() for p in model.param_list()]
        cur = {n: Tensor(a.copy(), requires_grad=True) for n, a in zip(names, arrs)}
        start = [cur[n] for n in names]
        for i in range(k):
            loss = ad.softmax_cross_entropy(model.forward(x_in[i : i + 1], params=cur), y_in[i : i + 1])
            grads = backward(loss, [cur[n] for n in names], create_graph=True)
            cur = dict(zip(names, sgd_step_functional([cur[n] for n in names], grads, eta)))
        outer = ad.softmax_cross_entropy(model.forward(x_out, params=cur), y_out)
        analytic = backward(outer, start)
        fd = unrolled_meta_oracle(pipeline, arrs, FiniteDiffSpec(step=1e-5))
        worst = max(rel_error(g.data, f) for g, f in zip(analytic, fd))
        results.append((f"meta_gradient_K{k}", worst < tol, worst))
    return results


def run_all(seed=0):
    results = op_checks(seed)
    results.append(network_check(seed))
    results.extend(meta_checks(seed))
    return results
