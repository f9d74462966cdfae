"""The verification routines themselves: finite differences, brute conv,
reference Adam."""

import numpy as np
import pytest

from zaplab import autodiff as ad
from zaplab.autodiff import Tensor, backward
from zaplab.models import ArchitectureSpec, build_convnet
from zaplab.oracle import FiniteDiffSpec, ReferenceAdam, brute_conv, fd_gradient, rel_error


class TestFdGradient:
    def test_quadratic(self):
        (g,) = fd_gradient(lambda ps: float(ps[0] ** 2), [np.array(3.0)])
        assert abs(g - 6.0) < 1e-6

    def test_constant_function(self):
        (g,) = fd_gradient(lambda ps: 42.0, [np.ones(4)])
        assert not g.any()

    def test_multiple_params(self):
        ga, gb = fd_gradient(lambda ps: float((ps[0] * ps[1]).sum()),
                             [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        np.testing.assert_allclose(ga, [3.0, 4.0], atol=1e-7)
        np.testing.assert_allclose(gb, [1.0, 2.0], atol=1e-7)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            fd_gradient(lambda ps: float("nan"), [np.ones(2)])

    def test_cross_checks_backward_on_toy_net(self):
        rng = np.random.default_rng(0)
        spec = ArchitectureSpec(input_shape=(1, 8, 8), num_blocks=3, num_classes=3,
                                channels=2, final_pool=False)
        model = build_convnet(spec, np.random.default_rng(1))
        x = rng.standard_normal((2, 1, 8, 8))
        y = rng.integers(0, 3, 2)
        grads = backward(ad.softmax_cross_entropy(model.forward(x), y), model.param_list())

        def f(arrs):
            for n, a in zip(model.param_names(), arrs):
                model.params[n].data = a.copy()
            return float(ad.softmax_cross_entropy(model.forward(x), y).data)

        orig = [p.data.copy() for p in model.param_list()]
        fd = fd_gradient(f, orig, FiniteDiffSpec(step=1e-6))
        f(orig)
        assert max(rel_error(g.data, fg) for g, fg in zip(grads, fd)) < 1e-4


class TestBruteConv:
    def test_delta_kernel_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(brute_conv(x, k), x, atol=1e-15)

    def test_zero_kernel(self):
        x = np.ones((1, 2, 4, 4))
        assert not brute_conv(x, np.zeros((2, 2, 3, 3))).any()

    def test_agrees_with_production(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        prod = ad.conv2d(Tensor(x), Tensor(k)).data
        assert rel_error(prod, brute_conv(x, k)) < 1e-12


class TestReferenceAdam:
    def test_first_step_magnitude(self):
        ref = ReferenceAdam(3)
        theta = ref.step(np.zeros(3), np.array([1.0, -1.0, 0.5]), lr=0.1)
        np.testing.assert_allclose(np.abs(theta), 0.1, rtol=1e-6)

    def test_moves_against_gradient(self):
        ref = ReferenceAdam(2)
        theta = np.array([1.0, 1.0])
        for _ in range(5):
            theta = ref.step(theta, np.array([1.0, -1.0]), lr=0.05)
        assert theta[0] < 1.0 < theta[1]
