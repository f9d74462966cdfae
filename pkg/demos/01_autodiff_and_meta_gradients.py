"""Tour of the tensor engine: gradients, and gradients of gradients.

The punchline is the last section: an SGD step written functionally is just
another differentiable expression, so the loss after the step can be
differentiated with respect to the parameters before it.
"""

import numpy as np

from zaplab import autodiff as ad
from zaplab.autodiff import Tensor, backward, tensor
from zaplab.optim import sgd_step_functional
from zaplab.oracle import FiniteDiffSpec, fd_gradient, rel_error

# --- plain reverse mode ----------------------------------------------------
theta = tensor((3,), [1.0, -2.0, 0.5], requires_grad=True)
loss = ad.tsum(ad.mul(theta, theta))  # sum of squares
(grad,) = backward(loss, [theta])
print("d(sum theta^2)/dtheta =", grad.data, "(expected 2*theta)")

# cross-check an arbitrary composition against central finite differences
rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 8, 8))
k = rng.standard_normal((4, 3, 3, 3))
proj = Tensor(rng.standard_normal((2, 4, 4, 4)))


def pipeline(arrs):
    h = ad.conv2d(Tensor(arrs[0]), Tensor(arrs[1]))
    h = ad.maxpool2d(ad.relu(ad.instance_norm(h)))
    return float(ad.tsum(ad.mul(h, proj)).data)


xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
h = ad.maxpool2d(ad.relu(ad.instance_norm(ad.conv2d(xt, kt))))
gx, gk = backward(ad.tsum(ad.mul(h, proj)), [xt, kt])
fx, fk = fd_gradient(pipeline, [x, k], FiniteDiffSpec(step=1e-6))
print(f"conv/norm/relu/pool gradient vs finite differences: "
      f"input {rel_error(gx.data, fx):.2e}, kernel {rel_error(gk.data, fk):.2e}")

# --- gradients through an SGD step ------------------------------------------
# inner loss L = 0.5 theta^2, one step theta1 = theta0 - eta dL = (1-eta) theta0,
# outer loss 0.5 theta1^2. Closed form: d(outer)/d(theta0) = (1-eta)^2 theta0.
eta = 0.1
theta0 = tensor((), [2.0], requires_grad=True)
inner = 0.5 * ad.mul(theta0, theta0)
grads = backward(inner, [theta0], create_graph=True)  # gradient stays a graph node
(theta1,) = sgd_step_functional([theta0], grads, eta)
outer = 0.5 * ad.mul(theta1, theta1)
(meta,) = backward(outer, [theta0])
print(f"meta-gradient through one SGD step: {float(meta.data):.6f} "
      f"(closed form {(1 - eta) ** 2 * 2.0:.6f})")

# K steps compose the same way
for k_steps in (2, 3):
    cur = theta0
    for _ in range(k_steps):
        g = backward(0.5 * ad.mul(cur, cur), [cur], create_graph=True)
        (cur,) = sgd_step_functional([cur], g, eta)
    (meta,) = backward(0.5 * ad.mul(cur, cur), [theta0])
    print(f"K={k_steps}: {float(meta.data):.6f} "
          f"(closed form {(1 - eta) ** (2 * k_steps) * 2.0:.6f})")
