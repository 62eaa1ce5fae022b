"""Gradients and gradients of gradients with divlab.autodiff."""

import numpy as np

from divlab import autodiff as ad
from divlab.params import ParamVector, grad, grad_of_grad

# A ParamVector is a flat float64 vector with named slots.
p = ParamVector.from_arrays({"w": np.array([[1.0, -2.0], [0.5, 3.0]]), "b": np.zeros(2)})
print(p.layout)

# tracked() puts it in the graph; p["w"] is then a differentiable view
t = p.tracked()
x = ad.Tensor(np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]]))
loss = ad.cross_entropy(x @ t["w"] + t["b"], [0, 1, 1])
g = grad(loss, t)
print("loss", loss.item())
print("dL/dw", g.array("w"))

# second order: keep the graph of the first gradient
t = ParamVector.from_arrays({"theta": np.array([2.0])}).tracked()
quartic = ad.scale(ad.sum_(ad.power(t["theta"], 4)), 0.25)  # theta^4 / 4
g = grad(quartic, t, create_graph=True)  # theta^3 = 8
h = grad_of_grad(ad.sum_(g.node), t, g)  # 3 theta^2 = 12
print("gradient", g.values[0], "second derivative", h.values[0])

# Hessian-vector product on a small MLP, checked against finite differences
rng = np.random.default_rng(0)
mlp = ParamVector.from_arrays({"w0": rng.normal(size=(3, 4)), "b0": np.zeros(4),
                               "w1": rng.normal(size=(4, 2)), "b1": np.zeros(2)})
xs, ys = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
v = rng.normal(size=len(mlp))


def loss_of(q):
    h = ad.relu(ad.Tensor(xs) @ q["w0"] + q["b0"])
    return ad.cross_entropy(h @ q["w1"] + q["b1"], ys)


def plain_grad(values):
    q = ParamVector(values, mlp.layout).tracked()
    return grad(loss_of(q), q).values


q = mlp.tracked()
g = grad(loss_of(q), q, create_graph=True)
hv = grad_of_grad(ad.sum_(ad.mul(g.node, ad.Tensor(v))), q, g).values
fd = (plain_grad(mlp.values + 1e-5 * v) - plain_grad(mlp.values - 1e-5 * v)) / 2e-5
print("HVP max abs error vs finite differences:", np.abs(hv - fd).max())
