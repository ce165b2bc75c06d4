"""Reverse-mode autodiff on a tape, checked against central differences.

Run: python3 demos/01_autodiff_and_gradcheck.py
"""
import numpy as np

from vdc import diffcore as dc
from vdc.cli import gradcheck_model
from vdc.diffcore import Graph, ParamStore, grad_check
from vdc.trainer import batch_loss

# A two-layer function: loss = sum(tanh(x W^T + b)^2)
params = ParamStore()
rng = np.random.default_rng(0)
params.add("W", rng.normal(size=(3, 4)))
params.add("b", rng.normal(size=3))
x = rng.normal(size=(5, 4))


def builder(g, P):
    h = dc.tanh(dc.add_bias(dc.linear(g.constant(x), P["W"]), P["b"]))
    return dc.total(dc.mul(h, h))


g = Graph()
loss = builder(g, params.bind(g))
dc.backward(loss)
print("loss", float(loss.value))
print("dL/db", g.param_grads()["b"])

res = grad_check(builder, params)
print(f"small function: max relative error {res.max_rel_error:.2e}")

# The full caption model at the grad-check dimensions
model, ex = gradcheck_model()
res = grad_check(lambda g, P: batch_loss(g, model, [ex], P=P)[0], model.params, max_coords=20)
for name, err in res.per_param.items():
    print(f"  {name:5s} {err:.2e}")
print(f"caption model: max relative error {res.max_rel_error:.2e} (worst {res.worst})")
