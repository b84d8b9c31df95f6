"""Tour of the differentiation engine: tapes, gradients, and the
finite-difference oracle that backs every verification suite in this repo.
"""

import numpy as np

from graphmix import diffengine as de

# --- gradients of a small composite function -------------------------------
# f(W, x) = sum(tanh(x @ W) ** 2); parameters are named leaf tensors
rng = np.random.default_rng(0)
w = de.parameter(rng.normal(size=(3, 4)), "w", dtype=np.float64)
x = de.const(rng.normal(size=(5, 3)), dtype=np.float64)

y = de.tanh_(de.matmul(x, w))
loss = de.sum_(de.mul(y, y))
grads = de.backward(loss, {"w": w})
print("loss:", float(loss.values))
print("grad w shape:", grads["w"].shape, "norm:", np.linalg.norm(grads["w"]))

# --- the oracle: central finite differences --------------------------------
# every analytic gradient in this repo is checked against this


def f():
    h = de.tanh_(de.matmul(x, w))
    return de.sum_(de.mul(h, h))


err = de.finite_diff_check(f, {"w": w}, eps=1e-6)
print(f"max relative error vs finite differences: {err:.2e}")

# --- masked softmax: the primitive behind edge weights and reward fractions
logits = de.const([2.0, -1.0, 0.5, 3.0], dtype=np.float64)
mask = np.array([True, True, False, True])
p = de.masked_softmax(logits, mask, axis=-1)
print("masked softmax:", p.values, "sum over unmasked:", p.values[mask].sum())

# --- a GRU cell unrolled through time, gradients flowing through the loop --
params = de.init_gru_params(input_dim=3, hidden_dim=4, rng=rng,
                            prefix="demo", dtype=np.float64)
steps = [rng.normal(size=(1, 3)) for _ in range(4)]


def unrolled():
    h = de.const(np.zeros((1, 4)), dtype=np.float64)
    for s in steps:
        h = de.gru_cell(de.const(s, dtype=np.float64), h, params, "demo")
    return de.sum_(de.mul(h, h))


err = de.finite_diff_check(unrolled, params, eps=1e-6)
print(f"GRU backprop-through-time error vs finite differences: {err:.2e}")
