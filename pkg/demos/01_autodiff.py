"""A tour of the autodiff core.

Builds a tiny graph by hand, runs reverse mode, and compares the result with
central finite differences. Ends with the full gradient-check report that
`msdamil gradcheck` prints.
"""

import numpy as np

from msdamil import tensor as T
from msdamil.gradcheck import run_gradcheck
from msdamil.tensor import Tensor

rng = np.random.default_rng(0)

# A two-layer scorer: s = sum(tanh(x W) * probe)
x = Tensor(rng.normal(size=(3, 4)))
W = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
probe = Tensor(rng.normal(size=(3, 2)))
loss = T.tensor_sum(T.mul(T.tanh(T.matmul(x, W)), probe))
T.backward(loss)
print(f"loss = {loss.item():.6f}")
print("dloss/dW from reverse mode:\n", W.grad)


def value(w):
    return float((np.tanh(x.data @ w) * probe.data).sum())


numeric = T.finite_diff_gradient(value, W.data, 1e-6)
print("max relative error against finite differences:", T.max_relative_error(W.grad, numeric))

# Softmax stays finite where a naive exp would overflow.
print("softmax([1000, 1000]) =", T.softmax(Tensor([1000.0, 1000.0])).data)

print()
print("\n".join(run_gradcheck().lines()))
