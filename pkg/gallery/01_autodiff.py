"""Reverse-mode autodiff on numpy arrays, checked against finite differences.

Run: python3 gallery/01_autodiff.py
"""
import numpy as np

from mpt import tensor as T
from mpt.tensor import Tensor, gradcheck

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

# a tiny graph: softmax over a projection, weighted and summed
target = rng.normal(size=(3, 2))


def loss():
    return T.tsum(T.mul(T.softmax(T.matmul(x, w)), Tensor(target)))


value = loss()
value.backward()
print(f"loss = {value.item():.6f}")
print("dL/dw =\n", w.grad)

report = gradcheck(loss, {"x": x, "w": w}, h=1e-6, tol=1e-4)
print("\n".join(report.lines()))
print("gradient check", "passed" if report.passed else "FAILED")
