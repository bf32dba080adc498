"""
Checking the autodiff engine against finite differences
========================================================

Every op in ``lfrclab.tensor`` records a backward closure.  Here we build a
small graph by hand and compare its gradient with central differences.
"""

import numpy as np

from lfrclab import tensor as T
from lfrclab.tensor import Tensor

T.set_default_dtype(np.float64)
rng = np.random.default_rng(0)

# a conv layer, a ReLU and a global average pool, reduced to a scalar
x = Tensor(rng.normal(size=(2, 3, 6, 6)))
w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
b = Tensor(rng.normal(size=4), requires_grad=True)


def loss(weight):
    h = T.relu(T.conv2d(x, weight, b, stride=1, padding=1))
    return T.sum(T.mean(h, axis=(2, 3)))


(g,) = T.grad(loss(w), [w])
fd = T.finite_difference_grad(loss, w.data)
print("max |autodiff - fd| =", np.max(np.abs(g - fd)))
print("relative error      =", np.linalg.norm(g - fd) / np.linalg.norm(fd))

# cross-entropy stays finite even for extreme logits
z = Tensor(np.array([[1000.0, -1000.0, 0.0]]))
print("CE on huge logits   =", T.softmax_cross_entropy(z, np.array([1])).item())
