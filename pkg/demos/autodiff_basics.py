"""
Reverse-mode autodiff on matrices
=================================

Build a small expression on a tape, pull gradients back through it and
compare them against central finite differences.
"""

import numpy as np

from sista import autodiff as ad

# every differentiable input is registered on a tape
tape = ad.Tape()
x = tape.variable([[1.0, -2.0, 0.5]])
w = tape.variable(np.arange(6.0).reshape(3, 2) / 10)

# a softmax over a tanh layer, reduced to a scalar
probs = ad.row_softmax(ad.tanh(x @ w), temperature=0.5)
loss = -ad.log(probs[:, 0:1]).sum()
print("loss:", loss.item())

grads = tape.backward(loss)
print("d loss / d x:\n", grads[x])
print("d loss / d w:\n", grads[w])

# grad_check rebuilds the tape for every perturbation
err = ad.grad_check(lambda v: -ad.log(ad.row_softmax(ad.tanh(v @ w.value), 0.5)[:, 0:1]).sum(),
                    x.value)
print(f"max relative error against finite differences: {err:.2e}")
