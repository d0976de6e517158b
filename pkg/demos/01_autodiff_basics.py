"""A walk through the tensor engine: values, the tape, and gradients.

Every value is a 4-D (batch, channel, height, width) float32 tensor.
Recording happens only inside a Tape context, so plain evaluation has no
autodiff overhead.
"""

import numpy as np

from rephaze.tensor import Tape, Tensor, backward, mean_all, mul, relu, sigmoid, sum_all

rng = np.random.default_rng(0)

# --- values ---------------------------------------------------------------
x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32), requires_grad=True)
print("a tensor:", x)
print("scalar tensors have shape (1,1,1,1):", mean_all(x).shape)

# --- the tape -------------------------------------------------------------
with Tape() as tape:
    y = mul(x, x)          # x^2, elementwise
    loss = sum_all(y)      # sum of squares
print(f"\nrecorded {len(tape.nodes)} operations")

backward(loss, tape)
print("gradient of sum(x*x) is 2x; max |grad - 2x| =", np.max(np.abs(x.grad - 2 * x.data)))

# --- gradients accumulate until cleared ------------------------------------
with Tape() as tape:
    loss = sum_all(mul(x, x))
backward(loss, tape)
print("after a second backward the gradient doubles:", np.max(np.abs(x.grad - 4 * x.data)))
x.zero_grad()

# --- a quick finite-difference spot check ----------------------------------
x64 = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
with Tape() as tape:
    loss = mean_all(sigmoid(relu(x64)))
backward(loss, tape)

i = (0, 0, 0, 0)
h = 1e-6
x64.data[i] += h
up = mean_all(sigmoid(relu(x64))).item()
x64.data[i] -= 2 * h
down = mean_all(sigmoid(relu(x64))).item()
x64.data[i] += h
fd = (up - down) / (2 * h)
print(f"\nanalytic grad {x64.grad[i]:.8f} vs finite difference {fd:.8f}")
print("outside a Tape, nothing records:", mul(x64, x64).requires_grad)
