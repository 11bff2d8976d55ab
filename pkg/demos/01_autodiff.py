# Reverse-mode autodiff on small tensors, checked against finite differences.
import numpy as np

from simplegrowth import tensor as T
from simplegrowth.tensor import Tensor, gradcheck

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

# loss = mean(tanh(x * w)), the tape records every op on the way forward
loss = T.mean(T.tanh(T.mul(x, w)))
loss.backward()
print("loss", loss.item())
print("dloss/dx\n", x.grad)

# same gradient by hand: d/dx mean(tanh(xw)) = w (1 - tanh^2) / n
by_hand = w.data * (1 - np.tanh(x.data * w.data) ** 2) / x.data.size
print("max diff vs hand-derived", np.max(np.abs(x.grad - by_hand)))

# finite differences, relative error |a - n| / (|a| + |n|)
err = gradcheck(lambda a, b: T.mean(T.tanh(T.mul(a, b))), [x, w])
print("gradcheck max rel err", err)

# cyclic shifts are the building block of the growth environment
y = T.roll(x, 1, 1)
print("roll along width\n", x.data, "\n->\n", y.data)
