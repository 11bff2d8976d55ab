# conv2d via im2col, and the transposed conv as its exact adjoint.
import numpy as np

from simplegrowth import layers as L
from simplegrowth.tensor import Tensor

rng = np.random.default_rng(1)
x = rng.normal(size=(1, 3, 8, 8))
conv = L.init_params("conv2d", 3, 4, 4, 2, 1, seed=0, dtype=np.float64)   # k=4, stride 2, pad 1
convt = L.init_params("conv_transpose2d", 4, 3, 4, 2, 1, seed=0, dtype=np.float64)

y = L.conv2d(Tensor(x), conv)
print("conv2d", x.shape, "->", y.shape)               # 8x8 -> 4x4, the merge cell
print("conv_transpose2d", y.shape, "->", L.conv_transpose2d(y, convt).shape)  # 4x4 -> 8x8, the div cell

# one output pixel by hand
patch = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))[0, :, 2:6, 2:6]
print("pixel (1,1) of map 0:", y.data[0, 0, 1, 1], "by hand:", np.sum(patch * conv.weight.data[0]) + conv.bias.data[0])

# <conv(x), r> == <x, convT(r)> when both share a weight and have no bias
shared = L.ConvT2dParams(conv.weight, Tensor(np.zeros(3)), 2, 1)
nobias = L.Conv2dParams(conv.weight, Tensor(np.zeros(4)), 2, 1)
r = rng.normal(size=y.shape)
lhs = np.sum(L.conv2d(Tensor(x), nobias).data * r)
rhs = np.sum(x * L.conv_transpose2d(Tensor(r), shared).data)
print("adjoint check", lhs, rhs, "rel gap", abs(lhs - rhs) / abs(lhs))

# batch norm: train mode normalizes with batch stats and updates the running ones
bn = L.init_params("batchnorm2d", 4, 4, dtype=np.float64)
z = L.batchnorm2d(y, bn, L.TRAIN)
print("per-channel mean after BN", z.data.mean(axis=(0, 2, 3)).round(12))
print("running mean", bn.running_mean.data)
