# One growth block: environment from shifted copies, a sigmoid gate, and a blend
# of the carried cell state with a freshly "born" one.
import numpy as np

from simplegrowth import growth as G
from simplegrowth import layers as L
from simplegrowth.tensor import Tensor

rng = np.random.default_rng(2)
x = Tensor(rng.random((1, 4, 8, 8)), dtype=np.float32)

topo = G.Topology.eight_neighborhood()
print("topology", topo.format(), "->", topo.nj, "neighbours")

block = G.init_growth_block(G.MERGE, 4, 6, seed=0)
env = G.compenv(x, topo, block.compenv_conv)
print("ENV", env.shape)                          # one map per neighbour offset
change = G.gate(x, env, block)
print("gate range", float(change.data.min()), float(change.data.max()))

y = G.pattern_block_forward(x, block)
print("merge block", x.shape, "->", y.shape)
print("first three channels in (0,1):", bool(np.all((y.data[:, :3] > 0) & (y.data[:, :3] < 1))))

# pin the gate shut or open through the change-detector bias
for bias, name in ((-1e6, "closed: keeps the cell"), (1e6, "open: takes the born state")):
    block.change_det.bias.data[:] = bias
    y = G.pattern_block_forward(x, block)
    cells = L.conv2d(x, block.cell)
    target = cells if bias < 0 else L.conv2d(cells, block.born)
    print(name, np.array_equal(y.data[:, 3:], target.data[:, 3:]))

div = G.init_growth_block(G.DIV, 6, 4, seed=1)
print("div block", y.shape, "->", G.pattern_block_forward(y, div).shape)

f = G.init_convf(6, 6, seed=3)
print("ConvF keeps extent:", G.convf_forward(y, f).shape)
