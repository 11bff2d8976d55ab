"""Growth-function propagation blocks.

A block first computes an environment tensor ENV: the feature map is shifted
cyclically by each offset of a lattice topology and passed through one shared
single-output convolution, giving one ENV channel per neighbour. The growth
step then gates between the resampled cells and a freshly "born" signal:

    type_and_env = concat(x[:, :DTYPE], ENV)
    CHANGE       = sigmoid(change_det(type_and_env))
    x'           = cell(x)                  # stride-2 merge or div
    born         = born_conv(x')
    y            = x' * (1 - CHANGE) + CHANGE * born
    y[:, :3]     = sigmoid(y[:, :3])

Merge blocks halve the spatial extent (PatternEncode), div blocks double it
(PatternDecode).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .layers import (
    BatchNorm2dParams,
    Conv2dParams,
    ConvT2dParams,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    init_params,
)
from .tensor import Tensor, derive_seed

MERGE, DIV = "merge", "div"
CLAMP_CHANNELS = 3

_PAIR = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")


@dataclass(frozen=True)
class Topology:
    """Nj x 2 integer offsets; column 0 rolls right (width), column 1 rolls up (height)."""

    offsets: tuple

    def __post_init__(self):
        offsets = tuple((int(a), int(b)) for a, b in self.offsets)
        if not offsets:
            raise ConfigurationError("topology needs at least one offset")
        if len(set(offsets)) != len(offsets):
            raise ConfigurationError(f"topology offsets must be distinct: {offsets}")
        object.__setattr__(self, "offsets", offsets)

    @property
    def nj(self) -> int:
        return len(self.offsets)

    def as_array(self) -> np.ndarray:
        return np.array(self.offsets, dtype=np.int64)

    @classmethod
    def eight_neighborhood(cls) -> "Topology":
        return cls(((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)))

    @classmethod
    def parse(cls, text: str) -> "Topology":
        """Parse ``"(1,0);(-1,0);..."``; surrounding quotes are ignored."""
        items = [s.strip() for s in text.strip().strip("'\"").split(";") if s.strip()]
        pairs = []
        for item in items:
            m = _PAIR.fullmatch(item)
            if m is None:
                raise ConfigurationError(f"bad topology entry {item!r}")
            pairs.append((int(m.group(1)), int(m.group(2))))
        return cls(tuple(pairs))

    def format(self) -> str:
        return ";".join(f"({a},{b})" for a, b in self.offsets)


def _size_preserving(c: Conv2dParams) -> bool:
    kh, kw = c.kernel
    return c.stride == 1 and 2 * c.padding == kh - 1 and kh == kw


@dataclass
class GrowthBlockParams:
    mode: str
    dtype_channels: int
    topology: Topology
    compenv_conv: Conv2dParams
    change_det: Union[Conv2dParams, ConvT2dParams]
    cell: Union[Conv2dParams, ConvT2dParams]
    born: Conv2dParams
    cell_bn: Optional[BatchNorm2dParams] = None

    def __post_init__(self):
        resample = Conv2dParams if self.mode == MERGE else ConvT2dParams
        if self.mode not in (MERGE, DIV):
            raise ConfigurationError(f"block mode must be 'merge' or 'div', got {self.mode!r}")
        if not isinstance(self.change_det, resample) or not isinstance(self.cell, resample):
            raise ConfigurationError(f"{self.mode} block needs {resample.__name__} change_det and cell")
        c_in, c_out = self.in_ch, self.out_ch
        if not 1 <= self.dtype_channels <= c_in:
            raise ConfigurationError(f"DTYPE={self.dtype_channels} must be in [1, {c_in}]")
        env = self.compenv_conv
        if env.in_ch != c_in or env.out_ch != 1 or not _size_preserving(env):
            raise ConfigurationError("compenv conv must map block input to 1 channel, size-preserving")
        if self.change_det.in_ch != self.dtype_channels + self.topology.nj:
            raise ConfigurationError(
                f"change detector expects {self.change_det.in_ch} channels, "
                f"DTYPE + Nj = {self.dtype_channels + self.topology.nj}"
            )
        if self.change_det.out_ch != c_out:
            raise ConfigurationError("change detector and cell must emit the same channel count")
        geometry = lambda c: (tuple(c.kernel), c.stride, c.padding)  # noqa: E731
        if geometry(self.change_det) != geometry(self.cell):
            raise ConfigurationError("change detector and cell must share kernel, stride and padding")
        if self.born.in_ch != c_out or self.born.out_ch != c_out or not _size_preserving(self.born):
            raise ConfigurationError("born conv must be size-preserving out_ch -> out_ch")
        if c_out < CLAMP_CHANNELS:
            raise ConfigurationError(f"block output needs >= {CLAMP_CHANNELS} channels, got {c_out}")
        if self.cell_bn is not None and self.cell_bn.channels != c_out:
            raise ConfigurationError("cell batch norm channel count mismatch")

    @property
    def in_ch(self) -> int:
        return self.cell.in_ch

    @property
    def out_ch(self) -> int:
        return self.cell.out_ch

    def output_hw(self, h: int, w: int) -> tuple:
        return self.cell.output_hw(h, w)

    def named_parameters(self) -> dict:
        parts = {"compenv": self.compenv_conv, "change_det": self.change_det,
                 "cell": self.cell, "born": self.born}
        if self.cell_bn is not None:
            parts["cell_bn"] = self.cell_bn
        return {f"{k}.{n}": t for k, layer in parts.items() for n, t in layer.named_parameters().items()}

    def named_buffers(self) -> dict:
        if self.cell_bn is None:
            return {}
        return {f"cell_bn.{n}": t for n, t in self.cell_bn.named_buffers().items()}


def init_growth_block(mode: str, in_ch: int, out_ch: int, *, dtype_channels: int = 3,
                      topology: Topology | None = None, batchnorm: bool = False,
                      seed: int = 0, dtype=np.float32, bn_eps: float = 1e-5,
                      bn_momentum: float = 0.1) -> GrowthBlockParams:
    """Block with 3x3 compenv/born convs and 4x4 stride-2 (transposed) change/cell convs.

    With ``batchnorm`` the cell conv has no bias: the normalization would
    subtract it again, leaving a parameter with an identically zero gradient.
    """
    topology = topology or Topology.eight_neighborhood()
    kind = "conv2d" if mode == MERGE else "conv_transpose2d"
    nj = topology.nj
    return GrowthBlockParams(
        mode=mode,
        dtype_channels=dtype_channels,
        topology=topology,
        compenv_conv=init_params("conv2d", in_ch, 1, 3, 1, 1, derive_seed(seed, 0), dtype),
        change_det=init_params(kind, dtype_channels + nj, out_ch, 4, 2, 1, derive_seed(seed, 1), dtype),
        cell=init_params(kind, in_ch, out_ch, 4, 2, 1, derive_seed(seed, 2), dtype, bias=not batchnorm),
        born=init_params("conv2d", out_ch, out_ch, 3, 1, 1, derive_seed(seed, 3), dtype),
        cell_bn=init_params("batchnorm2d", out_ch, out_ch, dtype=dtype, eps=bn_eps,
                            momentum=bn_momentum) if batchnorm else None,
    )


def compenv(x: Tensor, topo: Topology, conv: Conv2dParams) -> Tensor:
    """ENV (B, Nj, H, W): the shared conv applied to each cyclically shifted copy of ``x``.

    All Nj shifted copies are stacked along the batch axis so the shared conv
    runs once; the result is regrouped into one channel per offset.
    """
    if conv.out_ch != 1 or not _size_preserving(conv):
        raise ConfigurationError("compenv conv must be single-output and size-preserving")
    if x.ndim != 4:
        raise ShapeError(f"compenv expects NCHW input, got {x.shape}")
    B, _, H, W = x.shape
    shifted = []
    for right, down in topo.offsets:
        if abs(right) > W or abs(down) > H:
            raise ConfigurationError(f"offset ({right},{down}) exceeds feature map {H}x{W}")
        temp = T.roll(x, right, 3)
        shifted.append(T.roll(temp, -down, 2))
    env = conv2d(T.concat(shifted, 0), conv)  # (Nj*B, 1, H, W)
    return T.transpose(T.reshape(env, (topo.nj, B, H, W)), (1, 0, 2, 3))


def _cell(x: Tensor, p: GrowthBlockParams, mode: str | None) -> Tensor:
    fn = conv2d if p.mode == MERGE else conv_transpose2d
    out = fn(x, p.cell)
    if p.cell_bn is not None:
        out = batchnorm2d(out, p.cell_bn, mode)
    return out


def gate(x: Tensor, env: Tensor, p: GrowthBlockParams) -> Tensor:
    """CHANGE = sigmoid(change_det(concat(x[:, :DTYPE], ENV)))."""
    fn = conv2d if p.mode == MERGE else conv_transpose2d
    type_and_env = T.concat([T.slice_channels(x, 0, p.dtype_channels), env], 1)
    return T.sigmoid(fn(type_and_env, p.change_det))


def combine(cells: Tensor, born: Tensor, change: Tensor) -> Tensor:
    """``cells * (1 - change) + change * born`` followed by the sigmoid clamp of channels 0..3."""
    y = cells * (1.0 - change) + change * born
    return T.assign_channels(y, 0, CLAMP_CHANNELS, T.sigmoid(T.slice_channels(y, 0, CLAMP_CHANNELS)))


def growth(x: Tensor, env: Tensor, p: GrowthBlockParams, mode: str | None = None) -> Tensor:
    if env.ndim != 4 or env.shape[1] != p.topology.nj or env.shape[2:] != x.shape[2:]:
        raise ShapeError(f"ENV shape {env.shape} does not match x {x.shape} and Nj={p.topology.nj}")
    change = gate(x, env, p)
    cells = _cell(x, p, mode)
    born = conv2d(cells, p.born)
    if change.shape != cells.shape:
        raise ConfigurationError(f"CHANGE {change.shape} and cell output {cells.shape} differ")
    return combine(cells, born, change)


def pattern_block_forward(x: Tensor, p: GrowthBlockParams, mode: str | None = None) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.in_ch:
        raise ShapeError(f"block expects {p.in_ch} input channels, got shape {x.shape}")
    env = compenv(x, p.topology, p.compenv_conv)
    return growth(x, env, p, mode)


@dataclass
class ConvFParams:
    """Transposed conv (k3, s1, p0) then conv (k3, s1, p0): +2 then -2 per spatial extent."""

    expand: ConvT2dParams
    shrink: Conv2dParams

    def __post_init__(self):
        for c in (self.expand, self.shrink):
            if tuple(c.kernel) != (3, 3) or c.stride != 1 or c.padding != 0:
                raise ConfigurationError("ConvF layers need kernel 3, stride 1, padding 0")
        if self.expand.out_ch != self.shrink.in_ch:
            raise ConfigurationError("ConvF inner channel counts disagree")

    @property
    def in_ch(self) -> int:
        return self.expand.in_ch

    @property
    def out_ch(self) -> int:
        return self.shrink.out_ch

    def named_parameters(self) -> dict:
        return {**{f"expand.{n}": t for n, t in self.expand.named_parameters().items()},
                **{f"shrink.{n}": t for n, t in self.shrink.named_parameters().items()}}


def init_convf(in_ch: int, out_ch: int, seed: int = 0, dtype=np.float32) -> ConvFParams:
    return ConvFParams(
        expand=init_params("conv_transpose2d", in_ch, out_ch, 3, 1, 0, derive_seed(seed, 0), dtype),
        shrink=init_params("conv2d", out_ch, out_ch, 3, 1, 0, derive_seed(seed, 1), dtype),
    )


def convf_forward(x: Tensor, p: ConvFParams) -> Tensor:
    return T.tanh(conv2d(T.tanh(conv_transpose2d(x, p.expand)), p.shrink))
