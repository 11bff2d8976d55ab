"""SimpleGrowth autoencoder assembly and checkpoint persistence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigurationError, FormatError, ShapeError
from .growth import (
    DIV,
    MERGE,
    ConvFParams,
    GrowthBlockParams,
    Topology,
    convf_forward,
    init_convf,
    init_growth_block,
    pattern_block_forward,
)
from .layers import EVAL, TRAIN, LinearParams, init_params, linear
from .serialization import Reader, pack_entry, pack_u32
from .tensor import Tensor, derive_seed

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


@dataclass
class SimpleGrowthConfig:
    """Architecture of one SimpleGrowth autoencoder.

    ``channels`` lists the per-level widths starting at the RGB input, e.g.
    ``(3, 16, 32, 64)`` builds merge blocks 3->16->32->64 and div blocks
    64->32->16->3.
    """

    image_size: int = 32
    channels: tuple = (3, 16, 32, 64)
    latent_dim: int = 240
    noise_radius: float = 0.1
    convf_per_level: int = 1
    bn_enabled: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype_channels: int = 3
    topology: str = field(default_factory=lambda: Topology.eight_neighborhood().format())
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2 or self.channels[0] != 3:
            raise ConfigurationError(f"channels must start at 3 and have >= 2 levels: {self.channels}")
        if any(c < 3 for c in self.channels):
            raise ConfigurationError("every level needs at least 3 channels")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.convf_per_level < 0:
            raise ConfigurationError("convf_per_level must be >= 0")
        if self.noise_radius < 0:
            raise ConfigurationError("noise_radius must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.image_size % (2 ** self.levels) or self.bottleneck_size < 2:
            raise ConfigurationError(
                f"image size {self.image_size} must halve {self.levels} times down to >= 2"
            )
        if not 1 <= self.dtype_channels <= 3:
            raise ConfigurationError("dtype_channels must be between 1 and 3 (the RGB input)")
        Topology.parse(self.topology)

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.levels

    @property
    def bottleneck_shape(self) -> tuple:
        return (self.channels[-1], self.bottleneck_size, self.bottleneck_size)

    @classmethod
    def cifar10(cls, **overrides) -> "SimpleGrowthConfig":
        return cls(**overrides)

    @classmethod
    def celeba64(cls, **overrides) -> "SimpleGrowthConfig":
        """CIFAR layout plus one extra 16-channel encoder/decoder level for 64x64 inputs."""
        return cls(**{"image_size": 64, "channels": (3, 16, 16, 32, 64), **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimpleGrowthConfig":
        return cls(**d)


class SimpleGrowthModel:
    """Encoder (PatternEncode + ConvF stack, FC, tanh), latent noise, decoder (FC, ConvF + PatternDecode)."""

    def __init__(self, config: SimpleGrowthConfig):
        self.config = config
        dt = np.dtype(config.dtype)
        topo = Topology.parse(config.topology)
        seeds = iter(range(10**6))
        seed = lambda: derive_seed(config.seed, next(seeds))  # noqa: E731
        ch = config.channels
        block_opts = dict(dtype_channels=config.dtype_channels, topology=topo, dtype=dt,
                          bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)

        self.encoder_blocks = []
        self.encoder_convf = []
        for c_in, c_out in zip(ch[:-1], ch[1:]):
            self.encoder_blocks.append(init_growth_block(
                MERGE, c_in, c_out, batchnorm=config.bn_enabled, seed=seed(), **block_opts))
            self.encoder_convf.append([init_convf(c_out, c_out, seed(), dt)
                                       for _ in range(config.convf_per_level)])

        flat = int(np.prod(config.bottleneck_shape))
        self.fc_encode = init_params("linear", flat, config.latent_dim, seed=seed(), dtype=dt)
        self.fc_decode = init_params("linear", config.latent_dim, flat, seed=seed(), dtype=dt)

        self.decoder_convf = []
        self.decoder_blocks = []
        rev = ch[::-1]
        for level, (c_in, c_out) in enumerate(zip(rev[:-1], rev[1:])):
            last = level == config.levels - 1
            self.decoder_convf.append([init_convf(c_in, c_in, seed(), dt)
                                       for _ in range(config.convf_per_level)])
            self.decoder_blocks.append(init_growth_block(
                DIV, c_in, c_out, batchnorm=config.bn_enabled and not last, seed=seed(), **block_opts))

    # ------------------------------------------------------------ parameters

    def _layers(self):
        for i, (block, convfs) in enumerate(zip(self.encoder_blocks, self.encoder_convf)):
            yield f"encoder.{i}.block", block
            for j, cf in enumerate(convfs):
                yield f"encoder.{i}.convf.{j}", cf
        yield "fc_encode", self.fc_encode
        yield "fc_decode", self.fc_decode
        for i, (block, convfs) in enumerate(zip(self.decoder_blocks, self.decoder_convf)):
            for j, cf in enumerate(convfs):
                yield f"decoder.{i}.convf.{j}", cf
            yield f"decoder.{i}.block", block

    def named_parameters(self) -> dict:
        return {f"{prefix}.{n}": t for prefix, layer in self._layers()
                for n, t in layer.named_parameters().items()}

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict:
        out = {}
        for prefix, layer in self._layers():
            if isinstance(layer, GrowthBlockParams):
                out.update({f"{prefix}.{n}": t for n, t in layer.named_buffers().items()})
        return out

    def _buffer_owners(self) -> dict:
        owners = {}
        for prefix, layer in self._layers():
            if isinstance(layer, GrowthBlockParams) and layer.cell_bn is not None:
                owners[f"{prefix}.cell_bn.running_mean"] = (layer.cell_bn, "running_mean")
                owners[f"{prefix}.cell_bn.running_var"] = (layer.cell_bn, "running_var")
        return owners

    def state_dict(self) -> dict:
        """Name -> array copy of every parameter and batch-norm running statistic."""
        state = {n: t.data.copy() for n, t in self.named_parameters().items()}
        state.update({n: t.data.copy() for n, t in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        owners = self._buffer_owners()
        expected = set(params) | set(owners)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            arr = state[name]
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)
        for name, (bn, attr) in owners.items():
            arr = state[name]
            current = getattr(bn, attr)
            if arr.shape != current.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {current.shape}")
            setattr(bn, attr, Tensor(arr, dtype=current.dtype))

    # ------------------------------------------------------------ forward

    def _check_images(self, x: Tensor) -> None:
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images (B, 3, {s}, {s}), got {x.shape}")

    def encode(self, x: Tensor, mode: str = EVAL, seed: int = 0, return_clean: bool = False):
        """Latent codes in (-1, 1), plus uniform noise of radius ``noise_radius`` in train mode.

        With ``return_clean`` the pre-noise code is returned alongside.
        """
        self._check_images(x)
        h = x
        for block, convfs in zip(self.encoder_blocks, self.encoder_convf):
            h = pattern_block_forward(h, block, mode)
            for cf in convfs:
                h = convf_forward(h, cf)
        h = T.reshape(h, (h.shape[0], -1))
        z0 = T.tanh(linear(h, self.fc_encode))
        z = z0
        r = self.config.noise_radius
        if mode == TRAIN and r > 0:
            z = z0 + T.uniform(z0.shape, -r, r, seed, z0.dtype)
        elif mode not in (TRAIN, EVAL):
            raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
        return (z, z0) if return_clean else z

    def decode(self, z: Tensor, mode: str = EVAL) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"expected latents (B, {self.config.latent_dim}), got {z.shape}")
        h = T.reshape(linear(z, self.fc_decode), (z.shape[0],) + self.config.bottleneck_shape)
        for convfs, block in zip(self.decoder_convf, self.decoder_blocks):
            for cf in convfs:
                h = convf_forward(h, cf)
            h = pattern_block_forward(h, block, mode)
        return h

    def forward(self, x: Tensor, mode: str = EVAL, seed: int = 0) -> Tensor:
        return self.decode(self.encode(x, mode, seed), mode)

    __call__ = forward

    def reconstruct(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode reconstructions of a numpy image array, in batches, without graph recording."""
        dt = np.dtype(self.config.dtype)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(Tensor(images[i:i + batch_size], dtype=dt)).data)
        return np.concatenate(out, axis=0)

    def encode_images(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        dt = np.dtype(self.config.dtype)
        with T.no_grad():
            return np.concatenate([self.encode(Tensor(images[i:i + batch_size], dtype=dt)).data
                                   for i in range(0, len(images), batch_size)], axis=0)

    def decode_latents(self, z: np.ndarray, batch_size: int = 64) -> np.ndarray:
        dt = np.dtype(self.config.dtype)
        with T.no_grad():
            return np.concatenate([self.decode(Tensor(z[i:i + batch_size], dtype=dt)).data
                                   for i in range(0, len(z), batch_size)], axis=0)


def interpolate(z1, z2, n: int = 16) -> list:
    """``z_k = z1 + k (z2 - z1) / n`` for k = 0..n-1 (stops one step short of z2)."""
    if n < 2:
        raise ArgumentError(f"interpolation needs n >= 2, got {n}")
    a = z1.data if isinstance(z1, Tensor) else np.asarray(z1)
    b = z2.data if isinstance(z2, Tensor) else np.asarray(z2)
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    diff = b - a
    n_ = a.dtype.type(n)
    return [a + a.dtype.type(k) * diff / n_ for k in range(n)]


def sample_uniform_latents(count: int, latent_dim: int, seed: int, dtype=np.float32) -> Tensor:
    if count < 1:
        raise ArgumentError("count must be >= 1")
    return T.uniform((count, latent_dim), -1.0, 1.0, seed, dtype)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: SimpleGrowthModel
    step: int = 0
    optimizer: Optional[dict] = None


def checkpoint_bytes(model: SimpleGrowthModel, step: int = 0,
                     optimizer_state: dict | None = None) -> bytes:
    """Serialize: magic, version, tensor entries, step, optimizer entries, config JSON."""
    state = model.state_dict()
    parts = [CHECKPOINT_MAGIC, pack_u32(CHECKPOINT_VERSION), pack_u32(len(state))]
    parts += [pack_entry(name, arr) for name, arr in state.items()]
    parts.append(pack_u32(step))
    optimizer_state = optimizer_state or {}
    parts.append(pack_u32(len(optimizer_state)))
    parts += [pack_entry(name, arr) for name, arr in optimizer_state.items()]
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts += [pack_u32(len(config)), config]
    return b"".join(parts)


def save_checkpoint(path, model: SimpleGrowthModel, step: int = 0,
                    optimizer_state: dict | None = None) -> None:
    data = checkpoint_bytes(model, step, optimizer_state)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a SimpleGrowth checkpoint", 0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    state = dict(r.entry() for _ in range(r.u32("entry count")))
    step = r.u32("step counter")
    optimizer = dict(r.entry() for _ in range(r.u32("optimizer entry count")))
    cfg_pos = r.pos
    raw = r.take(r.u32("config length"), "config")
    r.expect_end()
    try:
        config = SimpleGrowthConfig.from_dict(json.loads(raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid config section: {exc}", cfg_pos) from exc
    model = SimpleGrowthModel(config)
    try:
        model.load_state_dict(state)
    except ShapeError as exc:
        raise FormatError(f"parameters do not match config: {exc}", 12) from exc
    return Checkpoint(model, step, optimizer or None)


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> SimpleGrowthModel:
    return read_checkpoint(path).model
