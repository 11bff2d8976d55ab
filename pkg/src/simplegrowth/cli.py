"""Command-line entry point: train, reconstruct, interpolate, sample, eval, gradcheck.

Exit codes: 0 success, 1 verification failure, 2 config or argument error,
3 data error, 4 checkpoint error, 5 metric/embedder error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import verify
from .data import Dataset, load_images, write_ppm_grid
from .errors import ArgumentError, ConfigurationError, SimpleGrowthError
from .metrics import EXTERNAL, Embedder, embed, mean_ms_ssim, mean_ssim, fid_from_features
from .model import (
    SimpleGrowthConfig,
    SimpleGrowthModel,
    interpolate,
    load_checkpoint,
    sample_uniform_latents,
)
from .train import TrainConfig, TrainingAborted, train_loop

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_METRIC = range(6)

log = logging.getLogger("simplegrowth")


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time (it may be swapped after setup)."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def failing_with(code: int, what: str):
    """Map library and I/O failures inside the block onto one exit code."""
    try:
        yield
    except CliError:
        raise
    except (SimpleGrowthError, OSError, ValueError, KeyError) as exc:
        raise CliError(code, f"{what}: {exc}") from exc


# ---------------------------------------------------------------- run config


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _optional_int(text: str) -> Optional[int]:
    return None if text.lower() in ("", "none") else int(text)


def _optional_str(text: str) -> Optional[str]:
    return None if text.lower() in ("", "none") else text


@dataclass
class RunConfig:
    """Every tunable of a training run; unset keys keep the CIFAR-10 defaults."""

    # architecture
    image_size: int = 32
    channels: tuple = (3, 16, 32, 64)
    latent_dim: int = 240
    noise_radius: float = 0.1
    convf_per_level: int = 1
    bn_enabled: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype_channels: int = 3
    topology: str = "(1,0);(-1,0);(0,1);(0,-1);(1,1);(1,-1);(-1,1);(-1,-1)"
    dtype: str = "float32"
    # training
    epochs: int = 48
    batch_size: int = 16
    lr: float = 0.001
    betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    max_iterations: Optional[int] = None
    checkpoint_interval: Optional[int] = None
    # data
    train_data: Optional[str] = None
    train_count: Optional[int] = None
    eval_data: Optional[str] = None
    # metrics
    metric_interval: int = 1000
    eval_sample_count: int = 4096
    embedder: str = "raw_pool"
    # reproducibility
    seed: int = 0

    _PARSERS = {
        bool: _parse_bool,
        int: int,
        float: float,
        str: str,
    }

    @classmethod
    def _parser(cls, name: str):
        special = {"channels": _parse_ints, "betas": _parse_floats,
                   "max_iterations": _optional_int, "checkpoint_interval": _optional_int,
                   "train_count": _optional_int, "train_data": _optional_str,
                   "eval_data": _optional_str}
        if name in special:
            return special[name]
        default = getattr(cls, name)
        return cls._PARSERS[type(default)]

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values, seen = {}, {}
        known = set(cls.keys())
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            where = f"{source}:{lineno}"
            if not sep:
                raise ConfigurationError(f"{where}: expected key=value, got {raw.strip()!r}")
            if key not in known:
                raise ConfigurationError(f"{where}: unknown key {key!r}")
            if key in seen:
                raise ConfigurationError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
            try:
                values[key] = cls._parser(key)(value)
            except ValueError as exc:
                raise ConfigurationError(f"{where}: bad value for {key}: {exc}") from exc
            seen[key] = lineno
        cfg = cls(**values)
        try:
            cfg.model_config()
            cfg.train_config()
        except (ConfigurationError, ArgumentError) as exc:
            raise ConfigurationError(f"{source}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def model_config(self) -> SimpleGrowthConfig:
        return SimpleGrowthConfig(
            image_size=self.image_size, channels=self.channels, latent_dim=self.latent_dim,
            noise_radius=self.noise_radius, convf_per_level=self.convf_per_level,
            bn_enabled=self.bn_enabled, bn_eps=self.bn_eps, bn_momentum=self.bn_momentum,
            dtype_channels=self.dtype_channels, topology=self.topology,
            seed=self.seed, dtype=self.dtype)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, betas=self.betas,
            eps=self.adam_eps, seed=self.seed, metric_interval=self.metric_interval,
            eval_sample_count=self.eval_sample_count if self.eval_data else 0,
            checkpoint_interval=self.checkpoint_interval, max_iterations=self.max_iterations,
            embedder=self.embedder)

    def lines(self) -> list:
        def show(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            if v is None:
                return "none"
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)
        return [f"{k}={show(getattr(self, k))}" for k in self.keys()]


# ---------------------------------------------------------------- commands


def _load_model(path) -> SimpleGrowthModel:
    if not path:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    with failing_with(EXIT_CHECKPOINT, f"checkpoint {path}"):
        return load_checkpoint(path)


def _load_data(path, model: Optional[SimpleGrowthModel] = None) -> Dataset:
    if not path:
        raise CliError(EXIT_CONFIG, "--data is required")
    with failing_with(EXIT_DATA, f"data {path}"):
        ds = load_images(path)
    if model is not None and ds.image_size != model.config.image_size:
        raise CliError(EXIT_DATA, f"data {path}: {ds.image_size}x{ds.image_size} images, "
                                  f"model expects {model.config.image_size}")
    return ds


def _require_out(args) -> Path:
    if not args.out:
        raise CliError(EXIT_CONFIG, "--out is required")
    return Path(args.out)


def _write_grid(images, cols, path: Path) -> None:
    with failing_with(EXIT_DATA, f"cannot write {path}"):
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm_grid(images, cols, path)


def cmd_train(args) -> int:
    if not args.config:
        raise CliError(EXIT_CONFIG, "--config is required")
    out = _require_out(args)
    with failing_with(EXIT_CONFIG, "config"):
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.data:
            cfg.train_data = args.data
        model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    if not cfg.train_data:
        raise CliError(EXIT_CONFIG, "no training data: set train_data or pass --data")

    # data first, so a bad path leaves no partial artifacts behind
    train_set = _load_data(cfg.train_data)
    if cfg.train_count is not None:
        with failing_with(EXIT_CONFIG, "train_count"):
            train_set = train_set.subset(cfg.train_count)
    eval_set = _load_data(cfg.eval_data) if cfg.eval_data else None
    if eval_set is not None and train_cfg.eval_sample_count > len(eval_set):
        raise CliError(EXIT_CONFIG, f"eval_sample_count {train_cfg.eval_sample_count} exceeds "
                                    f"eval set of {len(eval_set)}")
    if train_set.image_size != model_cfg.image_size:
        raise CliError(EXIT_DATA, f"training images are {train_set.image_size}px, "
                                  f"config image_size is {model_cfg.image_size}")

    with failing_with(EXIT_DATA, f"cannot create {out}"):
        out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    try:
        log.info("# effective configuration")
        for line in cfg.lines():
            log.info(line)
        log.info("# training on %d images", len(train_set))
        model = SimpleGrowthModel(model_cfg)
        try:
            result = train_loop(model, train_set, train_cfg, eval_set, out)
        except TrainingAborted as exc:
            raise CliError(EXIT_DATA, str(exc)) from exc
        except (SimpleGrowthError, ValueError) as exc:
            raise CliError(EXIT_METRIC, f"training failed: {exc}") from exc
        log.info("# done: %d iterations, final checkpoint %s", result.iterations, result.checkpoint_path)
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    out = _require_out(args)
    model = _load_model(args.checkpoint)
    ds = _load_data(args.data, model)
    count = args.count if args.count is not None else 8
    if not 1 <= count <= len(ds):
        raise CliError(EXIT_CONFIG, f"--count {count} outside 1..{len(ds)}")
    originals = ds.images[:count]
    recons = model.reconstruct(originals, batch_size=1)
    paired = np.empty((2 * count,) + originals.shape[1:], dtype=np.float64)
    paired[0::2] = originals
    paired[1::2] = recons
    _write_grid(paired, 2, out)
    return EXIT_OK


def _parse_indices(text, n_images: int) -> tuple:
    if not text:
        raise CliError(EXIT_CONFIG, "--indices A,B is required")
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--indices expects two integers A,B, got {text!r}") from None
    for i in (a, b):
        if not 0 <= i < n_images:
            raise CliError(EXIT_CONFIG, f"index {i} outside 0..{n_images - 1}")
    return a, b


def cmd_interpolate(args) -> int:
    out = _require_out(args)
    model = _load_model(args.checkpoint)
    ds = _load_data(args.data, model)
    a, b = _parse_indices(args.indices, len(ds))
    n = args.count if args.count is not None else 16
    # one image per batch, matching reconstruct, so tile 0 is bit-identical to its reconstruction
    z1 = model.encode_images(ds.images[a:a + 1], batch_size=1)[0]
    z2 = model.encode_images(ds.images[b:b + 1], batch_size=1)[0]
    with failing_with(EXIT_CONFIG, "interpolate"):
        zs = np.stack(interpolate(z1, z2, n))
    _write_grid(model.decode_latents(zs, batch_size=1), None, out)
    return EXIT_OK


def cmd_sample(args) -> int:
    out = _require_out(args)
    model = _load_model(args.checkpoint)
    count = args.count if args.count is not None else 16
    if count < 1:
        raise CliError(EXIT_CONFIG, "--count must be >= 1")
    seed = args.seed if args.seed is not None else 0
    with failing_with(EXIT_CONFIG, "sample"):
        z = sample_uniform_latents(count, model.config.latent_dim, seed, np.dtype(model.config.dtype))
    _write_grid(model.decode_latents(z.data, batch_size=1), None, out)
    return EXIT_OK


def _external_features(spec: str, n: int) -> tuple:
    """``external:A,B`` reads one feature file per set; ``external:P`` one file of 2n rows."""
    from .serialization import read_tensor_file

    paths = [p for p in spec.split(",") if p]
    arrays = [read_tensor_file(p)[1] for p in paths]
    for p, arr in zip(paths, arrays):
        if arr.ndim != 2:
            raise ValueError(f"{p}: expected an (N, d) feature matrix, got shape {arr.shape}")
    if len(arrays) == 1:
        (feats,) = arrays
        if feats.shape[0] != 2 * n:
            raise ValueError(f"{paths[0]}: {feats.shape[0]} rows, expected 2*{n} (originals, then reconstructions)")
        return feats[:n].astype(np.float64), feats[n:].astype(np.float64)
    if len(arrays) != 2:
        raise ValueError("external embedder takes one or two feature files")
    fa, fb = arrays
    for p, arr in zip(paths, arrays):
        if arr.shape[0] != n:
            raise ValueError(f"{p}: {arr.shape[0]} rows, expected {n}")
    return fa.astype(np.float64), fb.astype(np.float64)


def cmd_eval(args) -> int:
    with failing_with(EXIT_METRIC, "embedder"):
        embedder = Embedder.parse(args.embedder)
    model = _load_model(args.checkpoint)
    ds = _load_data(args.data, model)
    count = args.count if args.count is not None else min(len(ds), 4096)
    if not 2 <= count <= len(ds):
        raise CliError(EXIT_CONFIG, f"--count {count} outside 2..{len(ds)}")
    originals = ds.images[:count].astype(np.float64)
    recons = model.reconstruct(ds.images[:count]).astype(np.float64)
    with failing_with(EXIT_METRIC, f"metrics ({embedder})"):
        if embedder.kind == EXTERNAL:
            fa, fb = _external_features(embedder.path, count)
        else:
            fa, fb = embed(originals, embedder), embed(recons, embedder)
        if fa.shape[1] != fb.shape[1]:
            raise ValueError(f"feature sizes differ: {fa.shape[1]} vs {fb.shape[1]}")
        mse = float(np.mean((originals - recons) ** 2))
        values = dict(count=count, mse=mse, ssim=mean_ssim(originals, recons),
                      ms_ssim=mean_ms_ssim(originals, recons), frechet=fid_from_features(fa, fb))
    if not all(np.isfinite(v) for v in values.values()):
        raise CliError(EXIT_METRIC, f"non-finite metric values: {values}")
    print(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
          + f" embedder={embedder}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_suite()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradcheck failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed in {sum(r.seconds for r in results):.1f}s")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simplegrowth", description="SimpleGrowth autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train from a key=value run config",
        "reconstruct": "grid of originals beside their reconstructions",
        "interpolate": "decode a linear latent path between two images",
        "sample": "decode uniform [-1, 1] latents",
        "eval": "print SSIM, MS-SSIM and Frechet distance as one key=value line",
        "gradcheck": "run the float64 finite-difference suite",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--count", type=int, help="images, tiles or samples (interpolate: steps n)")
        p.add_argument("--seed", type=int)
        p.add_argument("--indices", help="A,B image indices for interpolate")
        p.add_argument("--embedder", default="raw_pool",
                       help="raw_pool | rand_proj:SEED | external:PATH[,PATH]")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        level = logging.DEBUG if args.verbose else logging.INFO
        if not any(isinstance(h, _StderrHandler) for h in log.handlers):
            stream = _StderrHandler()
            stream.setFormatter(logging.Formatter("%(message)s"))
            log.addHandler(stream)
        log.setLevel(level)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"simplegrowth: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
