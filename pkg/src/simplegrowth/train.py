"""MSE loss, Adam, and the training loop that logs reconstruction metrics to CSV."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import BatchIterator, Dataset
from .errors import ArgumentError, ConfigurationError, ShapeError, SimpleGrowthError
from .layers import TRAIN
from .metrics import Embedder, reconstruction_report
from .model import SimpleGrowthModel, save_checkpoint
from .tensor import Tensor, derive_seed

log = logging.getLogger(__name__)

CSV_HEADER = "iteration,epoch,mse,ssim,ms_ssim,frechet"


class TrainingAborted(SimpleGrowthError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint or 'none'}")
        self.last_checkpoint = last_checkpoint


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return T.mean(diff * diff)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_dict(self) -> dict:
        out = {"adam.hyper": np.array([self.lr, self.beta1, self.beta2, self.eps, self.t], dtype=np.float64)}
        out.update({f"m.{k}": a for k, a in self.m.items()})
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_state_dict(cls, state: dict) -> "AdamState":
        lr, b1, b2, eps, t = (float(x) for x in state["adam.hyper"])
        m = {k[2:]: a.copy() for k, a in state.items() if k.startswith("m.")}
        v = {k[2:]: a.copy() for k, a in state.items() if k.startswith("v.")}
        return cls(lr, b1, b2, eps, int(t), m, v)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update of every named parameter, in place.

    Returns ``(params, state)`` for convenience.
    """
    if set(params) != set(grads):
        raise ArgumentError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ArgumentError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data = p.data - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 48
    batch_size: int = 16
    lr: float = 0.001
    betas: tuple = (0.5, 0.999)
    eps: float = 1e-8
    seed: int = 0
    metric_interval: int = 1000
    eval_sample_count: int = 4096
    checkpoint_interval: Optional[int] = None
    max_iterations: Optional[int] = None
    embedder: str = "raw_pool"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "metric_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("checkpoint_interval", "max_iterations"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigurationError(f"{name} must be >= 1 when set")
        if self.eval_sample_count < 0:
            raise ConfigurationError("eval_sample_count must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        self.betas = tuple(float(b) for b in self.betas)
        Embedder.parse(self.embedder)


@dataclass
class TrainResult:
    model: SimpleGrowthModel
    losses: list
    rows: list
    iterations: int
    optimizer: AdamState
    csv_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None

    def running_mse(self, window: int) -> float:
        tail = self.losses[-window:]
        return math.fsum(tail) / len(tail)


def _fmt(x) -> str:
    return "NaN" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def format_row(row: dict) -> str:
    return ",".join([str(row["iteration"]), str(row["epoch"])] +
                    [_fmt(row[k]) for k in ("mse", "ssim", "ms_ssim", "frechet")])


def train_loop(model: SimpleGrowthModel, dataset: Dataset, cfg: TrainConfig,
               eval_dataset: Optional[Dataset] = None, out_dir=None,
               optimizer: Optional[AdamState] = None, start_step: int = 0) -> TrainResult:
    """Train on ``dataset`` with MSE + Adam, logging metrics every ``metric_interval`` iterations.

    Each metric row holds the running training MSE since the previous row and,
    when ``eval_dataset`` is given, eval-mode SSIM/MS-SSIM/Frechet distance over
    its first ``eval_sample_count`` images (NaN otherwise).
    """
    if eval_dataset is not None and cfg.eval_sample_count > len(eval_dataset):
        raise ConfigurationError(
            f"eval_sample_count {cfg.eval_sample_count} exceeds eval set of {len(eval_dataset)}")
    s = model.config.image_size
    if dataset.images.shape[1:] != (3, s, s):
        raise ShapeError(f"dataset images {dataset.images.shape[1:]} do not match model input (3, {s}, {s})")

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_path = ckpt_path = last_ckpt = None
    state = optimizer or AdamState(cfg.lr, cfg.betas[0], cfg.betas[1], cfg.eps)
    params = model.named_parameters()
    batches = BatchIterator(dataset, cfg.batch_size, derive_seed(cfg.seed, 1), np.dtype(model.config.dtype))
    embedder = Embedder.parse(cfg.embedder)
    eval_images = None
    if eval_dataset is not None and cfg.eval_sample_count > 0:
        eval_images = eval_dataset.images[:cfg.eval_sample_count]

    csv = None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            csv_path = out_dir / "metrics.csv"
            csv = open(csv_path, "w", encoding="utf-8", newline="\n")
            csv.write(CSV_HEADER + "\n")
        except OSError as exc:
            raise TrainingAborted(f"cannot write training log: {exc}") from exc

    losses, rows = [], []
    since_row = []
    iteration = start_step
    stop = False
    try:
        for epoch in range(cfg.epochs):
            for idx in batches.epoch_batches(epoch):
                iteration += 1
                x = Tensor(dataset.images[idx], dtype=batches.dtype)
                for p in params.values():
                    p.zero_grad()
                loss = mse(model.forward(x, TRAIN, derive_seed(cfg.seed, epoch, iteration)), x)
                loss.backward()
                grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data)
                         for n, p in params.items()}
                adam_step(params, grads, state)
                for p in params.values():
                    p.zero_grad()
                value = loss.item()
                losses.append(value)
                since_row.append(value)

                if iteration % cfg.metric_interval == 0:
                    row = {"iteration": iteration, "epoch": epoch,
                           "mse": math.fsum(since_row) / len(since_row),
                           "ssim": None, "ms_ssim": None, "frechet": None}
                    since_row = []
                    if eval_images is not None:
                        report = reconstruction_report(eval_images, model.reconstruct(eval_images), embedder)
                        row.update(ssim=report.ssim, ms_ssim=report.ms_ssim, frechet=report.frechet)
                    rows.append(row)
                    log.info("iter %d epoch %d %s", iteration, epoch, format_row(row))
                    if csv is not None:
                        csv.write(format_row(row) + "\n")
                        csv.flush()

                if out_dir is not None and cfg.checkpoint_interval and iteration % cfg.checkpoint_interval == 0:
                    path = out_dir / f"step_{iteration:08d}.ckpt"
                    save_checkpoint(path, model, iteration, state.state_dict())
                    last_ckpt = path

                if cfg.max_iterations is not None and iteration - start_step >= cfg.max_iterations:
                    stop = True
                    break
            if stop:
                break
        if out_dir is not None:
            ckpt_path = out_dir / "final.ckpt"
            save_checkpoint(ckpt_path, model, iteration, state.state_dict())
    except OSError as exc:
        raise TrainingAborted(f"I/O failure during training: {exc}", last_ckpt) from exc
    finally:
        if csv is not None:
            csv.close()

    return TrainResult(model, losses, rows, iteration, state, csv_path, ckpt_path)
