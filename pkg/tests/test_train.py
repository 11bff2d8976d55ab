import math

import numpy as np
import pytest

from simplegrowth import tensor as T
from simplegrowth.data import Dataset
from simplegrowth.errors import ArgumentError, ConfigurationError, ShapeError
from simplegrowth.layers import TRAIN
from simplegrowth.model import SimpleGrowthModel, read_checkpoint
from simplegrowth.tensor import Tensor
from simplegrowth.train import (
    CSV_HEADER,
    AdamState,
    TrainConfig,
    TrainingAborted,
    adam_step,
    format_row,
    mse,
    train_loop,
)

from conftest import SMOKE_ITERATIONS, smoke_model_config, smoke_train_config


def adam_closed_form(theta, grads, lr=1e-3, b1=0.5, b2=0.999, eps=1e-8):
    """Scalar Adam written out term by term, as an independent reference."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def scalar(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- loss


def test_mse_examples(rng):
    x = Tensor(rng.random((2, 3, 4, 4)))
    assert mse(x, x).item() == 0
    assert mse(Tensor(x.data + 0.5), x).item() == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ShapeError):
        mse(x, Tensor(np.zeros((2, 3, 4, 5))))


def test_mse_gradient(rng):
    target = Tensor(rng.random((2, 3, 4, 4)))
    pred = Tensor(rng.random((2, 3, 4, 4)), requires_grad=True)
    mse(pred, target).backward()
    assert np.allclose(pred.grad, 2 * (pred.data - target.data) / pred.data.size, rtol=0, atol=1e-15)
    assert T.gradcheck(lambda p: mse(p, target), pred) < 1e-8


# ---------------------------------------------------------------- Adam


def test_adam_first_step_hand_value():
    p = {"w": scalar(1.0)}
    adam_step(p, {"w": np.array([1.0])}, AdamState())
    assert p["w"].data[0] == pytest.approx(0.999, abs=1e-9)


def test_adam_matches_closed_form_for_three_steps():
    grads = [0.3, -1.7, 0.05]
    p, state = {"w": scalar(0.8)}, AdamState()
    for g, expect in zip(grads, adam_closed_form(0.8, grads)):
        adam_step(p, {"w": np.array([g])}, state)
        assert abs(p["w"].data[0] - expect) < 1e-12
    assert state.t == 3
    assert np.all(state.v["w"] >= 0)


def test_adam_zero_gradient_leaves_parameter():
    p = {"w": scalar(1.0)}
    adam_step(p, {"w": np.array([0.0])}, AdamState())
    assert p["w"].data[0] == 1.0


def descend_quadratic(lr, steps=200):
    p, state = {"w": scalar(1.0)}, AdamState(lr=lr)
    trace = []
    for _ in range(steps):
        w = p["w"]
        w.zero_grad()
        T.sum(w * w).backward()
        adam_step(p, {"w": w.grad}, state)
        trace.append(p["w"].data[0])
    return np.array(trace)


def test_adam_minimizes_a_quadratic():
    # each Adam step moves theta by about lr, so at the default lr 200 steps cover ~0.2
    slow = descend_quadratic(1e-3)
    assert np.all(np.diff(slow) < 0)
    assert slow[-1] == pytest.approx(0.8, abs=0.01)
    fast = np.abs(descend_quadratic(1e-2))
    assert fast[-1] < 0.5
    assert fast[-1] < fast[99] < fast[0]


def test_adam_alignment_errors():
    with pytest.raises(ArgumentError):
        adam_step({"w": scalar(1.0)}, {"u": np.zeros(1)}, AdamState())
    with pytest.raises(ArgumentError):
        adam_step({"w": scalar(1.0)}, {"w": np.zeros(2)}, AdamState())


def test_adam_state_round_trip():
    p, state = {"a.w": scalar(1.0), "b": scalar(2.0)}, AdamState(lr=0.01)
    adam_step(p, {"a.w": np.array([0.5]), "b": np.array([-1.0])}, state)
    back = AdamState.from_state_dict(state.state_dict())
    assert (back.lr, back.beta1, back.beta2, back.eps, back.t) == (0.01, 0.5, 0.999, 1e-8, 1)
    assert set(back.m) == {"a.w", "b"}
    assert np.array_equal(back.v["b"], state.v["b"])


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(metric_interval=0),
                                 dict(max_iterations=0), dict(eval_sample_count=-1), dict(lr=0),
                                 dict(embedder="inception")])
def test_train_config_validation(bad):
    with pytest.raises((ConfigurationError, ArgumentError)):
        TrainConfig(**bad)


def test_csv_row_format():
    row = {"iteration": 100, "epoch": 6, "mse": 0.25, "ssim": None, "ms_ssim": float("nan"), "frechet": 1.5}
    assert format_row(row) == "100,6,0.25,NaN,NaN,1.5"


# ---------------------------------------------------------------- loop


def test_fixed_batch_loss_strictly_decreases(train_set):
    model = SimpleGrowthModel(smoke_model_config())
    x = Tensor(train_set.images[:16])
    params, state = model.named_parameters(), AdamState()
    losses = []
    for _ in range(10):
        for p in params.values():
            p.zero_grad()
        loss = mse(model.forward(x, TRAIN, seed=0), x)
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state)
        losses.append(loss.item())
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_one_iteration_moves_every_parameter(train_set):
    model = SimpleGrowthModel(smoke_model_config())
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    result = train_loop(model, train_set.subset(16), smoke_train_config(max_iterations=1, eval_sample_count=0))
    assert result.iterations == 1 and len(result.losses) == 1
    assert all(not np.array_equal(before[n], p.data) for n, p in model.named_parameters().items())


def test_smoke_run_rows_and_files(smoke_run):
    res = smoke_run.result
    assert res.iterations == SMOKE_ITERATIONS
    assert [r["iteration"] for r in res.rows] == [100, 200, 300]
    lines = smoke_run.csv_bytes.decode().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 4
    assert all(len(line.split(",")) == 6 and "NaN" not in line for line in lines[1:])
    # the mse column is the running mean of the per-iteration losses in each interval
    assert res.rows[1]["mse"] == pytest.approx(math.fsum(res.losses[100:200]) / 100, rel=1e-15)
    ck = read_checkpoint(smoke_run.checkpoint)
    assert ck.step == SMOKE_ITERATIONS and ck.optimizer["adam.hyper"][4] == SMOKE_ITERATIONS


def test_rows_without_eval_set_hold_nan(train_set, tmp_path):
    model = SimpleGrowthModel(smoke_model_config())
    cfg = smoke_train_config(max_iterations=4, metric_interval=2)
    result = train_loop(model, train_set.subset(32), cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(result.rows) == 2
    assert lines[1].startswith("2,0,") and lines[1].endswith(",NaN,NaN,NaN")


def test_short_runs_are_deterministic(train_set, tmp_path):
    cfg = smoke_train_config(max_iterations=6, metric_interval=3, eval_sample_count=8)
    for name in ("a", "b"):
        train_loop(SimpleGrowthModel(smoke_model_config()), train_set.subset(48), cfg,
                   eval_dataset=train_set.subset(8, 100), out_dir=tmp_path / name)
    for f in ("metrics.csv", "final.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_periodic_checkpoints(train_set, tmp_path):
    cfg = smoke_train_config(max_iterations=4, checkpoint_interval=2, eval_sample_count=0)
    train_loop(SimpleGrowthModel(smoke_model_config()), train_set.subset(32), cfg, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["final.ckpt", "step_00000002.ckpt", "step_00000004.ckpt"]
    assert read_checkpoint(tmp_path / "step_00000002.ckpt").step == 2


def test_loop_errors(train_set, tmp_path):
    model = SimpleGrowthModel(smoke_model_config())
    with pytest.raises(ConfigurationError):
        train_loop(model, train_set, smoke_train_config(eval_sample_count=20), eval_dataset=train_set.subset(10))
    with pytest.raises(ShapeError):
        train_loop(model, Dataset(np.zeros((4, 3, 16, 16), np.float32)), smoke_train_config())
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(TrainingAborted, match="last good checkpoint: none"):
        train_loop(model, train_set.subset(16), smoke_train_config(max_iterations=1), out_dir=blocker / "out")
