import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from s2no.geometry import compute_eigenbasis
from s2no.model import GeometryContext, ModelConfig, Stats, forward, init_params
from s2no.oracle import generate_dataset
from s2no.training import (
    AdamState, TrainConfig, TrainingError, adamw_step, finetune, loss_and_grad,
    onecycle_lr, relative_l2_loss, rescale_output, split_validation, train, train_multi,
    train_podnn, write_history,
)

TINY = ModelConfig(L=1, d_c=8, k=8, H=2, proj_hidden=8)


@pytest.fixture(scope="module")
def setup(small_plate):
    ctx = GeometryContext.build(small_plate, compute_eigenbasis(small_plate, 8))
    ds = generate_dataset(small_plate, 24, seed=2)
    return ctx, ds


def test_relative_l2_loss_hand_value():
    truth = torch.tensor([[[3.0, 4.0, 0.0]], [[0.0, 0.0, 2.0]]])
    pred = torch.tensor([[[3.0, 4.0, 1.0]], [[0.0, 0.0, 1.0]]])
    assert float(relative_l2_loss(pred, truth)) == pytest.approx(0.5 * (1 / 5 + 1 / 2))
    with pytest.raises(ValueError):
        relative_l2_loss(pred, torch.zeros_like(truth))


def test_adamw_two_steps_by_hand():
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    st_ = AdamState()
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    p = adamw_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, st_, lr, wd)
    expected = 1.0 * (1 - lr * wd) - lr * 0.5 / (0.5 + eps)
    assert float(p["w"]) == pytest.approx(expected, abs=1e-15)
    p = adamw_step(p, {"w": torch.tensor([-1.0], dtype=torch.float64)}, st_, lr, wd)
    m = b1 * (1 - b1) * 0.5 + (1 - b1) * -1.0
    v = b2 * (1 - b2) * 0.25 + (1 - b2) * 1.0
    mh, vh = m / (1 - b1**2), v / (1 - b2**2)
    expected = expected * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    assert float(p["w"]) == pytest.approx(expected, abs=1e-14)
    assert st_.t == 2


def test_adamw_rejects_nan_gradient():
    with pytest.raises(TrainingError):
        adamw_step({"w": torch.ones(1)}, {"w": torch.tensor([float("nan")])}, AdamState(), 0.1)


def test_onecycle_endpoints():
    cfg = TrainConfig(lr=1e-3)
    total = 1000
    assert onecycle_lr(0, total, cfg) == pytest.approx(1e-3 / 25)
    assert onecycle_lr(300, total, cfg) == pytest.approx(1e-3)
    assert onecycle_lr(total - 1, total, cfg) == pytest.approx(1e-3 / 1e4)
    # midway through warm-up the cosine is at its half point
    assert onecycle_lr(150, total, cfg) == pytest.approx(0.5 * (1e-3 + 4e-5))
    with pytest.raises(ValueError):
        onecycle_lr(total, total, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 500))
def test_onecycle_bounded_and_unimodal(total):
    cfg = TrainConfig()
    lrs = np.array([onecycle_lr(s, total, cfg) for s in range(total)])
    assert lrs.max() <= cfg.lr * (1 + 1e-12)
    assert lrs.min() >= cfg.lr / cfg.div_final * (1 - 1e-12)
    top = int(np.argmax(lrs))
    assert np.all(np.diff(lrs[: top + 1]) >= -1e-15)
    assert np.all(np.diff(lrs[top:]) <= 1e-15)


def test_split_validation_seeded_and_disjoint():
    tr, va = split_validation(50, 0.2, 3)
    tr2, va2 = split_validation(50, 0.2, 3)
    np.testing.assert_array_equal(tr, tr2)
    np.testing.assert_array_equal(va, va2)
    assert len(va) == 10 and not set(tr) & set(va)
    assert not np.array_equal(va, split_validation(50, 0.2, 4)[1])


def test_gradients_cover_all_parameters(setup):
    ctx, ds = setup
    p = init_params(TINY, 0)
    p.stats[ctx.stats_key] = Stats.fit(ds.u, ctx.points.double().numpy())
    loss, g = loss_and_grad(p, ctx, torch.tensor(ds.a[:4]), torch.tensor(ds.u[:4]))
    assert set(g) == set(p.tensors) and math.isfinite(loss)
    assert all(g[k].shape == p.tensors[k].shape for k in g)
    assert float(g["lift.W"].abs().sum()) > 0


def test_training_reduces_loss_and_is_deterministic(setup, tmp_path):
    ctx, ds = setup
    cfg = TrainConfig(epochs=6, batch_size=4, lr=3e-3, val_fraction=0.25)
    r1 = train(ds, ctx, cfg, TINY)
    r2 = train(ds, ctx, cfg, TINY)
    assert r1.history[-1]["train_l2"] < r1.history[0]["train_l2"]
    for k in r1.params.tensors:
        assert torch.equal(r1.params.tensors[k], r2.params.tensors[k])
    vals = [h["val_l2"] for h in r1.history]
    assert r1.best_epoch == int(np.argmin(vals)) + 1
    write_history(tmp_path / "h.csv", r1.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_l2,val_l2,lr" and len(lines) == 7


def test_mismatched_dataset_rejected(setup, tiny_plate):
    ctx, _ = setup
    other = generate_dataset(tiny_plate, 4, seed=0)
    with pytest.raises(TrainingError):
        train(other, ctx, TrainConfig(epochs=1), TINY)
    with pytest.raises(TrainingError):
        train_multi([other], [], TrainConfig(epochs=1), TINY)


def test_rescale_output_keeps_predictions(setup):
    ctx, ds = setup
    ctx = ctx.to(torch.float64)
    p = init_params(TINY, 1, dtype=torch.float64)
    p.stats[ctx.stats_key] = Stats(np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 0.5]))
    p.stats["other"] = Stats(np.array([1.0, 0.0, 0.0]), np.array([0.5, 0.5, 0.5]))
    a = torch.tensor(ds.a[:3], dtype=torch.float64)
    before = forward(p, ctx, a)
    ctx_o = GeometryContext(**{**ctx.__dict__, "stats_key": "other"})
    before_o = forward(p, ctx_o, a)
    q = rescale_output(p, ctx.stats_key, Stats(np.array([0.0, 0.5, -1.0]), np.array([3.0, 0.2, 1.5])))
    torch.testing.assert_close(forward(q, ctx, a), before, rtol=0, atol=1e-12)
    torch.testing.assert_close(forward(q, ctx_o, a), before_o, rtol=0, atol=1e-12)


def test_finetune_starts_from_given_parameters(setup):
    ctx, ds = setup
    base = train(ds, ctx, TrainConfig(epochs=2, batch_size=8), TINY)
    same = finetune(base.params, ds, ctx, TrainConfig(epochs=0))
    for k in base.params.tensors:
        assert torch.equal(same.params.tensors[k], base.params.tensors[k])
    tuned = finetune(base.params, ds, ctx, TrainConfig(epochs=2, batch_size=8))
    assert len(tuned.history) == 2
    with pytest.raises(TrainingError):
        finetune(base.params, ds, ctx, TrainConfig(epochs=1), model_cfg=ModelConfig(L=3, d_c=8, H=2))


def test_podnn_training_runs(setup):
    _, ds = setup
    res = train_podnn(ds, TrainConfig(epochs=3, batch_size=8), modes=4, hidden=(16,))
    assert len(res.history) == 3
    assert res.params.predict(np.zeros((2, ds.n_voxels))).shape == (2, ds.n, 3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(epochs=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adamw_first_step_scalar():
    p = adamw_step({"w": torch.tensor([1.0], dtype=torch.float64)},
                   {"w": torch.tensor([1.0], dtype=torch.float64)}, AdamState(), 0.1, weight_decay=0.0)
    assert float(p["w"]) == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_zero_gradient_is_pure_decay():
    p = adamw_step({"w": torch.tensor([2.0], dtype=torch.float64)},
                   {"w": torch.tensor([0.0], dtype=torch.float64)}, AdamState(), 0.1, weight_decay=0.5)
    assert float(p["w"]) == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_loss_is_batch_mean():
    truth = torch.ones(2, 1, 3)
    pred = truth.clone()
    pred[1] = 0.0
    assert float(relative_l2_loss(pred, truth)) == pytest.approx(0.5)
