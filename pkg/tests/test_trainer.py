import numpy as np
import pytest

from segkit import backbone as bb
from segkit import data as D
from segkit import decoder as dec
from segkit import trainer as TR
from segkit.model import SegRet
from segkit.tensor import Tensor

TINY = dict(stage_channels=[8, 8, 16, 16], stage_depths=[1, 0, 0, 1], heads=[1, 1, 2, 2], ffn_ratio=2)


def scalar_param(value, grad):
    p = Tensor([value], requires_grad=True)
    p.grad = None if grad is None else np.array([grad])
    return {"p": p}


def test_adamw_hand_example():
    params = scalar_param(1.0, 1.0)
    TR.adamw_step(params, TR.OptimState(lr=0.1, weight_decay=0.01))
    assert abs(params["p"].data[0] - 0.899) < 1e-7


def test_adamw_zero_grad_cases():
    params = scalar_param(2.5, 0.0)
    TR.adamw_step(params, TR.OptimState(lr=0.1, weight_decay=0.0))
    assert params["p"].data[0] == 2.5
    params = scalar_param(2.5, 0.0)
    TR.adamw_step(params, TR.OptimState(lr=0.1, weight_decay=0.2))
    assert params["p"].data[0] == pytest.approx(2.5 * (1 - 0.1 * 0.2), abs=1e-15)


def test_adamw_skips_missing_grad_and_counts_steps(caplog):
    params = {**scalar_param(1.0, None), "q": scalar_param(1.0, 1.0)["p"]}
    state = TR.OptimState(lr=0.1)
    TR.adamw_step(params, state)
    assert params["p"].data[0] == 1.0 and "no gradient" in caplog.text
    assert state.t == 1 and state.m["q"].shape == (1,)


def test_adamw_matches_reference_over_steps():
    r = np.random.default_rng(0)
    p0 = r.normal(size=5)
    grads = r.normal(size=(4, 5))
    params = {"p": Tensor(p0.copy(), requires_grad=True)}
    state = TR.OptimState(lr=0.01, weight_decay=0.05)
    m = v = np.zeros(5)
    p = p0.copy()
    for t, g in enumerate(grads, 1):
        params["p"].grad = g
        TR.adamw_step(params, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8) - 0.01 * 0.05 * p
    assert np.allclose(params["p"].data, p, atol=1e-15)


def test_schedules():
    cfg = TR.TrainConfig(iterations=100, lr=1e-3, warmup_iters=10)
    assert TR.scheduled_lr(cfg, 0, 100) == pytest.approx(1e-3 * 1.0 * 0.1)
    assert TR.scheduled_lr(cfg, 50, 100) == pytest.approx(5e-4)
    assert TR.scheduled_lr(cfg, 99, 100) == pytest.approx(1e-5)
    const = TR.TrainConfig(schedule="constant", lr=1e-4, warmup_iters=0)
    assert TR.scheduled_lr(const, 77, 100) == 1e-4
    with pytest.raises(ValueError):
        TR.TrainConfig(schedule="cosine")


def test_clip_grad_norm():
    params = {"a": Tensor([0.0, 0.0], requires_grad=True)}
    params["a"].grad = np.array([3.0, 4.0])
    assert TR.clip_grad_norm(params, 1.0) == 5.0
    assert np.allclose(params["a"].grad, [0.6, 0.8])


def small_setup(seed=0):
    bcfg = bb.BackboneConfig(**TINY)
    dcfg = dec.DecoderConfig(C=8, n_cls=3)
    data = D.generate_synthetic(D.DatasetSpec(n_cls=3, n_images=3, size=(32, 32), seed=seed))
    cfg = TR.TrainConfig(iterations=6, batch_size=2, lr=1e-3, augment=True, crop_size=[32, 32])
    return bcfg, dcfg, data, cfg


def test_zero_iterations_leave_params_unchanged():
    bcfg, dcfg, data, cfg = small_setup()
    model = SegRet.create(bcfg, dcfg, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    state = TR.train_loop(model, data, cfg, iterations=0)
    assert state.iteration == 0 and state.log == []
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_empty_dataset_rejected():
    bcfg, dcfg, _, cfg = small_setup()
    with pytest.raises(ValueError):
        TR.train_loop(SegRet.create(bcfg, dcfg), [], cfg)


def test_divergence_guard():
    bcfg, dcfg, data, cfg = small_setup()
    model = SegRet.create(bcfg, dcfg, seed=0)
    model.params["decoder.cls.b"].data[:] = np.float32(np.inf)
    with pytest.raises(TR.DivergenceError), np.errstate(invalid="ignore"):
        TR.train_loop(model, data, cfg)


def test_fixed_seed_gives_identical_curves():
    bcfg, dcfg, data, cfg = small_setup()
    runs = [TR.train_loop(SegRet.create(bcfg, dcfg, seed=1), data, cfg, seed=5).log for _ in range(2)]
    assert runs[0] == runs[1]


def test_checkpoint_bytes_are_stable(tmp_path):
    bcfg, dcfg, data, cfg = small_setup()
    model = SegRet.create(bcfg, dcfg, seed=0)
    state = TR.train_loop(model, data, cfg, iterations=2)
    a = TR.checkpoint_save(model, state, tmp_path / "a.ck")
    ck = TR.checkpoint_load(a)
    b = TR.checkpoint_save(ck.model, ck.state, tmp_path / "b.ck")
    assert a.read_bytes() == b.read_bytes()
    assert ck.state.iteration == 2 and ck.state.optim.t == 2


def test_checkpoint_mismatch_names_fields(tmp_path):
    bcfg, dcfg, _, _ = small_setup()
    model = SegRet.create(bcfg, dcfg, seed=0)
    path = TR.checkpoint_save(model, TR.new_state(TR.TrainConfig(), 0), tmp_path / "c.ck")
    other = dec.DecoderConfig(C=16, n_cls=4)
    with pytest.raises(TR.CheckpointMismatch, match=r"decoder\.C.*decoder\.n_cls"):
        TR.checkpoint_load(path, bcfg, other)
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(TR.CheckpointMismatch):
        TR.checkpoint_load(tmp_path / "junk")


def test_resume_continues_curve_exactly(tmp_path):
    bcfg, dcfg, data, cfg = small_setup()
    whole_model = SegRet.create(bcfg, dcfg, seed=2)
    whole = TR.train_loop(whole_model, data, cfg, seed=3)

    model = SegRet.create(bcfg, dcfg, seed=2)
    first = TR.train_loop(model, data, cfg, seed=3, iterations=2)
    path = TR.checkpoint_save(model, first, tmp_path / "mid.ck")
    ck = TR.checkpoint_load(path, bcfg, dcfg)
    second = TR.train_loop(ck.model, data, cfg, state=ck.state)
    assert [r["loss"] for r in first.log + second.log] == [r["loss"] for r in whole.log]
    for k, v in whole_model.params.items():
        assert np.array_equal(v.data, ck.model.params[k].data)


def test_loss_csv(tmp_path):
    TR.write_loss_csv([{"iter": 0, "loss": 1.5, "lr": 1e-4, "pixel_acc_estimate": 0.25}], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["iter,loss,lr,pixel_acc_estimate", "0,1.5,0.0001,0.250000"]


def test_overfit_moving_average_decreases(overfit_run):
    assert overfit_run.exit_code == 0
    loss = np.array([r["loss"] for r in overfit_run.loss_rows()])
    ma = np.convolve(loss, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(ma) < 0)
