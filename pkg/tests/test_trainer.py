"""Tests for the schedule, Adam, checkpoints, and the training loop."""

import dataclasses
import math

import numpy as np
import pytest

from srwm import trainer as tr
from srwm.autodiff import NonFiniteError, Tensor
from srwm.config import TrainConfig, make_preset
from srwm.episodes import synthetic_split_sources
from srwm.model import ConfigError, init_params
from srwm.tensorio import TensorFormatError
from srwm.trainer import AdamState, adam_step, checkpoint_load, checkpoint_save, lr_schedule


def quick_config(**kw) -> TrainConfig:
    base = dict(
        n_way=3, k_shot=1, k_prime=0, m_queries=1,
        loss_b1=1.0, loss_b2=0.0, loss_b3=0.0,
        batch_size=2, total_steps=6, warmup_steps=2, peak_lr=1e-2,
        eval_interval=3, blocks=1, d_model=16, heads=2, d_ff=16,
        d_in=8, train_classes=10, test_classes=4, spread=0.4, seed=5,
    )
    base.update(kw)
    return dataclasses.replace(TrainConfig(), **base)


def quick_source(cfg):
    train, test = synthetic_split_sources(
        cfg.train_classes, cfg.test_classes, cfg.d_in, cfg.spread, cfg.data_seed
    )
    return train, test


def test_lr_schedule_endpoints():
    assert lr_schedule(100, 1.0, 100) == 1.0
    assert lr_schedule(50, 1.0, 100) == 0.5
    assert lr_schedule(400, 1.0, 100) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        lr_schedule(0, 1.0, 100)


def test_adam_zero_gradient_keeps_params():
    params = {"w": Tensor(np.array([1.0, -2.0]))}
    opt = tr.init_adam(params)
    grads = {"w": np.zeros(2)}
    new_params, new_opt = adam_step(params, grads, opt, lr=0.1)
    assert np.array_equal(new_params["w"].data, params["w"].data)
    assert new_opt.step == 1


def test_adam_first_step_magnitude_is_lr():
    for g in (1e-4, 1.0, 1e4):
        params = {"w": Tensor(np.array([0.0]))}
        opt = tr.init_adam(params)
        new_params, _ = adam_step(params, {"w": np.array([g])}, opt, lr=0.01)
        # bias-corrected first step is lr * g / (|g| + eps')
        assert abs(new_params["w"].data[0]) == pytest.approx(0.01, rel=1e-3)


def test_adam_two_runs_bitwise_identical():
    rng = np.random.default_rng(0)
    grad_seq = [rng.normal(size=(3, 3)) for _ in range(100)]

    def run():
        params = {"w": Tensor(np.zeros((3, 3)))}
        opt = tr.init_adam(params)
        for g in grad_seq:
            params, opt = adam_step(params, {"w": g}, opt, lr=1e-3)
        return params["w"].data

    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    params = {"w": Tensor(np.array([1.0]))}
    opt = tr.init_adam(params)
    with pytest.raises(NonFiniteError) as err:
        adam_step(params, {"w": np.array([np.nan])}, opt, lr=0.1)
    assert "'w'" in str(err.value)


def test_clip_gradients_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = tr.clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
    assert total == pytest.approx(1.0)
    same, _ = tr.clip_gradients(grads, 10.0)
    assert same is grads


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = quick_config()
    params = init_params(cfg.model_config(), np.random.default_rng(1))
    opt = tr.init_adam(params)
    opt.m = {k: np.random.default_rng(2).normal(size=v.shape) for k, v in opt.m.items()}
    path1 = tmp_path / "a.srwm"
    path2 = tmp_path / "b.srwm"
    checkpoint_save(path1, params, opt, cfg, step=7)
    loaded_params, loaded_opt, loaded_cfg, step = checkpoint_load(path1)
    assert step == 7
    assert loaded_cfg == cfg
    for k in params:
        assert np.array_equal(loaded_params[k].data, params[k].data)
        assert np.array_equal(loaded_opt.m[k], opt.m[k])
    checkpoint_save(path2, loaded_params, loaded_opt, loaded_cfg, step=7)
    assert path1.read_bytes() == path2.read_bytes()


def test_checkpoint_truncation_detected(tmp_path):
    cfg = quick_config()
    params = init_params(cfg.model_config(), np.random.default_rng(1))
    path = tmp_path / "t.srwm"
    checkpoint_save(path, params, tr.init_adam(params), cfg, step=1)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(TensorFormatError):
        checkpoint_load(path)


def test_checkpoint_architecture_mismatch_names_dimension(tmp_path):
    cfg = quick_config()
    params = init_params(cfg.model_config(), np.random.default_rng(1))
    path = tmp_path / "t.srwm"
    checkpoint_save(path, params, tr.init_adam(params), cfg, step=1)
    _, _, loaded_cfg, _ = checkpoint_load(path)
    other = quick_config(d_model=32)
    with pytest.raises(ConfigError) as err:
        tr.check_config_compatible(other, loaded_cfg)
    assert "d_model" in str(err.value)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    cfg = quick_config()
    train_src, _ = quick_source(cfg)
    result = tr.train(cfg, train_src, tmp_path / "run")
    assert result.checkpoint.exists()
    lines = result.metrics.read_text().splitlines()
    assert lines[0] == tr.METRICS_HEADER
    assert len(lines) == 1 + cfg.total_steps
    assert (tmp_path / "run" / "checkpoint_0000003.srwm").exists()


def test_fixed_seed_reproduces_metrics_bitwise(tmp_path):
    cfg = quick_config()
    train_src, _ = quick_source(cfg)
    a = tr.train(cfg, train_src, tmp_path / "a")
    b = tr.train(cfg, train_src, tmp_path / "b")
    assert a.metrics.read_text() == b.metrics.read_text()
    pa, _, _, _ = checkpoint_load(a.checkpoint)
    pb, _, _, _ = checkpoint_load(b.checkpoint)
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data)


def test_resume_equals_uninterrupted_run(tmp_path):
    cfg = quick_config(total_steps=6, eval_interval=3)
    train_src, _ = quick_source(cfg)
    straight = tr.train(cfg, train_src, tmp_path / "straight")

    first_half = dataclasses.replace(cfg, total_steps=3)
    tr.train(first_half, train_src, tmp_path / "half")
    resumed = tr.train(
        cfg, train_src, tmp_path / "resumed",
        resume_from=tmp_path / "half" / "checkpoint_final.srwm",
    )

    ps, _, _, _ = checkpoint_load(straight.checkpoint)
    pr, _, _, _ = checkpoint_load(resumed.checkpoint)
    for k in ps:
        assert np.array_equal(ps[k].data, pr[k].data), k

    straight_rows = straight.metrics.read_text().splitlines()[1:]
    resumed_rows = resumed.metrics.read_text().splitlines()[1:]
    assert resumed_rows == straight_rows[3:]


def test_plain_loop_matches_general_path_bitwise(tmp_path):
    cfg = quick_config(total_steps=8)
    train_src, _ = quick_source(cfg)
    general = tr.train(cfg, train_src, tmp_path / "general")
    plain = tr.train_plain_reference(cfg, train_src, tmp_path / "plain")
    assert general.metrics.read_text() == plain.metrics.read_text()
    pg, _, _, _ = checkpoint_load(general.checkpoint)
    pp, _, _, _ = checkpoint_load(plain.checkpoint)
    for k in pg:
        assert np.array_equal(pg[k].data, pp[k].data), k


def test_initial_loss_near_log_n(tmp_path):
    cfg = quick_config(n_way=5, train_classes=12, total_steps=1, warmup_steps=1,
                       peak_lr=0.0)
    train_src, _ = quick_source(cfg)
    result = tr.train(cfg, train_src, tmp_path / "run")
    expected = math.log(5)
    assert result.final_diag["T1"] == pytest.approx(expected, rel=0.10)


def test_nan_loss_aborts_with_checkpoint_reference(tmp_path):
    cfg = quick_config(total_steps=40, eval_interval=2, peak_lr=1e160,
                       warmup_steps=1, clip_norm=0.0)
    train_src, _ = quick_source(cfg)
    with pytest.raises(tr.TrainAbort) as err:
        tr.train(cfg, train_src, tmp_path / "run")
    assert "checkpoint" in str(err.value)


def test_gradcheck_micro_preset_passes():
    cfg = make_preset("micro")
    err = tr.gradcheck_full_loss(cfg)
    assert err < 1e-4, f"max rel err {err}"
