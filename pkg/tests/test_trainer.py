"""Optimization loop: schedule, determinism, convergence, evaluation."""

import numpy as np
import pytest

from deformunet.engine import precision
from deformunet.kspace import gaussian1d_mask
from deformunet.metrics import PSNR_CAP_DB
from deformunet.model import init_params, load_checkpoint, save_checkpoint
from deformunet.phantom import phantom_gen
from deformunet.trainer import (TrainConfig, batch_order, evaluate, init_state,
                                lr_schedule, train_loop, train_step)

from helpers import tiny_model_config

RNG = np.random.default_rng


# ----------------------------------------------------------------------
# learning-rate schedule
# ----------------------------------------------------------------------

def test_lr_schedule_published_points():
    cfg = TrainConfig()
    assert lr_schedule(cfg, 0) == 2e-4
    assert lr_schedule(cfg, 49_999) == 2e-4
    assert lr_schedule(cfg, 50_000) == pytest.approx(1e-4)
    assert lr_schedule(cfg, 69_999) == pytest.approx(5e-5)  # halved again at 60k only


def test_lr_schedule_non_increasing_piecewise_constant():
    cfg = TrainConfig()
    values = [lr_schedule(cfg, s) for s in range(0, 120_000, 1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert len(set(values)) < len(values)  # plateaus exist


def test_train_config_defaults_mirror_schedule():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.decay_factor, cfg.decay_interval, cfg.decay_start) == \
        (2e-4, 0.5, 10_000, 50_000)
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (15.0, 0.1, 0.0025)


# ----------------------------------------------------------------------
# determinism and stability
# ----------------------------------------------------------------------

def _tiny_setup(seed=0, steps=10, extent=32, layers=1, lr0=1e-3):
    model_cfg = tiny_model_config(extent, layers=layers)
    train_cfg = TrainConfig(steps=steps, batch=4, lr0=lr0, seed=seed, log_every=1)
    images = [p.image for p in phantom_gen(21, 8, extent)]
    mask = gaussian1d_mask(extent, extent, 0.30, seed=5)
    return model_cfg, train_cfg, images, mask


def test_ten_steps_bitwise_deterministic():
    outs = []
    for _ in range(2):
        with precision(np.float32):
            model_cfg, train_cfg, images, mask = _tiny_setup(seed=3, steps=10)
            state = init_state(model_cfg, train_cfg)
            train_loop(state, images, mask)
            outs.append([t.data.copy() for t in state.params.store.tensors()])
    assert all(np.array_equal(a, b) for a, b in zip(outs[0], outs[1]))


def test_loss_decreases_across_three_seeds():
    firsts, lasts = [], []
    for seed in (0, 1, 2):
        with precision(np.float32):
            model_cfg, train_cfg, images, mask = _tiny_setup(seed=seed, steps=200)
            state = init_state(model_cfg, train_cfg)
            train_loop(state, images, mask)
        losses = [row[2] for row in state.log]
        firsts.append(losses[0])
        lasts.append(losses[-1])
    assert all(l < f for f, l in zip(firsts, lasts))
    assert np.mean(lasts) < np.mean(firsts)


def test_gradient_norm_finite_over_smoke_run():
    from deformunet.trainer import clip_global_norm
    with precision(np.float32):
        model_cfg, train_cfg, images, mask = _tiny_setup(seed=7, steps=1)
        state = init_state(model_cfg, train_cfg)
        from deformunet.trainer import prepare_pairs
        xu, x = prepare_pairs(images, mask)
        for _ in range(50):
            loss = train_step(state, xu[:4], x[:4], batch_indices=range(4))
            assert np.isfinite(loss)


def test_batch_order_deterministic_and_complete():
    a = batch_order(8, 4, 6, seed=3)
    b = batch_order(8, 4, 6, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a) == 6
    assert all(len(idx) == 4 for idx in a)


def test_clip_global_norm():
    from deformunet.trainer import clip_global_norm
    grads = {"a": np.array([3.0, 4.0])}
    norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def test_untrained_model_matches_zero_filled():
    model_cfg = tiny_model_config(64)
    images = [p.image for p in phantom_gen(30, 3, 64)]
    mask = gaussian1d_mask(64, 64, 0.30, seed=1)
    params = init_params(model_cfg, seed=0)
    report = evaluate(model_cfg, params, images, mask)
    for row in report.rows:
        assert row.model_psnr == row.zf_psnr
        assert row.model_ssim == row.zf_ssim


def test_ground_truth_against_itself():
    from deformunet.metrics import psnr, ssim
    img = phantom_gen(31, 1, 64)[0].image
    assert psnr(img, img) == PSNR_CAP_DB
    assert abs(ssim(img, img) - 1.0) <= 1e-9


def test_eval_report_csv_layout():
    model_cfg = tiny_model_config(64)
    images = [p.image for p in phantom_gen(32, 2, 64)]
    mask = gaussian1d_mask(64, 64, 0.30, seed=2)
    params = init_params(model_cfg, seed=0)
    report = evaluate(model_cfg, params, images, mask)
    lines = report.as_csv().strip().splitlines()
    assert lines[0] == "index, zf_psnr, zf_ssim, model_psnr, model_ssim"
    assert len(lines) == 4  # header + 2 rows + mean


def test_checkpoint_evaluate_bitwise_reproducible(tmp_path):
    with precision(np.float32):
        model_cfg, train_cfg, images, mask = _tiny_setup(seed=5, steps=5)
        state = init_state(model_cfg, train_cfg)
        train_loop(state, images, mask)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model_cfg, state.params)
        before = evaluate(model_cfg, state.params, images, mask)
        cfg2, params2 = load_checkpoint(path)
        after = evaluate(cfg2, params2, images, mask)
    for r1, r2 in zip(before.rows, after.rows):
        assert r1.model_psnr == r2.model_psnr
        assert r1.model_ssim == r2.model_ssim


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # Inf is injected on purpose
def test_divergence_reports_batch():
    from deformunet.trainer import TrainingDiverged
    with precision(np.float32):
        model_cfg, train_cfg, images, mask = _tiny_setup(seed=9, steps=1)
        state = init_state(model_cfg, train_cfg)
        state.params.im_w.data = state.params.im_w.data * np.inf
        from deformunet.trainer import prepare_pairs
        xu, x = prepare_pairs(images, mask)
        with pytest.raises(TrainingDiverged) as err:
            train_step(state, xu[:2], x[:2], batch_indices=[4, 5])
        assert err.value.batch_indices == [4, 5]
