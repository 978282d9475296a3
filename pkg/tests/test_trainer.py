import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import maskprop.trainer as trainer
from maskprop.core import TrainConfig
from maskprop.data import generate_corpus
from maskprop.trainer import (
    DivergenceError,
    WindowSampler,
    critic_update,
    init_state,
    load_checkpoint,
    lr_schedule,
    noise_gt,
    overwrite_gt,
    pretrain,
    regressor_update,
    restore_state,
    save_checkpoint,
    train_adversarial,
)

TINY = TrainConfig(
    image_size=32, encoder_channels=(8, 16), decoder_last_channels=8, global_conv_kernel=3,
    critic_num_down=3, critic_base_channels=4, k_window=2, batch_size=2,
    pretrain_epochs=1, adversarial_epochs=1, lr=1e-3, seed=3,
)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_corpus(2, seed=5, num_frames=6, image_size=32, num_objects=1)


def param_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# learning-rate schedule

def test_lr_starts_at_base():
    assert lr_schedule(0, 100, TrainConfig(), steps_per_epoch=1) == 1e-5


def test_lr_ends_at_zero():
    assert lr_schedule(100, 100, TrainConfig(), steps_per_epoch=5) == 0.0


def test_lr_midpoint_of_decay():
    cfg = TrainConfig()
    # 10 constant epochs of 1 step, then 20 decay steps; midpoint is 10 steps in
    assert lr_schedule(20, 30, cfg, steps_per_epoch=1) == pytest.approx(1e-5 * 0.5 ** 0.9, rel=1e-12)
    assert lr_schedule(20, 30, cfg, steps_per_epoch=1) == pytest.approx(5.359e-6, rel=1e-3)


def test_lr_constant_phase():
    cfg = TrainConfig()
    assert all(lr_schedule(s, 100, cfg, steps_per_epoch=5) == 1e-5 for s in range(50))
    assert lr_schedule(51, 100, cfg, steps_per_epoch=5) < 1e-5


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_schedule(11, 10, TrainConfig(), 1)


# real-sample tricks

def test_overwrite_examples():
    gt = torch.tensor([1.0, 1.0, 0.0, 1.0])
    pred = torch.tensor([0.9, 0.5, 0.2, 1.0])
    out = overwrite_gt(gt, pred, 0.25)
    assert out.tolist() == pytest.approx([0.9, 1.0, 0.2, 1.0])


def test_overwrite_fixed_point():
    gt = (torch.rand(5, 5) > 0.5).float()
    assert torch.equal(overwrite_gt(gt, gt.clone()), gt)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), threshold=st.floats(0.0, 0.5, exclude_max=False))
def test_overwrite_only_touches_correct_pixels(seed, threshold):
    g = torch.Generator().manual_seed(seed)
    gt = (torch.rand(6, 6, generator=g) > 0.5).float()
    pred = torch.rand(6, 6, generator=g)
    out = overwrite_gt(gt, pred, threshold)
    changed = out != gt
    correct = (pred > 0.5) == (gt > 0.5)
    assert not torch.any(changed & ~correct)


def test_noise_degenerate_statistics():
    mask = (torch.rand(1, 4, 4) > 0.5).float()
    assert torch.equal(noise_gt(mask, torch.zeros(1, 4, 4)), mask)


def test_noise_range_and_reproducibility():
    mask = (torch.rand(2, 3, 8, 8) > 0.5).float()
    pred = torch.rand(2, 3, 8, 8)
    a = noise_gt(mask, pred, torch.Generator().manual_seed(1))
    b = noise_gt(mask, pred, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_noise_uses_prediction_statistics():
    mask = torch.full((1, 1, 200, 200), 0.5)
    pred = torch.rand(1, 1, 200, 200) * 0.4
    # stay clear of the clamp so the moments are observable
    out = noise_gt(mask, pred, torch.Generator().manual_seed(0)) - 0.5
    assert float(out.mean()) == pytest.approx(float(pred.mean()), abs=0.005)
    assert float(out.var()) == pytest.approx(float(pred.var()), rel=0.05)


# sampling

def test_windows_stay_in_one_track(tiny_data):
    sampler = WindowSampler(tiny_data, k_window=3, image_size=32)
    for w in sampler.windows:
        assert w.start >= 1 and w.start + 3 <= tiny_data[w.sequence].num_frames
        assert w.object_id in tiny_data[w.sequence].gt_tracks
    batch = sampler.batch([0, 1], np.random.default_rng(0))
    assert batch["frames"].shape == (2, 3, 3, 32, 32)
    assert batch["gt"].shape == (2, 3, 32, 32)
    assert batch["prior"].shape == (2, 1, 32, 32)


def test_first_reference_policy(tiny_data):
    sampler = WindowSampler(tiny_data, k_window=2, policy="first", image_size=32)
    rng = np.random.default_rng(0)
    assert all(sampler.reference_index(w, rng) == 0 for w in sampler.windows)


def test_empty_dataset():
    with pytest.raises(ValueError):
        pretrain([], TINY)


# pretraining

def test_pretrain_step_count(tiny_data):
    state = pretrain(tiny_data, TINY)
    windows = len(WindowSampler(tiny_data, TINY.k_window, image_size=32))
    assert state.regressor_updates == math.ceil(windows / TINY.batch_size)
    assert state.pretrain_done


def test_pretrain_leaves_critics_untouched(tiny_data):
    fresh = init_state(TINY)
    state = pretrain(tiny_data, TINY, state=init_state(TINY))
    assert param_hash(state.critic_s) == param_hash(fresh.critic_s)
    assert param_hash(state.critic_t) == param_hash(fresh.critic_t)


def test_pretrain_reduces_loss_on_fixed_batch(tiny_data):
    cfg = TINY.replace(augment=False)
    state = init_state(cfg)
    sampler = WindowSampler(tiny_data, cfg.k_window, image_size=32, augment=False)
    batch = sampler.batch(list(range(4)), np.random.default_rng(0))
    first = regressor_update(state, batch, adversarial=False).as_floats()["ce"]
    for _ in range(199):
        last = regressor_update(state, batch, adversarial=False).as_floats()["ce"]
    assert last < first


def test_resume_is_bit_identical(tiny_data, tmp_path):
    cfg = TINY.replace(pretrain_epochs=2)
    straight = pretrain(tiny_data, cfg)

    saved = {}

    def stop_after_first(state):
        if state.epoch == 1:
            save_checkpoint(state, tmp_path / "ckpt.pt")
            saved["done"] = True

    pretrain(tiny_data, cfg, on_epoch_end=stop_after_first)
    assert saved
    resumed = restore_state(load_checkpoint(tmp_path / "ckpt.pt"))
    resumed = pretrain(tiny_data, cfg, state=resumed)
    assert param_hash(resumed.regressor) == param_hash(straight.regressor)
    assert resumed.log == straight.log


def test_divergence_detected(tiny_data, monkeypatch):
    monkeypatch.setattr(trainer, "balanced_bce", lambda pred, gt: pred.sum() * float("nan"))
    with pytest.raises(DivergenceError):
        pretrain(tiny_data, TINY)


# adversarial phase

def test_adversarial_update_ratio(tiny_data):
    state = pretrain(tiny_data, TINY)
    state = train_adversarial(state, tiny_data, TINY)
    kinds = [r["kind"] for r in state.log if r["phase"] == "adversarial"]
    assert kinds == (["critic"] * 5 + ["regressor"]) * (len(kinds) // 6)
    assert kinds.count("critic") == 5 * kinds.count("regressor")


def test_adversarial_requires_pretraining(tiny_data):
    with pytest.raises(ValueError):
        train_adversarial(init_state(TINY), tiny_data, TINY)


def test_adversarial_requires_window(tiny_data):
    state = pretrain(tiny_data, TINY)
    with pytest.raises(ValueError):
        train_adversarial(state, tiny_data, TINY.replace(k_window=1))


def test_update_discipline(tiny_data):
    state = init_state(TINY)
    sampler = WindowSampler(tiny_data, TINY.k_window, image_size=32)
    batch = sampler.batch([0, 1], state.rng)
    before = (param_hash(state.regressor), param_hash(state.critic_s), param_hash(state.critic_t))
    critic_update(state, batch)
    after_critic = (param_hash(state.regressor), param_hash(state.critic_s), param_hash(state.critic_t))
    assert after_critic[0] == before[0]
    assert after_critic[1] != before[1] and after_critic[2] != before[2]
    regressor_update(state, batch, adversarial=True)
    after_reg = (param_hash(state.regressor), param_hash(state.critic_s), param_hash(state.critic_t))
    assert after_reg[0] != after_critic[0]
    assert after_reg[1:] == after_critic[1:]
    assert all(p.grad is None or p.requires_grad for p in state.critic_s.parameters())


def test_zero_adversarial_weights_reduce_to_pretraining(tiny_data):
    cfg = TINY.replace(lambda_s=0.0, lambda_t=0.0)
    sampler = WindowSampler(tiny_data, cfg.k_window, image_size=32)
    batch = sampler.batch([0, 1, 2], np.random.default_rng(1))
    a, b = init_state(cfg), init_state(cfg)
    regressor_update(a, batch, adversarial=False)
    regressor_update(b, batch, adversarial=True)
    assert param_hash(a.regressor) == param_hash(b.regressor)


def test_ce_targets_are_untouched_gt(tiny_data, monkeypatch):
    seen = []
    real_bce = trainer.balanced_bce

    def spy(pred, gt):
        seen.append(gt.clone())
        return real_bce(pred, gt)

    monkeypatch.setattr(trainer, "balanced_bce", spy)
    state = pretrain(tiny_data, TINY)
    train_adversarial(state, tiny_data, TINY)
    assert seen
    for gt in seen:
        assert torch.all((gt == 0) | (gt == 1))


def test_adversarial_phase_uses_its_own_base_lr(tiny_data):
    cfg = TINY.replace(adversarial_lr=1e-4, lr_constant_epochs=5)
    state = train_adversarial(pretrain(tiny_data, cfg), tiny_data, cfg)
    rates = {r["lr"] for r in state.log if r["phase"] == "adversarial"}
    assert rates == {1e-4}
    assert {r["lr"] for r in state.log if r["phase"] == "pretrain"} == {1e-3}
