"""Two-phase optimization: BCE-only pretraining, then adversarial training
with K-frame rollouts and a fixed critic/regressor update ratio."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from .core import TrainConfig, VideoSequence
from .critics import CriticSpec, PatchCritic
from .data import AugmentParams, apply_augment, sample_augment
from .losses import (
    LossBreakdown,
    assemble_losses,
    balanced_bce,
    spatial_loss_terms,
    temporal_loss_terms,
)
from .regressor import Regressor, RegressorSpec, check_size, rollout

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "MASKPROP-CKPT"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["step", "phase", "kind", "epoch", "lr"] + LossBreakdown.columns()


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def lr_schedule(
    step: int, total_steps: int, config: TrainConfig, steps_per_epoch: int,
    base_lr: Optional[float] = None,
) -> float:
    """Constant for ``lr_constant_epochs`` epochs, then polynomial decay to zero at ``total_steps``."""
    base = config.lr if base_lr is None else base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    constant_steps = config.lr_constant_epochs * steps_per_epoch
    if step < constant_steps or total_steps <= constant_steps:
        return base
    s = step - constant_steps
    decay_steps = total_steps - constant_steps
    return base * (1.0 - s / decay_steps) ** config.poly_decay_power


def overwrite_gt(gt: torch.Tensor, pred: torch.Tensor, threshold: float = 0.25) -> torch.Tensor:
    """Replace gt pixels by the prediction where it is within ``threshold`` of the gt."""
    if gt.shape != pred.shape:
        raise ValueError("gt and prediction shapes differ")
    pred = pred.detach().to(gt.dtype)
    return torch.where((pred - gt).abs() < threshold, pred, gt)


def noise_gt(mask: torch.Tensor, pred: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Add Gaussian noise whose mean/variance are the per-frame statistics of ``pred``; clamp to [0, 1]."""
    if mask.shape != pred.shape:
        raise ValueError("mask and prediction shapes differ")
    pred = pred.detach().to(mask.dtype)
    mean = pred.mean(dim=(-2, -1), keepdim=True)
    std = pred.var(dim=(-2, -1), keepdim=True, unbiased=False).sqrt()
    noise = torch.randn(mask.shape, generator=generator, dtype=mask.dtype)
    return (mask + mean + std * noise).clamp(0.0, 1.0)


def critic_real_masks(gt, pred, config: TrainConfig, generator) -> torch.Tensor:
    return noise_gt(overwrite_gt(gt, pred, config.overwrite_threshold), pred, generator)


@dataclass(frozen=True)
class Window:
    sequence: int
    object_id: str
    start: int  # first frame of the window; the rollout seed is frame start - 1


class WindowSampler:
    """Enumerates K-frame windows inside single object tracks and builds batches."""

    def __init__(self, sequences: Sequence[VideoSequence], k_window: int, policy: str = "random",
                 image_size: Optional[int] = None, augment: bool = True):
        if not sequences:
            raise ValueError("dataset is empty")
        self.k = k_window
        self.policy = policy
        self.augment = augment
        self.image_size = image_size or sequences[0].size[0]
        self._frames = []
        self._tracks = []
        self._present = []
        for seq in sequences:
            frames = np.stack([self._resize(f, cv2.INTER_LINEAR) for f in seq.frames]).astype(np.float32)
            tracks = {
                oid: np.stack([self._resize(m.astype(np.float32), cv2.INTER_NEAREST) for m in masks])
                for oid, masks in seq.gt_tracks.items()
            }
            self._frames.append(frames)
            self._tracks.append(tracks)
            self._present.append({oid: np.flatnonzero(m.reshape(len(m), -1).any(1)) for oid, m in tracks.items()})
        self.windows: List[Window] = []
        for si, seq in enumerate(sequences):
            for oid in seq.gt_tracks:
                if len(self._present[si][oid]) == 0:
                    continue
                for start in range(1, seq.num_frames - self.k + 1):
                    self.windows.append(Window(si, oid, start))
        if not self.windows:
            raise ValueError(f"no window of length {self.k} fits the dataset")

    def _resize(self, img, interp):
        if img.shape[0] == self.image_size and img.shape[1] == self.image_size:
            return img
        return cv2.resize(img, (self.image_size, self.image_size), interpolation=interp)

    def __len__(self) -> int:
        return len(self.windows)

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self.windows) / batch_size)

    def reference_index(self, window: Window, rng: np.random.Generator) -> int:
        present = self._present[window.sequence][window.object_id]
        if self.policy == "first":
            return int(present[0])
        return int(rng.choice(present))

    def batch(self, indices: Sequence[int], rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        out = {"frames": [], "gt": [], "prior": [], "ref_frame": [], "ref_mask": []}
        for idx in indices:
            w = self.windows[idx]
            frames = self._frames[w.sequence]
            track = self._tracks[w.sequence][w.object_id]
            ref_t = self.reference_index(w, rng)
            params = sample_augment(rng) if self.augment else AugmentParams()
            span = range(w.start, w.start + self.k)
            pairs = [apply_augment(frames[t], track[t], params) for t in span]
            _, prior = apply_augment(frames[w.start - 1], track[w.start - 1], params)
            ref_frame, ref_mask = apply_augment(frames[ref_t], track[ref_t], params)
            if not ref_mask.any():
                # augmentation pushed the object out of view; fall back to the raw reference
                ref_frame, ref_mask = frames[ref_t], track[ref_t]
            out["frames"].append(np.stack([f for f, _ in pairs]))
            out["gt"].append(np.stack([m for _, m in pairs]))
            out["prior"].append(prior[None])
            out["ref_frame"].append(ref_frame)
            out["ref_mask"].append(ref_mask[None])
        batch = {k: torch.from_numpy(np.stack(v)).float() for k, v in out.items()}
        batch["frames"] = batch["frames"].permute(0, 1, 4, 2, 3).contiguous()
        batch["ref_frame"] = batch["ref_frame"].permute(0, 3, 1, 2).contiguous()
        return batch


def regressor_spec_from(config: TrainConfig) -> RegressorSpec:
    return RegressorSpec(
        encoder_channels=config.encoder_channels,
        decoder_last_channels=config.decoder_last_channels,
        global_conv_kernel=config.global_conv_kernel,
        base_image_size=config.image_size,
    )


def critic_specs_from(config: TrainConfig) -> Tuple[CriticSpec, CriticSpec]:
    spatial = CriticSpec(num_down=config.critic_num_down, base_channels=config.critic_base_channels)
    temporal = CriticSpec(
        num_down=config.critic_num_down,
        base_channels=config.critic_base_channels,
        input_channels=3 * config.k_window,
    )
    return spatial, temporal


def _adam(params, config: TrainConfig):
    return torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))


@dataclass
class TrainState:
    config: TrainConfig
    regressor: Regressor
    critic_s: PatchCritic
    critic_t: PatchCritic
    opt_r: torch.optim.Optimizer
    opt_s: torch.optim.Optimizer
    opt_t: torch.optim.Optimizer
    rng: np.random.Generator
    torch_gen: torch.Generator
    phase: str = "pretrain"
    epoch: int = 0         # epochs completed within the current phase
    step: int = 0          # optimizer updates of any network, across phases
    pretrain_done: bool = False
    log: List[dict] = field(default_factory=list)

    @property
    def regressor_updates(self) -> int:
        return sum(1 for r in self.log if r["kind"] == "regressor")

    @property
    def critic_updates(self) -> int:
        return sum(1 for r in self.log if r["kind"] == "critic")


def init_state(config: TrainConfig) -> TrainState:
    image = config.image_size
    check_size(image, image, config.num_stages)
    torch.manual_seed(config.seed)
    regressor = Regressor(regressor_spec_from(config))
    spec_s, spec_t = critic_specs_from(config)
    critic_s, critic_t = PatchCritic(spec_s), PatchCritic(spec_t)
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(
        config=config,
        regressor=regressor,
        critic_s=critic_s,
        critic_t=critic_t,
        opt_r=_adam(regressor.parameters(), config),
        opt_s=_adam(critic_s.parameters(), config),
        opt_t=_adam(critic_t.parameters(), config),
        rng=np.random.default_rng(config.seed),
        torch_gen=gen,
    )


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(breakdown: LossBreakdown, where: str) -> None:
    values = breakdown.as_floats()
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss terms {bad} at {where}")


def _record(state: TrainState, kind: str, lr: float, breakdown: LossBreakdown) -> dict:
    state.step += 1
    row = {"step": state.step, "phase": state.phase, "kind": kind, "epoch": state.epoch, "lr": lr}
    row.update(breakdown.as_floats())
    state.log.append(row)
    return row


def _predict(regressor, batch):
    return rollout(regressor, batch["frames"], batch["ref_frame"], batch["ref_mask"], batch["prior"])[0]


def regressor_update(state: TrainState, batch, adversarial: bool) -> LossBreakdown:
    """One regressor step. Critics are frozen; BCE targets are the untouched gt masks."""
    config = state.config
    for p in list(state.critic_s.parameters()) + list(state.critic_t.parameters()):
        p.requires_grad_(False)
    try:
        pred = _predict(state.regressor, batch)
        ce = balanced_bce(pred, batch["gt"])
        spatial = temporal = None
        if adversarial:
            real = critic_real_masks(batch["gt"], pred, config, state.torch_gen)
            spatial = spatial_loss_terms(state.critic_s, batch["frames"], real, pred, with_gp=False)
            temporal = temporal_loss_terms(state.critic_t, batch["frames"], real, pred, with_gp=False)
        breakdown = assemble_losses(ce, spatial, temporal, config)
        _check_finite(breakdown, f"regressor step {state.step + 1}")
        state.opt_r.zero_grad(set_to_none=True)
        breakdown.total_regressor.backward()
        state.opt_r.step()
    finally:
        for p in list(state.critic_s.parameters()) + list(state.critic_t.parameters()):
            p.requires_grad_(True)
    return breakdown


def critic_update(state: TrainState, batch) -> LossBreakdown:
    """One joint step of both critics against detached regressor predictions."""
    config = state.config
    with torch.no_grad():
        pred = _predict(state.regressor, batch)
        ce = balanced_bce(pred, batch["gt"])
    real = critic_real_masks(batch["gt"], pred, config, state.torch_gen)
    spatial = spatial_loss_terms(state.critic_s, batch["frames"], real, pred, generator=state.torch_gen)
    temporal = temporal_loss_terms(state.critic_t, batch["frames"], real, pred, generator=state.torch_gen)
    breakdown = assemble_losses(ce, spatial, temporal, config)
    _check_finite(breakdown, f"critic step {state.step + 1}")
    state.opt_s.zero_grad(set_to_none=True)
    state.opt_t.zero_grad(set_to_none=True)
    (breakdown.total_critic_s + breakdown.total_critic_t).backward()
    state.opt_s.step()
    state.opt_t.step()
    return breakdown


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


class _CriticStream:
    """Endless stream of critic batches, reshuffled whenever exhausted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.b, self.rng = n, batch_size, rng
        self.order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self.order) < self.b:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        head, self.order = self.order[:self.b], self.order[self.b:]
        return head


EpochHook = Callable[[TrainState], None]


def pretrain(
    dataset: Sequence[VideoSequence],
    config: TrainConfig,
    state: Optional[TrainState] = None,
    on_epoch_end: Optional[EpochHook] = None,
) -> TrainState:
    """Minimize weighted balanced BCE over K-window rollouts seeded with gt masks."""
    state = state or init_state(config)
    if state.phase != "pretrain":
        raise ValueError("state is past the pretraining phase")
    sampler = WindowSampler(dataset, config.k_window, config.reference_policy,
                            config.image_size, config.augment)
    spe = sampler.steps_per_epoch(config.batch_size)
    total = config.pretrain_epochs * spe
    while state.epoch < config.pretrain_epochs:
        order = state.rng.permutation(len(sampler))
        for i, idx in enumerate(_batches(order, config.batch_size)):
            lr = lr_schedule(state.epoch * spe + i, total, config, spe)
            _set_lr(state.opt_r, lr)
            batch = sampler.batch(idx, state.rng)
            breakdown = regressor_update(state, batch, adversarial=False)
            _record(state, "regressor", lr, breakdown)
        state.epoch += 1
        log.info("pretrain epoch %d/%d ce=%.4f", state.epoch, config.pretrain_epochs,
                 state.log[-1]["ce"])
        if on_epoch_end:
            on_epoch_end(state)
    state.pretrain_done = True
    return state


def train_adversarial(
    state: TrainState,
    dataset: Sequence[VideoSequence],
    config: Optional[TrainConfig] = None,
    on_epoch_end: Optional[EpochHook] = None,
) -> TrainState:
    """Alternate ``critic_steps_per_gen`` critic updates with one regressor update."""
    config = config or state.config
    if config.k_window < 2:
        raise ValueError("adversarial training needs k_window >= 2 for the temporal critic")
    if state.phase == "pretrain":
        if not state.pretrain_done:
            raise ValueError("pretraining has not completed")
        state.phase, state.epoch = "adversarial", 0
    state.config = config
    sampler = WindowSampler(dataset, config.k_window, config.reference_policy,
                            config.image_size, config.augment)
    spe = sampler.steps_per_epoch(config.batch_size)
    total = config.adversarial_epochs * spe
    while state.epoch < config.adversarial_epochs:
        order = state.rng.permutation(len(sampler))
        critic_stream = _CriticStream(len(sampler), config.batch_size, state.rng)
        for i, idx in enumerate(_batches(order, config.batch_size)):
            lr = lr_schedule(state.epoch * spe + i, total, config, spe, config.adversarial_base_lr)
            for opt in (state.opt_r, state.opt_s, state.opt_t):
                _set_lr(opt, lr)
            for _ in range(config.critic_steps_per_gen):
                batch = sampler.batch(critic_stream.next(), state.rng)
                _record(state, "critic", lr, critic_update(state, batch))
            batch = sampler.batch(idx, state.rng)
            _record(state, "regressor", lr, regressor_update(state, batch, adversarial=True))
        state.epoch += 1
        last = state.log[-1]
        log.info("adversarial epoch %d/%d ce=%.4f spatial=%.4f temporal=%.4f", state.epoch,
                 config.adversarial_epochs, last["ce"], last["spatial"], last["temporal"])
        if on_epoch_end:
            on_epoch_end(state)
    return state


def write_loss_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def save_checkpoint(state: TrainState, path, include_critics: bool = True) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "regressor_spec": state.regressor.spec.to_dict(),
        "regressor": state.regressor.state_dict(),
        "step": state.step,
        "config": state.config.to_text(),
    }
    if include_critics:
        payload.update(
            critic_s_spec=state.critic_s.spec.to_dict(),
            critic_t_spec=state.critic_t.spec.to_dict(),
            critic_s=state.critic_s.state_dict(),
            critic_t=state.critic_t.state_dict(),
            optim={"r": state.opt_r.state_dict(), "s": state.opt_s.state_dict(),
                   "t": state.opt_t.state_dict()},
            rng=state.rng.bit_generator.state,
            torch_gen=state.torch_gen.get_state(),
            phase=state.phase,
            epoch=state.epoch,
            pretrain_done=state.pretrain_done,
            log=state.log,
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint of this package")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_state(payload: dict, config: Optional[TrainConfig] = None) -> TrainState:
    """Rebuild a full TrainState from a training checkpoint."""
    if "critic_s" not in payload:
        raise CheckpointError("checkpoint holds no training state (inference export?)")
    config = config or TrainConfig.from_text(payload["config"])
    state = init_state(config)
    state.regressor.load_state_dict(payload["regressor"])
    state.critic_s.load_state_dict(payload["critic_s"])
    state.critic_t.load_state_dict(payload["critic_t"])
    state.opt_r.load_state_dict(payload["optim"]["r"])
    state.opt_s.load_state_dict(payload["optim"]["s"])
    state.opt_t.load_state_dict(payload["optim"]["t"])
    state.rng.bit_generator.state = payload["rng"]
    state.torch_gen.set_state(payload["torch_gen"])
    state.phase = payload["phase"]
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.pretrain_done = payload["pretrain_done"]
    state.log = list(payload["log"])
    return state
