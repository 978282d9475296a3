"""Domain types, validation and configuration shared across the package.

Images are float arrays in [0, 1] laid out H x W x 3; masks are H x W.
Multi-object clips are handled as one binary problem per object.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


class EmptyMaskError(ValueError):
    """Raised when a reference is requested for a frame where the object is absent."""


@dataclass(frozen=True)
class VideoSequence:
    frames: List[np.ndarray]
    gt_tracks: Dict[str, List[np.ndarray]]
    name: str = "sequence"

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.frames[0].shape[:2])

    @property
    def object_ids(self) -> List[str]:
        return list(self.gt_tracks)

    def first_appearance(self, object_id: str) -> Optional[int]:
        for t, m in enumerate(self.gt_tracks[object_id]):
            if np.any(m > 0):
                return t
        return None


@dataclass(frozen=True)
class ReferenceSegmentation:
    frame: np.ndarray
    mask: np.ndarray
    frame_index: int
    object_id: str

    def __post_init__(self):
        if self.frame.shape[:2] != self.mask.shape:
            raise ValueError(
                f"frame {self.frame.shape[:2]} and mask {self.mask.shape} sizes differ"
            )
        if not np.any(self.mask > 0):
            raise EmptyMaskError(f"reference mask for {self.object_id!r} is empty")


@dataclass(frozen=True)
class MaskTrack:
    soft_masks: List[np.ndarray]
    object_id: str

    def __len__(self) -> int:
        return len(self.soft_masks)


@dataclass(frozen=True)
class WindowBatch:
    """K consecutive frames of one object track plus the mask that seeds the rollout."""

    frames: List[np.ndarray]
    gt_masks: List[np.ndarray]
    pred_masks: List[np.ndarray]
    prior_mask: np.ndarray
    reference: ReferenceSegmentation

    def __post_init__(self):
        k = len(self.frames)
        if k < 1:
            raise ValueError("window needs at least one frame")
        if len(self.gt_masks) != k or (self.pred_masks and len(self.pred_masks) != k):
            raise ValueError("frames, gt_masks and pred_masks must have equal length")

    @property
    def k(self) -> int:
        return len(self.frames)


def _parse_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())


@dataclass(frozen=True)
class TrainConfig:
    # loss weights
    lambda_ce: float = 100.0
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    lambda_gp: float = 10.0
    # schedule
    k_window: int = 4
    critic_steps_per_gen: int = 5
    lr: float = 1e-5
    adversarial_lr: Optional[float] = None  # None: same as lr
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 6
    poly_decay_power: float = 0.9
    lr_constant_epochs: int = 10
    overwrite_threshold: float = 0.25
    image_size: int = 64
    pretrain_epochs: int = 6
    adversarial_epochs: int = 40
    seed: int = 0
    # model and sampling knobs
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 64)
    decoder_last_channels: int = 16
    global_conv_kernel: int = 7
    critic_num_down: int = 6
    critic_base_channels: int = 16
    reference_policy: str = "random"
    augment: bool = True

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def violations(self) -> List[str]:
        out = []
        for name in ("lambda_ce", "lambda_s", "lambda_t", "lambda_gp"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.k_window < 1:
            out.append("k_window must be >= 1")
        if not 0 <= self.overwrite_threshold < 1:
            out.append("overwrite_threshold must be in [0, 1)")
        if self.critic_steps_per_gen < 1:
            out.append("critic_steps_per_gen must be >= 1")
        if self.lr <= 0 or (self.adversarial_lr is not None and self.adversarial_lr <= 0):
            out.append("learning rates must be > 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.reference_policy not in ("random", "first"):
            out.append("reference_policy must be 'random' or 'first'")
        if len(self.encoder_channels) < 2:
            out.append("encoder_channels needs at least 2 stages")
        return out

    @property
    def adversarial_base_lr(self) -> float:
        return self.lr if self.adversarial_lr is None else self.adversarial_lr

    @property
    def num_stages(self) -> int:
        return len(self.encoder_channels)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        values: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown config key {key!r} (line {lineno})")
            default = types[key]
            try:
                if default is None:
                    values[key] = None if value.lower() == "none" else float(value)
                elif isinstance(default, bool):
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(value)
                    values[key] = value.lower() in ("true", "1")
                elif isinstance(default, tuple):
                    values[key] = _parse_tuple(value)
                else:
                    values[key] = type(default)(value)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def validate_sequence(seq: VideoSequence) -> List[str]:
    """Return one description per broken VideoSequence invariant (empty when valid)."""
    problems = []
    n_frames = len(seq.frames)
    if n_frames < 1:
        return ["sequence has no frames (T=0)"]
    size = seq.frames[0].shape[:2]
    for t, frame in enumerate(seq.frames):
        if frame.ndim != 3 or frame.shape[2] != 3:
            problems.append(f"frame {t} is not H x W x 3")
        elif frame.shape[:2] != size:
            problems.append(f"frame {t} size {frame.shape[:2]} != {size}")
    for oid, track in seq.gt_tracks.items():
        if len(track) != n_frames:
            problems.append(f"track {oid} length {len(track)} ≠ T={n_frames}")
        if any(m.shape != size for m in track):
            problems.append(f"track {oid} mask size differs from frame size")
        if any(not np.all((m == 0) | (m == 1)) for m in track):
            problems.append(f"track {oid}: non-binary gt mask")
    return problems


def make_reference(seq: VideoSequence, object_id: str, frame_index: int) -> ReferenceSegmentation:
    if not 0 <= frame_index < seq.num_frames:
        raise IndexError(f"frame_index {frame_index} outside [0, {seq.num_frames})")
    mask = seq.gt_tracks[object_id][frame_index]
    if not np.any(mask > 0):
        raise EmptyMaskError(f"object {object_id!r} is absent in frame {frame_index}")
    return ReferenceSegmentation(
        frame=seq.frames[frame_index],
        mask=np.asarray(mask, dtype=np.float32),
        frame_index=frame_index,
        object_id=object_id,
    )


def first_reference(seq: VideoSequence, object_id: str) -> ReferenceSegmentation:
    """Reference taken from the first frame in which the object is visible."""
    t = seq.first_appearance(object_id)
    if t is None:
        raise EmptyMaskError(f"object {object_id!r} never appears in {seq.name}")
    return make_reference(seq, object_id, t)
