"""Synthetic moving-shape clips, DAVIS-style disk layout and geometric augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .core import VideoSequence, validate_sequence

SHAPES = ("square", "circle")


class InfeasibleSpecError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class MissingFrameError(LayoutError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic clip.

    ``sizes`` are square sides / circle diameters in pixels and ``velocities``
    are (dx, dy) pixels per frame. Unset fields are drawn from ``seed``.
    """

    num_frames: int = 24
    image_size: Tuple[int, int] = (64, 64)
    num_objects: int = 2
    shapes: Optional[Tuple[str, ...]] = None
    sizes: Optional[Tuple[int, ...]] = None
    velocities: Optional[Tuple[Tuple[float, float], ...]] = None
    starts: Optional[Tuple[Tuple[float, float], ...]] = None
    occlusion: bool = False
    background: str = "textured"
    seed: int = 0

    def check(self) -> None:
        if self.num_frames < 2:
            raise InfeasibleSpecError("num_frames must be >= 2")
        if self.num_objects < 1:
            raise InfeasibleSpecError("num_objects must be >= 1")
        if self.background not in ("solid", "textured"):
            raise InfeasibleSpecError(f"unknown background {self.background!r}")
        for name in ("shapes", "sizes", "velocities", "starts"):
            value = getattr(self, name)
            if value is not None and len(value) != self.num_objects:
                raise InfeasibleSpecError(f"{name} needs one entry per object")
        if self.shapes is not None and any(s not in SHAPES for s in self.shapes):
            raise InfeasibleSpecError(f"shapes must be drawn from {SHAPES}")
        h, w = self.image_size
        if self.sizes is not None and any(s < 2 or s >= min(h, w) for s in self.sizes):
            raise InfeasibleSpecError(f"shape sizes {self.sizes} do not fit a {h}x{w} canvas")


def render_shape(kind: str, size: float, center: Tuple[float, float], hw: Tuple[int, int]) -> np.ndarray:
    """Rasterize a shape by testing pixel centers; ``center`` is (x, y)."""
    h, w = hw
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    cx, cy = center
    half = size / 2.0
    if kind == "square":
        inside = (np.abs(xs - cx) < half) & (np.abs(ys - cy) < half)
    else:
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 < half ** 2
    return inside


def _trajectory_ok(start, vel, size, hw, n_frames) -> bool:
    h, w = hw
    half = size / 2.0
    for t in (0, n_frames - 1):
        x = start[0] + vel[0] * t
        y = start[1] + vel[1] * t
        if not (half <= x <= w - half and half <= y <= h - half):
            return False
    return True


def _sample_start(rng, vel, size, hw, n_frames):
    h, w = hw
    half = size / 2.0
    span = [(w, vel[0]), (h, vel[1])]
    start = []
    for extent, v in span:
        lo = half - min(0.0, v * (n_frames - 1))
        hi = extent - half - max(0.0, v * (n_frames - 1))
        if lo > hi:
            return None
        start.append(rng.uniform(lo, hi))
    return tuple(start)


def _background(rng, hw, mode) -> np.ndarray:
    h, w = hw
    base = rng.uniform(0.15, 0.45, size=3)
    img = np.broadcast_to(base, (h, w, 3)).astype(np.float64)
    if mode == "textured":
        noise = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(2.0, 2.0, 0))
        noise /= noise.std() + 1e-8
        img = img + 0.08 * noise
    return np.clip(img, 0.0, 1.0)


def _object_colors(rng, n) -> np.ndarray:
    # evenly spaced hues keep objects distinguishable from each other
    hues = (rng.uniform() + np.arange(n) / max(n, 1)) % 1.0
    colors = []
    for hue in hues:
        hsv = np.uint8([[[int(hue * 179), 220, 235]]])
        colors.append(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0] / 255.0)
    return np.array(colors)


def generate_sequence(spec: SynthSpec, name: Optional[str] = None) -> VideoSequence:
    """Render a clip of rigidly translating shapes; lower object index is nearer the camera."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    hw = tuple(spec.image_size)
    n, n_frames = spec.num_objects, spec.num_frames

    shapes = spec.shapes or tuple(str(rng.choice(SHAPES)) for _ in range(n))
    max_size = max(4, min(18, min(hw) // 3))

    trajectories = None
    for _ in range(500):
        sizes = spec.sizes or tuple(int(rng.integers(min(10, max_size), max_size + 1)) for _ in range(n))
        trial = []
        for i in range(n):
            if spec.velocities is not None:
                vel = tuple(float(v) for v in spec.velocities[i])
            else:
                speed = rng.uniform(0.5, 2.0)
                angle = rng.uniform(0, 2 * math.pi)
                vel = (speed * math.cos(angle), speed * math.sin(angle))
            if spec.starts is not None:
                start = tuple(float(v) for v in spec.starts[i])
                if not _trajectory_ok(start, vel, sizes[i], hw, n_frames):
                    raise InfeasibleSpecError(f"object {i + 1} leaves the canvas")
            else:
                start = _sample_start(rng, vel, sizes[i], hw, n_frames)
                if start is None:
                    if spec.velocities is not None:
                        raise InfeasibleSpecError(
                            f"object {i + 1} cannot stay inside the canvas at velocity {vel}"
                        )
                    break
            trial.append((start, vel))
        else:
            if spec.occlusion or n == 1 or not _any_overlap(trial, shapes, sizes, hw, n_frames):
                trajectories = trial
                break
            if spec.starts is not None:
                raise InfeasibleSpecError("objects overlap but occlusion is disabled")
    if trajectories is None:
        raise InfeasibleSpecError("could not place objects on the canvas")

    background = _background(rng, hw, spec.background)
    colors = _object_colors(rng, n)
    frames: List[np.ndarray] = []
    tracks = {str(i + 1): [] for i in range(n)}
    for t in range(n_frames):
        frame = background.copy()
        claimed = np.zeros(hw, dtype=bool)
        # nearest object first: pixels it covers are hidden for everything behind
        for i in range(n):
            (sx, sy), (vx, vy) = trajectories[i]
            shape = render_shape(shapes[i], sizes[i], (sx + vx * t, sy + vy * t), hw)
            visible = shape & ~claimed
            frame[visible] = colors[i]
            claimed |= shape
            tracks[str(i + 1)].append(visible.astype(np.uint8))
        frames.append(frame.astype(np.float32))
    return VideoSequence(frames=frames, gt_tracks=tracks, name=name or f"synth{spec.seed:05d}")


def _any_overlap(trajectories, shapes, sizes, hw, n_frames) -> bool:
    for t in range(n_frames):
        occupied = np.zeros(hw, dtype=bool)
        for i, ((sx, sy), (vx, vy)) in enumerate(trajectories):
            # one pixel of margin so touching shapes also count
            shape = render_shape(shapes[i], sizes[i] + 2, (sx + vx * t, sy + vy * t), hw)
            if np.any(occupied & shape):
                return True
            occupied |= shape
    return False


def generate_corpus(
    num_sequences: int,
    seed: int,
    num_frames: int = 24,
    image_size: int = 64,
    num_objects: int = 2,
    occlusion: bool = False,
    prefix: str = "synth",
) -> List[VideoSequence]:
    seeds = np.random.SeedSequence(seed).generate_state(num_sequences)
    return [
        generate_sequence(
            SynthSpec(
                num_frames=num_frames,
                image_size=(image_size, image_size),
                num_objects=num_objects,
                occlusion=occlusion,
                seed=int(s),
            ),
            name=f"{prefix}{i:03d}",
        )
        for i, s in enumerate(seeds)
    ]


def merged_label_map(seq: VideoSequence, t: int) -> np.ndarray:
    """Indexed label map of frame ``t``; lower object labels win overlaps."""
    labels = np.zeros(seq.size, dtype=np.uint8)
    for oid in sorted(seq.gt_tracks, key=_object_label, reverse=True):
        labels[seq.gt_tracks[oid][t] > 0] = _object_label(oid)
    return labels


def _object_label(object_id) -> int:
    try:
        label = int(object_id)
    except (TypeError, ValueError):
        raise LayoutError(f"object id {object_id!r} is not an integer label") from None
    if not 1 <= label <= 255:
        raise LayoutError(f"object label {label} outside 1..255")
    return label


def davis_palette() -> List[int]:
    """The standard 256-entry label colour map used by DAVIS annotations."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


def save_label_map(labels: np.ndarray, path) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(davis_palette())
    img.save(path, optimize=False)


def load_label_map(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                raise LayoutError(f"{path}: annotation must be an indexed or grayscale PNG")
            return np.array(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise LayoutError(f"malformed annotation {path}: {exc}") from exc


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)


def write_davis_layout(seq: VideoSequence, root, ext: str = "png") -> None:
    problems = validate_sequence(seq)
    if problems:
        raise ValueError(f"invalid sequence {seq.name}: {problems}")
    for oid in seq.gt_tracks:
        _object_label(oid)
    root = Path(root)
    img_dir = root / "JPEGImages" / seq.name
    ann_dir = root / "Annotations" / seq.name
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        Image.fromarray(to_uint8(frame)).save(img_dir / f"{t:05d}.{ext}")
        save_label_map(merged_label_map(seq, t), ann_dir / f"{t:05d}.png")


def _listing(directory: Path, suffixes: Sequence[str]) -> List[Path]:
    if not directory.is_dir():
        raise MissingFrameError(f"missing directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in suffixes)


def read_davis_layout(root, name: str) -> VideoSequence:
    root = Path(root)
    frame_paths = _listing(root / "JPEGImages" / name, (".jpg", ".jpeg", ".png"))
    ann_paths = _listing(root / "Annotations" / name, (".png",))
    if not frame_paths:
        raise MissingFrameError(f"no frames for sequence {name!r} under {root}")
    if len(frame_paths) != len(ann_paths):
        raise LayoutError(
            f"{name}: {len(frame_paths)} frames but {len(ann_paths)} annotations"
        )
    frames = []
    for p in frame_paths:
        try:
            with Image.open(p) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
        except (OSError, SyntaxError) as exc:
            raise LayoutError(f"malformed frame {p}: {exc}") from exc
    labels = [load_label_map(p) for p in ann_paths]
    present = sorted(set(np.unique(np.stack(labels)).tolist()) - {0})
    tracks = {str(k): [(lab == k).astype(np.uint8) for lab in labels] for k in present}
    seq = VideoSequence(frames=frames, gt_tracks=tracks, name=name)
    problems = validate_sequence(seq)
    if problems:
        raise LayoutError(f"{name}: {problems}")
    return seq


def list_sequences(root) -> List[str]:
    ann = Path(root) / "Annotations"
    if not ann.is_dir():
        raise MissingFrameError(f"no Annotations directory under {root}")
    return sorted(p.name for p in ann.iterdir() if p.is_dir())


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    scale: float = 1.0
    rotation: float = 0.0

    def __post_init__(self):
        if not 0.75 <= self.scale <= 1.25:
            raise ValueError(f"scale {self.scale} outside [0.75, 1.25]")
        if not -30.0 <= self.rotation <= 30.0:
            raise ValueError(f"rotation {self.rotation} outside [-30, 30]")

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.scale == 1.0 and self.rotation == 0.0


def sample_augment(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.75, 1.25)),
        rotation=float(rng.uniform(-30.0, 30.0)),
    )


def apply_augment(
    frame: np.ndarray,
    mask: np.ndarray,
    params: AugmentParams,
    out_size: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one flip/scale/rotation about the image centre to a frame and its mask.

    Scaling up crops to the centre, scaling down reflect-pads. The result is
    resized to ``out_size`` x ``out_size`` when given.
    """
    if frame.shape[:2] != mask.shape:
        raise ValueError("frame and mask sizes differ")
    frame = np.asarray(frame, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if params.hflip:
        frame = frame[:, ::-1]
        mask = mask[:, ::-1]
    h, w = mask.shape
    if params.scale != 1.0 or params.rotation != 0.0:
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.rotation, params.scale)
        frame = cv2.warpAffine(
            np.ascontiguousarray(frame), matrix, (w, h),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101,
        )
        mask = cv2.warpAffine(
            np.ascontiguousarray(mask), matrix, (w, h),
            flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REFLECT_101,
        )
    if out_size is not None and (h, w) != (out_size, out_size):
        frame = cv2.resize(np.ascontiguousarray(frame), (out_size, out_size), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(np.ascontiguousarray(mask), (out_size, out_size), interpolation=cv2.INTER_NEAREST)
    frame = np.clip(frame, 0.0, 1.0).astype(np.float32)
    mask = (mask >= 0.5).astype(np.float32)
    return np.ascontiguousarray(frame), np.ascontiguousarray(mask)
