"""Test-time mask propagation with the regressor alone (one previous frame, no critics)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Union

import cv2
import numpy as np
import torch

from .core import MaskTrack, ReferenceSegmentation, VideoSequence, first_reference, make_reference
from .data import save_label_map, to_uint8
from .regressor import Regressor, RegressorSpec, SkipState, SizeError
from .trainer import load_checkpoint


class MissingWeightsError(KeyError):
    pass


def _to_tensor_image(frame: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32)).permute(2, 0, 1)[None]


def _to_tensor_mask(mask: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]


@dataclass
class ObjectState:
    reference: ReferenceSegmentation
    ref_feat: torch.Tensor
    prev_mask: torch.Tensor
    skip: SkipState = None
    active: bool = False


@dataclass
class InferenceSession:
    model: Regressor
    image_size: int
    objects: List[ObjectState]
    t: int = 0
    frame_ms: List[float] = field(default_factory=list)

    @property
    def object_ids(self) -> List[str]:
        return [o.reference.object_id for o in self.objects]


def load_regressor(checkpoint: Mapping) -> Regressor:
    """Build the regressor from a checkpoint mapping, reading only its regressor entries."""
    try:
        spec = RegressorSpec.from_dict(checkpoint["regressor_spec"])
        weights = checkpoint["regressor"]
    except KeyError as exc:
        raise MissingWeightsError(f"checkpoint lacks regressor entry {exc}") from None
    model = Regressor(spec)
    model.load_state_dict(weights)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def init_session(
    checkpoint: Union[str, Path, Mapping, Regressor],
    references: Sequence[ReferenceSegmentation],
) -> InferenceSession:
    if not references:
        raise ValueError("need at least one reference segmentation")
    if isinstance(checkpoint, Regressor):
        model = checkpoint.eval()
    else:
        if isinstance(checkpoint, (str, Path)):
            checkpoint = load_checkpoint(checkpoint)
        model = load_regressor(checkpoint)
    size = model.spec.base_image_size
    objects = []
    for ref in references:
        if ref.mask.shape != (size, size):
            raise SizeError(f"reference {ref.object_id} is {ref.mask.shape}, model expects {size}x{size}")
        ref_frame, ref_mask = _to_tensor_image(ref.frame), _to_tensor_mask(ref.mask)
        with torch.no_grad():
            ref_feat = model.encode_reference(ref_frame, ref_mask)
        objects.append(ObjectState(reference=ref, ref_feat=ref_feat, prev_mask=ref_mask))
    return InferenceSession(model=model, image_size=size, objects=objects)


def step(session: InferenceSession, frame: np.ndarray) -> List[np.ndarray]:
    """Propagate every object one frame; objects before their reference frame emit zeros."""
    size = session.image_size
    if frame.shape[:2] != (size, size):
        raise SizeError(f"frame is {frame.shape[:2]}, model expects {size}x{size}")
    x = _to_tensor_image(frame)
    out = []
    start = time.perf_counter()
    with torch.no_grad():
        for obj in session.objects:
            if not obj.active and session.t >= obj.reference.frame_index:
                obj.active = True
            if not obj.active:
                out.append(np.zeros((size, size), dtype=np.float32))
                continue
            pred, obj.skip = session.model(x, None, None, obj.prev_mask, obj.skip, ref_feat=obj.ref_feat)
            obj.prev_mask = pred
            out.append(pred[0, 0].numpy().copy())
    session.frame_ms.append((time.perf_counter() - start) * 1000.0)
    session.t += 1
    return out


def merge_objects(per_object: Sequence[np.ndarray], bg_threshold: float = 0.5) -> np.ndarray:
    """Label map with 1-based object indices; 0 where no object reaches ``bg_threshold``."""
    probs = np.stack(per_object)
    best = np.argmax(probs, axis=0)  # first maximum wins ties
    peak = np.take_along_axis(probs, best[None], axis=0)[0]
    return np.where(peak >= bg_threshold, best + 1, 0).astype(np.uint8)


class SegmentationResult(NamedTuple):
    tracks: Dict[str, MaskTrack]
    label_maps: List[np.ndarray]
    timing: dict


def _resize(img, size, interp):
    if img.shape[0] == size[0] and img.shape[1] == size[1]:
        return img
    return cv2.resize(img, (size[1], size[0]), interpolation=interp)


def build_references(video: VideoSequence, ref_frame: Union[str, int] = "first") -> List[ReferenceSegmentation]:
    if ref_frame == "first":
        return [first_reference(video, oid) for oid in video.object_ids]
    refs = []
    for oid in video.object_ids:
        if np.any(video.gt_tracks[oid][int(ref_frame)]):
            refs.append(make_reference(video, oid, int(ref_frame)))
    if not refs:
        raise ValueError(f"no object is visible in frame {ref_frame}")
    return refs


def _object_labels(object_ids: Sequence[str]) -> List[int]:
    if all(str(o).isdigit() and 0 < int(o) < 256 for o in object_ids):
        return [int(o) for o in object_ids]
    return list(range(1, len(object_ids) + 1))


def segment_sequence(
    checkpoint,
    video: VideoSequence,
    references: Optional[Sequence[ReferenceSegmentation]] = None,
    bg_threshold: float = 0.5,
) -> SegmentationResult:
    """Propagate reference masks through a whole clip.

    Frames are resized to the model resolution and masks resized back with
    nearest-neighbour interpolation. Label maps use the numeric object ids
    when every id is numeric, otherwise 1-based reference order.
    """
    references = list(references) if references is not None else build_references(video)
    native = video.size
    model = checkpoint if isinstance(checkpoint, Regressor) else None
    if model is None:
        payload = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
        model = load_regressor(payload)
    size = (model.spec.base_image_size,) * 2
    scaled = [
        ReferenceSegmentation(
            frame=_resize(r.frame, size, cv2.INTER_LINEAR),
            mask=_resize(np.asarray(r.mask, np.float32), size, cv2.INTER_NEAREST),
            frame_index=r.frame_index,
            object_id=r.object_id,
        )
        for r in references
    ]
    session = init_session(model, scaled)
    ids = session.object_ids
    labels = np.array([0] + _object_labels(ids), dtype=np.uint8)
    soft: Dict[str, List[np.ndarray]] = {oid: [] for oid in ids}
    label_maps = []
    start = time.perf_counter()
    for frame in video.frames:
        masks = step(session, _resize(frame, size, cv2.INTER_LINEAR))
        masks = [_resize(m, native, cv2.INTER_NEAREST) for m in masks]
        for oid, m in zip(ids, masks):
            soft[oid].append(m)
        label_maps.append(labels[merge_objects(masks, bg_threshold)])
    elapsed = time.perf_counter() - start
    timing = {
        "sequence": video.name,
        "frames": video.num_frames,
        "objects": len(ids),
        "fps": video.num_frames / elapsed if elapsed > 0 else float("inf"),
        "per_frame_ms": session.frame_ms,
    }
    tracks = {oid: MaskTrack(soft_masks=soft[oid], object_id=oid) for oid in ids}
    return SegmentationResult(tracks, label_maps, timing)


def write_results(result: SegmentationResult, name: str, out_dir, soft_masks: bool = False) -> None:
    out_dir = Path(out_dir)
    ann = out_dir / "Annotations" / name
    ann.mkdir(parents=True, exist_ok=True)
    for t, labels in enumerate(result.label_maps):
        save_label_map(labels, ann / f"{t:05d}.png")
    if soft_masks:
        for oid, track in result.tracks.items():
            d = out_dir / "SoftMasks" / name / str(oid)
            d.mkdir(parents=True, exist_ok=True)
            for t, m in enumerate(track.soft_masks):
                cv2.imwrite(str(d / f"{t:05d}.png"), to_uint8(m))
    timing_dir = out_dir / "timing"
    timing_dir.mkdir(parents=True, exist_ok=True)
    (timing_dir / f"{name}.json").write_text(json.dumps(result.timing, indent=2))
