"""DAVIS-style evaluation: region similarity J, contour accuracy F, recall and decay."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .data import LayoutError, list_sequences, load_label_map

_CROSS = ndimage.generate_binary_structure(2, 1)
CSV_COLUMNS = ["sequence", "object", "J_mean", "J_recall", "J_decay",
               "F_mean", "F_recall", "F_decay", "JF_mean"]


class LayoutMismatchError(LayoutError):
    pass


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return np.asarray(pred) > 0, np.asarray(gt) > 0


def region_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; pixels outside the image count as background."""
    mask = np.asarray(mask) > 0
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def _matched_fraction(src: np.ndarray, dst: np.ndarray, tol: float) -> float:
    """Fraction of ``src`` boundary pixels within Euclidean distance ``tol`` of a ``dst`` boundary pixel."""
    n = np.count_nonzero(src)
    if not np.any(dst):
        return 0.0
    if math.isinf(tol):
        return 1.0
    dist = ndimage.distance_transform_edt(~dst)
    return np.count_nonzero(src & (dist <= tol)) / n


def contour_accuracy(pred: np.ndarray, gt: np.ndarray, tol_px: Optional[float] = None) -> float:
    pred, gt = _check(pred, gt)
    tol = default_tolerance(gt.shape) if tol_px is None else tol_px
    pb, gb = boundary(pred), boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any():
        precision, recall = 1.0, 0.0
    elif not gb.any():
        precision, recall = 0.0, 1.0
    else:
        precision = _matched_fraction(pb, gb, tol)
        recall = _matched_fraction(gb, pb, tol)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def decay(values) -> float:
    """Mean of the first temporal quartile minus mean of the last."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 4:
        raise ValueError(f"decay needs at least 4 frames, got {len(values)}")
    # centring first makes a constant sequence decay to exactly zero
    bins = np.array_split(values - values[0], 4)
    return float(bins[0].mean() - bins[-1].mean())


def recall(values, threshold: float = 0.5) -> float:
    return float(np.mean(np.asarray(values) > threshold))


@dataclass
class ObjectScores:
    sequence: str
    object_id: str
    J: np.ndarray
    F: np.ndarray

    def summary(self) -> Dict[str, float]:
        j_mean, f_mean = float(np.mean(self.J)), float(np.mean(self.F))
        return {
            "J_mean": j_mean,
            "J_recall": recall(self.J),
            "J_decay": decay(self.J) if len(self.J) >= 4 else float("nan"),
            "F_mean": f_mean,
            "F_recall": recall(self.F),
            "F_decay": decay(self.F) if len(self.F) >= 4 else float("nan"),
            "JF_mean": (j_mean + f_mean) / 2.0,
        }


@dataclass
class EvalReport:
    objects: List[ObjectScores] = field(default_factory=list)

    def aggregate(self) -> Dict[str, float]:
        rows = [o.summary() for o in self.objects]
        if not rows:
            return {k: float("nan") for k in CSV_COLUMNS[2:]}
        agg = {k: float(np.mean([r[k] for r in rows])) for k in CSV_COLUMNS[2:]}
        agg["JF_mean"] = (agg["J_mean"] + agg["F_mean"]) / 2.0
        return agg

    @property
    def jf_mean(self) -> float:
        return self.aggregate()["JF_mean"]

    @property
    def j_mean(self) -> float:
        return self.aggregate()["J_mean"]

    def rows(self) -> List[dict]:
        out = [{"sequence": o.sequence, "object": o.object_id, **o.summary()} for o in self.objects]
        out.append({"sequence": "ALL", "object": "ALL", **self.aggregate()})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def _load_labels(root: Path, name: str) -> List[np.ndarray]:
    d = root / "Annotations" / name
    paths = sorted(d.glob("*.png"))
    if not paths:
        raise LayoutError(f"no annotations for {name!r} under {root}")
    return [load_label_map(p) for p in paths]


def evaluate_sequence(name: str, pred_labels, gt_labels, include_first: bool = False,
                      tol_px: Optional[float] = None) -> List[ObjectScores]:
    if len(pred_labels) != len(gt_labels):
        raise LayoutMismatchError(
            f"{name}: {len(pred_labels)} predicted frames vs {len(gt_labels)} ground-truth frames"
        )
    start = 0 if include_first else 1
    ids = sorted(set(np.unique(np.stack(gt_labels)).tolist()) - {0})
    scores = []
    for k in ids:
        js, fs = [], []
        for pred, gt in zip(pred_labels[start:], gt_labels[start:]):
            if pred.shape != gt.shape:
                raise LayoutMismatchError(f"{name}: prediction size {pred.shape} != {gt.shape}")
            js.append(region_similarity(pred == k, gt == k))
            fs.append(contour_accuracy(pred == k, gt == k, tol_px))
        scores.append(ObjectScores(name, str(k), np.array(js), np.array(fs)))
    return scores


def evaluate(pred_dir, gt_dir, include_first: bool = False, tol_px: Optional[float] = None) -> EvalReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_names = list_sequences(gt_dir)
    pred_names = list_sequences(pred_dir) if (pred_dir / "Annotations").is_dir() else []
    missing = sorted(set(gt_names) - set(pred_names))
    extra = sorted(set(pred_names) - set(gt_names))
    if missing or extra:
        raise LayoutMismatchError(f"sequence sets differ; missing: {missing}, unexpected: {extra}")
    report = EvalReport()
    for name in gt_names:
        report.objects.extend(
            evaluate_sequence(name, _load_labels(pred_dir, name), _load_labels(gt_dir, name),
                              include_first, tol_px)
        )
    return report
