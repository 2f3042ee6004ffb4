"""Glue between the coarse and fine stages: centres, ROI stacks and full-image predictions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch.nn as nn

from .data_core import (
    DatasetManifest,
    MultiSequenceSlice,
    PatientEntry,
    embed_roi,
    extract_roi,
    save_manifest,
    save_volume,
    shifted_bbox_augment,
)
from .evaluation import DetectionRecord, detection_record
from .prior import PriorConfig, _center, prior_filter, side_components
from .trainer import localization_target, predict

ROI_SIZE = (64, 64)
SIDES = ("L", "R")


def side_centers(binary: np.ndarray) -> tuple[Optional[tuple[float, float]], Optional[tuple[float, float]]]:
    """Area-weighted centre of all foreground on each image half (None when a half is empty)."""
    (_, left), (_, right) = side_components(np.asarray(binary, dtype=bool))
    return _center(left), _center(right)


def gt_centers(labels: np.ndarray):
    return side_centers(localization_target(labels) > 0)


def predicted_centers(prob_map: np.ndarray, cfg: PriorConfig = PriorConfig(), use_filter: bool = True):
    if use_filter:
        res = prior_filter(prob_map, cfg)
        return res.left_center, res.right_center
    return side_centers(np.asarray(prob_map) >= cfg.binarize_threshold)


def round_center(center) -> Optional[tuple[int, int]]:
    if center is None:
        return None
    return int(round(center[0])), int(round(center[1]))


def localize(
    model: nn.Module,
    images: np.ndarray,
    cfg: PriorConfig = PriorConfig(),
    use_filter: bool = True,
    batch_size: int = 8,
):
    """Coarse probability maps (N x H x W) and rounded (left, right) centres per slice."""
    probs = predict(model, images, batch_size)[:, 0]
    centers = [tuple(round_center(c) for c in predicted_centers(p, cfg, use_filter)) for p in probs]
    return probs, centers


def detection_records(
    ids: Sequence[str], centers, labels: Sequence[np.ndarray], roi_size=ROI_SIZE
) -> list[DetectionRecord]:
    return [
        detection_record(i, lc, rc, localization_target(lab) > 0, roi_size)
        for i, (lc, rc), lab in zip(ids, centers, labels)
    ]


@dataclass
class SideROI:
    patient_id: str
    slice_index: int
    side: str
    center: tuple[int, int]
    roi: MultiSequenceSlice

    @property
    def key(self) -> str:
        return f"{self.patient_id}_{self.side}"


def crop_sides(
    sl: MultiSequenceSlice,
    centers,
    size=ROI_SIZE,
    max_shift: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> list[SideROI]:
    """One ROI per detected side; ``max_shift`` > 0 jitters the crop centre (training augmentation)."""
    out = []
    for side, c in zip(SIDES, centers):
        if c is None:
            continue
        c = round_center(c)
        roi = shifted_bbox_augment(sl, c, size, max_shift, rng) if max_shift > 0 else extract_roi(sl, c, size)
        out.append(SideROI(sl.patient_id, sl.slice_index, side, c, roi))
    return out


def write_roi_manifest(
    rois: Sequence[SideROI],
    out_dir: str | Path,
    sequence_names: Sequence[str],
    class_scheme: str = "multiclass",
    ext: str = ".nii",
) -> DatasetManifest:
    """Stack ROIs per (patient, side) into volumes and describe them in a manifest.

    Entries are named ``<patient>_<side>`` and grouped by patient so that splits never
    separate the two sides of one patient.  ``slice_map`` maps ROI slice k back to the
    source slice index.
    """
    out_dir = Path(out_dir)
    by_key: dict[str, list[SideROI]] = {}
    for r in rois:
        by_key.setdefault(r.key, []).append(r)
    entries = []
    for key in sorted(by_key):
        group = sorted(by_key[key], key=lambda r: r.slice_index)
        imgs = np.stack([r.roi.images for r in group], axis=-1)  # m x h x w x K
        vols = {}
        for j, seq in enumerate(sequence_names):
            rel = f"{key}/{seq}{ext}"
            save_volume(imgs[j], out_dir / rel)
            vols[seq] = rel
        labeled = [k for k, r in enumerate(group) if r.roi.mask is not None]
        mask_rel = None
        if labeled:
            labels = np.zeros(imgs.shape[1:], dtype=np.float32)
            for k in labeled:
                labels[..., k] = group[k].roi.mask.labels()
            mask_rel = f"{key}/mask{ext}"
            save_volume(labels, out_dir / mask_rel)
        entries.append(
            PatientEntry(key, vols, labeled, mask_rel, group=group[0].patient_id, slice_map=[r.slice_index for r in group])
        )
    manifest = DatasetManifest(entries, list(sequence_names), class_scheme, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def segment_slice(
    seg_model: nn.Module,
    sl: MultiSequenceSlice,
    centers,
    size=ROI_SIZE,
) -> np.ndarray:
    """Full-size label map: fine predictions pasted back at each side's ROI (background elsewhere)."""
    H, W = sl.shape
    canvas = np.zeros((H, W), dtype=np.int64)
    rois = crop_sides(MultiSequenceSlice(sl.images, None, sl.patient_id, sl.slice_index), centers, size)
    if not rois:
        return canvas
    probs = predict(seg_model, np.stack([r.roi.images for r in rois]))
    for r, p in zip(rois, probs):
        lab = (p[0] >= 0.5).astype(np.int64) if p.shape[0] == 1 else p.argmax(axis=0)
        # only paste foreground so overlapping ROIs never erase each other's vessel
        patch = embed_roi(lab, np.zeros_like(canvas), r.center)
        canvas = np.where(patch > 0, patch, canvas)
    return canvas
