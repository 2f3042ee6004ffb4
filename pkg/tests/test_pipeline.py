import numpy as np
import pytest
import torch
import torch.nn as nn

from carotid_ssl.data_core import MultiSequenceSlice, SegmentationMask, load_manifest, load_slices
from carotid_ssl.pipeline import (
    crop_sides,
    detection_records,
    gt_centers,
    localize,
    predicted_centers,
    round_center,
    segment_slice,
    side_centers,
    write_roi_manifest,
)
from carotid_ssl.synth import PhantomSpec, generate_patient


def phantom_slices(n_slices=3, size=128, seed=0):
    images, labels, _ = generate_patient(PhantomSpec(image_size=(size, size), slices_per_patient=n_slices, seed=seed), 0)
    return [
        MultiSequenceSlice(images[..., k], SegmentationMask.from_labels(labels[..., k]), "P000", k)
        for k in range(n_slices)
    ], labels


class Oracle(nn.Module):
    """Returns fixed logits, whatever the input."""

    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", torch.as_tensor(logits, dtype=torch.float32))
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.logits[: x.shape[0]] + 0 * self.w


def test_side_centers():
    m = np.zeros((20, 20), bool)
    m[4:7, 2:5] = True
    m[10:12, 14:16] = True
    assert side_centers(m) == ((5.0, 3.0), (10.5, 14.5))
    assert side_centers(np.zeros((8, 8))) == (None, None)
    assert round_center((10.5, 3.49)) == (10, 3) and round_center(None) is None


def test_gt_rois_two_per_slice_and_contain_vessels():
    slices, labels = phantom_slices()
    for s in slices:
        centers = gt_centers(s.mask.labels())
        rois = crop_sides(s, centers)
        assert [r.side for r in rois] == ["L", "R"]
        for r in rois:
            assert r.roi.images.shape == (5, 64, 64)
            assert r.roi.mask.labels().any()
    recs = detection_records(["a", "b", "c"], [tuple(round_center(c) for c in gt_centers(labels[..., k])) for k in range(3)], [labels[..., k] for k in range(3)])
    assert all(r.detected for r in recs)


def test_crop_sides_skips_missing_and_jitters():
    slices, _ = phantom_slices(1)
    s = slices[0]
    assert [r.side for r in crop_sides(s, (None, (60, 90)))] == ["R"]
    a = crop_sides(s, ((60, 40), (60, 90)), max_shift=3, rng=np.random.default_rng(1))
    b = crop_sides(s, ((60, 40), (60, 90)), max_shift=3, rng=np.random.default_rng(1))
    assert all(np.array_equal(x.roi.images, y.roi.images) for x, y in zip(a, b))


def test_localize_with_oracle_probability_map():
    slices, labels = phantom_slices(2)
    target = np.stack([(labels[..., k] > 0) for k in range(2)]).astype(np.float32)
    logits = np.where(target > 0, 20.0, -20.0)[:, None]
    # a distractor blob far from the vessel row on the left
    logits[:, 0, 5:9, 10:14] = 20.0
    imgs = np.stack([s.images for s in slices]).astype(np.float32)
    probs, centers = localize(Oracle(logits), imgs, use_filter=True)
    assert probs.shape == (2, 128, 128)
    filtered = detection_records(["0", "1"], centers, [labels[..., k] for k in range(2)])
    assert all(r.detected for r in filtered)
    _, raw = localize(Oracle(logits), imgs, use_filter=False)
    assert raw[0][0] != centers[0][0]


def test_predicted_centers_modes():
    m = np.zeros((64, 64))
    m[30:34, 10:14] = 1
    m[31:35, 50:54] = 1
    assert predicted_centers(m, use_filter=True) == predicted_centers(m, use_filter=False)


def test_write_roi_manifest_round_trip(tmp_path):
    slices, _ = phantom_slices(3)
    slices[1] = MultiSequenceSlice(slices[1].images, None, "P000", 1)
    rois = [r for s in slices for r in crop_sides(s, gt_centers(generate_patient(PhantomSpec(image_size=(128, 128), slices_per_patient=3), 0)[1][..., s.slice_index]))]
    m = write_roi_manifest(rois, tmp_path, ["PDw", "T1w", "T1ce", "T2w", "TOF"])
    assert [p.id for p in m.patients] == ["P000_L", "P000_R"]
    assert all(p.group == "P000" and p.slice_map == [0, 1, 2] and p.labeled_slices == [0, 2] for p in m.patients)
    again = load_manifest(tmp_path / "manifest.json")
    assert again == m
    loaded = load_slices(again)
    assert len(loaded) == 6 and all(s.images.shape == (5, 64, 64) for s in loaded)
    assert sum(s.mask is not None for s in loaded) == 4


def test_segment_slice_pastes_back():
    slices, labels = phantom_slices(1)
    s = slices[0]
    centers = tuple(round_center(c) for c in gt_centers(labels[..., 0]))
    rois = crop_sides(s, centers)
    # oracle segmenter: returns the GT of each ROI in order
    gt_logits = np.stack([20.0 * r.roi.mask.data for r in rois])
    out = segment_slice(Oracle(gt_logits), s, centers)
    assert np.array_equal(out, labels[..., 0])
    assert segment_slice(Oracle(gt_logits), s, (None, None)).sum() == 0
