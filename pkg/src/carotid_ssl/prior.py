"""Anatomical prior for carotid localization.

Two constraints per slice: each image half holds one or two vessel components, and
the left and right vessel centres sit on roughly the same row.  Centres of a side
are area-weighted means of its component centroids (equivalently, the centroid of
all foreground pixels on that side).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class PriorConfig:
    max_row_diff: float = 20.0
    min_components_per_side: int = 1
    max_components_per_side: int = 2
    binarize_threshold: float = 0.5
    omega: float = 0.1

    def __post_init__(self):
        if self.max_row_diff <= 0 or not 0 < self.binarize_threshold < 1:
            raise ValueError("max_row_diff and binarize_threshold must be positive (threshold below 1)")
        if not 0 <= self.min_components_per_side <= self.max_components_per_side:
            raise ValueError("component bounds must satisfy 0 <= min <= max")


@dataclass
class Component:
    label: int
    area: int
    centroid: tuple[float, float]  # (row, col) in full-image coordinates


@dataclass
class PriorReport:
    left_components: int
    right_components: int
    left_centers: list[tuple[float, float]]
    right_centers: list[tuple[float, float]]
    symmetry_deviation: Optional[float]
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_line(self) -> str:
        dev = "nan" if self.symmetry_deviation is None else f"{self.symmetry_deviation:.3f}"
        return (
            f"left={self.left_components} right={self.right_components} dev={dev} "
            f"violations={','.join(self.violations) or '-'}"
        )


def connected_components(binary_mask: np.ndarray, col_offset: int = 0) -> tuple[np.ndarray, list[Component]]:
    """8-connected labelling; components come back sorted by area (largest first)."""
    mask = np.asarray(binary_mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    comps = []
    if n:
        idx = np.arange(1, n + 1)
        areas = ndimage.sum_labels(mask, labels, idx)
        cents = ndimage.center_of_mass(mask, labels, idx)
        for lab, a, (r, c) in zip(idx, areas, cents):
            comps.append(Component(int(lab), int(a), (float(r), float(c) + col_offset)))
    comps.sort(key=lambda c: (-c.area, c.label))
    return labels, comps


def split_sides(width: int) -> int:
    return width // 2


def side_components(binary: np.ndarray):
    mid = split_sides(binary.shape[-1])
    left_labels, left = connected_components(binary[:, :mid])
    right_labels, right = connected_components(binary[:, mid:], col_offset=mid)
    return (left_labels, left), (right_labels, right)


def _center(comps: list[Component]) -> Optional[tuple[float, float]]:
    total = sum(c.area for c in comps)
    if total == 0:
        return None
    r = sum(c.area * c.centroid[0] for c in comps) / total
    c_ = sum(c.area * c.centroid[1] for c in comps) / total
    return (r, c_)


def evaluate_prior(prob_map: np.ndarray, cfg: PriorConfig = PriorConfig()) -> PriorReport:
    binary = np.asarray(prob_map) >= cfg.binarize_threshold
    (_, left), (_, right) = side_components(binary)
    violations = []
    for name, comps in (("left", left), ("right", right)):
        if len(comps) < cfg.min_components_per_side:
            violations.append(f"{name} count < {cfg.min_components_per_side}")
        if len(comps) > cfg.max_components_per_side:
            violations.append(f"{name} count > {cfg.max_components_per_side}")
    lc, rc = _center(left), _center(right)
    deviation = None
    if lc is not None and rc is not None:
        deviation = abs(lc[0] - rc[0])
        if deviation > cfg.max_row_diff:
            violations.append("symmetry")
    return PriorReport(
        len(left), len(right), [c.centroid for c in left], [c.centroid for c in right], deviation, violations
    )


# ---------------------------------------------------------------- loss

def soft_center_rows(prob: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Probability-weighted mean row of each half of ``prob`` (H x W).  Returns rows and masses."""
    H, W = prob.shape[-2:]
    mid = split_sides(W)
    rows = torch.arange(H, dtype=prob.dtype).unsqueeze(1)
    left, right = prob[:, :mid], prob[:, mid:]
    ml, mr = left.sum(), right.sum()
    rl = (rows * left).sum() / ml.clamp_min(1e-12)
    rr = (rows * right).sum() / mr.clamp_min(1e-12)
    return rl, rr, ml, mr


def symmetry_term(prob: torch.Tensor, cfg: PriorConfig = PriorConfig()) -> torch.Tensor:
    """hinge(|r_left - r_right| - max_row_diff) / H on soft centroids; zero if a side is empty."""
    H = prob.shape[-2]
    rl, rr, ml, mr = soft_center_rows(prob)
    if ml <= 0 or mr <= 0:
        return prob.sum() * 0.0
    return torch.relu(torch.abs(rl - rr) - cfg.max_row_diff) / H


def count_term(prob: np.ndarray | torch.Tensor, cfg: PriorConfig = PriorConfig()) -> float:
    if isinstance(prob, torch.Tensor):
        prob = prob.detach().cpu().numpy()
    binary = np.asarray(prob) >= cfg.binarize_threshold
    (_, left), (_, right) = side_components(binary)
    pen = 0.0
    for comps in (left, right):
        n = len(comps)
        pen += max(n - cfg.max_components_per_side, 0) + max(cfg.min_components_per_side - n, 0)
    return float(pen)


def prior_loss(prob_map: torch.Tensor, cfg: PriorConfig = PriorConfig()) -> torch.Tensor:
    """Symmetry hinge (differentiable) plus the component-count penalty (constant w.r.t. the map).

    Accepts ``H x W`` or any batch ``... x H x W`` (mean over maps).
    """
    maps = prob_map.reshape(-1, *prob_map.shape[-2:])
    total = []
    for m in maps:
        total.append(symmetry_term(m, cfg) + count_term(m, cfg))
    return torch.stack(total).mean()


# ---------------------------------------------------------------- inference filter

@dataclass
class FilterResult:
    mask: np.ndarray  # H x W bool
    left_center: Optional[tuple[float, float]]
    right_center: Optional[tuple[float, float]]

    @property
    def left_detected(self) -> bool:
        return self.left_center is not None

    @property
    def right_detected(self) -> bool:
        return self.right_center is not None


def _subsets(comps: list[Component], k: int):
    out = [()]
    for size in range(1, k + 1):
        out.extend(itertools.combinations(comps, size))
    return out


def _feasible(sub_l, sub_r, limit) -> bool:
    cl, cr = _center(list(sub_l)), _center(list(sub_r))
    if cl is None or cr is None:
        return False
    if abs(cl[0] - cr[0]) > limit:
        return False
    return all(abs(c.centroid[0] - cr[0]) <= limit for c in sub_l) and all(
        abs(c.centroid[0] - cl[0]) <= limit for c in sub_r
    )


def prior_filter(prob_map: np.ndarray, cfg: PriorConfig = PriorConfig(), max_candidates: int = 4) -> FilterResult:
    """Keep at most ``max_components_per_side`` components per side that agree on a common row.

    Candidate sets (up to the largest ``max_candidates`` components per side) are
    searched for the pair with the largest total area in which every kept component
    lies within ``max_row_diff`` rows of the other side's centre.  If no pair
    qualifies, the largest components are kept (ties broken toward the other side's
    row).  A side with nothing left is reported as a failed detection.
    """
    binary = np.asarray(prob_map) >= cfg.binarize_threshold
    (ll, left), (rl, right) = side_components(binary)
    mid = split_sides(binary.shape[-1])
    k = cfg.max_components_per_side

    ref_r = right[0].centroid[0] if right else None
    ref_l = left[0].centroid[0] if left else None

    def order(comps, ref):
        if ref is None:
            return comps
        return sorted(comps, key=lambda c: (-c.area, abs(c.centroid[0] - ref), c.label))

    left = order(left, ref_r)
    right = order(right, ref_l)
    cand_l, cand_r = left[:max_candidates], right[:max_candidates]

    best = None
    for sub_l in _subsets(cand_l, k):
        for sub_r in _subsets(cand_r, k):
            if not _feasible(sub_l, sub_r, cfg.max_row_diff):
                continue
            area = sum(c.area for c in sub_l) + sum(c.area for c in sub_r)
            dev = abs(_center(list(sub_l))[0] - _center(list(sub_r))[0])
            key = (area, -dev)
            if best is None or key > best[0]:
                best = (key, sub_l, sub_r)
    if best is not None:
        keep_l, keep_r = list(best[1]), list(best[2])
    else:
        keep_l, keep_r = left[:k], right[:k]

    out = np.zeros_like(binary)
    out[:, :mid] = np.isin(ll, [c.label for c in keep_l]) & (ll > 0)
    out[:, mid:] = np.isin(rl, [c.label for c in keep_r]) & (rl > 0)
    return FilterResult(out, _center(keep_l), _center(keep_r))
