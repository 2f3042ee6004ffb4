"""Supervised and consistency losses, ramp-up and uncertainty schedules.

Probability tensors are channel-first.  Functions that need a class axis take
``(N, C, H, W)`` or ``(C, H, W)``; the class axis is always ``-3``.  All losses are
differentiable torch expressions and work in float64 for gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


@dataclass
class LossConfig:
    lambda_loc: float = 0.5
    delta_loc: float = 0.7
    lambda_seg: float = 0.5
    delta_seg: float = 0.6
    vartheta: float = 0.25
    rampup_R: int = 40
    rampup_k: float = 20.0
    omega: float = 0.1
    eps: float = 1e-7

    def __post_init__(self):
        for name in ("lambda_loc", "delta_loc", "lambda_seg", "delta_seg", "vartheta", "omega"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.rampup_R <= 0:
            raise ValueError("rampup_R must be > 0")

    @classmethod
    def localization(cls, **kw) -> "LossConfig":
        return cls(**{"rampup_R": 60, "rampup_k": 10.0, **kw})

    @classmethod
    def segmentation(cls, **kw) -> "LossConfig":
        return cls(**{"rampup_R": 40, "rampup_k": 20.0, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedules

def rampup_weight(t: float, R: float, k: float) -> float:
    """k * exp(-5 (1 - min(t, R)/R)^2)."""
    if R <= 0:
        raise ValueError("ramp-up length must be positive")
    x = 1.0 - min(max(t, 0.0), R) / R
    return k * math.exp(-5.0 * x * x)


def uncertainty_threshold(t: float, R: float, k: float) -> float:
    """ln 2 * (3/4 + ramp/4) with the ramp divided by k, so it rises from 0.75 ln 2 to ln 2."""
    ramp = rampup_weight(t, R, k) / k if k else rampup_weight(t, R, 1.0)
    return math.log(2.0) * (0.75 + 0.25 * ramp)


# ---------------------------------------------------------------- supervised terms

def modified_tversky_index(p: torch.Tensor, g: torch.Tensor, delta: float, eps: float = 1e-7) -> torch.Tensor:
    """TP / (TP + delta*FN + (1-delta)*FP) with soft counts summed over every element."""
    tp = (g * p).sum()
    fn = (g * (1 - p)).sum()
    fp = ((1 - g) * p).sum()
    return tp / (tp + delta * fn + (1 - delta) * fp).clamp_min(eps)


def per_class_tversky(p: torch.Tensor, g: torch.Tensor, delta: float, eps: float = 1e-7) -> torch.Tensor:
    """mTI for each class (axis -3), pooling all pixels and batch items."""
    dims = [d for d in range(p.ndim) if d != p.ndim - 3]
    tp = (g * p).sum(dim=dims)
    fn = (g * (1 - p)).sum(dim=dims)
    fp = ((1 - g) * p).sum(dim=dims)
    return tp / (tp + delta * fn + (1 - delta) * fp).clamp_min(eps)


def bce(p: torch.Tensor, g: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = p.clamp(eps, 1 - eps)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def loc_supervised_loss(p: torch.Tensor, g: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    tversky = 1 - modified_tversky_index(p, g, cfg.delta_loc, cfg.eps)
    return cfg.lambda_loc * tversky + (1 - cfg.lambda_loc) * bce(p, g, cfg.eps)


def _check_classes(p: torch.Tensor):
    if p.ndim < 3 or p.shape[-3] < 2:
        raise ValueError("asymmetric losses need a class axis with at least 2 classes (background first)")


def asym_focal(p: torch.Tensor, g: torch.Tensor, delta: float, vartheta: float, eps: float = 1e-7) -> torch.Tensor:
    """Cross-entropy on the rare classes plus a focally down-weighted background term.

    Class 0 is background; every other class counts as rare.  Normalized by the number
    of pixels M (batch items included).
    """
    _check_classes(p)
    pc = p.clamp(eps, 1.0)
    M = p.numel() // p.shape[-3]
    rare = (g[..., 1:, :, :] * torch.log(pc[..., 1:, :, :])).sum()
    pb = pc[..., 0, :, :]
    # clamp: d/dp (1-p)^vartheta is infinite at a saturated p = 1 and would give inf * log(1) = nan
    back = ((1 - p[..., 0, :, :]).clamp_min(eps) ** vartheta * g[..., 0, :, :] * torch.log(pb)).sum()
    return -(delta / M) * rare - ((1 - delta) / M) * back


def asym_focal_tversky(p: torch.Tensor, g: torch.Tensor, delta: float, vartheta: float, eps: float = 1e-7) -> torch.Tensor:
    """Background: 1 - mTI.  Rare classes: (1 - mTI)^(1 - vartheta).  Summed over classes."""
    _check_classes(p)
    mti = per_class_tversky(p, g, delta, eps)
    back = 1 - mti[0]
    # clamp keeps the fractional power differentiable at a perfect score
    rare = (1 - mti[1:]).clamp_min(eps) ** (1 - vartheta) if vartheta > 0 else (1 - mti[1:])
    return back + rare.sum()


def seg_supervised_loss(p: torch.Tensor, g: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    focal = asym_focal(p, g, cfg.delta_seg, cfg.vartheta, cfg.eps)
    ftv = asym_focal_tversky(p, g, cfg.delta_seg, cfg.vartheta, cfg.eps)
    return cfg.lambda_seg * focal + (1 - cfg.lambda_seg) * ftv


def two_class(p: torch.Tensor) -> torch.Tensor:
    """Expand a single-channel foreground probability to (background, foreground)."""
    if p.shape[-3] != 1:
        return p
    return torch.cat([1 - p, p], dim=-3)


# ---------------------------------------------------------------- consistency

def consistency_mse(p_student: torch.Tensor, p_teacher: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Sum of squared differences over valid entries, divided by the number of valid entries."""
    if p_student.shape != p_teacher.shape:
        raise ValueError(f"shape mismatch {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}")
    valid = valid.expand_as(p_student).to(p_student.dtype)
    total = valid.sum()
    if total <= 0:
        return p_student.sum() * 0.0
    return (valid * (p_student - p_teacher) ** 2).sum() / total


def predictive_entropy(prob_stack: torch.Tensor) -> torch.Tensor:
    """Entropy (nats) of the mean over the first axis.  ``prob_stack`` is ``T x ... x C x H x W``.

    A single-channel stack is read as foreground probability of a 2-class problem.
    """
    if prob_stack.shape[0] == 0:
        raise ValueError("need at least one forward pass")
    mean = two_class(prob_stack).mean(dim=0)
    ent = -(mean * torch.log(mean.clamp_min(1e-12))).sum(dim=-3)
    return ent.clamp_min(0.0)


def uncertainty_consistency(
    p_student: torch.Tensor,
    p_teacher: torch.Tensor,
    valid: torch.Tensor,
    uncertainty: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Consistency MSE restricted to pixels whose (warped) uncertainty is below ``tau``.

    ``uncertainty`` is per pixel (no class axis) and is broadcast over classes.
    """
    if p_student.shape != p_teacher.shape:
        raise ValueError(f"shape mismatch {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}")
    u = uncertainty.unsqueeze(-3)
    if u.shape[-2:] != p_student.shape[-2:]:
        raise ValueError("uncertainty map and predictions differ in H x W")
    weight = (u < tau).to(p_student.dtype) * valid.to(p_student.dtype)
    weight = weight.expand_as(p_student)
    total = weight.sum()
    if total <= 0:
        return p_student.sum() * 0.0
    return (weight * (p_student - p_teacher) ** 2).sum() / total
