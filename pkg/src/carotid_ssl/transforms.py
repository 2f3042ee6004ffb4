"""Replayable geometric and photometric perturbations.

A geometric perturbation is a projective map built from flip, scale, rotation,
perspective and crop (applied in that order) about the image centre.  The same
parameters are applied to the student input and to the teacher output, so sampling is
done once and replayed.  Everything works on channel-first tensors ``(..., C, H, W)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class GeometricParams:
    flip_h: bool = False
    rotation_deg: float = 0.0
    scale: float = 1.0
    crop_offset: tuple[float, float] = (0.0, 0.0)
    # (dr, dc) displacement for the corners TL, TR, BR, BL, as a fraction of image size
    perspective_coeffs: tuple[tuple[float, float], ...] = ((0.0, 0.0),) * 4

    def is_identity(self) -> bool:
        return (
            not self.flip_h
            and self.rotation_deg % 360 == 0
            and self.scale == 1.0
            and tuple(self.crop_offset) == (0.0, 0.0)
            and all(tuple(c) == (0.0, 0.0) for c in self.perspective_coeffs)
        )


@dataclass
class PhotometricParams:
    noise_std: float = 0.0
    sharpness_factor: float = 1.0
    intensity_gamma: float = 1.0
    dropout_seed: int = 0
    noise_seed: int = 0


@dataclass
class PerturbationParams:
    gamma: GeometricParams = field(default_factory=GeometricParams)
    phi: PhotometricParams = field(default_factory=PhotometricParams)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationParams":
        g = dict(d["gamma"])
        g["crop_offset"] = tuple(g["crop_offset"])
        g["perspective_coeffs"] = tuple(tuple(c) for c in g["perspective_coeffs"])
        return cls(GeometricParams(**g), PhotometricParams(**d["phi"]))


@dataclass
class PerturbationPolicy:
    """Sampling ranges; ``(lo, hi)`` pairs are inclusive uniform ranges."""

    flip: bool = True
    flip_probability: float = 0.5
    rotation: bool = True
    rotation_deg: tuple[float, float] = (-25.0, 25.0)
    scale: bool = True
    weak_scale: tuple[float, float] = (0.9, 1.1)
    strong_scale: tuple[float, float] = (0.7, 1.3)
    strong_scale_probability: float = 0.3
    crop: bool = True
    crop_px: tuple[float, float] = (-8.0, 8.0)
    perspective: bool = True
    perspective_max: float = 0.05
    noise: bool = True
    noise_std: tuple[float, float] = (0.0, 0.1)
    sharpness: bool = True
    sharpness_factor: tuple[float, float] = (0.5, 2.0)
    intensity: bool = True
    intensity_gamma: tuple[float, float] = (0.7, 1.5)

    def __post_init__(self):
        for name in ("rotation_deg", "weak_scale", "strong_scale", "crop_px", "noise_std", "sharpness_factor", "intensity_gamma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"policy range {name} has min > max")
            setattr(self, name, (float(lo), float(hi)))
        if self.perspective_max < 0:
            raise ValueError("perspective_max must be >= 0")

    @classmethod
    def photometric_only(cls, **kw) -> "PerturbationPolicy":
        return cls(flip=False, rotation=False, scale=False, crop=False, perspective=False, **kw)

    @classmethod
    def disabled(cls) -> "PerturbationPolicy":
        return cls(
            flip=False, rotation=False, scale=False, crop=False, perspective=False,
            noise=False, sharpness=False, intensity=False,
        )


def sample_perturbation(policy: PerturbationPolicy, rng: np.random.Generator) -> PerturbationParams:
    """Draw one perturbation.  The number of draws is fixed so streams stay aligned."""
    u = rng.uniform(size=12)
    seeds = rng.integers(0, 2**31 - 1, size=2)
    lerp = lambda rng_pair, x: rng_pair[0] + (rng_pair[1] - rng_pair[0]) * x  # noqa: E731

    flip = bool(policy.flip and u[0] < policy.flip_probability)
    rot = lerp(policy.rotation_deg, u[1]) if policy.rotation else 0.0
    if policy.scale:
        tier = policy.strong_scale if u[2] < policy.strong_scale_probability else policy.weak_scale
        scale = lerp(tier, u[3])
    else:
        scale = 1.0
    crop = (lerp(policy.crop_px, u[4]), lerp(policy.crop_px, u[5])) if policy.crop else (0.0, 0.0)
    if policy.perspective and policy.perspective_max > 0:
        d = rng.uniform(-policy.perspective_max, policy.perspective_max, size=(4, 2))
        persp = tuple((float(a), float(b)) for a, b in d)
    else:
        rng.uniform(size=(4, 2))
        persp = ((0.0, 0.0),) * 4
    gamma = GeometricParams(flip, float(rot), float(scale), (float(crop[0]), float(crop[1])), persp)
    phi = PhotometricParams(
        noise_std=float(lerp(policy.noise_std, u[6])) if policy.noise else 0.0,
        sharpness_factor=float(lerp(policy.sharpness_factor, u[7])) if policy.sharpness else 1.0,
        intensity_gamma=float(lerp(policy.intensity_gamma, u[8])) if policy.intensity else 1.0,
        dropout_seed=int(seeds[0]),
        noise_seed=int(seeds[1]),
    )
    return PerturbationParams(gamma, phi)


# ---------------------------------------------------------------- geometry

def _homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four ``src`` points onto ``dst`` (points as (x, y))."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def forward_matrix(gamma: GeometricParams, H: int, W: int) -> np.ndarray:
    """Homography in pixel coordinates (x=col, y=row) taking input points to output points."""
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    from_c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    flip = np.diag([-1.0 if gamma.flip_h else 1.0, 1.0, 1.0])
    scale = np.diag([gamma.scale, gamma.scale, 1.0])
    t = np.deg2rad(gamma.rotation_deg)
    c, s = np.cos(t), np.sin(t)
    # snap so multiples of 90 degrees give exact permutations
    c, s = np.round(c, 12) + 0.0, np.round(s, 12) + 0.0
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    corners = np.array([[-cx, -cy], [cx, -cy], [cx, cy], [-cx, cy]], dtype=np.float64)
    disp = np.asarray(gamma.perspective_coeffs, dtype=np.float64)  # (dr, dc) fractions
    moved = corners + np.stack([disp[:, 1] * W, disp[:, 0] * H], axis=1)
    persp = _homography_from_corners(corners, moved) if np.any(disp != 0) else np.eye(3)
    dr, dc = gamma.crop_offset
    crop = np.array([[1, 0, -dc], [0, 1, -dr], [0, 0, 1]], dtype=np.float64)
    return from_c @ crop @ persp @ rot @ scale @ flip @ to_c


def _source_coords(gamma: GeometricParams, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    inv = np.linalg.inv(forward_matrix(gamma, H, W))
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(H * W)])
    src = inv @ pts
    sx = (src[0] / src[2]).reshape(H, W)
    sy = (src[1] / src[2]).reshape(H, W)
    # remove round-off so integer-valued coordinates stay integer
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-7, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-7, np.round(sy), sy)
    return sy, sx


def apply_geometric(tensor: torch.Tensor, gamma: GeometricParams, interpolation: str = "bilinear") -> torch.Tensor:
    """Warp ``tensor[..., C, H, W]``; samples that fall outside the image read as zero."""
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError("interpolation must be 'bilinear' or 'nearest'")
    if gamma.is_identity():
        return tensor.clone()
    H, W = tensor.shape[-2:]
    sy, sx = _source_coords(gamma, H, W)
    flat = tensor.reshape(-1, H * W)
    padded = torch.cat([flat, torch.zeros_like(flat[:, :1])], dim=1)  # index H*W reads zero

    def gather(iy, ix):
        ok = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        idx = np.where(ok, iy * W + ix, H * W).astype(np.int64).ravel()
        return padded[:, torch.from_numpy(idx)]

    if interpolation == "nearest":
        out = gather(np.floor(sy + 0.5).astype(np.int64), np.floor(sx + 0.5).astype(np.int64))
    else:
        y0 = np.floor(sy).astype(np.int64)
        x0 = np.floor(sx).astype(np.int64)
        wy = torch.from_numpy((sy - y0).ravel()).to(tensor.dtype)
        wx = torch.from_numpy((sx - x0).ravel()).to(tensor.dtype)
        out = (
            gather(y0, x0) * (1 - wy) * (1 - wx)
            + gather(y0, x0 + 1) * (1 - wy) * wx
            + gather(y0 + 1, x0) * wy * (1 - wx)
            + gather(y0 + 1, x0 + 1) * wy * wx
        )
    return out.reshape(tensor.shape)


def validity_mask(gamma: GeometricParams, H: int, W: int, C: int = 1, dtype=torch.float32) -> torch.Tensor:
    """Indicator of output pixels that come from inside the image, shaped ``(C, H, W)``."""
    ones = torch.ones((C, H, W), dtype=dtype)
    return (apply_geometric(ones, gamma, "nearest") == 1).to(dtype)


def _on_lattice(gamma: GeometricParams, H: int, W: int) -> bool:
    """True when every sample lands on a pixel centre, so warping only moves values around."""
    if gamma.is_identity():
        return True
    sy, sx = _source_coords(gamma, H, W)
    return bool(np.all(sy == np.floor(sy)) and np.all(sx == np.floor(sx)))


def transform_probabilities(probs: torch.Tensor, gamma: GeometricParams) -> torch.Tensor:
    """Warp soft class maps ``(..., C, H, W)`` bilinearly and restore per-pixel normalization.

    Single-channel (sigmoid) maps are returned as warped.
    """
    out = apply_geometric(probs, gamma, "bilinear")
    if probs.shape[-3] > 1 and not _on_lattice(gamma, *probs.shape[-2:]):
        total = out.sum(dim=-3, keepdim=True)
        out = torch.where(total > 0, out / total.clamp_min(1e-12), out)
    return out


# ---------------------------------------------------------------- photometry

_SMOOTH = torch.tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


def adjust_sharpness(image: torch.Tensor, factor: float) -> torch.Tensor:
    """Blend with a smoothed copy: factor 1 is identity, <1 blurs, >1 sharpens (borders kept)."""
    if factor == 1.0:
        return image
    shape = image.shape
    H, W = shape[-2:]
    x = image.reshape(-1, 1, H, W)
    kernel = _SMOOTH.to(image.dtype).view(1, 1, 3, 3)
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel)
    blurred[..., 0, :] = x[..., 0, :]
    blurred[..., -1, :] = x[..., -1, :]
    blurred[..., :, 0] = x[..., :, 0]
    blurred[..., :, -1] = x[..., :, -1]
    return (blurred + factor * (x - blurred)).reshape(shape)


def apply_photometric(image: torch.Tensor, phi: PhotometricParams) -> torch.Tensor:
    """Intensity gamma, sharpness and additive Gaussian noise, then clip to [0, 1]."""
    out = image
    if phi.intensity_gamma != 1.0:
        out = out.clamp(0.0, 1.0) ** phi.intensity_gamma
    out = adjust_sharpness(out, phi.sharpness_factor)
    if phi.noise_std > 0:
        gen = torch.Generator().manual_seed(phi.noise_seed)
        out = out + phi.noise_std * torch.randn(out.shape, generator=gen, dtype=out.dtype)
    if out is image:
        return image.clone()
    return out.clamp(0.0, 1.0)


def perturb_input(image: torch.Tensor, params: PerturbationParams) -> torch.Tensor:
    """Student-side perturbation of an input ``(m, H, W)``: photometric, then geometric."""
    return apply_geometric(apply_photometric(image, params.phi), params.gamma, "bilinear")


def augment_labeled(
    image: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator, max_rotation: float = 15.0
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Random flip and rotation for labeled training samples (mask warped with nearest)."""
    gamma = GeometricParams(flip_h=bool(rng.uniform() < 0.5), rotation_deg=float(rng.uniform(-max_rotation, max_rotation)))
    img = apply_geometric(torch.from_numpy(np.ascontiguousarray(image)), gamma, "bilinear").numpy()
    if mask is None:
        return img, None
    m = apply_geometric(torch.from_numpy(np.ascontiguousarray(mask)), gamma, "nearest").numpy()
    if m.shape[0] > 1:
        # pixels rotated in from outside become background
        m[0] = np.where(m.sum(axis=0) == 0, 1, m[0])
    return img, m
