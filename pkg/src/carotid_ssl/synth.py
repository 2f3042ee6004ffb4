"""Synthetic "phantom neck" data: two carotid-like vessels per slice, seen through five
pseudo-sequences with different tissue contrasts.

Each vessel is a dark lumen inside a bright annular wall; some walls carry an eccentric
plaque that narrows the lumen.  Wall and plaque are only separable by combining
sequences (plaque is bright on T1w/T2w, wall is bright on PDw/T1ce, the lumen is bright
on TOF only), so fusing sequences is informative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data_core import DEFAULT_SEQUENCES, DatasetManifest, PatientEntry, save_manifest, save_volume

# tissue codes used while rendering (not label codes)
AIR, TISSUE, LUMEN, WALL, PLAQUE, DISTRACTOR_WALL, DISTRACTOR_CORE = range(7)

# mean intensity per tissue for each sequence
INTENSITY = {
    #        air   tissue lumen wall  plaque d-wall d-core
    "PDw":  (0.05, 0.40, 0.10, 0.80, 0.60, 0.80, 0.15),
    "T1w":  (0.05, 0.45, 0.10, 0.50, 0.85, 0.50, 0.12),
    "T1ce": (0.05, 0.45, 0.15, 0.70, 0.45, 0.70, 0.20),
    "T2w":  (0.05, 0.35, 0.10, 0.45, 0.90, 0.45, 0.12),
    "TOF":  (0.05, 0.30, 0.95, 0.35, 0.30, 0.35, 0.15),
}
FLOW_SEQUENCE = "TOF"


@dataclass
class PhantomSpec:
    n_patients: int = 8
    slices_per_patient: int = 8
    image_size: tuple[int, int] = (256, 256)
    plaque_probability: float = 0.5
    distractor_rate: float = 0.0
    labeled_fraction: float = 0.5
    noise_std: dict[str, float] = field(default_factory=lambda: {s: 0.03 for s in DEFAULT_SEQUENCES})
    seed: int = 0
    volume_format: str = "nii"  # "nii" or "raw"

    def __post_init__(self):
        for name in ("plaque_probability", "labeled_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.distractor_rate < 0:
            raise ValueError("distractor_rate must be >= 0")
        if self.n_patients < 0 or self.slices_per_patient <= 0 or min(self.image_size) <= 0:
            raise ValueError("sizes must be positive")
        if self.volume_format not in ("nii", "raw"):
            raise ValueError("volume_format must be 'nii' or 'raw'")


@dataclass
class VesselGeometry:
    center: tuple[float, float]
    lumen_radius: float
    wall_thickness: float
    plaque: tuple[float, float, float] | None = None  # (angle rad, blob radius, bulge)
    occluded: bool = False


def _vessel_tissue(grid_r, grid_c, v: VesselGeometry):
    """Return boolean maps (lumen, wall, plaque) for one vessel."""
    dr = grid_r - v.center[0]
    dc = grid_c - v.center[1]
    dist = np.hypot(dr, dc)
    outer = v.lumen_radius + v.wall_thickness
    lumen = dist < v.lumen_radius
    wall = (dist >= v.lumen_radius) & (dist < outer)
    plaque = np.zeros_like(wall)
    if v.plaque is not None:
        angle, blob_r, bulge = v.plaque
        # blob sits on the inner wall surface and pushes into the lumen
        pr = v.center[0] + (v.lumen_radius - 0.3 * blob_r) * np.sin(angle)
        pc = v.center[1] + (v.lumen_radius - 0.3 * blob_r) * np.cos(angle)
        blob = np.hypot(grid_r - pr, grid_c - pc) < blob_r
        plaque = blob & (dist < outer + bulge)
        lumen &= ~plaque
        wall &= ~plaque
    return lumen, wall, plaque


def _blob(grid_r, grid_c, center, radius):
    return np.hypot(grid_r - center[0], grid_c - center[1]) < radius


def render_slice(
    vessels: list[VesselGeometry],
    image_size: tuple[int, int],
    rng: np.random.Generator,
    distractors: list[tuple[tuple[float, float], float]] = (),
    noise_std: dict[str, float] | None = None,
    sequences: list[str] = DEFAULT_SEQUENCES,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one slice.  Returns (images m x H x W, label map H x W with codes 0/1/2)."""
    H, W = image_size
    grid_r, grid_c = np.mgrid[0:H, 0:W].astype(np.float64)
    tissue = np.full((H, W), AIR, dtype=np.int64)
    neck = ((grid_r - H / 2) / (0.44 * H)) ** 2 + ((grid_c - W / 2) / (0.47 * W)) ** 2 < 1
    tissue[neck] = TISSUE
    for center, radius in distractors:
        core = _blob(grid_r, grid_c, center, 0.55 * radius)
        ring = _blob(grid_r, grid_c, center, radius) & ~core
        tissue[ring & neck] = DISTRACTOR_WALL
        tissue[core & neck] = DISTRACTOR_CORE
    labels = np.zeros((H, W), dtype=np.int64)
    occluded_lumen = np.zeros((H, W), dtype=bool)
    for v in vessels:
        lumen, wall, plaque = _vessel_tissue(grid_r, grid_c, v)
        tissue[lumen] = LUMEN
        tissue[wall] = WALL
        tissue[plaque] = PLAQUE
        labels[wall] = 1
        labels[plaque] = 2
        if v.occluded:
            occluded_lumen |= lumen
    noise_std = noise_std or {}
    images = []
    for seq in sequences:
        table = np.asarray(INTENSITY[seq])
        img = table[tissue]
        if seq == FLOW_SEQUENCE and occluded_lumen.any():
            # no flow: lumen looks like wall tissue
            img = np.where(occluded_lumen, table[WALL], img)
        img = ndimage.gaussian_filter(img, 0.7)
        img = img + rng.normal(0.0, noise_std.get(seq, 0.03), size=img.shape)
        images.append(img)
    return np.stack(images).astype(np.float32), labels


def _patient_geometry(rng: np.random.Generator, spec: PhantomSpec, n_slices: int):
    """Per-slice vessel geometry for one patient; centers drift smoothly through slices."""
    H, W = spec.image_size
    row0 = H * rng.uniform(0.42, 0.58)
    offset = rng.uniform(-4.0, 4.0)  # left/right row offset, |.| <= 10 enforced below
    left_c = W * rng.uniform(0.26, 0.34)
    right_c = W * rng.uniform(0.66, 0.74)
    scale = min(H, W) / 256.0
    lumen_r = rng.uniform(5.0, 7.0, size=2) * scale
    wall_t = rng.uniform(3.0, 4.5, size=2) * scale
    # mean-reverting drift so long stacks never wander across the midline
    steps = rng.normal(0.0, 0.8, size=(n_slices, 2, 2))
    drift = np.zeros_like(steps)
    for k in range(n_slices):
        prev = drift[k - 1] if k else 0.0
        drift[k] = np.clip(0.9 * prev + steps[k], -8.0, 8.0)
    drift *= scale
    out = []
    for k in range(n_slices):
        rows = [row0 + drift[k, 0, 0], row0 + offset + drift[k, 1, 0]]
        # keep centre rows within 10 px of each other
        if abs(rows[0] - rows[1]) > 9.0:
            rows[1] = rows[0] + np.sign(rows[1] - rows[0]) * 9.0
        cols = [left_c + drift[k, 0, 1], right_c + drift[k, 1, 1]]
        pair = []
        for side in range(2):
            plaque = None
            if rng.uniform() < spec.plaque_probability:
                plaque = (rng.uniform(0, 2 * np.pi), rng.uniform(3.0, 5.0) * scale, rng.uniform(0.0, 2.0) * scale)
            pair.append(VesselGeometry((rows[side], cols[side]), lumen_r[side], wall_t[side], plaque))
        out.append(pair)
    return out


def _sample_distractors(rng, spec: PhantomSpec, vessels: list[VesselGeometry]):
    H, W = spec.image_size
    scale = min(H, W) / 256.0
    n = rng.poisson(spec.distractor_rate)
    found = []
    for _ in range(50 * max(n, 1)):
        if len(found) >= n:
            break
        center = (rng.uniform(0.15 * H, 0.85 * H), rng.uniform(0.12 * W, 0.88 * W))
        radius = rng.uniform(5.0, 9.0) * scale
        # keep distractors away from the vessels and off the midline
        if any(np.hypot(center[0] - v.center[0], center[1] - v.center[1]) < 40 * scale for v in vessels):
            continue
        if abs(center[1] - W / 2) < radius + 3:
            continue
        found.append((center, radius))
    return found


def generate_patient(spec: PhantomSpec, patient_index: int):
    """Images (m x H x W x K), labels (H x W x K) and labeled slice indices for one patient."""
    rng = np.random.default_rng([spec.seed, patient_index])
    K = spec.slices_per_patient
    geometry = _patient_geometry(rng, spec, K)
    images, labels = [], []
    for k in range(K):
        distractors = _sample_distractors(rng, spec, geometry[k])
        img, lab = render_slice(geometry[k], spec.image_size, rng, distractors, spec.noise_std)
        images.append(img)
        labels.append(lab)
    n_labeled = int(round(spec.labeled_fraction * K))
    labeled = sorted(rng.choice(K, size=n_labeled, replace=False).tolist())
    return np.stack(images, axis=-1), np.stack(labels, axis=-1), labeled


def generate_phantom(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".nii" if spec.volume_format == "nii" else ".raw"
    patients = []
    for i in range(spec.n_patients):
        pid = f"P{i:03d}"
        images, labels, labeled = generate_patient(spec, i)
        vols = {}
        for j, seq in enumerate(DEFAULT_SEQUENCES):
            rel = f"{pid}/{seq}{ext}"
            save_volume(images[j], out_dir / rel)
            vols[seq] = rel
        mask_rel = None
        if labeled:
            hidden = np.zeros_like(labels)
            hidden[..., labeled] = labels[..., labeled]
            mask_rel = f"{pid}/mask{ext}"
            save_volume(hidden.astype(np.float32), out_dir / mask_rel)
        patients.append(PatientEntry(pid, vols, labeled, mask_rel))
    manifest = DatasetManifest(patients, list(DEFAULT_SEQUENCES), "multiclass", out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------- hard cases

@dataclass
class PhantomCase:
    name: str
    images: np.ndarray  # m x H x W
    labels: np.ndarray  # H x W
    description: str


def phantom_case_catalog(image_size: tuple[int, int] = (256, 256), seed: int = 1234) -> list[PhantomCase]:
    H, W = image_size
    s = min(H, W) / 256.0
    row = H * 0.5
    left = (row, W * 0.3)
    right = (row + 3, W * 0.7)
    cases = []

    rng = np.random.default_rng([seed, 0])
    vessels = [VesselGeometry(left, 6 * s, 4 * s, occluded=True), VesselGeometry(right, 6 * s, 4 * s)]
    img, lab = render_slice(vessels, image_size, rng)
    cases.append(PhantomCase("occluded", img, lab, "left lumen carries no flow signal on TOF"))

    rng = np.random.default_rng([seed, 1])
    vessels = [VesselGeometry(left, 6 * s, 4 * s), VesselGeometry(right, 6 * s, 4 * s, plaque=(0.5, 4 * s, 1 * s))]
    noise = {seq: 0.15 for seq in DEFAULT_SEQUENCES}
    img, lab = render_slice(vessels, image_size, rng, noise_std=noise)
    cases.append(PhantomCase("heavy_noise", img, lab, "noise std 0.15 on every sequence"))

    rng = np.random.default_rng([seed, 2])
    # bifurcation: internal and external branch side by side on the left
    vessels = [
        VesselGeometry((row - 2, W * 0.26), 5 * s, 3 * s),
        VesselGeometry((row + 2, W * 0.36), 4 * s, 3 * s),
        VesselGeometry(right, 6 * s, 4 * s),
    ]
    img, lab = render_slice(vessels, image_size, rng)
    cases.append(PhantomCase("bifurcation", img, lab, "two vessel components on the left side"))

    rng = np.random.default_rng([seed, 3])
    vessels = [VesselGeometry(left, 6 * s, 4 * s), VesselGeometry(right, 6 * s, 4 * s)]
    distractors = [((row - 60 * s, W * 0.28), 7 * s), ((row + 50 * s, W * 0.75), 6 * s)]
    img, lab = render_slice(vessels, image_size, rng, distractors)
    cases.append(PhantomCase("distractors", img, lab, "vessel-like rings far from the carotid row"))
    return cases
