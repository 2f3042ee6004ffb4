"""Dataset model, volume I/O, intensity normalization, ROI cropping and patient-wise splits.

Volumes are stored as ``H x W x K`` arrays (K = number of axial slices).  Masks are
kept one-hot and channel-first, ``C x H x W``, which is the layout the networks use.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_SEQUENCES = ["PDw", "T1w", "T1ce", "T2w", "TOF"]
CLASS_SCHEMES = ("binary", "multiclass")
# integer label code -> class name
LABEL_CODES = {0: "background", 1: "vessel wall", 2: "plaque"}
CLASS_NAMES = {"binary": ["background", "foreground"], "multiclass": [LABEL_CODES[k] for k in sorted(LABEL_CODES)]}
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Raised when a manifest violates the schema; the message names the offending key path."""


class VolumeIOError(IOError):
    pass


@dataclass
class PatientEntry:
    id: str
    volumes: dict[str, str]
    labeled_slices: list[int] = field(default_factory=list)
    mask: Optional[str] = None
    # source patient for derived entries (e.g. left/right ROI stacks); splits group on it
    group: Optional[str] = None
    slice_map: Optional[list[int]] = None

    @property
    def split_key(self) -> str:
        return self.group or self.id


@dataclass
class DatasetManifest:
    patients: list[PatientEntry] = field(default_factory=list)
    sequence_names: list[str] = field(default_factory=lambda: list(DEFAULT_SEQUENCES))
    class_scheme: str = "multiclass"
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def patient(self, pid: str) -> PatientEntry:
        for p in self.patients:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        wanted = set(ids)
        return DatasetManifest(
            [p for p in self.patients if p.id in wanted or p.split_key in wanted],
            list(self.sequence_names),
            self.class_scheme,
            self.root,
        )

    def to_dict(self) -> dict:
        patients = []
        for p in self.patients:
            d = {
                "id": p.id,
                "volumes": dict(p.volumes),
                "labeled_slices": list(p.labeled_slices),
                "mask": p.mask,
            }
            if p.group is not None:
                d["group"] = p.group
            if p.slice_map is not None:
                d["slice_map"] = list(p.slice_map)
            patients.append(d)
        return {
            "format_version": MANIFEST_VERSION,
            "sequence_names": list(self.sequence_names),
            "class_scheme": self.class_scheme,
            "patients": patients,
        }


@dataclass
class SegmentationMask:
    """One-hot mask, ``data`` shaped ``C x H x W``."""

    data: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        check_one_hot(self.data)
        if len(self.class_names) != self.data.shape[0]:
            raise ValueError("class_names length does not match channel count")

    @classmethod
    def from_labels(cls, labels: np.ndarray, class_scheme: str = "multiclass") -> "SegmentationMask":
        if class_scheme not in CLASS_NAMES:
            raise ValueError(f"unknown class scheme {class_scheme!r}")
        names = list(CLASS_NAMES[class_scheme])
        if class_scheme == "binary":
            labels = (np.asarray(labels) > 0).astype(np.int64)
        return cls(labels_to_one_hot(labels, len(names)), names)

    def labels(self) -> np.ndarray:
        return self.data.argmax(axis=0)


@dataclass
class MultiSequenceSlice:
    images: np.ndarray  # m x H x W
    mask: Optional[SegmentationMask] = None
    patient_id: str = ""
    slice_index: int = -1

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 3:
            raise ValueError(f"images must be m x H x W, got shape {self.images.shape}")
        if self.mask is not None and self.mask.data.shape[1:] != self.images.shape[1:]:
            raise ValueError("mask and images differ in H x W")

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


def labels_to_one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"label values outside [0, {n_classes})")
    return (np.arange(n_classes)[:, None, None] == labels[None]).astype(np.float32)


def check_one_hot(data: np.ndarray) -> None:
    if not np.isin(data, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    if not np.all(data.sum(axis=0) == 1):
        raise ValueError("mask is not one-hot along the class axis")


# ---------------------------------------------------------------- manifest I/O

def _require(d: dict, key: str, typ, path: str):
    if key not in d:
        raise ManifestError(f"{path}.{key}: missing required key")
    value = d[key]
    if not isinstance(value, typ):
        raise ManifestError(f"{path}.{key}: expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}")
    return value


def manifest_from_dict(raw: dict, root: Path | str = ".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    if not isinstance(raw, dict):
        raise ManifestError("$: manifest must be an object")
    seqs = _require(raw, "sequence_names", list, "$")
    if not seqs or not all(isinstance(s, str) for s in seqs):
        raise ManifestError("$.sequence_names: must be a non-empty list of strings")
    scheme = _require(raw, "class_scheme", str, "$")
    if scheme not in CLASS_SCHEMES:
        raise ManifestError(f"$.class_scheme: must be one of {CLASS_SCHEMES}, got {scheme!r}")
    patients = []
    seen = set()
    for i, p in enumerate(_require(raw, "patients", list, "$")):
        path = f"$.patients[{i}]"
        if not isinstance(p, dict):
            raise ManifestError(f"{path}: expected object")
        pid = _require(p, "id", str, path)
        if pid in seen:
            raise ManifestError(f"{path}.id: duplicate patient id {pid!r}")
        seen.add(pid)
        vols = _require(p, "volumes", dict, path)
        missing = [s for s in seqs if s not in vols]
        if missing:
            raise ManifestError(f"{path}.volumes: patient {pid!r} is missing sequence(s) {missing}")
        extra = [s for s in vols if s not in seqs]
        if extra:
            raise ManifestError(f"{path}.volumes: unknown sequence(s) {extra}")
        labeled = _require(p, "labeled_slices", list, path)
        if not all(isinstance(k, int) and k >= 0 for k in labeled):
            raise ManifestError(f"{path}.labeled_slices: must be non-negative integers")
        mask = p.get("mask")
        if mask is not None and not isinstance(mask, str):
            raise ManifestError(f"{path}.mask: expected string or null")
        if bool(labeled) != (mask is not None):
            raise ManifestError(f"{path}.mask: a mask is required exactly when labeled_slices is non-empty")
        patients.append(
            PatientEntry(pid, {s: vols[s] for s in seqs}, sorted(labeled), mask, p.get("group"), p.get("slice_map"))
        )
    manifest = DatasetManifest(patients, list(seqs), scheme, root)
    if check_files:
        for p in manifest.patients:
            refs = list(p.volumes.values()) + ([p.mask] if p.mask else [])
            for ref in refs:
                if not manifest.resolve(ref).exists():
                    raise FileNotFoundError(f"patient {p.id!r}: referenced volume file not found: {manifest.resolve(ref)}")
    return manifest


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"$: not valid JSON ({exc})") from exc
    return manifest_from_dict(raw, path.parent)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


# ---------------------------------------------------------------- volume I/O
#
# Raw format: <name>.raw holds little-endian float32 samples in C order for an
# array of shape (H, W, K); <name>.hdr is a text sidecar with "dims H W K".

def _raw_paths(path: Path) -> tuple[Path, Path]:
    stem = path.with_suffix("") if path.suffix in (".raw", ".hdr") else path
    return stem.with_suffix(".raw"), stem.with_suffix(".hdr")


def save_volume(volume: np.ndarray, path: str | os.PathLike) -> Path:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError("volumes are H x W x K")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        img = nib.Nifti1Image(volume.astype(np.float32), np.eye(4))
        nib.save(img, str(path))
        return path
    raw, hdr = _raw_paths(path)
    hdr.write_text("format carotid-raw 1\ndtype float32 little-endian\ndims {} {} {}\n".format(*volume.shape))
    raw.write_bytes(volume.astype("<f4").tobytes(order="C"))
    return raw


def load_volume(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        try:
            data = np.asarray(nib.load(str(path)).get_fdata(dtype=np.float32))
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise VolumeIOError(f"cannot read NIfTI volume {path}: {exc}") from exc
        if data.ndim == 2:
            data = data[..., None]
        return data
    raw, hdr = _raw_paths(path)
    if not raw.exists() or not hdr.exists():
        raise FileNotFoundError(f"raw volume or its header not found: {raw}")
    dims = None
    for line in hdr.read_text().splitlines():
        parts = line.split()
        if parts and parts[0] == "dims":
            dims = tuple(int(x) for x in parts[1:])
    if dims is None or len(dims) != 3:
        raise VolumeIOError(f"corrupt header {hdr}: no 3D dims line")
    payload = raw.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise VolumeIOError(f"corrupt raw volume {raw}: {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


# ---------------------------------------------------------------- preprocessing

def standardize(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume, dtype=np.float64)
    std = volume.std()
    if std <= 0:
        return volume - volume.mean()
    return (volume - volume.mean()) / std


def minmax(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def standardize_and_normalize(volume: np.ndarray, per_slice: bool = True) -> np.ndarray:
    """z-standardize the whole volume, then min-max scale to [0, 1].

    The min-max step runs per axial slice (last axis) by default.  Constant
    volumes and constant slices map to zeros.
    """
    z = standardize(volume)
    if not per_slice or z.ndim < 3:
        return minmax(z).astype(np.float32)
    out = np.empty_like(z)
    for k in range(z.shape[-1]):
        out[..., k] = minmax(z[..., k])
    return out.astype(np.float32)


# ---------------------------------------------------------------- ROI handling

def _crop2d(arr: np.ndarray, center: tuple[int, int], size: tuple[int, int], fill) -> np.ndarray:
    """Crop ``arr[..., H, W]`` to ``size`` around ``center``; out-of-image samples take ``fill``."""
    h, w = size
    H, W = arr.shape[-2:]
    r0 = int(center[0]) - h // 2
    c0 = int(center[1]) - w // 2
    out = np.empty(arr.shape[:-2] + (h, w), dtype=arr.dtype)
    out[...] = fill
    sr0, sr1 = max(r0, 0), min(r0 + h, H)
    sc0, sc1 = max(c0, 0), min(c0 + w, W)
    if sr1 > sr0 and sc1 > sc0:
        out[..., sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = arr[..., sr0:sr1, sc0:sc1]
    return out


def extract_roi(
    slices: MultiSequenceSlice, center: tuple[int, int], size: tuple[int, int] = (64, 64)
) -> MultiSequenceSlice:
    H, W = slices.shape
    if size[0] > H or size[1] > W:
        raise ValueError(f"ROI size {size} exceeds image size {(H, W)}")
    if not (0 <= center[0] < H and 0 <= center[1] < W):
        raise ValueError(f"ROI center {center} lies outside the {H}x{W} image")
    images = _crop2d(slices.images, center, size, 0.0)
    mask = None
    if slices.mask is not None:
        data = slices.mask.data
        # padded pixels become background: channel 0 = 1, all others 0
        fill = np.zeros((data.shape[0], 1, 1), dtype=data.dtype)
        fill[0] = 1
        cropped = _crop2d(data, center, size, 0)
        inside = _crop2d(np.ones(data.shape[1:], dtype=bool), center, size, False)
        cropped = np.where(inside[None], cropped, fill)
        mask = SegmentationMask(cropped, list(slices.mask.class_names))
    return MultiSequenceSlice(images, mask, slices.patient_id, slices.slice_index)


def embed_roi(roi: np.ndarray, canvas: np.ndarray, center: tuple[int, int]) -> np.ndarray:
    """Inverse of the crop: paste ``roi[..., h, w]`` into a copy of ``canvas`` at ``center`` (clipped)."""
    out = canvas.copy()
    h, w = roi.shape[-2:]
    H, W = canvas.shape[-2:]
    r0 = int(center[0]) - h // 2
    c0 = int(center[1]) - w // 2
    sr0, sr1 = max(r0, 0), min(r0 + h, H)
    sc0, sc1 = max(c0, 0), min(c0 + w, W)
    out[..., sr0:sr1, sc0:sc1] = roi[..., sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0]
    return out


def shifted_bbox_augment(
    slices: MultiSequenceSlice,
    center: tuple[int, int],
    size: tuple[int, int] = (64, 64),
    max_shift: int = 8,
    rng: np.random.Generator | None = None,
) -> MultiSequenceSlice:
    """ROI crop with the center jittered uniformly by at most ``max_shift`` pixels per axis."""
    if max_shift <= 0:
        return extract_roi(slices, center, size)
    rng = np.random.default_rng() if rng is None else rng
    dr, dc = rng.integers(-max_shift, max_shift + 1, size=2)
    H, W = slices.shape
    shifted = (int(np.clip(center[0] + dr, 0, H - 1)), int(np.clip(center[1] + dc, 0, W - 1)))
    return extract_roi(slices, shifted, size)


# ---------------------------------------------------------------- splitting

@dataclass
class Split:
    train: list[str]
    val: list[str]
    test: list[str]


def _patient_keys(manifest: DatasetManifest) -> list[str]:
    keys: list[str] = []
    for p in manifest.patients:
        if p.split_key not in keys:
            keys.append(p.split_key)
    return keys


def split_patientwise(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Split:
    """Shuffle patients (never slices) and cut them into train/val/test by ``fractions``."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    keys = _patient_keys(manifest)
    order = [keys[i] for i in np.random.default_rng(seed).permutation(len(keys))]
    n = len(order)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    return Split(order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])


def kfold_patientwise(manifest: DatasetManifest, k: int = 5, seed: int = 0, n_val: int = 0) -> list[Split]:
    """Patient-wise k-fold; fold i tests on the i-th chunk.  ``n_val`` patients of the remainder validate."""
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    keys = _patient_keys(manifest)
    if len(keys) < k:
        raise ValueError(f"{len(keys)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = [keys[i] for i in rng.permutation(len(keys))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = [order[j] for j in chunk]
        rest = [order[j] for j in range(len(order)) if j not in set(chunk.tolist())]
        fold_rng = np.random.default_rng([seed, i])
        val_idx = set(fold_rng.choice(len(rest), size=min(n_val, max(len(rest) - 1, 0)), replace=False).tolist())
        folds.append(
            Split(
                [r for j, r in enumerate(rest) if j not in val_idx],
                [r for j, r in enumerate(rest) if j in val_idx],
                test,
            )
        )
    return folds


# ---------------------------------------------------------------- slice access

@dataclass
class LoadedPatient:
    entry: PatientEntry
    images: np.ndarray  # m x H x W x K, normalized to [0, 1]
    labels: Optional[np.ndarray]  # H x W x K integer codes, valid on labeled slices only


def load_patient(manifest: DatasetManifest, entry: PatientEntry, normalize: bool = True) -> LoadedPatient:
    vols = []
    for seq in manifest.sequence_names:
        v = load_volume(manifest.resolve(entry.volumes[seq]))
        vols.append(standardize_and_normalize(v) if normalize else v.astype(np.float32))
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise ValueError(f"patient {entry.id!r}: sequences have different shapes {shapes}")
    depth = vols[0].shape[-1]
    if any(k >= depth for k in entry.labeled_slices):
        raise ValueError(f"patient {entry.id!r}: labeled slice index beyond volume depth {depth}")
    labels = None
    if entry.mask is not None:
        labels = np.rint(load_volume(manifest.resolve(entry.mask))).astype(np.int64)
    return LoadedPatient(entry, np.stack(vols), labels)


def patient_slices(
    patient: LoadedPatient, class_scheme: str = "multiclass", labeled_only: bool = False
) -> list[MultiSequenceSlice]:
    out = []
    labeled = set(patient.entry.labeled_slices)
    for k in range(patient.images.shape[-1]):
        mask = None
        if k in labeled and patient.labels is not None:
            mask = SegmentationMask.from_labels(patient.labels[..., k], class_scheme)
        elif labeled_only:
            continue
        out.append(MultiSequenceSlice(patient.images[..., k], mask, patient.entry.id, k))
    return out


def load_slices(
    manifest: DatasetManifest, ids: Optional[Sequence[str]] = None, class_scheme: Optional[str] = None
) -> list[MultiSequenceSlice]:
    scheme = class_scheme or manifest.class_scheme
    sub = manifest if ids is None else manifest.subset(ids)
    out = []
    for entry in sub.patients:
        out.extend(patient_slices(load_patient(sub, entry), scheme))
    return out
