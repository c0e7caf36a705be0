"""Volume bundles and the preprocessing/sampling pipeline.

Preprocessing is always foreground crop -> resample to target spacing ->
per-channel non-zero z-scoring.  Training samples are drawn as patches (3D)
with a 3:1 positive/negative centre ratio, or as whole slices restricted to
labelled slices and their neighbours (2D).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import warnings
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, DegenerateInputError, FormatError, UsageError, VersionError

BUNDLE_FORMAT_VERSION = 1


@dataclass
class VolumeBundle:
    """One study: ``image`` is ``[C, *spatial]`` float32, ``labels`` is ``[*spatial]`` uint16."""

    image: np.ndarray
    labels: np.ndarray
    spacing: tuple
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.ndim == self.labels.ndim:
            self.image = self.image[None]
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.label_names = {int(k): str(v) for k, v in self.label_names.items()}

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def channels(self) -> int:
        return self.image.shape[0]

    def validate(self) -> None:
        if self.image.shape[1:] != self.labels.shape:
            raise DataError(f"image spatial dims {self.image.shape[1:]} != label dims {self.labels.shape}")
        if len(self.spacing) != self.labels.ndim or any(not s > 0 for s in self.spacing):
            raise DataError(f"spacing {self.spacing} must hold one positive entry per axis")
        top = int(self.labels.max()) if self.labels.size else 0
        declared = set(self.label_names) if self.label_names else set(range(top + 1))
        if declared and declared != set(range(max(declared) + 1)):
            raise DataError(f"label ids {sorted(declared)} do not form a contiguous range 0..K")
        if top > max(declared, default=0):
            raise DataError(f"label id {top} has no name entry")

    def copy(self) -> "VolumeBundle":
        return VolumeBundle(self.image.copy(), self.labels.copy(), self.spacing, dict(self.label_names))


# --------------------------------------------------------------------------
# container I/O


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def bundle_bytes(bundle: VolumeBundle) -> bytes:
    """Serialize to the bundle container (a stored, uncompressed zip archive)."""
    bundle.validate()
    image_raw = bundle.image.astype("<f4").tobytes(order="C")
    labels_raw = bundle.labels.astype("<u2").tobytes(order="C")
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "shape": list(bundle.shape),
        "channels": bundle.channels,
        "spacing_mm": list(bundle.spacing),
        "label_names": {str(k): v for k, v in sorted(bundle.label_names.items())},
        "checksums": {"image.raw": _sha256(image_raw), "labels.raw": _sha256(labels_raw)},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in (("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()),
                              ("image.raw", image_raw), ("labels.raw", labels_raw)):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)
    return buf.getvalue()


def save_bundle(bundle: VolumeBundle, path) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def load_bundle(path) -> VolumeBundle:
    """Read and verify a bundle container.

    Raises:
        FormatError: unreadable archive, missing members, checksum or size mismatch.
        VersionError: unknown ``format_version``.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            image_raw = zf.read("image.raw")
            labels_raw = zf.read("labels.raw")
    except (zipfile.BadZipFile, KeyError, OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a valid bundle ({exc})") from exc
    version = manifest.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported bundle format_version {version!r}")
    try:
        shape = tuple(int(s) for s in manifest["shape"])
        channels = int(manifest["channels"])
        spacing = tuple(float(s) for s in manifest["spacing_mm"])
        names = {int(k): v for k, v in manifest["label_names"].items()}
        sums = manifest["checksums"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    for member, payload in (("image.raw", image_raw), ("labels.raw", labels_raw)):
        if sums.get(member) != _sha256(payload):
            raise FormatError(f"{path}: checksum mismatch for {member}")
    n = int(np.prod(shape))
    if len(image_raw) != 4 * n * channels or len(labels_raw) != 2 * n:
        raise FormatError(f"{path}: payload size does not match shape {shape} x {channels} channels")
    image = np.frombuffer(image_raw, dtype="<f4").reshape((channels,) + shape).astype(np.float32)
    labels = np.frombuffer(labels_raw, dtype="<u2").reshape(shape).astype(np.uint16)
    bundle = VolumeBundle(image, labels, spacing, names)
    bundle.validate()
    return bundle


def list_bundles(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.bundle"))


# --------------------------------------------------------------------------
# preprocessing


def crop_foreground(bundle: VolumeBundle, margin: int = 0):
    """Crop to the bounding box of voxels with intensity > 0 in any channel.

    Returns ``(cropped_bundle, bbox)`` with ``bbox`` a list of ``(start, stop)``
    pairs, expanded by ``margin`` and clamped to the volume.

    Raises:
        DegenerateInputError: if no voxel is positive.
    """
    mask = (bundle.image > 0).any(axis=0)
    if not mask.any():
        raise DegenerateInputError("volume has no foreground (no voxel with intensity > 0)")
    bbox = []
    for ax in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != ax)
        hits = np.flatnonzero(mask.any(axis=other))
        bbox.append((max(int(hits[0]) - margin, 0), min(int(hits[-1]) + 1 + margin, mask.shape[ax])))
    sl = tuple(slice(a, b) for a, b in bbox)
    cropped = VolumeBundle(bundle.image[(slice(None),) + sl].copy(), bundle.labels[sl].copy(),
                           bundle.spacing, dict(bundle.label_names))
    return cropped, bbox


def resampled_shape(shape: Sequence[int], spacing: Sequence[float], target: Sequence[float]) -> tuple:
    return tuple(max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target))


def resize(array: np.ndarray, new_shape: Sequence[int], order: int) -> np.ndarray:
    """Resize a spatial array preserving the field of view (voxel-centre aligned).

    ``order`` 1 is linear interpolation, 0 nearest neighbour.
    """
    old_shape = array.shape
    if tuple(new_shape) == tuple(old_shape):
        return array.copy()
    coords = []
    for n_old, n_new in zip(old_shape, new_shape):
        scale = n_old / n_new
        c = (np.arange(n_new, dtype=np.float64) + 0.5) * scale - 0.5
        coords.append(np.clip(c, 0, n_old - 1))
    if order == 0:
        idx = [np.clip(np.floor(c + 0.5).astype(np.int64), 0, n - 1) for c, n in zip(coords, old_shape)]
        return array[np.ix_(*idx)].copy()
    out = array.astype(np.float64)
    # separable linear interpolation, one axis at a time
    for ax, c in enumerate(coords):
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, array.shape[ax] - 1)
        w = (c - lo).reshape((-1,) + (1,) * (array.ndim - ax - 1))
        out = np.take(out, lo, axis=ax) * (1 - w) + np.take(out, hi, axis=ax) * w
    return out.astype(array.dtype)


def resample(bundle: VolumeBundle, target_spacing: Sequence[float]) -> VolumeBundle:
    """Resample to ``target_spacing``; image linear, labels nearest neighbour."""
    target = tuple(float(t) for t in target_spacing)
    if len(target) != len(bundle.shape) or any(not t > 0 for t in target):
        raise UsageError(f"target spacing {target} must be positive with one entry per axis")
    new_shape = resampled_shape(bundle.shape, bundle.spacing, target)
    if new_shape == bundle.shape:
        return VolumeBundle(bundle.image.copy(), bundle.labels.copy(), target, dict(bundle.label_names))
    image = np.stack([resize(ch, new_shape, 1) for ch in bundle.image])
    labels = resize(bundle.labels, new_shape, 0)
    return VolumeBundle(image, labels, target, dict(bundle.label_names))


def normalize_intensity(bundle: VolumeBundle) -> VolumeBundle:
    """Z-score each channel using the mean/std of its non-zero voxels only.

    Zero voxels stay exactly zero.  Channels with fewer than two non-zero
    voxels or zero variance are left unscaled with a warning.
    """
    out = bundle.image.astype(np.float64)
    for c, ch in enumerate(out):
        nz = ch != 0
        if nz.sum() < 2:
            warnings.warn(f"channel {c}: fewer than 2 non-zero voxels, left unnormalized", stacklevel=2)
            continue
        vals = ch[nz]
        mu, sd = vals.mean(), vals.std()
        if sd == 0:
            warnings.warn(f"channel {c}: zero variance over non-zero voxels, left unscaled", stacklevel=2)
            continue
        ch[nz] = (vals - mu) / sd
    return VolumeBundle(out.astype(np.float32), bundle.labels.copy(), bundle.spacing, dict(bundle.label_names))


@dataclass
class PreprocessRecord:
    """What was done to a bundle, so predictions can be mapped back onto it."""

    original_shape: tuple
    original_spacing: tuple
    bbox: list
    cropped_shape: tuple


def preprocess(bundle: VolumeBundle, target_spacing: Sequence[float], margin: int = 0):
    """crop -> resample -> normalize; returns ``(bundle, PreprocessRecord)``."""
    cropped, bbox = crop_foreground(bundle, margin)
    res = resample(cropped, target_spacing)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        norm = normalize_intensity(res)
    return norm, PreprocessRecord(bundle.shape, bundle.spacing, bbox, cropped.shape)


def restore_labels(pred: np.ndarray, record: PreprocessRecord) -> np.ndarray:
    """Map a label map predicted on the preprocessed grid back to the original geometry."""
    out = np.zeros(record.original_shape, dtype=np.uint16)
    out[tuple(slice(a, b) for a, b in record.bbox)] = resize(pred.astype(np.uint16), record.cropped_shape, 0)
    return out


# --------------------------------------------------------------------------
# dataset-level


@dataclass
class DatasetFingerprint:
    median_spacing: tuple
    median_shape: tuple
    n_volumes: int
    target_spacing: tuple

    def to_dict(self) -> dict:
        return {"median_spacing": list(self.median_spacing), "median_shape": list(self.median_shape),
                "n_volumes": self.n_volumes, "target_spacing": list(self.target_spacing)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetFingerprint":
        return cls(tuple(d["median_spacing"]), tuple(d["median_shape"]), int(d["n_volumes"]),
                   tuple(d["target_spacing"]))


def lower_median(values: Sequence[float]):
    """Median that picks the lower of the two middle values for even counts."""
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def compute_fingerprint(bundles: Sequence[VolumeBundle]) -> DatasetFingerprint:
    if not bundles:
        raise UsageError("cannot fingerprint an empty dataset")
    dims = len(bundles[0].shape)
    spacing = tuple(float(lower_median([b.spacing[a] for b in bundles])) for a in range(dims))
    shape = tuple(int(lower_median([b.shape[a] for b in bundles])) for a in range(dims))
    return DatasetFingerprint(spacing, shape, len(bundles), spacing)


def split_dataset(bundles: Sequence, ratio: float = 0.8, seed: int = 0):
    """Shuffle deterministically and split into ``(train, validation)``.

    ``|train| = round(ratio * N)`` (half rounds up), with at least one item on each side.
    """
    n = len(bundles)
    if n < 2:
        raise UsageError(f"need at least 2 volumes to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    return [bundles[i] for i in order[:n_train]], [bundles[i] for i in order[n_train:]]


# --------------------------------------------------------------------------
# sampling


def draw_centers(labels: np.ndarray, n: int, rng: np.random.Generator, pos_fraction: float = 0.75):
    """Patch centres and a per-draw flag telling whether the draw was a positive one.

    A positive draw picks its centre uniformly among foreground voxels, a
    negative one uniformly over the whole volume.
    """
    fg = np.flatnonzero(labels.reshape(-1) > 0)
    if fg.size == 0 and pos_fraction > 0:
        warnings.warn("no foreground voxels; drawing negative patches only", stacklevel=2)
        pos_fraction = 0.0
    positive = rng.random(n) < pos_fraction
    flat = np.where(positive, fg[rng.integers(0, max(fg.size, 1), n)] if fg.size else 0,
                    rng.integers(0, labels.size, n))
    centers = np.stack(np.unravel_index(flat, labels.shape), axis=1)
    return centers, positive


def extract_patch(array: np.ndarray, center: Sequence[int], patch_size: Sequence[int]) -> np.ndarray:
    """Crop ``patch_size`` around ``center`` from the trailing axes, zero padding outside."""
    spatial = array.shape[-len(patch_size):]
    lead = array.shape[:-len(patch_size)]
    out = np.zeros(lead + tuple(patch_size), dtype=array.dtype)
    src, dst = [], []
    for c, p, n in zip(center, patch_size, spatial):
        start = int(c) - p // 2
        lo, hi = max(start, 0), min(start + p, n)
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[(Ellipsis,) + tuple(dst)] = array[(Ellipsis,) + tuple(src)]
    return out


def sample_patches(bundle: VolumeBundle, patch_size: Sequence[int], n: int, rng: np.random.Generator,
                   pos_fraction: float = 0.75):
    """``n`` (image patch, label patch) pairs with a 3:1 positive/negative ratio by default."""
    centers, _ = draw_centers(bundle.labels, n, rng, pos_fraction)
    return [(extract_patch(bundle.image, c, patch_size), extract_patch(bundle.labels, c, patch_size))
            for c in centers]


def select_slices(bundle: VolumeBundle, surround: int = 1) -> list[int]:
    """Indices along the first axis of labelled slices, dilated by ``surround`` on each side."""
    if len(bundle.shape) < 3:
        raise UsageError("slice selection needs a 3D bundle")
    positive = np.flatnonzero((bundle.labels > 0).reshape(bundle.shape[0], -1).any(axis=1))
    if positive.size == 0:
        warnings.warn("no labelled slices", stacklevel=2)
        return []
    keep = set()
    for i in positive:
        keep.update(range(max(0, i - surround), min(bundle.shape[0], i + surround + 1)))
    return sorted(keep)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = False
    rotate90: bool = False
    zoom: Optional[tuple] = None
    gaussian_noise_std: float = 0.0
    prob: float = 0.5

    def __post_init__(self):
        if self.zoom is not None:
            lo, hi = (float(v) for v in self.zoom)
            if not (0 < lo <= 1.0 <= hi and math.isfinite(hi)):
                raise UsageError(f"zoom range {self.zoom} must be finite, positive and contain 1.0")
            object.__setattr__(self, "zoom", (lo, hi))
        if not (self.gaussian_noise_std >= 0 and math.isfinite(self.gaussian_noise_std)):
            raise UsageError("gaussian_noise_std must be finite and >= 0")
        if not 0 <= self.prob <= 1:
            raise UsageError("prob must lie in [0, 1]")

    @classmethod
    def scratch(cls) -> "AugmentPolicy":
        return cls(flip=False, rotate90=True, zoom=(0.9, 1.1), gaussian_noise_std=0.05)

    @classmethod
    def finetune(cls) -> "AugmentPolicy":
        return cls(flip=False, rotate90=False, zoom=(0.9, 1.1), gaussian_noise_std=0.05)

    @classmethod
    def off(cls) -> "AugmentPolicy":
        return cls()

    def to_dict(self) -> dict:
        return {"flip": self.flip, "rotate90": self.rotate90,
                "zoom": list(self.zoom) if self.zoom else None,
                "gaussian_noise_std": self.gaussian_noise_std, "prob": self.prob}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(bool(d.get("flip", False)), bool(d.get("rotate90", False)),
                   tuple(d["zoom"]) if d.get("zoom") else None, float(d.get("gaussian_noise_std", 0.0)),
                   float(d.get("prob", 0.5)))


def rotate90(image: np.ndarray, labels: np.ndarray, k: int):
    """Rotate by ``k`` quarter turns in the last two (in-plane) axes."""
    return (np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1))),
            np.ascontiguousarray(np.rot90(labels, k, axes=(-2, -1))))


def zoom(image: np.ndarray, labels: np.ndarray, factor: float):
    """Zoom about the centre, keeping the spatial extent (crop or zero-pad back)."""
    if factor == 1.0:
        return image.copy(), labels.copy()
    spatial = labels.shape
    coords = np.meshgrid(*[(np.arange(n) - (n - 1) / 2) / factor + (n - 1) / 2 for n in spatial],
                         indexing="ij")
    img = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in image])
    lab = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), lab.astype(labels.dtype)


def augment(image: np.ndarray, labels: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply the enabled transforms; spatial ones hit image and labels identically.

    Rotations are restricted to half turns when the in-plane axes differ in
    length so that sample shapes stay fixed.
    """
    img, lab = image, labels
    if policy.flip:
        for ax in range(lab.ndim):
            if rng.random() < policy.prob:
                img, lab = np.flip(img, axis=ax + 1), np.flip(lab, axis=ax)
    if policy.rotate90 and rng.random() < policy.prob:
        square = lab.shape[-1] == lab.shape[-2]
        k = int(rng.integers(1, 4)) if square else 2
        img, lab = rotate90(img, lab, k)
    if policy.zoom is not None and rng.random() < policy.prob:
        img, lab = zoom(np.ascontiguousarray(img), np.ascontiguousarray(lab), float(rng.uniform(*policy.zoom)))
    img = np.ascontiguousarray(img)
    if policy.gaussian_noise_std > 0:
        img = img + rng.normal(0.0, policy.gaussian_noise_std, size=img.shape).astype(img.dtype)
    return img, np.ascontiguousarray(lab)
