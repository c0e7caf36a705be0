"""Synthetic multi-structure phantoms with parametric domain shift.

A phantom is a body ellipsoid (background texture, zero outside) holding K
non-overlapping ellipsoidal structures, each with its own intensity band.
Geometry is defined in millimetres, so changing the spacing changes the voxel
grid but not the anatomy.  The base layout comes from ``geometry_seed``;
``morphology_jitter`` perturbs centres and radii per volume.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import VolumeBundle, save_bundle
from .errors import ConfigurationError, DataError

PLACEMENT_RETRIES = 1000


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class StructureSpec:
    name: str
    intensity: tuple = (0.8, 1.0)
    radius_mm: tuple = (3.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "intensity", tuple(float(v) for v in self.intensity))
        object.__setattr__(self, "radius_mm", tuple(float(v) for v in self.radius_mm))


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple
    spacing: tuple
    structures: tuple
    background_level: float = 0.3
    noise_std: float = 0.03
    body_fraction: float = 0.9
    geometry_seed: int = 0
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0
    spacing_override: Optional[tuple] = None
    morphology_jitter: float = 0.0
    extra_noise_std: float = 0.0
    label_subset: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "structures", tuple(
            s if isinstance(s, StructureSpec) else StructureSpec(**s) for s in self.structures))
        if self.spacing_override is not None:
            object.__setattr__(self, "spacing_override", tuple(float(s) for s in self.spacing_override))
        if self.label_subset is not None:
            object.__setattr__(self, "label_subset", tuple(int(v) for v in self.label_subset))
        self.validate()

    def validate(self) -> None:
        if not self.structures:
            raise ConfigurationError("a phantom needs at least one structure")
        if len(self.spacing) != len(self.shape) or any(not s > 0 for s in self.spacing):
            raise ConfigurationError("spacing must be positive with one entry per axis")
        if any(s < 1 for s in self.shape):
            raise ConfigurationError("shape entries must be >= 1")
        knobs = [self.background_level, self.noise_std, self.intensity_scale, self.intensity_shift,
                 self.morphology_jitter, self.extra_noise_std, self.body_fraction]
        if not all(math.isfinite(k) for k in knobs):
            raise ConfigurationError("all phantom knobs must be finite")
        if self.noise_std < 0 or self.extra_noise_std < 0 or self.morphology_jitter < 0:
            raise ConfigurationError("noise and jitter must be >= 0")
        if self.spacing_override is not None and (
                len(self.spacing_override) != len(self.shape) or any(not s > 0 for s in self.spacing_override)):
            raise ConfigurationError("spacing_override must be positive with one entry per axis")
        if self.label_subset is not None:
            bad = [v for v in self.label_subset if not 1 <= v <= len(self.structures)]
            if bad or not self.label_subset:
                raise ConfigurationError(f"label_subset must pick ids in 1..{len(self.structures)}")

    @property
    def effective_spacing(self) -> tuple:
        return self.spacing_override or self.spacing

    @property
    def grid_shape(self) -> tuple:
        fov = [n * s for n, s in zip(self.shape, self.spacing)]
        return tuple(max(1, int(round(f / s))) for f, s in zip(fov, self.effective_spacing))

    def output_labels(self) -> dict:
        """Output id -> name after the optional label subset is applied."""
        ids = self.label_subset or tuple(range(1, len(self.structures) + 1))
        names = {0: "background"}
        for new, old in enumerate(ids, start=1):
            names[new] = self.structures[old - 1].name
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structures"] = [asdict(s) for s in self.structures]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"invalid phantom spec: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"cannot read phantom spec {path}: {exc}") from exc


@dataclass
class _Ellipsoid:
    center: np.ndarray  # mm
    radii: np.ndarray  # mm


def _overlaps(a: _Ellipsoid, b: _Ellipsoid, gap: float = 1.0) -> bool:
    # conservative: bounding spheres must be separated
    return float(np.linalg.norm(a.center - b.center)) < a.radii.max() + b.radii.max() + gap


def _inside_body(e: _Ellipsoid, body: _Ellipsoid) -> bool:
    # bounding sphere of ``e`` inside the largest sphere the body contains
    return float(np.linalg.norm(e.center - body.center)) + e.radii.max() <= body.radii.min()


def _body(spec: PhantomSpec) -> _Ellipsoid:
    fov = np.array([n * s for n, s in zip(spec.shape, spec.spacing)])
    return _Ellipsoid(fov / 2.0, fov / 2.0 * spec.body_fraction)


def base_layout(spec: PhantomSpec) -> list[_Ellipsoid]:
    """Deterministic structure placement from ``geometry_seed`` by rejection sampling."""
    rng = np.random.default_rng(spec.geometry_seed)
    body = _body(spec)
    placed: list[_Ellipsoid] = []
    for st in spec.structures:
        for _ in range(PLACEMENT_RETRIES):
            radii = rng.uniform(st.radius_mm[0], st.radius_mm[1], size=len(spec.shape))
            center = body.center + rng.uniform(-1, 1, size=len(spec.shape)) * max(body.radii.min() - radii.max(), 0)
            cand = _Ellipsoid(center, radii)
            if _inside_body(cand, body) and not any(_overlaps(cand, p) for p in placed):
                placed.append(cand)
                break
        else:
            raise GenerationError(f"could not place structure {st.name!r} after {PLACEMENT_RETRIES} tries; "
                                  "use smaller structures or a larger volume")
    return placed


def _jittered(layout, spec: PhantomSpec, rng: np.random.Generator) -> list[_Ellipsoid]:
    if spec.morphology_jitter == 0:
        return layout
    body = _body(spec)
    for _ in range(PLACEMENT_RETRIES):
        out = []
        for e in layout:
            scale = 1.0 + spec.morphology_jitter * rng.uniform(-1, 1, size=e.radii.shape)
            radii = np.maximum(e.radii * scale, 0.5)
            center = e.center + spec.morphology_jitter * e.radii * rng.uniform(-1, 1, size=e.center.shape)
            out.append(_Ellipsoid(center, radii))
        ok = all(_inside_body(e, body) for e in out) and not any(
            _overlaps(a, b) for i, a in enumerate(out) for b in out[i + 1:])
        if ok:
            return out
    raise GenerationError("morphology jitter keeps producing overlapping structures; reduce the jitter")


def _render(e: _Ellipsoid, coords: Sequence[np.ndarray]) -> np.ndarray:
    acc = 0.0
    for c, ctr, r in zip(coords, e.center, e.radii):
        acc = acc + ((c - ctr) / r) ** 2
    return acc <= 1.0


def generate_volume(spec: PhantomSpec, rng: np.random.Generator) -> VolumeBundle:
    """Render one phantom; labels are exact by construction."""
    grid = spec.grid_shape
    sp = spec.effective_spacing
    coords = np.meshgrid(*[(np.arange(n) + 0.5) * s for n, s in zip(grid, sp)], indexing="ij")
    body_mask = _render(_body(spec), coords)
    image = np.where(body_mask, spec.background_level, 0.0)
    labels = np.zeros(grid, dtype=np.uint16)
    layout = _jittered(base_layout(spec), spec, rng)
    remap = {old: new for new, old in enumerate(spec.label_subset or range(1, len(spec.structures) + 1), 1)}
    for idx, (st, e) in enumerate(zip(spec.structures, layout), start=1):
        mask = _render(e, coords)
        image[mask] = rng.uniform(*st.intensity)
        if idx in remap:
            labels[mask] = remap[idx]
    image = image * spec.intensity_scale
    image[body_mask] += spec.intensity_shift
    noise = math.hypot(spec.noise_std, spec.extra_noise_std)
    if noise > 0:
        image[body_mask] += rng.normal(0.0, noise, size=int(body_mask.sum()))
    # keep the body strictly positive so foreground cropping sees all of it
    image[body_mask] = np.maximum(image[body_mask], 1e-3)
    return VolumeBundle(image[None].astype(np.float32), labels, sp, spec.output_labels())


def generate_dataset(spec: PhantomSpec, n: int, seed: int = 0) -> list[VolumeBundle]:
    """``n`` independent phantoms with per-volume seeds derived from ``seed``."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [generate_volume(spec, np.random.default_rng(c)) for c in children]


def write_dataset(spec: PhantomSpec, n: int, seed: int, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, b in enumerate(generate_dataset(spec, n, seed)):
        p = out / f"case_{i:04d}.bundle"
        save_bundle(b, p)
        paths.append(p)
    spec.save(out / "phantom_spec.json")
    return paths


def shifted(spec: PhantomSpec, intensity_scale: float = 0.0, intensity_shift: float = 0.0,
            extra_noise_std: float = 0.0, morphology_jitter: float = 0.0,
            spacing_override: Optional[Sequence[float]] = None,
            label_subset: Optional[Sequence[int]] = None) -> PhantomSpec:
    """Target-domain spec: additive knob deltas, optional spacing override and label subset."""
    return replace(
        spec,
        intensity_scale=spec.intensity_scale + intensity_scale,
        intensity_shift=spec.intensity_shift + intensity_shift,
        extra_noise_std=spec.extra_noise_std + extra_noise_std,
        morphology_jitter=spec.morphology_jitter + morphology_jitter,
        spacing_override=tuple(spacing_override) if spacing_override is not None else spec.spacing_override,
        label_subset=tuple(label_subset) if label_subset is not None else spec.label_subset,
    )


def default_spec(dims: int = 3, n_structures: int = 2, size: int = 32) -> PhantomSpec:
    """A small near-separable task used by the examples and tests."""
    bands = [(0.9, 1.0), (0.6, 0.7), (1.2, 1.3), (0.45, 0.5), (1.5, 1.6), (1.8, 1.9)]
    structs = [StructureSpec(f"structure_{i + 1}", bands[i % len(bands)], (size * 0.09, size * 0.13))
               for i in range(n_structures)]
    shape = (size,) * dims
    return PhantomSpec(shape, (1.0,) * dims, tuple(structs))
