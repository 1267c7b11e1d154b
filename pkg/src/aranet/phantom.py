"""Deterministic synthetic phantoms: CT, structure masks and an analytic dose.

Dose is the prescription inside the PTV and, outside,

    P * (alpha * exp(-dist / sigma) + (1 - alpha) * beam)

where ``dist`` is the exact Euclidean distance (mm) to the PTV and ``beam``
averages ``n_beams`` Gaussian ridges through the PTV centroid at equally
spaced angles in the axial plane.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .dosimetry import EmptyStructureError, MaskVolume, Volume
from .persist import read_mask, read_volume, write_mask, write_volume


OAR_LABELS = ("bladder", "femur_L", "femur_R", "small_intestine", "rectum")
STRUCTURE_LABELS = ("ptv",) + OAR_LABELS
BONE_LABELS = frozenset({"femur_L", "femur_R"})
COHORT_SPLIT = (40, 6, 8)
FALLOFF_WEIGHT = 0.7

# (center, radii) as fractions of the grid extents, (z, y, x)
_DEFAULT_GEOMETRY = {
    "ptv": ((0.5, 0.5, 0.5), (0.375, 0.16, 0.19)),
    "bladder": ((0.5, 0.22, 0.5), (0.3, 0.08, 0.12)),
    "femur_L": ((0.5, 0.55, 0.14), (0.375, 0.08, 0.08)),
    "femur_R": ((0.5, 0.55, 0.86), (0.375, 0.08, 0.08)),
    "small_intestine": ((0.5, 0.16, 0.8), (0.25, 0.06, 0.1)),
    "rectum": ((0.5, 0.78, 0.5), (0.3, 0.06, 0.08)),
}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    label: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def rasterize(self, grid: Sequence[int]) -> np.ndarray:
        zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in grid), indexing="ij")
        r = ((zz - self.center[0]) / self.radii[0]) ** 2
        r += ((yy - self.center[1]) / self.radii[1]) ** 2
        r += ((xx - self.center[2]) / self.radii[2]) ** 2
        return r <= 1.0

    def inside(self, grid: Sequence[int]) -> bool:
        return all(c - r >= -0.5 and c + r <= n - 0.5 for c, r, n in zip(self.center, self.radii, grid))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    grid: tuple[int, int, int] = (8, 64, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    prescription_gy: float = 45.0
    ptv: Ellipsoid | None = None
    oars: tuple[Ellipsoid, ...] = field(default_factory=tuple)
    falloff_sigma_mm: float = 12.0
    n_beams: int = 7

    def __post_init__(self):
        if self.ptv is None:
            geo = default_geometry(self.grid)
            object.__setattr__(self, "ptv", geo[0])
            if not self.oars:
                object.__setattr__(self, "oars", geo[1])

    def validate(self) -> None:
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise PhantomError(f"invalid grid {self.grid}")
        if not self.falloff_sigma_mm > 0 or self.n_beams < 0 or not self.prescription_gy > 0:
            raise PhantomError("falloff_sigma_mm and prescription_gy must be positive, n_beams >= 0")
        for e in (self.ptv, *self.oars):
            if not e.inside(self.grid):
                raise PhantomError(f"ellipsoid {e.label!r} extends outside grid {self.grid}")
        ptv = self.ptv.rasterize(self.grid)
        if not ptv.any():
            raise PhantomError("PTV is empty")
        for e in self.oars:
            if (e.rasterize(self.grid) & ptv).any():
                raise PhantomError(f"{e.label!r} overlaps the PTV")


def default_geometry(grid: Sequence[int]) -> tuple[Ellipsoid, tuple[Ellipsoid, ...]]:
    def make(label):
        c, r = _DEFAULT_GEOMETRY[label]
        return Ellipsoid(label,
                         tuple(f * (n - 1) for f, n in zip(c, grid)),
                         tuple(max(f * n, 0.5) for f, n in zip(r, grid)))

    return make("ptv"), tuple(make(label) for label in OAR_LABELS)


def jittered_spec(seed: int, grid: Sequence[int] = (8, 64, 64), **kwargs) -> PhantomSpec:
    """Default anatomy with seeded in-plane shifts and radius scaling."""
    grid = tuple(int(g) for g in grid)
    base_ptv, base_oars = default_geometry(grid)
    rng = np.random.default_rng(seed)
    for _ in range(50):
        shapes = []
        for e in (base_ptv, *base_oars):
            shift = rng.uniform(-0.04, 0.04, size=2) * np.array(grid[1:])
            scale = rng.uniform(0.9, 1.1, size=3)
            shapes.append(Ellipsoid(
                e.label,
                (e.center[0], e.center[1] + float(shift[0]), e.center[2] + float(shift[1])),
                tuple(float(r * s) for r, s in zip(e.radii, scale))))
        spec = PhantomSpec(seed=seed, grid=grid, ptv=shapes[0], oars=tuple(shapes[1:]), **kwargs)
        try:
            spec.validate()
        except PhantomError:
            continue
        return spec
    return PhantomSpec(seed=seed, grid=grid, ptv=base_ptv, oars=base_oars, **kwargs)


def distance_transform(mask: MaskVolume | np.ndarray, spacing_mm: Sequence[float]) -> Volume:
    """Exact Euclidean distance in mm from each voxel to the nearest mask voxel."""
    values = mask.values if isinstance(mask, MaskVolume) else np.asarray(mask)
    values = values.astype(bool)
    if not values.any():
        label = mask.label if isinstance(mask, MaskVolume) else "mask"
        raise EmptyStructureError(f"distance transform of empty structure {label!r}")
    return Volume(np.sqrt(kernels.edt_sq(values, tuple(float(s) for s in spacing_mm))), spacing_mm)


def _beam_pattern(ptv: np.ndarray, spacing: Sequence[float], n_beams: int) -> np.ndarray:
    if n_beams == 0:
        return np.zeros(ptv.shape)
    idx = np.argwhere(ptv)
    cy, cx = idx[:, 1].mean(), idx[:, 2].mean()
    ys = (np.arange(ptv.shape[1]) - cy) * spacing[1]
    xs = (np.arange(ptv.shape[2]) - cx) * spacing[2]
    dy, dx = np.meshgrid(ys, xs, indexing="ij")
    # ridge width: equivalent in-plane radius of the PTV
    area = np.count_nonzero(ptv.any(axis=0)) * spacing[1] * spacing[2]
    width = math.sqrt(area / math.pi)
    total = np.zeros(dy.shape)
    for k in range(n_beams):
        theta = math.pi * k / n_beams
        perp = -math.sin(theta) * dx + math.cos(theta) * dy
        total += np.exp(-0.5 * (perp / width) ** 2)
    return np.broadcast_to(total / n_beams, ptv.shape)


def _synthetic_ct(spec: PhantomSpec, masks: dict[str, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    d, h, w = spec.grid
    noise = gaussian_filter(rng.standard_normal(spec.grid), sigma=(0.5, 2.0, 2.0), mode="nearest")
    span = noise.max() - noise.min()
    soft = 0.3 + 0.15 * (noise - noise.min()) / (span if span > 0 else 1.0)
    body = Ellipsoid("body", ((d - 1) / 2, (h - 1) / 2, (w - 1) / 2), (d * 10.0, 0.47 * h, 0.49 * w))
    ct = np.where(body.rasterize(spec.grid), soft, 0.0)
    for label in BONE_LABELS & masks.keys():
        ct = np.where(masks[label], 0.85 + 0.1 * (soft - 0.3) / 0.15, ct)
    return np.clip(ct, 0.0, 1.0)


def generate(spec: PhantomSpec) -> tuple[Volume, list[MaskVolume], Volume]:
    """Build (ct, masks, dose) for a phantom; masks are ordered ptv then OARs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    raw = {e.label: e.rasterize(spec.grid) for e in (spec.ptv, *spec.oars)}
    ptv = raw[spec.ptv.label]

    dist = distance_transform(ptv, spec.spacing_mm).values.astype(np.float64)
    falloff = np.exp(-dist / spec.falloff_sigma_mm)
    beam = _beam_pattern(ptv, spec.spacing_mm, spec.n_beams)
    rel = FALLOFF_WEIGHT * falloff + (1.0 - FALLOFF_WEIGHT) * beam
    dose = np.where(ptv, 1.0, rel) * spec.prescription_gy

    ct = _synthetic_ct(spec, raw, rng)
    masks = [MaskVolume(raw[e.label], label=e.label, spacing_mm=spec.spacing_mm) for e in (spec.ptv, *spec.oars)]
    return (Volume(ct.astype(np.float32), spec.spacing_mm), masks,
            Volume(dose.astype(np.float32), spec.spacing_mm))


# ---------------------------------------------------------------- datasets


@dataclass
class ManifestEntry:
    sample_id: str
    split: str
    paths: list[str]


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    prescription_gy: float

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


@dataclass
class Sample:
    sample_id: str
    split: str
    ct: Volume
    masks: list[MaskVolume]
    dose: Volume


def split_counts(n: int, split: Sequence[int] = COHORT_SPLIT) -> tuple[int, int, int]:
    """Train/val/test counts for ``n`` samples; a split not summing to ``n`` is applied proportionally."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if len(split) != 3 or min(split) < 0 or sum(split) == 0:
        raise ValueError(f"split must be three non-negative counts, got {split}")
    if sum(split) == n:
        return tuple(int(s) for s in split)
    total = sum(split)
    val = int(round(n * split[1] / total))
    test = int(round(n * split[2] / total))
    while val + test > n - 1 and (val or test):
        if test >= val:
            test -= 1
        else:
            val -= 1
    return n - val - test, val, test


MANIFEST_NAME = "manifest.txt"


def _write_sample(out_dir: Path, sample_id: str, spec: PhantomSpec) -> list[str]:
    ct, masks, dose = generate(spec)
    sdir = out_dir / sample_id
    sdir.mkdir(parents=True, exist_ok=True)
    write_volume(sdir / "ct.dvol", ct)
    write_volume(sdir / "dose.dvol", dose)
    paths = [f"{sample_id}/ct.dvol", f"{sample_id}/dose.dvol"]
    for m in masks:
        write_mask(sdir / f"{m.label}.dmask", m)
        paths.append(f"{sample_id}/{m.label}.dmask")
    return paths


def make_dataset(n: int, base_seed: int, out_dir, split: Sequence[int] = COHORT_SPLIT,
                 grid: Sequence[int] = (8, 64, 64), prescription_gy: float = 45.0) -> Manifest:
    """Write ``n`` jittered phantoms and a manifest assigning train/val/test membership."""
    n_train, n_val, n_test = split_counts(n, split)
    if n_val == 0 or n_test == 0:
        warnings.warn(f"dataset of {n} samples has empty validation or test split", stacklevel=2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ids = [f"sample_{i:03d}" for i in range(n)]
    order = np.random.default_rng(base_seed).permutation(n)
    splits = [""] * n
    for rank, i in enumerate(order):
        splits[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    specs = [jittered_spec(base_seed + i, grid, prescription_gy=prescription_gy) for i in range(n)]
    workers = max(1, int(os.environ.get("ARANET_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        all_paths = list(pool.map(lambda a: _write_sample(out, *a), zip(ids, specs)))

    entries = [ManifestEntry(i, s, p) for i, s, p in zip(ids, splits, all_paths)]
    manifest = Manifest(entries, prescription_gy)
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest


def write_manifest(path, manifest: Manifest) -> None:
    lines = [f"# prescription_gy={manifest.prescription_gy!r}", "# id split paths..."]
    lines += [" ".join([e.sample_id, e.split, *e.paths]) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    prescription = None
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "prescription_gy":
                prescription = float(value)
            continue
        parts = line.split()
        if len(parts) < 3 or parts[1] not in ("train", "val", "test"):
            raise ValueError(f"{path}:{lineno}: malformed manifest line")
        entries.append(ManifestEntry(parts[0], parts[1], parts[2:]))
    if prescription is None:
        raise ValueError(f"{path}: manifest lacks prescription_gy")
    return Manifest(entries, prescription)


def load_sample(root, entry: ManifestEntry) -> Sample:
    root = Path(root)
    ct = dose = None
    masks = []
    for rel in entry.paths:
        p = root / rel
        if p.name == "ct.dvol":
            ct = read_volume(p)
        elif p.name == "dose.dvol":
            dose = read_volume(p)
        elif p.suffix == ".dmask":
            masks.append(read_mask(p))
    if ct is None or dose is None:
        raise ValueError(f"sample {entry.sample_id}: ct.dvol and dose.dvol are required")
    order = {label: i for i, label in enumerate(STRUCTURE_LABELS)}
    masks.sort(key=lambda m: order.get(m.label, len(order)))
    return Sample(entry.sample_id, entry.split, ct, masks, dose)


def load_split(root, split: str) -> tuple[list[Sample], float]:
    manifest = read_manifest(root)
    return [load_sample(root, e) for e in manifest.split(split)], manifest.prescription_gy
