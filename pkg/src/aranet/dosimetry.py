"""Dose-volume histograms and plan-quality metrics.

Volumes are counted in voxels; on a uniform grid the voxel volume cancels
in every ratio reported here.  V_x is a fraction in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class EmptyStructureError(ValueError):
    """A structure mask selects no voxels."""


@dataclass
class Volume:
    values: np.ndarray
    spacing_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"Volume must be 3D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Volume contains non-finite values")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class MaskVolume:
    values: np.ndarray
    label: str = "mask"
    spacing_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise ValueError(f"MaskVolume {self.label!r} must be 3D, got shape {arr.shape}")
        if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"MaskVolume {self.label!r} is not binary")
        self.values = arr.astype(np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self):
        return self.values.shape

    @property
    def voxels(self) -> int:
        return int(self.values.sum())


@dataclass
class DvhCurve:
    dose_axis: np.ndarray
    cum_fraction: np.ndarray
    structure: str


@dataclass
class StructureMetrics:
    structure: str
    d_mean: float
    d2: float
    d50: float
    d95: float
    d98: float
    v_x: float
    ci: float | None = None
    hi: float | None = None


@dataclass
class MetricReport:
    sample: str
    structures: dict[str, StructureMetrics] = field(default_factory=dict)


def _masked(dose: Volume, mask: MaskVolume) -> np.ndarray:
    if dose.shape != mask.shape:
        raise ValueError(f"dose shape {dose.shape} does not match mask {mask.label!r} shape {mask.shape}")
    vals = dose.values[mask.values.astype(bool)]
    if vals.size == 0:
        raise EmptyStructureError(f"structure {mask.label!r} is empty")
    return vals.astype(np.float64)


def dvh(dose: Volume, mask: MaskVolume, n_bins: int = 100) -> DvhCurve:
    """Cumulative DVH sampled at ``n_bins`` uniform dose levels from 0 to the max masked dose."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    vals = np.sort(_masked(dose, mask))
    axis = np.linspace(0.0, vals[-1], n_bins)
    # voxels with dose >= d = K - (# voxels with dose < d)
    below = np.searchsorted(vals, axis, side="left")
    frac = (vals.size - below) / vals.size
    return DvhCurve(dose_axis=axis, cum_fraction=frac, structure=mask.label)


def d_mean(dose: Volume, mask: MaskVolume) -> float:
    vals = _masked(dose, mask)
    return float(vals.sum() / vals.size)


def d_percentile(dose: Volume, mask: MaskVolume, m: float) -> float:
    """Minimal dose covering ``m`` percent of the structure: the ceil(m/100 * K)-th highest voxel dose."""
    if not 0 < m <= 100:
        raise ValueError(f"m must lie in (0, 100], got {m}")
    vals = _masked(dose, mask)
    k = math.ceil(Fraction(repr(float(m))) * vals.size / 100)
    k = min(max(k, 1), vals.size)
    return float(np.sort(vals)[::-1][k - 1])


def v_at(dose: Volume, mask: MaskVolume, x: float) -> float:
    """Fraction of the structure receiving at least ``x`` Gy."""
    vals = _masked(dose, mask)
    return int(np.count_nonzero(vals >= x)) / vals.size


def conformity_index(dose: Volume, ptv: MaskVolume, prescription: float) -> float:
    """(TV ∩ PIV)^2 / (TV · PIV) with PIV the prescription isodose volume; 0 if PIV is empty."""
    if not prescription > 0:
        raise ValueError(f"prescription must be positive, got {prescription}")
    tv_mask = ptv.values.astype(bool)
    _masked(dose, ptv)
    piv_mask = dose.values >= prescription
    tv = int(np.count_nonzero(tv_mask))
    piv = int(np.count_nonzero(piv_mask))
    if piv == 0:
        return 0.0
    overlap = int(np.count_nonzero(tv_mask & piv_mask))
    return float(Fraction(overlap * overlap, tv * piv))


def heterogeneity_index(dose: Volume, ptv: MaskVolume) -> float:
    """(D2 - D98) / D50."""
    d50 = d_percentile(dose, ptv, 50)
    if d50 == 0:
        raise ZeroDivisionError(f"heterogeneity index undefined: D50 of {ptv.label!r} is 0")
    return (d_percentile(dose, ptv, 2) - d_percentile(dose, ptv, 98)) / d50


def ape(truth: Sequence[float], prediction: Sequence[float]) -> float:
    """Average percent error, normalised by the prediction: mean(|t - p| / p) * 100."""
    if len(truth) != len(prediction):
        raise ValueError(f"ape: {len(truth)} truths vs {len(prediction)} predictions")
    if not truth:
        raise ValueError("ape: empty cohort")
    total = 0.0
    for t, p in zip(truth, prediction):
        if p == 0:
            raise ZeroDivisionError("ape: prediction value is zero")
        total += abs(t - p) / p
    return total / len(truth) * 100.0


def ape_terms(truth: Sequence[float], prediction: Sequence[float]) -> list[float]:
    """Per-case percent errors whose mean is ``ape``."""
    return [ape([t], [p]) for t, p in zip(truth, prediction)]


def abs_error_gy(truth: float, prediction: float) -> float:
    return abs(truth - prediction)


def structure_metrics(dose: Volume, mask: MaskVolume, vx: float = 50.0,
                      prescription: float | None = None, target: bool = False) -> StructureMetrics:
    """All per-structure metrics; CI and HI only for the target volume."""
    sm = StructureMetrics(
        structure=mask.label,
        d_mean=d_mean(dose, mask),
        d2=d_percentile(dose, mask, 2),
        d50=d_percentile(dose, mask, 50),
        d95=d_percentile(dose, mask, 95),
        d98=d_percentile(dose, mask, 98),
        v_x=v_at(dose, mask, vx),
    )
    if target:
        if prescription is None:
            raise ValueError("prescription dose is required for CI")
        sm.ci = conformity_index(dose, mask, prescription)
        sm.hi = heterogeneity_index(dose, mask) if sm.d50 > 0 else None
    return sm


def evaluate_structures(dose: Volume, masks: Sequence[MaskVolume], prescription: float,
                        vx: float = 50.0, target_label: str = "ptv", sample: str = "") -> MetricReport:
    report = MetricReport(sample=sample)
    for m in masks:
        if m.voxels == 0:
            continue
        report.structures[m.label] = structure_metrics(
            dose, m, vx=vx, prescription=prescription, target=m.label == target_label)
    return report
