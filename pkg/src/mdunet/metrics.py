"""Overlap, boundary and volume agreement between binary segmentations.

``dsc`` and ``vs`` are voxel counts; ``mhd`` is a Hausdorff distance in which
the inner maximum over boundary points is replaced by a percentile (95th by
default). Undefined results (e.g. MHD with an empty mask) come back as NaN and
are counted separately by :func:`aggregate` rather than raising.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SegmentationMask:
    data: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim not in (2, 3):
            raise ValueError(f"masks are 2D or 3D, got shape {arr.shape}")
        if arr.dtype != bool:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be strictly binary {0, 1}")
            arr = arr.astype(bool)
        spacing = (1.0,) * arr.ndim if self.spacing is None else tuple(float(s) for s in self.spacing)
        if len(spacing) != arr.ndim:
            raise ValueError(f"spacing {spacing} does not match {arr.ndim} mask axes")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def volume(self) -> int:
        return int(self.data.sum())


def as_mask(m, spacing=None) -> SegmentationMask:
    if isinstance(m, SegmentationMask):
        return m
    return SegmentationMask(np.asarray(m), spacing)


def _pair(ref, auto) -> tuple[SegmentationMask, SegmentationMask]:
    ref, auto = as_mask(ref), as_mask(auto)
    if ref.data.shape != auto.data.shape:
        raise ValueError(f"mask shapes differ: ref {ref.data.shape} vs auto {auto.data.shape}")
    return ref, auto


def dsc(ref, auto) -> float:
    """2|A ∩ B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    ref, auto = _pair(ref, auto)
    total = ref.volume + auto.volume
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ref.data, auto.data).sum()) / total


def vs(ref, auto) -> float:
    """1 - ||A| - |B|| / (|A| + |B|); NaN when both masks are empty."""
    ref, auto = _pair(ref, auto)
    a, b = ref.volume, auto.volume
    if a + b == 0:
        return math.nan
    return 1.0 - abs(a - b) / (a + b)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbour or lying on the array border."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def directed_distances(src: SegmentationMask, dst: SegmentationMask) -> np.ndarray:
    """Distance (mm) from every boundary voxel of ``src`` to the boundary of ``dst``."""
    to_dst = ndimage.distance_transform_edt(~boundary(dst.data), sampling=dst.spacing)
    return to_dst[boundary(src.data)]


def mhd(ref, auto, percentile: float = 95.0, pooled: bool = False) -> float:
    """Percentile Hausdorff distance in mm; NaN if either mask is empty.

    By default the percentile is taken over each directed distance set and the
    larger of the two is returned. ``pooled=True`` takes one percentile over
    the union of both directed sets instead.
    """
    ref, auto = _pair(ref, auto)
    if ref.spacing != auto.spacing:
        raise ValueError(f"spacing differs: ref {ref.spacing} vs auto {auto.spacing}")
    if ref.volume == 0 or auto.volume == 0:
        return math.nan
    d_ra = directed_distances(ref, auto)
    d_ar = directed_distances(auto, ref)
    if pooled:
        return float(np.percentile(np.concatenate([d_ra, d_ar]), percentile))
    return float(max(np.percentile(d_ra, percentile), np.percentile(d_ar, percentile)))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    mhd: float
    vs: float

    @property
    def mhd_failed(self) -> bool:
        return math.isnan(self.mhd)


def evaluate_case(case_id: str, ref, auto, percentile: float = 95.0, pooled: bool = False) -> CaseMetrics:
    return CaseMetrics(case_id, dsc(ref, auto), mhd(ref, auto, percentile, pooled), vs(ref, auto))


METRICS = ("dsc", "mhd", "vs")


@dataclass
class MetricsReport:
    records: list[CaseMetrics]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def mhd_failures(self) -> int:
        return sum(r.mhd_failed for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "dsc", "mhd_mm", "vs"])
        for r in self.records:
            w.writerow([r.case_id, repr(r.dsc), repr(r.mhd), repr(r.vs)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"Cases: {len(self.records)} (MHD undefined: {self.mhd_failures})",
            f"{'Metric':<10}{'Mean ± Std':>20}",
        ]
        labels = {"dsc": "DSC", "mhd": "MHD (mm)", "vs": "VS"}
        for m in METRICS:
            if self.counts.get(m, 0) == 0:
                lines.append(f"{labels[m]:<10}{'undefined':>20}")
                continue
            digits = 2 if m == "mhd" else 3
            lines.append(f"{labels[m]:<10}{f'{self.mean[m]:.{digits}f} ± {self.std[m]:.{digits}f}':>20}")
        return "\n".join(lines) + "\n"


def aggregate(records: list[CaseMetrics]) -> MetricsReport:
    """Mean and population standard deviation per metric over defined values."""
    if not records:
        raise ValueError("aggregate needs at least one record")
    report = MetricsReport(list(records))
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in records], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        report.counts[m] = int(vals.size)
        if vals.size:
            report.mean[m] = float(vals.mean())
            report.std[m] = float(vals.std())
    return report
