"""DVH points/curves, clinical-criteria scoring and plan comparison.

Conventions (fixed, oracle-testable):
  - D_p is nearest-rank on the descending sort: the ceil(p/100 * n)-th
    largest dose, no interpolation.
  - D_0.1cc takes the minimum over the ceil(0.1cc / voxel_volume) hottest
    voxels; structures smaller than 0.1cc fall back to the max dose with a
    warning.
  - D_mean is the (weight-)mean dose, uniform weights by default.
  - Threshold comparisons are inclusive. Target D_99 criteria default to a
    coverage reading (achieved >= threshold); literal_le flips them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyStructure, LengthMismatch
from .patient_io import StructureSet, VoxelGrid

OAR_POINTS = ("D_mean", "D_0.1cc")
PTV_POINTS = ("D_1", "D_95", "D_99")
POINT_KINDS = OAR_POINTS + PTV_POINTS

# OAR criteria keyed by canonical roi name: (point, threshold Gy)
OAR_CRITERIA = {
    "brainstem": ("D_0.1cc", 50.0),
    "spinal_cord": ("D_0.1cc", 45.0),
    "right_parotid": ("D_mean", 26.0),
    "left_parotid": ("D_mean", 26.0),
    "esophagus": ("D_mean", 45.0),
    "larynx": ("D_mean", 45.0),
    "mandible": ("D_0.1cc", 73.5),
}

# Target D_99 thresholds keyed by prescription level (Gy)
PTV_D99_THRESHOLDS = {56.0: 53.2, 63.0: 59.9, 70.0: 66.5}


def dvh_point(dose, voxel_ids, grid: VoxelGrid, kind: str, weights=None) -> float:
    """One DVH point of a structure, in Gy."""
    if kind not in POINT_KINDS:
        raise ValueError(f"unknown DVH point kind {kind!r}")
    ids = np.asarray(voxel_ids, dtype=np.int64)
    if len(ids) == 0:
        raise EmptyStructure("cannot evaluate a DVH point on an empty structure")
    vals = np.asarray(dose, dtype=np.float64)[ids]
    n = len(vals)

    if kind == "D_mean":
        if weights is None:
            return float(vals.mean())
        w = np.asarray(weights, dtype=np.float64)
        return float(np.dot(w, vals) / w.sum())

    desc = np.sort(vals)[::-1]
    if kind == "D_0.1cc":
        k = math.ceil(0.1 / grid.voxel_volume_cc - 1e-9)
        if k > n:
            warnings.warn(
                f"structure volume {n * grid.voxel_volume_cc:.4f} cc < 0.1 cc; "
                "D_0.1cc falls back to max dose"
            )
            k = 1
        return float(desc[max(k, 1) - 1])

    p = {"D_1": 1, "D_95": 95, "D_99": 99}[kind]
    k = (p * n + 99) // 100  # exact integer ceil(p*n/100)
    return float(desc[k - 1])


def dvh_curve(dose, voxel_ids, n_bins: int = 200, max_gy: float | None = None):
    """Cumulative DVH: (bin edges Gy, fraction of volume receiving >= edge)."""
    ids = np.asarray(voxel_ids, dtype=np.int64)
    if len(ids) == 0:
        raise EmptyStructure("cannot compute a DVH curve on an empty structure")
    vals = np.asarray(dose, dtype=np.float64)[ids]
    top = max_gy if max_gy is not None else float(vals.max())
    edges = np.linspace(0.0, top * 1.02 + 1e-9, n_bins + 1)
    frac = (vals[None, :] >= edges[:, None]).mean(axis=1)
    return edges, frac


@dataclass(frozen=True)
class CriterionResult:
    roi: str
    point: str
    threshold_gy: float
    achieved_gy: float
    satisfied: bool
    is_target: bool


@dataclass
class CriteriaReport:
    rows: list[CriterionResult] = field(default_factory=list)

    def _pct(self, rows) -> float | None:
        if not rows:
            return None
        return 100.0 * sum(r.satisfied for r in rows) / len(rows)

    @property
    def oar_pct(self) -> float | None:
        return self._pct([r for r in self.rows if not r.is_target])

    @property
    def target_pct(self) -> float | None:
        return self._pct([r for r in self.rows if r.is_target])

    @property
    def all_pct(self) -> float | None:
        return self._pct(self.rows)

    def to_dict(self) -> dict:
        return {
            "criteria": [
                {
                    "roi": r.roi,
                    "point": r.point,
                    "threshold_gy": r.threshold_gy,
                    "achieved_gy": r.achieved_gy,
                    "satisfied": r.satisfied,
                    "is_target": r.is_target,
                }
                for r in self.rows
            ],
            "satisfied_pct": {
                "oars": self.oar_pct,
                "targets": self.target_pct,
                "all": self.all_pct,
            },
        }


def criteria_report(dose, structures: StructureSet, grid: VoxelGrid,
                    literal_le: bool = False, weights=None) -> CriteriaReport:
    """Score the per-ROI clinical criteria; absent ROIs are simply skipped."""
    report = CriteriaReport()
    for s in structures:
        if len(s.voxel_ids) == 0:
            continue
        if s.kind == "ptv":
            threshold = PTV_D99_THRESHOLDS.get(s.level_gy)
            if threshold is None:
                continue
            achieved = dvh_point(dose, s.voxel_ids, grid, "D_99")
            ok = achieved <= threshold if literal_le else achieved >= threshold
            report.rows.append(CriterionResult(s.name, "D_99", threshold, achieved, ok, True))
        else:
            crit = OAR_CRITERIA.get(s.name)
            if crit is None:
                continue
            point, threshold = crit
            w = None if weights is None else np.asarray(weights)[s.voxel_ids]
            achieved = dvh_point(dose, s.voxel_ids, grid, point, weights=w)
            report.rows.append(
                CriterionResult(s.name, point, threshold, achieved, achieved <= threshold, False)
            )
    return report


def structure_points(dose, structure, grid: VoxelGrid, weights=None) -> dict[str, float]:
    """The applicable DVH points of one structure."""
    points = PTV_POINTS if structure.kind == "ptv" else OAR_POINTS
    w = None if weights is None else np.asarray(weights)[structure.voxel_ids]
    out = {}
    for kind in points:
        kw = {"weights": w} if kind == "D_mean" else {}
        out[kind] = dvh_point(dose, structure.voxel_ids, grid, kind, **kw)
    return out


def compare_dvh_points(plan, reference, structures: StructureSet, grid: VoxelGrid,
                       weights=None) -> list[dict]:
    """Per (ROI, point): plan and reference values, signed and absolute diff."""
    plan = np.asarray(plan, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if plan.shape != reference.shape:
        raise LengthMismatch(
            f"dose vectors differ in length: {plan.shape} vs {reference.shape}"
        )
    rows = []
    for s in structures:
        if len(s.voxel_ids) == 0:
            continue
        p_points = structure_points(plan, s, grid, weights)
        r_points = structure_points(reference, s, grid, weights)
        for kind in p_points:
            signed = p_points[kind] - r_points[kind]
            rows.append({
                "roi": s.name,
                "point": kind,
                "plan_gy": p_points[kind],
                "reference_gy": r_points[kind],
                "signed_diff_gy": signed,
                "abs_diff_gy": abs(signed),
            })
    return rows


def diff_summary(rows: list[dict], key: str = "signed_diff_gy") -> dict[str, dict]:
    """Quartile summary of DVH-point differences per point kind."""
    out = {}
    for kind in POINT_KINDS:
        vals = np.asarray([r[key] for r in rows if r["point"] == kind])
        if len(vals) == 0:
            continue
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out[kind] = {
            "min": float(vals.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(vals.max()), "n": int(len(vals)),
        }
    return out


def aggregate_satisfaction(reports: list[CriteriaReport]) -> dict:
    """Pool criteria over many reports, Table-3 style.

    Per-ROI percentages use only the reports where the ROI exists; group
    rows pool over criteria instances, not over per-ROI averages.
    """
    if not reports:
        raise ValueError("need at least one report to aggregate")
    per_roi: dict[str, list[bool]] = {}
    target_flags, oar_flags = [], []
    for rep in reports:
        for r in rep.rows:
            per_roi.setdefault(r.roi, []).append(r.satisfied)
            (target_flags if r.is_target else oar_flags).append(r.satisfied)

    def pct(flags):
        return 100.0 * sum(flags) / len(flags) if flags else None

    return {
        "per_roi": {roi: pct(flags) for roi, flags in sorted(per_roi.items())},
        "per_roi_counts": {roi: len(flags) for roi, flags in sorted(per_roi.items())},
        "groups": {
            "All OARs": pct(oar_flags),
            "All Targets": pct(target_flags),
            "All ROIs": pct(oar_flags + target_flags),
        },
        "group_counts": {
            "All OARs": len(oar_flags),
            "All Targets": len(target_flags),
            "All ROIs": len(oar_flags) + len(target_flags),
        },
    }
