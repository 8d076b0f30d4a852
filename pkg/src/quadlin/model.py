"""Objective assembly and evaluation for the QuadLin fluence model.

The constrained formulation's auxiliary under/overdose variables are
eliminated analytically: at any fixed fluence the inner optimization over
each auxiliary is separable with a closed-form hinge solution, so the
objective reduces to per-voxel penalties of the dose vector. The reduced
per-voxel terms are evaluated by the kernel backend (compiled or numpy).

Sections of the objective:
  z1  target voxels: quadratic under/overdose vs the [min, max] of
      predicted and prescribed dose, plus a linear pull to prescription.
  z2  all OAR voxels: quadratic overdose vs prediction plus linear dose.
  z3  max-dose organs: linear overdose above the structure's max predicted
      dose, minus a reward for dipping below zeta * MaxP (capped at
      chi * MaxP).
  z4  mean-dose organs: quadratic overdose of the structure mean vs the
      predicted mean, plus quadratic mean.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import LengthMismatch
from .patient_io import PatientCase, build_prescription


@dataclass(frozen=True)
class Coefficients:
    """Importance coefficients; defaults are the published working set."""

    psi1: float = 2e6
    psi2: float = 0.5e6
    psi3: float = 0.2e6
    psi4: float = 0.2e6
    psi5: float = 1e3
    xi1: float = 20e3
    xi2: float = 0.2e3
    xi3: float = 1e3
    xi4: float = 50.0
    zeta: float = 0.9
    chi: float = 0.1
    zeta_overrides: dict = field(default_factory=dict)
    chi_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("psi1", "psi2", "psi3", "psi4", "psi5", "xi1", "xi2", "xi3", "xi4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name, zeta, chi in self._structure_params():
            if not (0.0 < zeta < 1.0 and 0.0 < chi < 1.0):
                raise ValueError(f"zeta/chi for {name or 'default'} must lie in (0, 1)")
            if chi < 1.0 - zeta:
                raise ValueError(f"chi must satisfy chi >= 1 - zeta for {name or 'default'}")

    def _structure_params(self):
        yield None, self.zeta, self.chi
        names = set(self.zeta_overrides) | set(self.chi_overrides)
        for name in sorted(names):
            yield (name,
                   self.zeta_overrides.get(name, self.zeta),
                   self.chi_overrides.get(name, self.chi))

    def zeta_for(self, structure_name: str) -> float:
        return self.zeta_overrides.get(structure_name, self.zeta)

    def chi_for(self, structure_name: str) -> float:
        return self.chi_overrides.get(structure_name, self.chi)

    def replace(self, **changes) -> "Coefficients":
        return dataclasses.replace(self, **changes)

    def mimic_only(self) -> "Coefficients":
        """Drop every linear improvement term (all xi = 0): pure dose mimicking."""
        return self.replace(xi1=0.0, xi2=0.0, xi3=0.0, xi4=0.0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if not d["zeta_overrides"]:
            del d["zeta_overrides"]
        if not d["chi_overrides"]:
            del d["chi_overrides"]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Coefficients":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown coefficient keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "Coefficients":
        return cls.from_dict(json.loads(open(path).read()))


@dataclass(frozen=True)
class VoxelPenaltyParams:
    """Penalty parameters for one voxel (scalar evaluation path)."""

    voxel_id: int
    klass: str  # "ptv" | "oar"
    weight_norm: float
    lower_gy: float = 0.0
    upper_gy: float = 0.0
    pres_gy: float = 0.0
    pred_gy: float = 0.0
    max_struct_gy: float | None = None  # MaxP of the voxel's max-dose structure
    max_weight_norm: float = 0.0  # omega / sum(omega) over the max-dose set
    structure_name: str | None = None


@dataclass(frozen=True)
class MeanStructureParams:
    structure_id: str
    voxel_ids: np.ndarray
    weights: np.ndarray  # normalized, sum to 1
    mean_pred_gy: float


@dataclass(frozen=True)
class ObjectiveBreakdown:
    z1: float
    z2: float
    z3: float
    z4: float

    @property
    def total(self) -> float:
        return self.z1 + self.z2 + self.z3 + self.z4

    def to_dict(self) -> dict:
        return {"z1": self.z1, "z2": self.z2, "z3": self.z3, "z4": self.z4,
                "total": self.total}


@dataclass(frozen=True)
class QuadLinModel:
    """Reduced objective over nonnegative fluence; immutable after assembly."""

    n_voxels: int
    n_beamlets: int
    influence: sp.csr_matrix
    influence_t: sp.csr_matrix  # transpose, CSR for fast adjoint products
    coefficients: Coefficients
    # target voxels
    ptv_idx: np.ndarray
    ptv_w: np.ndarray  # omega / sum over targets
    ptv_lo: np.ndarray
    ptv_up: np.ndarray
    ptv_pres: np.ndarray
    # all OAR voxels
    oar_idx: np.ndarray
    oar_w: np.ndarray
    oar_pred: np.ndarray
    # max-dose organ voxels (concatenated per structure)
    max_idx: np.ndarray
    max_w: np.ndarray
    max_ref: np.ndarray  # MaxP of the voxel's structure
    max_lo: np.ndarray  # zeta * MaxP
    max_span: np.ndarray  # chi * MaxP
    # mean-dose structures
    mean_structs: tuple[MeanStructureParams, ...]
    max_struct_refs: dict = field(default_factory=dict)  # name -> MaxP

    def summary(self) -> dict:
        return {
            "n_voxels": self.n_voxels,
            "n_beamlets": self.n_beamlets,
            "n_target_voxels": int(len(self.ptv_idx)),
            "n_oar_voxels": int(len(self.oar_idx)),
            "n_max_dose_voxels": int(len(self.max_idx)),
            "max_dose_refs_gy": {k: float(v) for k, v in self.max_struct_refs.items()},
            "mean_dose_refs_gy": {s.structure_id: float(s.mean_pred_gy)
                                  for s in self.mean_structs},
            "coefficients": self.coefficients.to_dict(),
        }


def compute_dose(influence, fluence) -> np.ndarray:
    """Dose vector A @ x; deterministic summation order (CSR row-major)."""
    mat = influence.to_csr() if hasattr(influence, "to_csr") else influence
    x = np.asarray(fluence, dtype=np.float64)
    if x.shape != (mat.shape[1],):
        raise LengthMismatch(f"fluence length {x.shape} != n_beamlets {mat.shape[1]}")
    return mat @ x


def assemble_model(case: PatientCase, prediction=None, coeffs: Coefficients | None = None,
                   use_voxel_volume_weights: bool = False) -> QuadLinModel:
    """Derive per-voxel penalty parameters from prediction + prescription.

    Overlap handling: a voxel inside any target keeps only its target
    penalties and is removed from every OAR set; overlapping targets take
    the highest prescription level. Voxels outside the feasible mask (when
    present) are excluded from all penalty sets.
    """
    coeffs = coeffs if coeffs is not None else Coefficients()
    pred = np.asarray(case.predicted_dose if prediction is None else prediction,
                      dtype=np.float64)
    n = case.n_voxels
    if len(pred) != n:
        raise LengthMismatch(f"prediction length {len(pred)} != n_voxels {n}")

    omega = case.weights().astype(np.float64)
    if use_voxel_volume_weights:
        omega = omega * case.grid.voxel_volume_cc

    keep = np.ones(n, dtype=bool)
    if case.feasible_mask is not None:
        keep[:] = False
        keep[case.feasible_mask] = True

    pres = build_prescription(case.structures, n)
    in_ptv = np.zeros(n, dtype=bool)
    for s in case.structures.ptvs():
        in_ptv[s.voxel_ids] = True

    ptv_idx = np.flatnonzero(in_ptv & keep)
    ptv_pres = pres[ptv_idx]
    ptv_lo = np.minimum(pred[ptv_idx], ptv_pres)
    ptv_up = np.maximum(pred[ptv_idx], ptv_pres)
    wp = omega[ptv_idx]
    ptv_w = wp / wp.sum() if len(ptv_idx) else wp

    in_oar = np.zeros(n, dtype=bool)
    for s in case.structures.oars():
        in_oar[s.voxel_ids] = True
    oar_idx = np.flatnonzero(in_oar & keep & ~in_ptv)
    wo = omega[oar_idx]
    oar_w = wo / wo.sum() if len(oar_idx) else wo
    oar_pred = pred[oar_idx]

    max_idx_parts, max_ref_parts, max_lo_parts, max_span_parts = [], [], [], []
    max_w_parts, max_struct_refs = [], {}
    for s in case.structures:
        if s.kind != "oar_max":
            continue
        ids = s.voxel_ids[keep[s.voxel_ids] & ~in_ptv[s.voxel_ids]]
        if len(ids) == 0:
            warnings.warn(f"max-dose structure {s.name} has no usable voxels; dropped")
            continue
        ref = float(pred[ids].max())
        max_struct_refs[s.name] = ref
        max_idx_parts.append(ids)
        max_w_parts.append(omega[ids])
        max_ref_parts.append(np.full(len(ids), ref))
        max_lo_parts.append(np.full(len(ids), coeffs.zeta_for(s.name) * ref))
        max_span_parts.append(np.full(len(ids), coeffs.chi_for(s.name) * ref))
    if max_idx_parts:
        max_idx = np.concatenate(max_idx_parts)
        wm = np.concatenate(max_w_parts)
        max_w = wm / wm.sum()
        max_ref = np.concatenate(max_ref_parts)
        max_lo = np.concatenate(max_lo_parts)
        max_span = np.concatenate(max_span_parts)
    else:
        max_idx = np.zeros(0, dtype=np.int64)
        max_w = max_ref = max_lo = max_span = np.zeros(0)

    mean_structs = []
    for s in case.structures:
        if s.kind != "oar_mean":
            continue
        ids = s.voxel_ids[keep[s.voxel_ids] & ~in_ptv[s.voxel_ids]]
        if len(ids) == 0:
            warnings.warn(f"mean-dose structure {s.name} has no usable voxels; dropped")
            continue
        w = omega[ids] / omega[ids].sum()
        mean_structs.append(MeanStructureParams(
            structure_id=s.name,
            voxel_ids=ids.astype(np.int64),
            weights=w,
            mean_pred_gy=float(np.dot(w, pred[ids])),
        ))

    csr = case.influence.to_csr()
    return QuadLinModel(
        n_voxels=n,
        n_beamlets=case.n_beamlets,
        influence=csr,
        influence_t=csr.T.tocsr(),
        coefficients=coeffs,
        ptv_idx=ptv_idx.astype(np.int64), ptv_w=ptv_w,
        ptv_lo=ptv_lo, ptv_up=ptv_up, ptv_pres=ptv_pres,
        oar_idx=oar_idx.astype(np.int64), oar_w=oar_w, oar_pred=oar_pred,
        max_idx=max_idx.astype(np.int64), max_w=max_w,
        max_ref=max_ref, max_lo=max_lo, max_span=max_span,
        mean_structs=tuple(mean_structs),
        max_struct_refs=max_struct_refs,
    )


def _voxel_terms(model: QuadLinModel, d: np.ndarray, grad_d, delta: float):
    c = model.coefficients
    return kernels.accumulate_penalties(
        d, grad_d, delta,
        c.psi1, c.psi2, c.psi3, c.psi4, c.xi1, c.xi2, c.xi3,
        model.ptv_idx, model.ptv_w, model.ptv_lo, model.ptv_up, model.ptv_pres,
        model.oar_idx, model.oar_w, model.oar_pred,
        model.max_idx, model.max_w, model.max_ref, model.max_lo, model.max_span,
    )


def _mean_terms(model: QuadLinModel, d: np.ndarray, grad_d=None) -> float:
    c = model.coefficients
    z4 = 0.0
    for s in model.mean_structs:
        mean = float(np.dot(s.weights, d[s.voxel_ids]))
        over = max(mean - s.mean_pred_gy, 0.0)
        z4 += c.psi5 * over * over + c.xi4 * mean * mean
        if grad_d is not None:
            np.add.at(grad_d, s.voxel_ids,
                      (2.0 * c.psi5 * over + 2.0 * c.xi4 * mean) * s.weights)
    return z4


def objective_from_dose(model: QuadLinModel, d: np.ndarray) -> ObjectiveBreakdown:
    """Exact (unsmoothed) objective breakdown at a precomputed dose vector."""
    if len(d) != model.n_voxels:
        raise LengthMismatch(f"dose length {len(d)} != n_voxels {model.n_voxels}")
    z1, z2, z3 = _voxel_terms(model, np.asarray(d, dtype=np.float64), None, 0.0)
    z4 = _mean_terms(model, d)
    return ObjectiveBreakdown(z1=z1, z2=z2, z3=z3, z4=z4)


def objective(model: QuadLinModel, fluence) -> ObjectiveBreakdown:
    """Exact objective breakdown at a fluence vector."""
    return objective_from_dose(model, compute_dose(model.influence, fluence))


def smoothed_value_and_gradient(model: QuadLinModel, fluence, delta: float):
    """Smoothed objective value and its gradient w.r.t. fluence.

    At delta = 0 the value is exact and the returned vector is a valid
    subgradient (kink convention: 0 inside each kink's subdifferential).
    """
    x = np.asarray(fluence, dtype=np.float64)
    d = compute_dose(model.influence, x)
    dfdd = np.zeros(model.n_voxels)
    z1, z2, z3 = _voxel_terms(model, d, dfdd, delta)
    z4 = _mean_terms(model, d, dfdd)
    g = model.influence_t @ dfdd
    return z1 + z2 + z3 + z4, g


def subgradient(model: QuadLinModel, fluence, delta: float = 0.0) -> np.ndarray:
    """Subgradient of the reduced objective at a fluence vector."""
    return smoothed_value_and_gradient(model, fluence, delta)[1]


def voxel_penalty(params: VoxelPenaltyParams, coeffs: Coefficients, d: float) -> float:
    """Total penalty contribution of one voxel at dose d (scalar path).

    Mirrors the array kernel exactly; used for spot checks and oracles.
    """
    w = params.weight_norm
    if params.klass == "ptv":
        under = max(params.lower_gy - d, 0.0)
        over = max(d - params.upper_gy, 0.0)
        return w * (coeffs.psi1 * under ** 2 + coeffs.psi2 * over ** 2
                    + coeffs.xi1 * abs(params.pres_gy - d))
    total = w * (coeffs.psi3 * max(d - params.pred_gy, 0.0) ** 2 + coeffs.xi2 * d)
    if params.max_struct_gy is not None:
        ref = params.max_struct_gy
        zeta = coeffs.zeta_for(params.structure_name) if params.structure_name else coeffs.zeta
        chi = coeffs.chi_for(params.structure_name) if params.structure_name else coeffs.chi
        over_max = max(d - ref, 0.0)
        under_max = max(chi * ref - max(d - zeta * ref, 0.0), 0.0)
        total += params.max_weight_norm * (coeffs.psi4 * over_max - coeffs.xi3 * under_max)
    return total
