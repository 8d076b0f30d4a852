"""Shared test utilities: random instances and independent oracles.

The oracles here deliberately re-derive everything from the patient case
with plain loops and dense algebra; they must not reuse the package's
reduced-objective code paths.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from quadlin.model import Coefficients, assemble_model
from quadlin.patient_io import (
    DoseInfluenceMatrix,
    PatientCase,
    Structure,
    StructureSet,
    VoxelGrid,
    build_prescription,
)


def make_influence(rng, n_voxels, n_beamlets, density=0.5, scale=1.5):
    dense = rng.random((n_voxels, n_beamlets)) * scale
    dense[rng.random((n_voxels, n_beamlets)) >= density] = 0.0
    v, b = np.nonzero(dense)
    return DoseInfluenceMatrix.from_triplets(n_voxels, n_beamlets, v, b, dense[v, b])


def random_case(seed, n_voxels=20, n_beamlets=8, density=0.5,
                include_max=True, include_mean=True, include_reference=False,
                voxel_size_mm=(2.0, 2.0, 2.5)):
    """Small random patient with one PTV70, a max-dose OAR, a mean-dose OAR
    and a plain OAR covering the remaining voxels."""
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n_voxels)
    n_ptv = max(1, int(0.4 * n_voxels))
    n_max = max(1, int(0.2 * n_voxels)) if include_max else 0
    n_mean = max(1, int(0.2 * n_voxels)) if include_mean else 0
    ptv_ids = ids[:n_ptv]
    max_ids = ids[n_ptv:n_ptv + n_max]
    mean_ids = ids[n_ptv + n_max:n_ptv + n_max + n_mean]
    plain_ids = ids[n_ptv + n_max + n_mean:]

    structures = [Structure("ptv70", "ptv", ptv_ids, 70.0)]
    if n_max:
        structures.append(Structure("brainstem", "oar_max", max_ids))
    if n_mean:
        structures.append(Structure("larynx", "oar_mean", mean_ids))
    if len(plain_ids):
        structures.append(Structure("body", "oar", plain_ids))

    pred = np.zeros(n_voxels)
    pred[ptv_ids] = rng.uniform(60.0, 75.0, size=len(ptv_ids))
    rest = np.concatenate([max_ids, mean_ids, plain_ids]).astype(np.int64)
    pred[rest] = rng.uniform(5.0, 45.0, size=len(rest))

    reference = None
    if include_reference:
        reference = np.clip(pred + rng.normal(0.0, 2.0, size=n_voxels), 0.0, None)

    return PatientCase(
        id=f"rand-{seed}",
        grid=VoxelGrid((n_voxels, 1, 1), voxel_size_mm),
        structures=StructureSet(tuple(structures)),
        influence=make_influence(rng, n_voxels, n_beamlets, density),
        predicted_dose=pred,
        reference_dose=reference,
    )


def random_instance(seed, **kwargs):
    coeffs = kwargs.pop("coeffs", Coefficients())
    case = random_case(seed, **kwargs)
    return case, assemble_model(case, coeffs=coeffs)


def identity_ptv_case():
    """One PTV70 voxel, identity influence, prediction = prescription = 70."""
    return PatientCase(
        id="identity",
        grid=VoxelGrid((1, 1, 1), (2.0, 2.0, 2.0)),
        structures=StructureSet((Structure("ptv70", "ptv", np.array([0]), 70.0),)),
        influence=DoseInfluenceMatrix.from_triplets(1, 1, [0], [0], [1.0]),
        predicted_dose=np.array([70.0]),
    )


def zero_case():
    """All-zero prediction, OAR only: the optimum is exactly x = 0."""
    return PatientCase(
        id="zero",
        grid=VoxelGrid((3, 1, 1), (2.0, 2.0, 2.0)),
        structures=StructureSet((Structure("body", "oar", np.array([0, 1, 2])),)),
        influence=DoseInfluenceMatrix.from_triplets(
            3, 2, [0, 1, 2], [0, 1, 0], [1.0, 1.0, 0.5]),
        predicted_dose=np.zeros(3),
    )


def parotid_phantom(seed=7, n_ptv=250, n_oar=250, n_beamlets=50):
    """Desk-scale phantom: a PTV70 next to a parotid-like mean-dose OAR.

    The prediction underdoses the target (D_99 = 60 < 66.5 Gy) and
    overdoses the parotid (mean 30 > 26 Gy), so it violates both of its
    clinical criteria. Half the beamlets are "dirty" (strong target dose,
    heavy parotid spill), half are "clean" (weaker but barely any spill).
    A plan that merely mimics the prediction leans on the dirty beamlets
    and leaves the parotid mean in the free zone between the criterion
    (26 Gy) and the predicted mean (30 Gy); only the linear improvement
    terms reward choosing the clean ones and pushing the target to
    prescription.
    """
    rng = np.random.default_rng(seed)
    n_voxels = n_ptv + n_oar
    ptv_ids = np.arange(n_ptv)
    oar_ids = np.arange(n_ptv, n_voxels)
    n_dirty = n_beamlets // 2

    rows, cols, vals = [], [], []
    for v in ptv_ids:
        picks = rng.choice(n_dirty, size=4, replace=False)
        for b in picks:
            rows.append(v)
            cols.append(b)
            vals.append(rng.uniform(1.2, 1.6))
        picks = rng.choice(n_beamlets - n_dirty, size=4, replace=False) + n_dirty
        for b in picks:
            rows.append(v)
            cols.append(b)
            vals.append(rng.uniform(0.95, 1.05))
    for v in oar_ids:
        picks = rng.choice(n_dirty, size=4, replace=False)
        for b in picks:
            rows.append(v)
            cols.append(b)
            vals.append(rng.uniform(1.1, 1.3))
        picks = rng.choice(n_beamlets - n_dirty, size=2, replace=False) + n_dirty
        for b in picks:
            rows.append(v)
            cols.append(b)
            vals.append(rng.uniform(0.02, 0.06))

    pred = np.zeros(n_voxels)
    pred[ptv_ids] = 60.0
    pred[oar_ids] = 30.0

    return PatientCase(
        id="phantom",
        grid=VoxelGrid((n_voxels, 1, 1), (3.0, 3.0, 3.0)),
        structures=StructureSet((
            Structure("ptv70", "ptv", ptv_ids, 70.0),
            Structure("right_parotid", "oar_mean", oar_ids),
        )),
        influence=DoseInfluenceMatrix.from_triplets(n_voxels, n_beamlets,
                                                    rows, cols, vals),
        predicted_dose=pred,
    )


# ---------------------------------------------------------------------------
# Constrained-formulation oracle

def constrained_objective(case: PatientCase, x, coeffs: Coefficients | None = None,
                          prediction=None):
    """Objective of the constrained program with auxiliaries chosen by
    closed-form inner optimization, evaluated with dense algebra and loops.

    Returns (z1, z2, z3, z4, total). Conventions match the documented
    reduction: overlapping targets take the highest prescription level, a
    target voxel leaves every OAR set, the capped below-max reward clamps
    at zero when the cap constraint cannot be met.
    """
    coeffs = coeffs if coeffs is not None else Coefficients()
    pred = np.asarray(case.predicted_dose if prediction is None else prediction,
                      dtype=float)
    n = case.n_voxels
    dense = np.zeros((n, case.n_beamlets))
    m = case.influence
    for v, b, a in zip(m.voxel_ids, m.beamlet_ids, m.values):
        dense[v, b] += a
    d = dense @ np.asarray(x, dtype=float)

    omega = case.weights()
    keep = np.ones(n, dtype=bool)
    if case.feasible_mask is not None:
        keep[:] = False
        keep[case.feasible_mask] = True
    pres = build_prescription(case.structures, n)
    in_ptv = np.zeros(n, dtype=bool)
    for s in case.structures.ptvs():
        in_ptv[s.voxel_ids] = True

    ptv = [v for v in range(n) if in_ptv[v] and keep[v]]
    z1 = 0.0
    if ptv:
        w_sum = sum(omega[v] for v in ptv)
        for v in ptv:
            lo = min(pred[v], pres[v])
            up = max(pred[v], pres[v])
            ud = max(lo - d[v], 0.0)
            od = max(d[v] - up, 0.0)
            z1 += omega[v] * (coeffs.psi1 * ud ** 2 + coeffs.psi2 * od ** 2
                              + coeffs.xi1 * abs(pres[v] - d[v]))
        z1 /= w_sum

    oar = sorted({int(v) for s in case.structures.oars() for v in s.voxel_ids
                  if keep[v] and not in_ptv[v]})
    z2 = 0.0
    if oar:
        w_sum = sum(omega[v] for v in oar)
        for v in oar:
            od = max(d[v] - pred[v], 0.0)
            z2 += omega[v] * (coeffs.psi3 * od ** 2 + coeffs.xi2 * d[v])
        z2 /= w_sum

    z3 = 0.0
    max_voxels = []
    for s in case.structures:
        if s.kind != "oar_max":
            continue
        vox = [int(v) for v in s.voxel_ids if keep[v] and not in_ptv[v]]
        if not vox:
            continue
        max_p = max(pred[v] for v in vox)
        zeta = coeffs.zeta_for(s.name)
        chi = coeffs.chi_for(s.name)
        for v in vox:
            od_max = max(d[v] - max_p, 0.0)
            ud_max = max(chi * max_p - max(d[v] - zeta * max_p, 0.0), 0.0)
            z3 += omega[v] * (coeffs.psi4 * od_max - coeffs.xi3 * ud_max)
            max_voxels.append(v)
    if max_voxels:
        z3 /= sum(omega[v] for v in max_voxels)

    z4 = 0.0
    for s in case.structures:
        if s.kind != "oar_mean":
            continue
        vox = [int(v) for v in s.voxel_ids if keep[v] and not in_ptv[v]]
        if not vox:
            continue
        w_sum = sum(omega[v] for v in vox)
        mean = sum(omega[v] * d[v] for v in vox) / w_sum
        mean_p = sum(omega[v] * pred[v] for v in vox) / w_sum
        od_mean = max(mean - mean_p, 0.0)
        z4 += coeffs.psi5 * od_mean ** 2 + coeffs.xi4 * mean ** 2

    return z1, z2, z3, z4, z1 + z2 + z3 + z4


# ---------------------------------------------------------------------------
# DVH sort oracle

def dvh_oracle(dose, voxel_ids, grid, kind):
    """Naive full-sort recomputation of a DVH point (ascending sort path)."""
    vals = sorted(float(dose[int(v)]) for v in voxel_ids)
    n = len(vals)
    if kind == "D_mean":
        return sum(vals) / n
    if kind == "D_0.1cc":
        k = math.ceil(0.1 / grid.voxel_volume_cc - 1e-9)
        if k > n:
            k = 1  # small-volume fallback: max dose
        return vals[n - max(k, 1)]
    p = {"D_1": 1, "D_95": 95, "D_99": 99}[kind]
    k = int(math.ceil(Fraction(p * n, 100)))
    return vals[n - k]
