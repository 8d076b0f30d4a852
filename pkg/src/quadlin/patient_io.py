"""Patient bundle loading, validation and prescription construction.

A canonical bundle is a directory with:

    meta.json           id, dims, voxel_size_mm, n_beamlets
    structures.csv      roi_name,roi_kind,level_gy,voxel_id
    influence.csv       voxel_id,beamlet_id,value
    predicted_dose.csv  voxel_id,gy
    reference_dose.csv  voxel_id,gy          (optional)
    feasible_mask.csv   voxel_id             (optional)

Row order is irrelevant; voxels absent from a dose file receive 0 Gy.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import IndexOutOfRange, MalformedRecord, MissingFile, NegativeValue

# Structures eligible for the max-dose / mean-dose penalty sections.
OAR_MAX_NAMES = frozenset({"brainstem", "spinal_cord", "mandible"})
OAR_MEAN_NAMES = frozenset({"right_parotid", "left_parotid", "larynx", "esophagus"})
DEFAULT_PTV_LEVELS = (56.0, 63.0, 70.0)

ROI_KINDS = ("ptv", "oar", "oar_max", "oar_mean")

# OpenKBP file name -> (canonical roi_name, roi_kind, level_gy)
OPENKBP_ROI_MAP = {
    "Brainstem": ("brainstem", "oar_max", None),
    "SpinalCord": ("spinal_cord", "oar_max", None),
    "Mandible": ("mandible", "oar_max", None),
    "RightParotid": ("right_parotid", "oar_mean", None),
    "LeftParotid": ("left_parotid", "oar_mean", None),
    "Larynx": ("larynx", "oar_mean", None),
    "Esophagus": ("esophagus", "oar_mean", None),
    "PTV56": ("ptv56", "ptv", 56.0),
    "PTV63": ("ptv63", "ptv", 63.0),
    "PTV70": ("ptv70", "ptv", 70.0),
}

# Patients sampled from the OpenKBP test split for batch reproduction runs.
OPENKBP_SAMPLE_PATIENTS = (
    245, 249, 251, 253, 254, 259, 262, 265, 270, 282,
    292, 293, 294, 296, 299, 300, 301, 303, 307, 308,
    309, 312, 316, 317, 319, 329, 330, 334, 335, 339,
)


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.voxel_size_mm) != 3 or any(s <= 0 for s in self.voxel_size_mm):
            raise ValueError(f"voxel_size_mm must be 3 positive lengths, got {self.voxel_size_mm}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume_cc(self) -> float:
        return float(np.prod(self.voxel_size_mm)) / 1000.0


@dataclass(frozen=True)
class Structure:
    name: str
    kind: str  # one of ROI_KINDS
    voxel_ids: np.ndarray  # int64, sorted, duplicate-free
    level_gy: float | None = None  # PTV prescription level

    def __post_init__(self):
        # sorted for determinism; duplicates are kept so validation can flag them
        ids = np.sort(np.asarray(self.voxel_ids, dtype=np.int64))
        object.__setattr__(self, "voxel_ids", ids)


@dataclass(frozen=True)
class StructureSet:
    entries: tuple[Structure, ...]

    def __iter__(self):
        return iter(self.entries)

    def get(self, name: str) -> Structure | None:
        for s in self.entries:
            if s.name == name:
                return s
        return None

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.entries]

    def ptvs(self) -> list[Structure]:
        return [s for s in self.entries if s.kind == "ptv"]

    def oars(self) -> list[Structure]:
        return [s for s in self.entries if s.kind != "ptv"]


@dataclass(frozen=True)
class DoseInfluenceMatrix:
    """Sparse map from beamlet intensities to voxel doses, canonical triplet order."""

    n_voxels: int
    n_beamlets: int
    voxel_ids: np.ndarray  # int64
    beamlet_ids: np.ndarray  # int64
    values: np.ndarray  # float64, >= 0

    @classmethod
    def from_triplets(cls, n_voxels, n_beamlets, voxel_ids, beamlet_ids, values):
        """Canonicalize: sort by (voxel, beamlet), sum duplicate pairs."""
        v = np.asarray(voxel_ids, dtype=np.int64)
        b = np.asarray(beamlet_ids, dtype=np.int64)
        x = np.asarray(values, dtype=np.float64)
        if not (len(v) == len(b) == len(x)):
            raise ValueError("triplet arrays must have equal length")
        if len(v) and (v.min() < 0 or v.max() >= n_voxels):
            raise IndexOutOfRange(
                f"influence voxel_id out of range [0, {n_voxels}): found {v.min()}..{v.max()}"
            )
        if len(b) and (b.min() < 0 or b.max() >= n_beamlets):
            raise IndexOutOfRange(
                f"influence beamlet_id out of range [0, {n_beamlets}): found {b.min()}..{b.max()}"
            )
        if len(x) and (not np.all(np.isfinite(x)) or x.min() < 0):
            raise NegativeValue("influence values must be finite and nonnegative")
        m = sp.coo_matrix((x, (v, b)), shape=(n_voxels, n_beamlets)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        coo = m.tocoo()
        return cls(
            n_voxels=int(n_voxels),
            n_beamlets=int(n_beamlets),
            voxel_ids=coo.row.astype(np.int64),
            beamlet_ids=coo.col.astype(np.int64),
            values=coo.data.astype(np.float64),
        )

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, (self.voxel_ids, self.beamlet_ids)),
            shape=(self.n_voxels, self.n_beamlets),
        )

    @property
    def nnz(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PatientCase:
    id: str
    grid: VoxelGrid
    structures: StructureSet
    influence: DoseInfluenceMatrix
    predicted_dose: np.ndarray
    reference_dose: np.ndarray | None = None
    feasible_mask: np.ndarray | None = None  # voxel ids where dose may be nonzero
    voxel_weights: np.ndarray | None = None  # omega_v; None means uniform 1.0

    @property
    def n_voxels(self) -> int:
        return self.influence.n_voxels

    @property
    def n_beamlets(self) -> int:
        return self.influence.n_beamlets

    def weights(self) -> np.ndarray:
        if self.voxel_weights is not None:
            return self.voxel_weights
        return np.ones(self.n_voxels, dtype=np.float64)


@dataclass
class ValidationReport:
    findings: list[tuple[str, str]] = field(default_factory=list)  # (code, message)
    summary: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.findings

    def add(self, code: str, message: str):
        self.findings.append((code, message))

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "findings": [{"code": c, "message": m} for c, m in self.findings],
            "summary": self.summary,
        }


# ---------------------------------------------------------------------------
# CSV helpers

def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFile(f"missing bundle file: {path}")
    return path


def _parse_rows(path: Path, n_fields: int, types):
    """Parse a headered CSV into typed columns, reporting the offending line on error."""
    rows = []
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRecord(path, 1, "empty file, header row required") from None
        if len(header) < n_fields:
            raise MalformedRecord(path, 1, f"expected {n_fields} columns, got {len(header)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) < n_fields:
                raise MalformedRecord(path, line_no, f"expected {n_fields} fields, got {len(row)}")
            try:
                rows.append(tuple(t(c.strip()) for t, c in zip(types, row)))
            except ValueError as exc:
                raise MalformedRecord(path, line_no, str(exc)) from None
    return rows


def _read_dose_csv(path: Path, n_voxels: int) -> np.ndarray:
    rows = _parse_rows(path, 2, (int, float))
    dose = np.zeros(n_voxels, dtype=np.float64)
    seen = set()
    for vid, gy in rows:
        if not 0 <= vid < n_voxels:
            raise IndexOutOfRange(f"{path}: voxel_id {vid} outside [0, {n_voxels})")
        if vid in seen:
            raise MalformedRecord(path, 0, f"duplicate voxel_id {vid}")
        seen.add(vid)
        if not np.isfinite(gy) or gy < 0:
            raise NegativeValue(f"{path}: dose for voxel {vid} must be finite and >= 0, got {gy}")
        dose[vid] = gy
    return dose


def _write_dose_csv(path: Path, dose: np.ndarray, sparse: bool = True):
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["voxel_id", "gy"])
        for vid in np.nonzero(dose)[0] if sparse else range(len(dose)):
            w.writerow([int(vid), repr(float(dose[vid]))])


# ---------------------------------------------------------------------------
# Bundle load / save

def load_patient(bundle_path) -> PatientCase:
    """Load and validate a canonical bundle directory."""
    bundle = Path(bundle_path)
    if not bundle.is_dir():
        raise MissingFile(f"bundle directory not found: {bundle}")

    meta_path = _require(bundle / "meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedRecord(meta_path, exc.lineno, exc.msg) from None
    for key in ("id", "dims", "voxel_size_mm", "n_beamlets"):
        if key not in meta:
            raise MalformedRecord(meta_path, 1, f"meta.json missing key {key!r}")
    grid = VoxelGrid(tuple(int(d) for d in meta["dims"]),
                     tuple(float(s) for s in meta["voxel_size_mm"]))
    n_voxels = grid.n_voxels
    n_beamlets = int(meta["n_beamlets"])
    if n_beamlets <= 0:
        raise MalformedRecord(meta_path, 1, f"n_beamlets must be positive, got {n_beamlets}")

    # structures.csv
    struct_path = _require(bundle / "structures.csv")
    raw = _parse_rows(struct_path, 4, (str, str, str, int))
    by_roi: dict[str, dict] = {}
    for name, kind, level, vid in raw:
        if kind not in ROI_KINDS:
            raise MalformedRecord(struct_path, 0, f"unknown roi_kind {kind!r} for {name}")
        if not 0 <= vid < n_voxels:
            raise IndexOutOfRange(f"{struct_path}: voxel_id {vid} of {name} outside [0, {n_voxels})")
        entry = by_roi.setdefault(name, {"kind": kind, "level": level, "ids": []})
        if entry["kind"] != kind:
            raise MalformedRecord(struct_path, 0, f"roi {name} has inconsistent kinds")
        entry["ids"].append(vid)
    structures = []
    for name, entry in by_roi.items():
        level = None
        if entry["kind"] == "ptv":
            if entry["level"] in ("", None):
                raise MalformedRecord(struct_path, 0, f"PTV {name} missing level_gy")
            level = float(entry["level"])
        structures.append(Structure(name, entry["kind"], np.asarray(entry["ids"]), level))
    structure_set = StructureSet(tuple(structures))

    # influence.csv
    infl_path = _require(bundle / "influence.csv")
    trip = _parse_rows(infl_path, 3, (int, int, float))
    if trip:
        v, b, x = (np.asarray(col) for col in zip(*trip))
    else:
        v = b = np.zeros(0, dtype=np.int64)
        x = np.zeros(0)
    influence = DoseInfluenceMatrix.from_triplets(n_voxels, n_beamlets, v, b, x)

    predicted = _read_dose_csv(_require(bundle / "predicted_dose.csv"), n_voxels)

    reference = None
    if (bundle / "reference_dose.csv").is_file():
        reference = _read_dose_csv(bundle / "reference_dose.csv", n_voxels)

    feasible = None
    if (bundle / "feasible_mask.csv").is_file():
        rows = _parse_rows(bundle / "feasible_mask.csv", 1, (int,))
        feasible = np.unique(np.asarray([r[0] for r in rows], dtype=np.int64))
        if len(feasible) and (feasible[0] < 0 or feasible[-1] >= n_voxels):
            raise IndexOutOfRange(f"feasible_mask voxel id outside [0, {n_voxels})")

    case = PatientCase(
        id=str(meta["id"]),
        grid=grid,
        structures=structure_set,
        influence=influence,
        predicted_dose=predicted,
        reference_dose=reference,
        feasible_mask=feasible,
    )
    report = validate_case(case)
    if not report.valid:
        code, message = report.findings[0]
        raise MalformedRecord(bundle, 0, f"{code}: {message}")
    return case


def save_bundle(case: PatientCase, bundle_path):
    """Write a PatientCase back out in the canonical layout (round-trip exact)."""
    bundle = Path(bundle_path)
    bundle.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": case.id,
        "dims": list(case.grid.dims),
        "voxel_size_mm": list(case.grid.voxel_size_mm),
        "n_beamlets": case.n_beamlets,
    }
    (bundle / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    with (bundle / "structures.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["roi_name", "roi_kind", "level_gy", "voxel_id"])
        for s in case.structures:
            level = "" if s.level_gy is None else repr(float(s.level_gy))
            for vid in s.voxel_ids:
                w.writerow([s.name, s.kind, level, int(vid)])

    with (bundle / "influence.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["voxel_id", "beamlet_id", "value"])
        m = case.influence
        for vid, bid, val in zip(m.voxel_ids, m.beamlet_ids, m.values):
            w.writerow([int(vid), int(bid), repr(float(val))])

    _write_dose_csv(bundle / "predicted_dose.csv", case.predicted_dose)
    if case.reference_dose is not None:
        _write_dose_csv(bundle / "reference_dose.csv", case.reference_dose)
    if case.feasible_mask is not None:
        with (bundle / "feasible_mask.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["voxel_id"])
            for vid in case.feasible_mask:
                w.writerow([int(vid)])


# ---------------------------------------------------------------------------
# Prescription and validation

def build_prescription(structures: StructureSet, n_voxels: int) -> np.ndarray:
    """Per-voxel prescribed dose: highest PTV level for PTV voxels, 0 elsewhere."""
    pres = np.zeros(n_voxels, dtype=np.float64)
    for ptv in sorted(structures.ptvs(), key=lambda s: s.level_gy):
        pres[ptv.voxel_ids] = ptv.level_gy
    return pres


def validate_case(case: PatientCase) -> ValidationReport:
    """Check every invariant; returns findings instead of raising."""
    report = ValidationReport()
    n_voxels = case.grid.n_voxels

    if case.influence.n_voxels != n_voxels:
        report.add("GridMismatch",
                   f"influence rows {case.influence.n_voxels} != grid voxels {n_voxels}")
    if len(case.predicted_dose) != n_voxels:
        report.add("LengthMismatch",
                   f"predicted_dose length {len(case.predicted_dose)} != {n_voxels}")
    elif np.any(~np.isfinite(case.predicted_dose)) or np.any(case.predicted_dose < 0):
        report.add("NegativeValue", "predicted_dose has negative or non-finite entries")
    if case.reference_dose is not None and len(case.reference_dose) != n_voxels:
        report.add("LengthMismatch",
                   f"reference_dose length {len(case.reference_dose)} != {n_voxels}")
    if case.voxel_weights is not None:
        if len(case.voxel_weights) != n_voxels:
            report.add("LengthMismatch", "voxel_weights length mismatch")
        elif np.any(case.voxel_weights <= 0):
            report.add("NonPositiveWeight", "voxel_weights must be strictly positive")

    seen_names = set()
    for s in case.structures:
        if s.name in seen_names:
            report.add("DuplicateRoi", f"roi {s.name} appears more than once")
        seen_names.add(s.name)
        ids = np.asarray(s.voxel_ids)
        if len(ids) != len(set(ids.tolist())):
            report.add("DuplicateVoxel", f"roi {s.name} has duplicated voxel ids")
        if len(ids) and (ids.min() < 0 or ids.max() >= n_voxels):
            report.add("IndexOutOfRange", f"roi {s.name} references voxels outside the grid")
        if s.kind == "oar_max" and s.name not in OAR_MAX_NAMES:
            report.add("UnknownMaxOar",
                       f"roi {s.name} marked oar_max but not in {sorted(OAR_MAX_NAMES)}")
        if s.kind == "oar_mean" and s.name not in OAR_MEAN_NAMES:
            report.add("UnknownMeanOar",
                       f"roi {s.name} marked oar_mean but not in {sorted(OAR_MEAN_NAMES)}")
        if s.kind == "ptv":
            if s.level_gy is None or s.level_gy <= 0:
                report.add("BadPtvLevel", f"PTV {s.name} has invalid level {s.level_gy}")
            elif s.level_gy not in DEFAULT_PTV_LEVELS:
                warnings.warn(f"PTV {s.name} uses non-standard level {s.level_gy} Gy")

    nnz = case.influence.nnz
    density = nnz / max(1, case.influence.n_voxels * case.influence.n_beamlets)
    pred = case.predicted_dose if len(case.predicted_dose) else np.zeros(1)
    report.summary = {
        "n_voxels": n_voxels,
        "n_beamlets": case.influence.n_beamlets,
        "influence_nnz": nnz,
        "influence_density": density,
        "roi_voxel_counts": {s.name: int(len(s.voxel_ids)) for s in case.structures},
        "predicted_dose_range_gy": [float(pred.min()), float(pred.max())],
    }
    return report


# ---------------------------------------------------------------------------
# OpenKBP conversion

def _read_openkbp_sparse(path: Path):
    """OpenKBP sparse CSVs: header-ish first row, then 'index,value' or 'index,' rows."""
    idx, val = [], []
    with path.open() as f:
        for line_no, line in enumerate(f, start=1):
            s = line.strip()
            if not s:
                continue
            parts = [p.strip() for p in s.split(",")]
            if line_no == 1 and not parts[0].lstrip("-").replace(".", "").isdigit():
                continue  # header row like ",data"
            if parts[0] == "":
                continue
            try:
                idx.append(int(float(parts[0])))
                if len(parts) > 1 and parts[1] != "":
                    val.append(float(parts[1]))
            except ValueError:
                raise MalformedRecord(path, line_no, f"bad record {s!r}") from None
    index = np.asarray(idx, dtype=np.int64)
    values = np.asarray(val, dtype=np.float64) if len(val) == len(idx) else None
    return index, values


def convert_openkbp(patient_dir, out_dir, influence_path=None, prediction_path=None,
                    dims=(128, 128, 128), n_beamlets=None) -> dict:
    """Map an OpenKBP patient folder to the canonical bundle layout.

    The dose-influence matrix is not part of the public OpenKBP patient
    folders; it must be supplied as a triplet CSV (voxel_id,beamlet_id,value)
    or scipy .npz, either via influence_path or as dose_influence.csv inside
    the folder. Writes manifest.json with per-ROI voxel counts and returns it.
    """
    patient = Path(patient_dir)
    if not patient.is_dir():
        raise MissingFile(f"patient folder not found: {patient}")
    out = Path(out_dir)

    size_path = _require(patient / "voxel_dimensions.csv")
    sizes = [float(t) for t in size_path.read_text().replace("\n", ",").split(",") if t.strip()]
    if len(sizes) < 3:
        raise MalformedRecord(size_path, 1, "expected 3 voxel dimensions")
    grid = VoxelGrid(tuple(int(d) for d in dims), tuple(sizes[:3]))
    n_voxels = grid.n_voxels

    structures = []
    for fname, (name, kind, level) in OPENKBP_ROI_MAP.items():
        fpath = patient / f"{fname}.csv"
        if not fpath.is_file():
            continue
        ids, _ = _read_openkbp_sparse(fpath)
        structures.append(Structure(name, kind, ids, level))

    ref_idx, ref_val = _read_openkbp_sparse(_require(patient / "dose.csv"))
    if ref_val is None:
        raise MalformedRecord(patient / "dose.csv", 1, "dose.csv must carry values")
    reference = np.zeros(n_voxels)
    reference[ref_idx] = ref_val

    if prediction_path is not None:
        p_idx, p_val = _read_openkbp_sparse(Path(prediction_path))
        if p_val is None:
            raise MalformedRecord(prediction_path, 1, "prediction file must carry values")
        predicted = np.zeros(n_voxels)
        predicted[p_idx] = p_val
    else:
        predicted = reference.copy()

    feasible = None
    if (patient / "possible_dose_mask.csv").is_file():
        feasible, _ = _read_openkbp_sparse(patient / "possible_dose_mask.csv")

    if influence_path is None:
        influence_path = patient / "dose_influence.csv"
    influence_path = Path(influence_path)
    if not influence_path.is_file():
        raise MissingFile(
            f"dose-influence matrix not found at {influence_path}; "
            "pass --influence (triplet CSV or scipy .npz)"
        )
    if influence_path.suffix == ".npz":
        m = sp.load_npz(influence_path).tocoo()
        v, b, x = m.row, m.col, m.data
        if n_beamlets is None:
            n_beamlets = m.shape[1]
    else:
        rows = _parse_rows(influence_path, 3, (int, int, float))
        v, b, x = (np.asarray(col) for col in zip(*rows))
        if n_beamlets is None:
            n_beamlets = int(b.max()) + 1
    influence = DoseInfluenceMatrix.from_triplets(n_voxels, int(n_beamlets), v, b, x)

    case = PatientCase(
        id=patient.name,
        grid=grid,
        structures=StructureSet(tuple(structures)),
        influence=influence,
        predicted_dose=predicted,
        reference_dose=reference,
        feasible_mask=feasible,
    )
    save_bundle(case, out)
    manifest = {
        "patient": patient.name,
        "n_voxels": n_voxels,
        "n_beamlets": int(n_beamlets),
        "roi_voxel_counts": {s.name: int(len(s.voxel_ids)) for s in case.structures},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
