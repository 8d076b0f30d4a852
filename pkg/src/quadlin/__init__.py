"""quadlin: fluence-map optimization from predicted 3D dose distributions.

Turns a voxel-wise dose prediction plus the prescription into an optimized
IMRT fluence plan via a reduced quadratic-linear convex objective, and
scores plans against DVH points and clinical criteria.
"""

from .errors import (
    BundleError,
    Diverged,
    EmptyStructure,
    IndexOutOfRange,
    InstanceTooLarge,
    LengthMismatch,
    MalformedRecord,
    MissingFile,
    NegativeValue,
    QuadlinError,
)
from .evaluation import (
    CriteriaReport,
    aggregate_satisfaction,
    compare_dvh_points,
    criteria_report,
    dvh_curve,
    dvh_point,
)
from .model import (
    Coefficients,
    ObjectiveBreakdown,
    QuadLinModel,
    assemble_model,
    compute_dose,
    objective,
    subgradient,
    voxel_penalty,
)
from .patient_io import (
    DoseInfluenceMatrix,
    PatientCase,
    Structure,
    StructureSet,
    VoxelGrid,
    build_prescription,
    convert_openkbp,
    load_patient,
    save_bundle,
    validate_case,
)
from .solver import (
    PlanSolution,
    SolverConfig,
    optimality_measure,
    reference_solve,
    solve,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
