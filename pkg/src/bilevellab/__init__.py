"""bilevellab: single-level reformulations of bilevel programs.

Builders for the KKT-based and six duality-based reformulations, direct and
relaxation solution algorithms with a projection epilogue, verification
instruments (duality gaps, MFCQ certificates, KKT multiplier maps, a
brute-force oracle), and a random-instance benchmark harness.
"""

from .model import (
    BilevelProblem,
    ConstraintBlock,
    DimensionError,
    ModelError,
    Monomial,
    ScalarFunc,
    UpperSet,
    lagrangian,
)
from .reformulate import (
    DualKind,
    DualProblem,
    ReformulationError,
    ReformulationKind,
    SingleLevelNlp,
    build,
    build_dual,
    embed_mpcc_point,
    feasibility_report,
)

__version__ = "0.1.0"

__all__ = [
    "BilevelProblem",
    "ConstraintBlock",
    "DimensionError",
    "DualKind",
    "DualProblem",
    "ModelError",
    "Monomial",
    "ReformulationError",
    "ReformulationKind",
    "ScalarFunc",
    "SingleLevelNlp",
    "UpperSet",
    "build",
    "build_dual",
    "embed_mpcc_point",
    "feasibility_report",
    "lagrangian",
    "__version__",
]
