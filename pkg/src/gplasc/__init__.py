"""Region-restricted supervised contrastive learning on the unit hypersphere.

Simplex-ETF region pre-allocation, thresholded SupCon losses with analytic
gradients, lower-bound certification, a sphere-projected toy optimiser, a
small NumPy encoder for continual-learning runs and the evaluation metrics.
"""

from .geometry import (
    DimensionError,
    EtfFrame,
    RegionPlan,
    SimplexReport,
    check_simplex,
    gram_feasibility,
    make_region_plan,
    make_simplex_etf,
    simplex_radius,
)
from .losses import (
    FeatureSet,
    LossBreakdown,
    LossParams,
    feature_distill,
    gplasc_total,
    grad_features,
    ird_loss,
    position_loss,
    range_penalty,
    supcon_batch,
    supcon_total,
)
from .bounds import BatchPlan, EqualityReport, build_batch_plan, equality_check, theorem_bound

__version__ = "0.1.0"

__all__ = [
    "BatchPlan",
    "DimensionError",
    "EqualityReport",
    "EtfFrame",
    "FeatureSet",
    "LossBreakdown",
    "LossParams",
    "RegionPlan",
    "SimplexReport",
    "build_batch_plan",
    "check_simplex",
    "equality_check",
    "feature_distill",
    "gplasc_total",
    "grad_features",
    "gram_feasibility",
    "ird_loss",
    "make_region_plan",
    "make_simplex_etf",
    "position_loss",
    "range_penalty",
    "simplex_radius",
    "supcon_batch",
    "supcon_total",
    "theorem_bound",
]
