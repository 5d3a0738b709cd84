"""Global dynamics of controlled systems from data.

Estimates attractors and their regions of attraction by fitting Gaussian
process surrogates to short-trajectory data, building a multivalued map over
a cubical grid decomposition of the state space, and condensing it into a
Morse graph with per-cell region-of-attraction labels and pointwise
confidence levels.
"""

from .dynamics import (
    FlowMap,
    FlowMapSpec,
    NonFiniteStateError,
    TrajectoryDataset,
    decompose_long_trajectory,
    sample_short_trajectories,
)
from .gp import FitOptions, GpSurrogate, KernelSpec, fit
from .grid import OUTSIDE, CubicalGrid, StateBox
from .morse import (
    ESCAPED,
    UNCERTAIN,
    MorseGraphResult,
    condense,
    morse_graph,
    regions_of_attraction,
    roa_for_goal,
)
from .mvmap import MultivaluedMap, build_gp_map, build_true_map
from .pipeline import (
    DatasetPlan,
    DeltaSchedule,
    EvaluationReport,
    GridConfig,
    GroundTruthPlan,
    KernelPlan,
    PipelineConfig,
    RefinementPlan,
    ground_truth_roa,
    run,
    score,
)
from .systems import SYSTEMS, make_flow_map, system_info

__all__ = [
    "OUTSIDE",
    "ESCAPED",
    "UNCERTAIN",
    "CubicalGrid",
    "StateBox",
    "FlowMap",
    "FlowMapSpec",
    "NonFiniteStateError",
    "TrajectoryDataset",
    "decompose_long_trajectory",
    "sample_short_trajectories",
    "FitOptions",
    "GpSurrogate",
    "KernelSpec",
    "fit",
    "MultivaluedMap",
    "build_gp_map",
    "build_true_map",
    "MorseGraphResult",
    "condense",
    "morse_graph",
    "regions_of_attraction",
    "roa_for_goal",
    "DatasetPlan",
    "DeltaSchedule",
    "EvaluationReport",
    "GridConfig",
    "GroundTruthPlan",
    "KernelPlan",
    "PipelineConfig",
    "RefinementPlan",
    "ground_truth_roa",
    "run",
    "score",
    "SYSTEMS",
    "make_flow_map",
    "system_info",
]

__version__ = "0.1.0"
