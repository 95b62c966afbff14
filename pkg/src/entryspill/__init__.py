"""Direct and spillover effects of large entry events on local panels.

The package builds a municipality-by-industry quarterly panel, detects
entry events from establishment counts, maps spatial spillover exposure
over a weights graph, and estimates direct and spillover effects with
staggered difference-in-differences designs, doubly robust slice
regressions, and a family of spatially robust variance estimators. A
synthetic data generator with known ground truth and a staged CLI tie
the pieces together.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .config import RunConfig, stage_seed
from .dgp import DgpConfig, PlannedEvent, SimulatedData, grid_graph, simulate
from .did_direct import (
    EventStudyResult,
    bjs_event_study,
    cs_event_study,
    sa_iw_event_study,
    two_way_fit,
)
from .drdid import (
    SliceEstimate,
    build_slice_rows,
    crossfit_residualize,
    estimate_all_slices,
    estimate_slice,
    make_folds,
    two_way_demean,
)
from .errors import (
    EntrySpillError,
    MissingArtifactError,
    NumericalError,
    ValidationError,
)
from .events import Trigger, assign_cohorts, compute_t3_thresholds, detect_event
from .exposure import (
    CHANNELS,
    ExposurePanel,
    build_slice_table,
    compute_exposure,
    overlap_report,
    slice_summaries,
)
from .inference import (
    FdrResult,
    VarianceEstimate,
    cluster_se,
    fdr_adjust,
    scpc_se,
    shac_se,
    twoway_cluster_se,
    twoway_serial_se,
)
from .panel import BuiltPanel, build_panel, build_quarter_index, quarterly_cpi
from .sensitivity import (
    HonestBounds,
    MoranTrigger,
    heterogeneity_twfe,
    honest_sd_bounds,
    moran_gate,
)
from .spatial import (
    MoranResult,
    SpatialGraph,
    WeightsMatrix,
    build_weights,
    morans_i,
    morans_perm_test,
    multivariate_morans_i,
)

__all__ = [
    "__version__",
    "BuiltPanel",
    "CHANNELS",
    "DgpConfig",
    "EntrySpillError",
    "EventStudyResult",
    "ExposurePanel",
    "FdrResult",
    "HonestBounds",
    "MissingArtifactError",
    "MoranResult",
    "MoranTrigger",
    "NumericalError",
    "PlannedEvent",
    "RunConfig",
    "SimulatedData",
    "SliceEstimate",
    "SpatialGraph",
    "Trigger",
    "ValidationError",
    "VarianceEstimate",
    "WeightsMatrix",
    "assign_cohorts",
    "bjs_event_study",
    "build_panel",
    "build_quarter_index",
    "build_slice_rows",
    "build_slice_table",
    "build_weights",
    "cluster_se",
    "compute_exposure",
    "compute_t3_thresholds",
    "crossfit_residualize",
    "cs_event_study",
    "detect_event",
    "estimate_all_slices",
    "estimate_slice",
    "fdr_adjust",
    "grid_graph",
    "heterogeneity_twfe",
    "honest_sd_bounds",
    "make_folds",
    "moran_gate",
    "morans_i",
    "morans_perm_test",
    "multivariate_morans_i",
    "overlap_report",
    "quarterly_cpi",
    "sa_iw_event_study",
    "scpc_se",
    "shac_se",
    "simulate",
    "slice_summaries",
    "stage_seed",
    "twoway_cluster_se",
    "twoway_serial_se",
    "two_way_demean",
    "two_way_fit",
]
