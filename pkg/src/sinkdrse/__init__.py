"""Distributionally robust state estimation with Sinkhorn ambiguity sets."""

from .ambiguity import (
    SampleSet,
    SinkhornConfig,
    calibrate_radius,
    feasibility_threshold,
    h2_limit_threshold,
    omega,
)
from .drse import (
    DualIterate,
    FwResult,
    FwTrace,
    InfeasibleRadiusError,
    IterateBounds,
    compute_bounds,
    curvature_bound,
    dual_objective,
    frank_wolfe_solve,
    gradients,
    initialize,
    solve_h2,
    solve_sinkhorn_direct,
    solve_wasserstein,
)
from .sls import (
    ClosedLoopMaps,
    LtvSystem,
    ObserverGain,
    build_sls_operators,
    load_system,
    maps_from_gain,
    recover_gain,
)

__version__ = "0.1.0"
