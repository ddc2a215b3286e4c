"""Bundle adjustment with ground-normal, trajectory-smoothness and box-shape terms."""
from .ground import fit_ground_normal
from .problem import (
    BA_FORMAT,
    BAProblem,
    Observations,
    SolveReport,
    SolverConfig,
    evaluate,
    initial_bounds,
    load_snapshot,
    save_snapshot,
    solve,
    total_cost,
)
from .residuals import (
    residual_ba2d,
    residual_ba3d,
    residual_bc,
    residual_nc1,
    residual_nc2,
    residual_tc1,
    residual_tc2,
)
from .sampling import SamplingPlan, sample_pairs
from .sketch import build_sketch
