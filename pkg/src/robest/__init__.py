"""robest: outlier-robust nonlinear estimation and benchmarking.

Bayesian reweighting heuristics (EROR, ESOR, ASOR) plus GNC baselines on
top of pluggable weighted non-minimal solvers, with closed-form SE(3)
registration, SE(2) pose-graph Gauss-Newton, and a reproducible synthetic
benchmark harness.
"""

__version__ = "0.1.0"

from .kernels import (
    AsorHyperParams,
    AsorState,
    GncControl,
    IterationRecord,
    ProblemInstance,
    ResidualEvaluation,
    RobustConfig,
    RobustMethod,
    RobustSolveError,
    RunTrace,
    StopReason,
    StoppingRule,
    WeightState,
    WeightSumFloorError,
    asor_iteration_update,
    eror_mu_update,
    eror_weight,
    esor_rho_update,
    esor_weight,
    gnc_baseline_update,
    run_robust,
)
from .registration import (
    CorrespondenceSet,
    DegenerateGeometryError,
    RigidTransform3,
    WeightSumError,
    horn_weighted,
    registration_problem,
    residuals_registration,
)
from .posegraph import (
    EdgeKind,
    GaussNewtonWarning,
    PoseGraph2,
    PoseGraphEdge,
    RankDeficiencyError,
    odometry_chain_init,
    pgo_gauss_newton_weighted,
    pgo_problem,
    residuals_pgo,
    wrap_angle,
)
from .metrics import (
    align_trajectory_2d,
    rotation_error_deg,
    trajectory_rmse,
    translation_error,
)
from .bench import (
    BenchRecord,
    OdometryNoise,
    PgoBenchConfig,
    RegistrationBenchConfig,
    Trajectory,
    default_inlier_threshold_sq,
    generate_pgo_instance,
    generate_registration_instance,
    random_rotation,
    registration_precision,
    run_benchmark,
)
from .fileio import (
    G2oGraph2,
    G2oParseError,
    PlyCloud,
    PlyParseError,
    downsample_and_box,
    read_g2o_2d,
    read_ply,
    read_records_csv,
    write_g2o_2d,
    write_manifest_json,
    write_records_csv,
)
