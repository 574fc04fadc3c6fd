"""Two-sided Levy-driven SDEs, their conjugacy to random ODEs, and numerical checks.

Submodules
----------
levy_paths     two-sided Levy paths, time grids, CSV persistence
flows          Ito integrators and cocycle closures
conjugacy_ito  cohomology transforms for Ito systems
marcus         Marcus integrators, flow maps and the OU-based transform
linearization  linear conjugacy, Lyapunov spectra, scalar ladder suite
attractors     pullback attractors and Lyapunov certificates
harness        configuration, seeding, runner and CLI
"""

from ._validation import (
    CertificateError,
    ConfigError,
    DivergenceError,
    HypothesisError,
    InversionError,
    IterationError,
    ParameterError,
    RangeError,
)
from .attractors import (
    LyapunovCertificate,
    PullbackAttractor,
    PullbackRun,
    duffing_van_der_pol_system,
    estimate_attractor,
    invariance_check,
    map_attractor_through_cohomology,
    pullback_cloud,
    semi_hausdorff,
    temperedness_check,
    verify_c1_c2,
    verify_lyapunov,
)
from .conjugacy_ito import (
    CohomologyField,
    ItoCohomology,
    build_cohomology,
    check_fubini_formula,
    ito_ventzell_residual,
    solve_h,
    verify_conjugacy_ito,
)
from .flows import (
    FlowResult,
    ItoCocycle,
    ResidualSeries,
    SystemSpec,
    cocycle_check,
    integrate_ito,
    integrate_rde,
    jump_map_min_det,
    linear_system,
    scalar_system,
)
from .levy_paths import (
    LevyTriplet,
    TimeGrid,
    TruncatedGaussian,
    TwoPoint,
    TwoSidedPath,
    UniformBall,
    make_grid,
    read_path_csv,
    sample_path,
    shift,
)
from .linearization import (
    LinearSystem,
    LyapunovSpectrum,
    LyapunovSpectrumEstimator,
    integrate_linear,
    linearize,
    lyapunov_exponents,
    scalar_example_suite,
    verify_step2_conjugacy,
)
from .marcus import (
    FlowMap,
    MarcusCocycle,
    MarcusCohomology,
    MarcusRDECocycle,
    MarcusSystem,
    integrate_marcus,
    ou_path,
    verify_conjugacy_marcus,
)

__version__ = "0.1.0"
