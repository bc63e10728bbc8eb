"""Euler scheme marginal laws, Wasserstein distances, and rate experiments.

The package splits into a model catalog (`sde_model`), time grids
(`time_grid`), path simulation (`euler`), closed-form Gaussian laws and
their distances (`gaussian`), empirical optimal transport (`wasserstein`),
a fuzzed matrix inequality (`matrix_lemma`), and the sweep/fit harness
(`rates`) exposed on the command line through `cli`.
"""

__version__ = "0.1.0"

from .euler import (
    BrownianLattice,
    FirstVariationBatch,
    PathBatch,
    SimulationError,
    StrongError,
    simulate_coupled,
    simulate_euler,
    simulate_first_variation,
    simulate_first_variation_coupled,
    strong_error_estimate,
)
from .gaussian import (
    DegenerateLawError,
    GaussianLaw,
    conditional_increment_moment,
    euler_marginal_law,
    euler_marginal_laws,
    gaussian_abs_moment,
    gaussian_w2,
    gaussian_w_rho_1d,
    malliavin_bound,
    sample_law,
    sde_marginal_law,
    sde_marginal_laws,
)
from .matrix_lemma import (
    AdversarialReport,
    FuzzReport,
    LemmaInstance,
    adversarial_search,
    cauchy_schwarz_bound,
    check_inequality,
    fuzz_inequality,
    instance_to_dict,
    lemma_lhs,
    lemma_rhs,
    random_instance,
)
from .rates import (
    BoundReport,
    ExperimentSpec,
    GridComparison,
    RateFitReport,
    SupWCurve,
    SweepError,
    check_theorem_bound,
    compare_grids,
    derived_seed,
    fit_loglog,
    run_marginal_sweep,
)
from .sde_model import (
    AffineStructure,
    CoefficientError,
    SdeSpec,
    builtin_catalog,
    evaluate_coefficients,
    get_spec,
    verify_ellipticity,
)
from .time_grid import TimeGrid, build_power, build_uniform, step_gap_integral
from .wasserstein import (
    EmpiricalMeasure,
    EntropicDiagnostics,
    SizeCapError,
    TransportPlan,
    plan_cost,
    w_rho_1d,
    w_rho_entropic,
    w_rho_exact,
)
