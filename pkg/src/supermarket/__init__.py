"""Finite-N approximations of the supermarket (power-of-d-choices) model.

Fluid limit, exact simulation, jump and cutoff couplings, the Gaussian
fluctuation field, explicit error bounds and an experiment harness.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    DerivedConstants, ModelParams, ScaleVector, TruncationError, cutoff_level, derived_constants,
    drift, drift_gradient, drift_jacobian, in_envelope, in_s0, default_threshold, rate_minus,
    rate_plus, rates, rounded_scales, scale_sequence, scaled_norm,
)
from .fluid import (  # noqa: E402
    FluidPath, NonConvergenceWarning, Propagator, comparison_check, fluid_solve,
    propagator_solve, scaled_operator_norm,
)
from .ctmc import (  # noqa: E402
    QueueSystem, RngStream, SamplePath, TruncationOverflow, path_statistics, read_events,
    simulate_queues, simulate_tail,
)
from .couplings import (  # noqa: E402
    StoppingTimes, detect_stopping_times, gamma_tilde_from_marks, gamma_tilde_moments,
    mminf_poisson_mean, simulate_cutoff_coupling, simulate_jump_coupling,
)
from .diffusion import (  # noqa: E402
    check_gt_bound, compare_fluctuations, covariance_by_propagator, covariance_solve,
    simulate_gamma,
)
from .bounds import (  # noqa: E402
    BoundInputs, BoundReport, bound_report, bound_vs_frequency, bounds_pp, bounds_qq, bounds_rr,
    theorem_schedules,
)
from .stats import ks_two_sample, wilson_interval  # noqa: E402
