"""Gray-box online system identification.

Joint state estimation and online learning of a pose-dependent scalar
stiffness, using a particle filter that marginalizes the stiffness model
parameters in closed form. Ships a reduced-rank GP basis, the conjugate
normal-inverse-gamma recursion, the marginalized particle filter, a UKF
baseline, a synthetic oscillator test system, and an evaluation harness
for multi-step prediction quality.
"""

from .basis import (
    DomainBox,
    InputScaler,
    KernelHyperparams,
    LaplacianBasis,
    approx_kernel,
    build_basis,
    eval_basis,
    prior_covariance,
    scale_input,
    spectral_density_se,
    unscale_input,
)
from .conjugate import (
    NigParams,
    NigStatistics,
    StatisticsEnsemble,
    StudentTParams,
    gp_posterior_mean,
    measurement_update,
    posterior_params,
    predictive_student_t,
    prior_statistics,
    sample_student_t,
    time_update,
)
from .errors import (
    DegeneracyError,
    GraysidError,
    IntegrationError,
    SimulationBlowupError,
    ValidationError,
)
from .models import (
    AffineModel,
    ContinuousStateSpaceModel,
    SimTrace,
    StateSpaceModel,
    StiffnessOscillator,
    multisine_input,
    rk4_step,
    simulate,
)
from .mpf import (
    FilterConfig,
    FilterOutput,
    GpPrior,
    MarginalizedParticleFilter,
    Particle,
    estimate,
    first_stage_weights,
    hyperparam_walk,
    init_filter,
    resample_multinomial,
    resample_systematic,
    second_stage_weights,
)
from .ukf import UkfConfig, UnscentedKalmanFilter, ukf_step

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
