"""Marginalized auxiliary particle filter for joint state and stiffness inference.

Each particle carries a state, a stiffness sample, its own conjugate
statistics (its stiffness model) and optionally its own kernel
hyperparameters. One filter step runs: statistics time update, auxiliary
look-ahead, first-stage weighting, ancestor resampling, optional
hyperparameter random walk with prior refresh, state propagation,
stiffness sampling from the per-particle Student-t predictive, statistics
measurement update, and second-stage reweighting by the likelihood ratio
of propagated versus auxiliary particles.

All likelihoods are computed in log space; normalization uses
log-sum-exp. Randomness comes from named counter-based substreams keyed
by (seed, step, purpose), with particle ``i`` consuming position ``i`` of
each drawn vector, so runs are reproducible and independent of execution
layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .basis import InputScaler, KernelHyperparams, LaplacianBasis, prior_covariance_diag
from .conjugate import (
    PSI_FLOOR,
    NigParams,
    NigStatistics,
    StatisticsEnsemble,
    posterior_params,
)
from .errors import DegeneracyError, ValidationError
from .models import StateSpaceModel
from .seeding import substream

#: guard on per-particle prior variances after extreme hyperparameter walks
PRIOR_DIAG_FLOOR = 1e-9

CHECKPOINT_VERSION = 1


@dataclass
class GpPrior:
    """Initial stiffness-model prior: kernel hyperparameters + noise prior."""

    hyperparams: KernelHyperparams
    noise_scale: float = 4.0  # psi
    noise_dof: float = 1.0  # nu

    def __post_init__(self):
        if not (self.noise_scale > 0.0 and self.noise_dof > 0.0):
            raise ValidationError("noise prior scale and dof must be positive")


@dataclass
class FilterConfig:
    """Run configuration for the marginalized particle filter."""

    particle_count: int
    process_noise_cov: np.ndarray
    measurement_noise_cov: np.ndarray
    forgetting_multiplier: float = 1.0
    hyperparam_learning: bool = False
    hyperparam_walk_cov: np.ndarray = (0.0, 0.0)  # log-space variances
    rng_seed: int = 0
    ess_resample_threshold: float = 1.0
    resampling: str = "multinomial"
    fixed_stiffness: float | None = None
    psi_floor: float = PSI_FLOOR
    store_particles: bool = False

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValidationError("particle_count must be >= 1")
        self.process_noise_cov = np.asarray(self.process_noise_cov, dtype=float)
        self.measurement_noise_cov = np.asarray(self.measurement_noise_cov, dtype=float)
        for name, cov in (
            ("process_noise_cov", self.process_noise_cov),
            ("measurement_noise_cov", self.measurement_noise_cov),
        ):
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValidationError(f"{name} must be a square matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValidationError(f"{name} must be SPD: {exc}") from exc
        if not (0.0 < self.forgetting_multiplier <= 1.0):
            raise ValidationError("forgetting_multiplier must lie in (0, 1]")
        if not (0.0 < self.ess_resample_threshold <= 1.0):
            raise ValidationError("ess_resample_threshold must lie in (0, 1]")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValidationError("resampling must be 'multinomial' or 'systematic'")
        self.hyperparam_walk_cov = np.asarray(self.hyperparam_walk_cov, dtype=float)
        if self.hyperparam_walk_cov.shape != (2,) or np.any(self.hyperparam_walk_cov < 0):
            raise ValidationError("hyperparam_walk_cov must be two non-negative variances")
        if self.psi_floor <= 0.0:
            raise ValidationError("psi_floor must be positive")


@dataclass
class Particle:
    """Single-particle view extracted from the filter (tests, debugging)."""

    state: np.ndarray
    stiffness: float
    stats: NigStatistics
    hyperparams: KernelHyperparams
    weight: float


@dataclass
class StepRecord:
    """Per-step estimates emitted by :meth:`MarginalizedParticleFilter.step`."""

    state_mean: np.ndarray
    stiffness_mean: float
    ess: float
    map_params: NigParams | None


@dataclass
class FilterOutput:
    """Time-indexed filter estimates plus diagnostics counters."""

    state_mean: np.ndarray  # (T+1, n_x)
    stiffness_mean: np.ndarray  # (T+1,)
    ess: np.ndarray  # (T+1,)
    clamp_count: int
    psi_clamp_count: int
    map_coeff_mean: np.ndarray | None = None  # (T+1, M)
    map_cov_shape: np.ndarray | None = None  # (T+1, M, M)
    map_scale: np.ndarray | None = None  # (T+1,)
    map_dof: np.ndarray | None = None  # (T+1,)
    particle_states: np.ndarray | None = None  # (T+1, N, n_x) debug dumps
    particle_stiffness: np.ndarray | None = None
    particle_weights: np.ndarray | None = None


def resample_multinomial(weights: np.ndarray, rng) -> np.ndarray:
    """I.i.d. categorical ancestor draws from normalized weights.

    ``rng`` is a Generator, or a precomputed array of uniforms (one per
    output slot) for injected-draw testing.
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    u = rng.random(n) if isinstance(rng, np.random.Generator) else np.asarray(rng)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample_systematic(weights: np.ndarray, rng) -> np.ndarray:
    """Systematic (low-variance) resampling with one shared uniform."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    u0 = rng.random() if isinstance(rng, np.random.Generator) else float(rng)
    positions = (u0 + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def gaussian_loglik(residuals: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log N(residual | 0, cov) for a batch of residuals (N, n_y)."""
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    factor = cho_factor(np.asarray(cov, dtype=float), lower=True)
    cov_inv = cho_solve(factor, np.eye(residuals.shape[1]))
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quad = np.einsum("ni,ij,nj->n", residuals, cov_inv, residuals)
    return -0.5 * (quad + logdet + residuals.shape[1] * np.log(2.0 * np.pi))


def _normalize_log_weights(log_w: np.ndarray, step_index: int) -> np.ndarray:
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise DegeneracyError(
            f"all particle weights vanished at step {step_index}",
            details={"step": step_index, "max_log_weight": float(np.max(log_w))},
        )
    return log_w - total


def first_stage_weights(
    aux_states, aux_stiffness, prev_weights, y, u_curr, model, measurement_noise_cov
):
    """Normalized look-ahead weights: previous weight times auxiliary likelihood.

    The auxiliary stiffness is the particle's previous-step value (the
    look-ahead happens before the new stiffness is drawn).
    """
    ll = gaussian_loglik(
        y - model.observe(aux_states, u_curr, aux_stiffness), measurement_noise_cov
    )
    log_w = np.log(np.asarray(prev_weights, dtype=float)) + ll
    return np.exp(_normalize_log_weights(log_w, step_index=-1))


def second_stage_weights(
    new_states,
    new_stiffness,
    aux_states,
    aux_stiffness,
    ancestors,
    y,
    u_curr,
    model,
    measurement_noise_cov,
):
    """Normalized likelihood-ratio weights of propagated vs auxiliary particles."""
    ll_new = gaussian_loglik(
        y - model.observe(new_states, u_curr, new_stiffness), measurement_noise_cov
    )
    ll_aux = gaussian_loglik(
        y - model.observe(aux_states, u_curr, aux_stiffness), measurement_noise_cov
    )
    log_w = ll_new - ll_aux[np.asarray(ancestors)]
    return np.exp(_normalize_log_weights(log_w, step_index=-1))


def estimate(states, stiffness, weights):
    """Weighted-mean state and stiffness plus effective sample size."""
    w = np.asarray(weights, dtype=float)
    state_mean = w @ np.asarray(states, dtype=float)
    stiffness_mean = float(w @ np.asarray(stiffness, dtype=float))
    ess = 1.0 / float(np.sum(w**2))
    return state_mean, stiffness_mean, ess


def spectral_prior_diag_batch(basis: LaplacianBasis, log_hyperparams: np.ndarray):
    """Per-particle prior covariance diagonals from log hyperparameters.

    Rows of ``log_hyperparams`` are ``[log signal_variance,
    log length_scale]``. Entries are floored to keep extreme random-walk
    excursions numerically harmless.
    """
    log_hp = np.atleast_2d(np.asarray(log_hyperparams, dtype=float))
    sig2 = np.exp(log_hp[:, 0])[:, None]
    ell2 = np.exp(2.0 * log_hp[:, 1])[:, None]
    n_q = basis.n_q
    diag = (
        sig2
        * (2.0 * np.pi * ell2) ** (n_q / 2.0)
        * np.exp(-0.5 * ell2 * basis.eigenvalues[None, :])
    )
    return np.maximum(diag, PRIOR_DIAG_FLOOR)


def hyperparam_walk(
    log_hyperparams: np.ndarray,
    walk_cov_diag: np.ndarray,
    basis: LaplacianBasis,
    stats: StatisticsEnsemble,
    rng,
):
    """Random-walk the per-particle log hyperparameters and refresh priors.

    Returns the new log hyperparameters; the ensemble's per-particle
    prior diagonals are rebuilt in place (the retained data statistics are
    untouched). ``rng`` is a Generator or a pre-drawn standard-normal
    array for injected-draw testing.
    """
    log_hp = np.asarray(log_hyperparams, dtype=float)
    std = np.sqrt(np.asarray(walk_cov_diag, dtype=float))
    z = rng.standard_normal(log_hp.shape) if isinstance(rng, np.random.Generator) else np.asarray(rng)
    new_log_hp = log_hp + z * std[None, :]
    stats.set_prior_diag(spectral_prior_diag_batch(basis, new_log_hp))
    return new_log_hp


class MarginalizedParticleFilter:
    """Filter state and stepping logic; construct through :func:`init_filter`."""

    def __init__(
        self,
        model: StateSpaceModel,
        config: FilterConfig,
        init_state_sampler,
        basis: LaplacianBasis,
        scaler: InputScaler,
        prior: GpPrior,
    ):
        self.model = model
        self.config = config
        self.basis = basis
        self.scaler = scaler
        self.prior = prior
        n = config.particle_count
        self._proc_chol = np.linalg.cholesky(config.process_noise_cov)
        if config.process_noise_cov.shape[0] != model.n_x:
            raise ValidationError("process noise dimension does not match model")
        if config.measurement_noise_cov.shape[0] != model.n_y:
            raise ValidationError("measurement noise dimension does not match model")

        rng = substream(config.rng_seed, "filter", "init")
        self.states = np.atleast_2d(np.asarray(init_state_sampler(rng, n), dtype=float))
        if self.states.shape != (n, model.n_x):
            raise ValidationError("init_state_sampler must return (N, n_x) states")
        hp0 = prior.hyperparams
        self.log_hyperparams = np.tile(
            np.log([hp0.signal_variance, hp0.length_scale]), (n, 1)
        )
        self.stats = StatisticsEnsemble(
            prior_covariance_diag(basis, hp0),
            prior.noise_scale,
            prior.noise_dof,
            n_particles=n,
        )
        self._clamp_base = basis.clamp_count
        self.psi_clamp_count = 0
        self.step_index = 0
        if config.fixed_stiffness is not None:
            self.stiffness = np.full(n, float(config.fixed_stiffness))
        else:
            phi = self._features(self.states)
            dof, loc, s2, n_cl = self.stats.predictive(phi, config.psi_floor)
            self.psi_clamp_count += n_cl
            self.stiffness = loc + np.sqrt(s2) * rng.standard_t(dof, size=n)
        self.log_weights = np.full(n, -np.log(n))

    # -- helpers ---------------------------------------------------------

    @property
    def n_particles(self) -> int:
        return self.config.particle_count

    @property
    def clamp_count(self) -> int:
        return self.basis.clamp_count - self._clamp_base

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def particle(self, i: int) -> Particle:
        log_hp = self.log_hyperparams[i]
        return Particle(
            state=self.states[i].copy(),
            stiffness=float(self.stiffness[i]),
            stats=self.stats.particle(i),
            hyperparams=KernelHyperparams(
                signal_variance=float(np.exp(log_hp[0])),
                length_scale=float(np.exp(log_hp[1])),
            ),
            weight=float(np.exp(self.log_weights[i])),
        )

    def _features(self, states: np.ndarray) -> np.ndarray:
        poses = self.scaler.transform(self.model.pose_projection(states))
        return self.basis.features(poses)

    def _loglik(self, y: np.ndarray, predicted: np.ndarray) -> np.ndarray:
        return gaussian_loglik(y - predicted, self.config.measurement_noise_cov)

    def _step_draws(self, step_index: int) -> dict:
        """Draw all randomness for one step from named substreams."""
        cfg = self.config
        n = self.n_particles
        draws = {}
        rs = substream(cfg.rng_seed, "filter", "step", step_index, "resample")
        draws["resample"] = rs.random(n) if cfg.resampling == "multinomial" else rs.random()
        draws["hyper"] = substream(
            cfg.rng_seed, "filter", "step", step_index, "hyper"
        ).standard_normal((n, 2))
        draws["process"] = substream(
            cfg.rng_seed, "filter", "step", step_index, "process"
        ).standard_normal((n, self.model.n_x))
        if cfg.fixed_stiffness is None:
            dof = self.stats.prior_dof + cfg.forgetting_multiplier * self.stats.count[0]
            draws["stiffness"] = substream(
                cfg.rng_seed, "filter", "step", step_index, "stiffness"
            ).standard_t(dof, size=n)
        return draws

    # -- stepping --------------------------------------------------------

    def step(self, u_prev, u_curr, y) -> StepRecord:
        """Advance the filter by one measurement."""
        draws = self._step_draws(self.step_index + 1)
        return self.step_with_draws(u_prev, u_curr, y, draws)

    def step_with_draws(self, u_prev, u_curr, y, draws: dict) -> StepRecord:
        """One filter step with externally supplied randomness.

        ``draws`` must contain "resample" (uniforms), "hyper" and
        "process" (standard normals), and "stiffness" (standard-t values
        at the current predictive dof) unless the stiffness is fixed.
        """
        cfg = self.config
        model = self.model
        n = self.n_particles
        t = self.step_index + 1
        y = np.asarray(y, dtype=float)

        learn_gp = cfg.fixed_stiffness is None
        if learn_gp:
            self.stats.time_update(cfg.forgetting_multiplier)

        aux = model.transition(self.states, u_prev, self.stiffness)
        ll_aux = self._loglik(y, model.observe(aux, u_curr, self.stiffness))
        log_first = _normalize_log_weights(self.log_weights + ll_aux, t)
        first_w = np.exp(log_first)

        ess_first = 1.0 / float(np.sum(first_w**2))
        skip_resampling = ess_first > cfg.ess_resample_threshold * n
        if skip_resampling:
            ancestors = np.arange(n)
        elif cfg.resampling == "multinomial":
            ancestors = resample_multinomial(first_w, draws["resample"])
        else:
            ancestors = resample_systematic(first_w, draws["resample"])

        aux_g = aux[ancestors]
        ll_aux_g = ll_aux[ancestors]
        self.stiffness = self.stiffness[ancestors]
        self.log_hyperparams = self.log_hyperparams[ancestors]
        if learn_gp:
            self.stats.gather(ancestors)
            if cfg.hyperparam_learning:
                self.log_hyperparams = hyperparam_walk(
                    self.log_hyperparams,
                    cfg.hyperparam_walk_cov,
                    self.basis,
                    self.stats,
                    draws["hyper"],
                )

        self.states = aux_g + draws["process"] @ self._proc_chol.T

        if learn_gp:
            phi = self._features(self.states)
            dof, loc, s2, n_cl = self.stats.predictive(phi, cfg.psi_floor)
            self.psi_clamp_count += n_cl
            self.stiffness = loc + np.sqrt(s2) * draws["stiffness"]
            self.stats.measurement_update(phi, self.stiffness)
        else:
            self.stiffness = np.full(n, float(cfg.fixed_stiffness))

        ll_new = self._loglik(y, model.observe(self.states, u_curr, self.stiffness))
        log_w = ll_new - ll_aux_g
        if skip_resampling:
            log_w = log_w + log_first
        self.log_weights = _normalize_log_weights(log_w, t)
        self.step_index = t
        return self._record()

    def _record(self) -> StepRecord:
        w = self.weights()
        state_mean, stiffness_mean, ess = estimate(self.states, self.stiffness, w)
        map_params = None
        if self.config.fixed_stiffness is None:
            map_i = int(np.argmax(self.log_weights))
            map_params = posterior_params(
                self.stats.particle(map_i), psi_floor=self.config.psi_floor
            )
        return StepRecord(
            state_mean=state_mean,
            stiffness_mean=stiffness_mean,
            ess=ess,
            map_params=map_params,
        )

    # -- whole-trace driver ------------------------------------------------

    def run(self, inputs: np.ndarray, measurements: np.ndarray) -> FilterOutput:
        """Filter a whole input/measurement sequence (index 0 is the prior)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        measurements = np.atleast_2d(np.asarray(measurements, dtype=float))
        if len(inputs) != len(measurements):
            raise ValidationError("inputs and measurements must have equal length")
        n_steps = len(measurements) - 1
        model_m = self.stats.dim
        learn_gp = self.config.fixed_stiffness is None

        state_mean = np.empty((n_steps + 1, self.model.n_x))
        stiffness_mean = np.empty(n_steps + 1)
        ess = np.empty(n_steps + 1)
        map_coeff = np.empty((n_steps + 1, model_m)) if learn_gp else None
        map_cov = np.empty((n_steps + 1, model_m, model_m)) if learn_gp else None
        map_scale = np.empty(n_steps + 1) if learn_gp else None
        map_dof = np.empty(n_steps + 1) if learn_gp else None
        dumps = (
            {
                "states": np.empty((n_steps + 1, self.n_particles, self.model.n_x)),
                "stiffness": np.empty((n_steps + 1, self.n_particles)),
                "weights": np.empty((n_steps + 1, self.n_particles)),
            }
            if self.config.store_particles
            else None
        )

        def store(idx: int, rec: StepRecord) -> None:
            state_mean[idx] = rec.state_mean
            stiffness_mean[idx] = rec.stiffness_mean
            ess[idx] = rec.ess
            if learn_gp:
                map_coeff[idx] = rec.map_params.mean
                map_cov[idx] = rec.map_params.covariance_shape
                map_scale[idx] = rec.map_params.scale
                map_dof[idx] = rec.map_params.dof
            if dumps is not None:
                dumps["states"][idx] = self.states
                dumps["stiffness"][idx] = self.stiffness
                dumps["weights"][idx] = self.weights()

        store(0, self._record())
        for t in range(1, n_steps + 1):
            store(t, self.step(inputs[t - 1], inputs[t], measurements[t]))

        return FilterOutput(
            state_mean=state_mean,
            stiffness_mean=stiffness_mean,
            ess=ess,
            clamp_count=self.clamp_count,
            psi_clamp_count=self.psi_clamp_count,
            map_coeff_mean=map_coeff,
            map_cov_shape=map_cov,
            map_scale=map_scale,
            map_dof=map_dof,
            particle_states=dumps["states"] if dumps else None,
            particle_stiffness=dumps["stiffness"] if dumps else None,
            particle_weights=dumps["weights"] if dumps else None,
        )

    # -- posterior extraction ---------------------------------------------

    def posterior_coefficients(self) -> np.ndarray:
        """Weight-averaged posterior mean coefficients of the stiffness model."""
        coeffs = self.stats.posterior_mean_coeffs()
        return self.weights() @ coeffs

    def map_particle_index(self) -> int:
        return int(np.argmax(self.log_weights))

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Binary snapshot of all particles and the step index."""
        np.savez_compressed(
            path,
            format_version=CHECKPOINT_VERSION,
            step_index=self.step_index,
            states=self.states,
            stiffness=self.stiffness,
            log_weights=self.log_weights,
            log_hyperparams=self.log_hyperparams,
            prior_gram_diag=self.stats.prior_gram_diag,
            prior_scale=self.stats.prior_scale,
            prior_dof=self.stats.prior_dof,
            cross_sum=self.stats.cross_sum,
            output_sq_sum=self.stats.output_sq_sum,
            gram_data=self.stats.gram_data,
            count=self.stats.count,
            psi_clamp_count=self.psi_clamp_count,
        )

    def load_checkpoint(self, path) -> None:
        """Restore a snapshot saved by :meth:`save_checkpoint`."""
        data = np.load(path)
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        if data["states"].shape != self.states.shape:
            raise ValidationError("checkpoint particle shape does not match filter")
        self.step_index = int(data["step_index"])
        self.states = data["states"]
        self.stiffness = data["stiffness"]
        self.log_weights = data["log_weights"]
        self.log_hyperparams = data["log_hyperparams"]
        self.stats.prior_gram_diag = data["prior_gram_diag"]
        self.stats.prior_scale = float(data["prior_scale"])
        self.stats.prior_dof = float(data["prior_dof"])
        self.stats.cross_sum = data["cross_sum"]
        self.stats.output_sq_sum = data["output_sq_sum"]
        self.stats.gram_data = data["gram_data"]
        self.stats.count = data["count"]
        self.psi_clamp_count = int(data["psi_clamp_count"])


def init_filter(
    model: StateSpaceModel,
    config: FilterConfig,
    init_state_sampler,
    gp_basis: LaplacianBasis,
    scaler: InputScaler,
    nig_prior: GpPrior,
) -> MarginalizedParticleFilter:
    """Build a filter: equal weights, prior statistics per particle, i.i.d.
    initial states and stiffness drawn from the prior predictive."""
    return MarginalizedParticleFilter(
        model=model,
        config=config,
        init_state_sampler=init_state_sampler,
        basis=gp_basis,
        scaler=scaler,
        prior=nig_prior,
    )
