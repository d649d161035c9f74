"""Experiment configuration: strict YAML parsing and object builders.

A config file may specify any subset of keys; unknown keys are rejected
with their full path. The resolved configuration (defaults filled in) is
echoed into every run's output directory so no hidden default influences
a recorded result. Units are part of the key names.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from .basis import DomainBox, InputScaler, KernelHyperparams, build_basis
from .errors import ValidationError
from .models import StiffnessOscillator, multisine_input, simulate
from .mpf import FilterConfig, GpPrior, MarginalizedParticleFilter, init_filter
from .seeding import substream
from .ukf import UkfConfig, UnscentedKalmanFilter


@dataclass
class OscillatorSection:
    masses_kg: list = field(default_factory=lambda: [1.0, 1.0, 1.2])
    damping_Ns_per_m: list = field(default_factory=lambda: [8.0, 8.0, 9.0])
    input_gains_N: list = field(default_factory=lambda: [26.0, 24.0, 20.0])
    stiffness_base_N_per_m: float = 702.4
    stiffness_span_N_per_m: float = 500.0
    stiffness_shape_m2: float = 0.003
    reference_length_m: float = 0.12
    output_dim: int = 3


@dataclass
class MultisineSection:
    amplitudes: list = field(
        default_factory=lambda: [
            [0.55, 0.45, 0.30],
            [0.50, 0.45, 0.35],
            [0.55, 0.40, 0.30],
        ]
    )
    frequencies_hz: list = field(
        default_factory=lambda: [
            [0.35, 0.90, 2.10],
            [0.45, 1.10, 2.60],
            [0.30, 0.75, 1.80],
        ]
    )
    phases_rad: list = field(
        default_factory=lambda: [
            [0.0, 1.1, 2.3],
            [1.6, 0.4, 2.9],
            [3.4, 2.2, 0.8],
        ]
    )


@dataclass
class SimulationSection:
    dt_ms: float = 8.0
    duration_s: float = 5.0
    initial_state: list = field(
        default_factory=lambda: [0.02, -0.015, 0.025, 0.0, 0.0, 0.0]
    )
    process_noise_std: list = field(
        default_factory=lambda: [2e-5, 2e-5, 2e-5, 4e-4, 4e-4, 4e-4]
    )
    measurement_noise_std: list = field(default_factory=lambda: [1.5, 1.5, 1.5])
    multisine: MultisineSection = field(default_factory=MultisineSection)


@dataclass
class BasisSection:
    n_q: int = 3
    num_functions: int = 40
    half_widths: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    workspace_lower_m: list = field(default_factory=lambda: [-0.055, -0.055, -0.055])
    workspace_upper_m: list = field(default_factory=lambda: [0.055, 0.055, 0.055])
    workspace_margin: float = 0.8


@dataclass
class PriorSection:
    length_scale0: float = 1.0
    signal_variance0: float = 100.0
    noise_scale_psi: float = 4.0
    noise_dof_nu: float = 1.0


@dataclass
class FilterSection:
    particles: int = 500
    forgetting_multiplier: float = 1.0
    process_noise_std: list = field(
        default_factory=lambda: [1e-3, 1e-3, 1e-3, 2e-2, 2e-2, 2e-2]
    )
    measurement_noise_std: list = field(default_factory=lambda: [2.5, 2.5, 2.5])
    hyperparam_learning: bool = True
    hyperparam_walk_std: list = field(default_factory=lambda: [0.03, 0.03])
    ess_resample_threshold: float = 1.0
    resampling: str = "multinomial"
    init_state_mean: list = field(
        default_factory=lambda: [0.02, -0.015, 0.025, 0.0, 0.0, 0.0]
    )
    init_state_std: list = field(
        default_factory=lambda: [2e-3, 2e-3, 2e-3, 1e-2, 1e-2, 1e-2]
    )


@dataclass
class UkfSection:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    init_stiffness_mean_N_per_m: float = 500.0
    init_stiffness_std_N_per_m: float = 300.0
    stiffness_walk_std_N_per_m: float = 12.0
    init_state_std: list = field(
        default_factory=lambda: [2e-3, 2e-3, 2e-3, 1e-2, 1e-2, 1e-2]
    )


@dataclass
class EvaluationSection:
    horizons: list = field(default_factory=lambda: [5, 10, 20])
    step_sizes_ms: list = field(default_factory=lambda: [1.0, 2.5, 5.0, 7.5, 10.0])
    anchor_stride: int = 1
    surface_points_per_axis: int = 15
    surface_fixed_pose_m: list = field(default_factory=lambda: [0.0, 0.0, 0.008])


@dataclass
class SweepSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6, 7, 8, 9])
    particle_counts: list | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str | None = None
    model: OscillatorSection = field(default_factory=OscillatorSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    basis: BasisSection = field(default_factory=BasisSection)
    prior: PriorSection = field(default_factory=PriorSection)
    filter: FilterSection = field(default_factory=FilterSection)
    ukf: UkfSection = field(default_factory=UkfSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    sweep: SweepSection = field(default_factory=SweepSection)


def default_config() -> ExperimentConfig:
    """Fully populated default experiment configuration."""
    return ExperimentConfig()


# -- strict dict <-> dataclass conversion ------------------------------------


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _merge(base, update, path: str):
    if isinstance(base, dict):
        if not isinstance(update, dict):
            raise ValidationError(f"config key '{path}' must be a mapping")
        out = dict(base)
        for key, value in update.items():
            if key not in base:
                raise ValidationError(f"unknown config key '{path}.{key}'".lstrip("."))
            out[key] = _merge(base[key], value, f"{path}.{key}")
        return out
    return update


def _coerce(value, typ, path: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = typing.get_args(typ)
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(value, non_none[0], path)
    if dataclasses.is_dataclass(typ):
        if not isinstance(value, dict):
            raise ValidationError(f"config key '{path}' must be a mapping")
        return from_dict(typ, value, path)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"config key '{path}' must be a number")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"config key '{path}' must be an integer")
        return int(value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"config key '{path}' must be a boolean")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ValidationError(f"config key '{path}' must be a string")
        return value
    if typ is list or origin is list:
        if not isinstance(value, list):
            raise ValidationError(f"config key '{path}' must be a list")
        return value
    raise ValidationError(f"unsupported config type at '{path}'")


def from_dict(cls, data: dict, path: str = "") -> "ExperimentConfig":
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ValidationError(f"unknown config key '{path}.{key}'".lstrip("."))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}")
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse a YAML config file, filling unspecified keys from defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError("config file must contain a mapping")
    merged = _merge(to_dict(default_config()), raw, "")
    return from_dict(ExperimentConfig, merged)


def save_config(cfg: ExperimentConfig, path) -> None:
    """Echo the fully resolved configuration."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)


# -- builders -----------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> StiffnessOscillator:
    m = cfg.model
    return StiffnessOscillator(
        masses_kg=m.masses_kg,
        damping_Ns_per_m=m.damping_Ns_per_m,
        input_gains_N=m.input_gains_N,
        stiffness_base_N_per_m=m.stiffness_base_N_per_m,
        stiffness_span_N_per_m=m.stiffness_span_N_per_m,
        stiffness_shape_m2=m.stiffness_shape_m2,
        reference_length_m=m.reference_length_m,
        dt=cfg.simulation.dt_ms * 1e-3,
        n_y=m.output_dim,
    )


def n_steps_of(cfg: ExperimentConfig) -> int:
    dt = cfg.simulation.dt_ms * 1e-3
    return int(round(cfg.simulation.duration_s / dt))


def simulate_from_config(cfg: ExperimentConfig, seed: int | None = None):
    """Multisine-driven surrogate simulation under the config's noise levels."""
    model = build_model(cfg)
    sim = cfg.simulation
    dt = sim.dt_ms * 1e-3
    inputs = multisine_input(
        sim.multisine.amplitudes,
        sim.multisine.frequencies_hz,
        sim.multisine.phases_rad,
        n_steps_of(cfg),
        dt,
    )
    proc = np.diag(np.asarray(sim.process_noise_std, dtype=float) ** 2)
    meas = np.diag(np.asarray(sim.measurement_noise_std, dtype=float) ** 2)
    return simulate(
        model,
        inputs,
        np.asarray(sim.initial_state, dtype=float),
        proc,
        meas,
        seed=cfg.seed if seed is None else seed,
    )


def build_basis_scaler(cfg: ExperimentConfig):
    b = cfg.basis
    domain = DomainBox(half_widths=np.asarray(b.half_widths, dtype=float))
    basis = build_basis(b.n_q, b.num_functions, domain)
    scaler = InputScaler.from_workspace(
        b.workspace_lower_m, b.workspace_upper_m, domain, margin=b.workspace_margin
    )
    return basis, scaler


def build_prior(cfg: ExperimentConfig) -> GpPrior:
    p = cfg.prior
    return GpPrior(
        hyperparams=KernelHyperparams(
            signal_variance=p.signal_variance0, length_scale=p.length_scale0
        ),
        noise_scale=p.noise_scale_psi,
        noise_dof=p.noise_dof_nu,
    )


def build_filter_config(
    cfg: ExperimentConfig,
    seed: int | None = None,
    particles: int | None = None,
    hyperparam_learning: bool | None = None,
) -> FilterConfig:
    f = cfg.filter
    return FilterConfig(
        particle_count=f.particles if particles is None else particles,
        process_noise_cov=np.diag(np.asarray(f.process_noise_std, dtype=float) ** 2),
        measurement_noise_cov=np.diag(
            np.asarray(f.measurement_noise_std, dtype=float) ** 2
        ),
        forgetting_multiplier=f.forgetting_multiplier,
        hyperparam_learning=(
            f.hyperparam_learning if hyperparam_learning is None else hyperparam_learning
        ),
        hyperparam_walk_cov=np.asarray(f.hyperparam_walk_std, dtype=float) ** 2,
        rng_seed=cfg.seed if seed is None else seed,
        ess_resample_threshold=f.ess_resample_threshold,
        resampling=f.resampling,
    )


def make_init_state_sampler(mean, std):
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)

    def sampler(rng: np.random.Generator, n: int):
        return mean[None, :] + rng.standard_normal((n, mean.size)) * std[None, :]

    return sampler


def build_filter(
    cfg: ExperimentConfig,
    model=None,
    seed: int | None = None,
    particles: int | None = None,
    hyperparam_learning: bool | None = None,
) -> MarginalizedParticleFilter:
    model = build_model(cfg) if model is None else model
    basis, scaler = build_basis_scaler(cfg)
    return init_filter(
        model,
        build_filter_config(
            cfg, seed=seed, particles=particles, hyperparam_learning=hyperparam_learning
        ),
        make_init_state_sampler(cfg.filter.init_state_mean, cfg.filter.init_state_std),
        basis,
        scaler,
        build_prior(cfg),
    )


def build_ukf(cfg: ExperimentConfig, model=None, seed: int | None = None):
    """UKF baseline on the augmented state, initialized near the filter's prior."""
    model = build_model(cfg) if model is None else model
    u = cfg.ukf
    f = cfg.filter
    n_aug = model.n_x + 1
    proc = np.zeros((n_aug, n_aug))
    proc[: model.n_x, : model.n_x] = np.diag(
        np.asarray(f.process_noise_std, dtype=float) ** 2
    )
    proc[-1, -1] = u.stiffness_walk_std_N_per_m**2
    init_mean = np.concatenate(
        [np.asarray(f.init_state_mean, dtype=float), [u.init_stiffness_mean_N_per_m]]
    )
    init_cov = np.zeros((n_aug, n_aug))
    init_cov[: model.n_x, : model.n_x] = np.diag(
        np.asarray(u.init_state_std, dtype=float) ** 2
    )
    init_cov[-1, -1] = u.init_stiffness_std_N_per_m**2
    ukf_config = UkfConfig(
        process_noise_cov=proc,
        measurement_noise_cov=np.diag(
            np.asarray(f.measurement_noise_std, dtype=float) ** 2
        ),
        init_mean=init_mean,
        init_cov=init_cov,
        alpha=u.alpha,
        beta=u.beta,
        kappa=u.kappa,
    )
    return UnscentedKalmanFilter(model, ukf_config)
