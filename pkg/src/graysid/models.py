"""State-space models: abstract interface, synthetic test systems, simulation.

The filter interacts with a model solely through ``transition``,
``observe`` and ``pose_projection``, each of which takes the current
scalar stiffness value as an extra argument. Models accept batched states
``(N, n_x)`` with per-row stiffness so a whole particle cloud moves in one
call.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, SimulationBlowupError, ValidationError
from .seeding import substream


def rk4_step(continuous_dynamics, x, u, k, dt: float, check: bool = True):
    """One classical 4th-order Runge-Kutta step of ``dx/dt = f(x, u, k)``.

    ``u`` and ``k`` are held constant over the step. Works on single
    states or batches. ``check=False`` skips the finiteness guard so
    batched rollouts can mask diverged rows themselves.
    """
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    k1 = continuous_dynamics(x, u, k)
    k2 = continuous_dynamics(x + 0.5 * dt * k1, u, k)
    k3 = continuous_dynamics(x + 0.5 * dt * k2, u, k)
    k4 = continuous_dynamics(x + dt * k3, u, k)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state produced by integration step")
    return out


class StateSpaceModel(abc.ABC):
    """Discrete-time model with a scalar stiffness argument.

    Subclasses define the dimensions ``n_x``, ``n_u``, ``n_y``, ``n_q``
    and deterministic ``transition`` / ``observe`` maps; noise is added by
    the caller.
    """

    n_x: int
    n_u: int
    n_y: int
    n_q: int

    @abc.abstractmethod
    def transition(self, x, u, k):
        """Next-state mean; ``x`` may be ``(n_x,)`` or ``(N, n_x)``."""

    @abc.abstractmethod
    def observe(self, x, u, k):
        """Output mean at the current state."""

    def pose_projection(self, x):
        """Pose components the stiffness depends on (leading ``n_q`` states)."""
        return np.asarray(x, dtype=float)[..., : self.n_q]

    def true_stiffness(self, q):
        """Ground-truth stiffness field, if the model defines one."""
        raise NotImplementedError(f"{type(self).__name__} has no stiffness field")


class ContinuousStateSpaceModel(StateSpaceModel):
    """Model discretized from continuous dynamics (variable-step rollouts)."""

    dt: float

    @abc.abstractmethod
    def continuous_dynamics(self, x, u, k):
        """Time derivative of the state."""

    def transition(self, x, u, k):
        return rk4_step(self.continuous_dynamics, np.asarray(x, dtype=float), u, k, self.dt)


class StiffnessOscillator(ContinuousStateSpaceModel):
    """Damped point-mass oscillator with a pose-dependent stiffness field.

    State is ``[q, dq/dt]`` with ``q`` the 3 pose coordinates. The
    restoring force on coordinate ``i`` is ``-k * q_i`` with one shared
    scalar ``k`` whose true value varies smoothly with pose:
    ``k(q) = base + span * tanh(|q|^2 / shape)``. Outputs are the
    reaction forces at the anchor, optionally extended by reaction
    torques (lever arm = tip position) for a 6-dimensional output.
    """

    def __init__(
        self,
        masses_kg=(1.0, 1.0, 1.2),
        damping_Ns_per_m=(8.0, 8.0, 9.0),
        input_gains_N=(22.0, 22.0, 18.0),
        stiffness_base_N_per_m: float = 702.4,
        stiffness_span_N_per_m: float = 420.0,
        stiffness_shape_m2: float = 0.0018,
        reference_length_m: float = 0.12,
        dt: float = 0.008,
        n_y: int = 3,
    ):
        self.masses = np.asarray(masses_kg, dtype=float)
        self.damping = np.asarray(damping_Ns_per_m, dtype=float)
        self.input_gains = np.asarray(input_gains_N, dtype=float)
        if not (self.masses.shape == self.damping.shape == self.input_gains.shape):
            raise ValidationError("masses, damping and input gains must match in size")
        if np.any(self.masses <= 0.0):
            raise ValidationError("masses must be positive")
        self.stiffness_base = float(stiffness_base_N_per_m)
        self.stiffness_span = float(stiffness_span_N_per_m)
        self.stiffness_shape = float(stiffness_shape_m2)
        self.reference_length = float(reference_length_m)
        if self.stiffness_shape <= 0.0:
            raise ValidationError("stiffness_shape_m2 must be positive")
        if n_y not in (3, 6):
            raise ValidationError("oscillator output dimension must be 3 or 6")
        self.dt = float(dt)
        self.n_q = self.masses.size
        self.n_x = 2 * self.n_q
        self.n_u = self.masses.size
        self.n_y = n_y

    def continuous_dynamics(self, x, u, k):
        x = np.asarray(x, dtype=float)
        q = x[..., : self.n_q]
        v = x[..., self.n_q :]
        k = np.asarray(k, dtype=float)[..., None] if np.ndim(k) else k
        acc = (
            -k * q - self.damping * v + self.input_gains * np.asarray(u, dtype=float)
        ) / self.masses
        return np.concatenate([v, acc], axis=-1)

    def observe(self, x, u, k):
        x = np.asarray(x, dtype=float)
        q = x[..., : self.n_q]
        v = x[..., self.n_q :]
        k = np.asarray(k, dtype=float)[..., None] if np.ndim(k) else k
        forces = -(k * q + self.damping * v)
        if self.n_y == 3:
            return forces
        lever = q.copy()
        lever[..., 2] = lever[..., 2] + self.reference_length
        torques = np.cross(lever, forces)
        return np.concatenate([forces, torques], axis=-1)

    def true_stiffness(self, q):
        q = np.asarray(q, dtype=float)
        sq = np.sum(q**2, axis=-1)
        return self.stiffness_base + self.stiffness_span * np.tanh(
            sq / self.stiffness_shape
        )


class AffineModel(StateSpaceModel):
    """Linear system with affine stiffness feed-through, for validation.

    ``x' = A x + B u + b k`` and ``y = C x + d k``. With ``k`` fixed this
    is an exact Kalman-filter testbed.
    """

    def __init__(self, A, B, C, stiffness_state_gain=None, stiffness_output_gain=None,
                 n_q: int = 1, true_stiffness_value: float = 0.0):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.n_x = self.A.shape[0]
        self.n_u = self.B.shape[1]
        self.n_y = self.C.shape[0]
        self.n_q = n_q
        self.state_gain = (
            np.zeros(self.n_x)
            if stiffness_state_gain is None
            else np.asarray(stiffness_state_gain, dtype=float)
        )
        self.output_gain = (
            np.zeros(self.n_y)
            if stiffness_output_gain is None
            else np.asarray(stiffness_output_gain, dtype=float)
        )
        self._true_stiffness = float(true_stiffness_value)

    def transition(self, x, u, k):
        x = np.asarray(x, dtype=float)
        k = np.asarray(k, dtype=float)
        return x @ self.A.T + np.asarray(u, dtype=float) @ self.B.T + np.multiply.outer(k, self.state_gain)

    def observe(self, x, u, k):
        x = np.asarray(x, dtype=float)
        k = np.asarray(k, dtype=float)
        return x @ self.C.T + np.multiply.outer(k, self.output_gain)

    def true_stiffness(self, q):
        q = np.asarray(q, dtype=float)
        return np.full(q.shape[:-1], self._true_stiffness)


@dataclass
class SimTrace:
    """One simulated run: inputs, true states, noisy measurements.

    ``states`` are the true states (process noise included when drawn);
    measurements are ``observe(x, u, k_true) + e``.
    """

    times: np.ndarray
    inputs: np.ndarray
    states: np.ndarray
    measurements: np.ndarray
    true_stiffness: np.ndarray | None
    dt: float

    def __post_init__(self):
        n = len(self.times)
        if not (
            len(self.inputs) == len(self.states) == len(self.measurements) == n
        ) or (self.true_stiffness is not None and len(self.true_stiffness) != n):
            raise ValidationError("trace arrays must have consistent length")
        steps = np.diff(self.times)
        if len(steps) and (np.any(steps <= 0) or np.ptp(steps) > 1e-9):
            raise ValidationError("times must be strictly increasing with constant dt")

    def __len__(self) -> int:
        return len(self.times)


def multisine_input(amplitudes, frequencies_hz, phases_rad, n_steps: int, dt: float):
    """Sum-of-sines input, one list of (amplitude, frequency, phase) per channel.

    Returns ``(n_steps + 1, n_u)`` samples at ``t = 0, dt, ..., n_steps*dt``.
    """
    amplitudes = [np.atleast_1d(np.asarray(a, dtype=float)) for a in amplitudes]
    frequencies = [np.atleast_1d(np.asarray(f, dtype=float)) for f in frequencies_hz]
    phases = [np.atleast_1d(np.asarray(p, dtype=float)) for p in phases_rad]
    if not (len(amplitudes) == len(frequencies) == len(phases)):
        raise ValidationError("one amplitude/frequency/phase list per channel")
    t = np.arange(n_steps + 1) * dt
    channels = []
    for amp, freq, pha in zip(amplitudes, frequencies, phases):
        if not (amp.shape == freq.shape == pha.shape):
            raise ValidationError("per-channel component lists must match in length")
        channels.append(
            np.sum(
                amp[None, :] * np.sin(2.0 * np.pi * freq[None, :] * t[:, None] + pha[None, :]),
                axis=1,
            )
        )
    return np.column_stack(channels)


def simulate(
    model: StateSpaceModel,
    inputs: np.ndarray,
    x0: np.ndarray,
    process_noise_cov: np.ndarray,
    measurement_noise_cov: np.ndarray,
    seed: int,
    stiffness_fn=None,
    blowup_threshold: float = 1e6,
) -> SimTrace:
    """Forward-simulate with additive Gaussian noise on states and outputs.

    The stiffness plugged into the model at each step is
    ``stiffness_fn(q_t)`` (defaults to the model's own field).
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    if inputs.shape[1] != model.n_u or x0.shape != (model.n_x,):
        raise ValidationError("input or initial-state dimensions do not match model")
    if stiffness_fn is None:
        stiffness_fn = model.true_stiffness
    n_steps = inputs.shape[0] - 1
    proc_cov = np.asarray(process_noise_cov, dtype=float)
    meas_cov = np.asarray(measurement_noise_cov, dtype=float)
    proc_chol = np.linalg.cholesky(proc_cov) if np.any(proc_cov) else None
    meas_chol = np.linalg.cholesky(meas_cov) if np.any(meas_cov) else None
    rng = substream(seed, "simulate")

    states = np.empty((n_steps + 1, model.n_x))
    stiffness = np.empty(n_steps + 1)
    states[0] = x0
    for t in range(n_steps):
        stiffness[t] = stiffness_fn(model.pose_projection(states[t]))
        nxt = model.transition(states[t], inputs[t], stiffness[t])
        if proc_chol is not None:
            nxt = nxt + proc_chol @ rng.standard_normal(model.n_x)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > blowup_threshold:
            raise SimulationBlowupError(
                f"simulation diverged at step {t + 1}", details={"step": t + 1}
            )
        states[t + 1] = nxt
    stiffness[n_steps] = stiffness_fn(model.pose_projection(states[n_steps]))

    outputs = model.observe(states, inputs, stiffness)
    if meas_chol is not None:
        outputs = outputs + rng.standard_normal((n_steps + 1, model.n_y)) @ meas_chol.T
    dt = getattr(model, "dt", 1.0)
    return SimTrace(
        times=np.arange(n_steps + 1) * dt,
        inputs=inputs,
        states=states,
        measurements=outputs,
        true_stiffness=stiffness,
        dt=dt,
    )
