"""Unscented Kalman filter baseline with the stiffness as a random-walk state.

The state is augmented to ``[x, k]``: the model propagates the state part
with each sigma point's own stiffness value while the stiffness itself
follows a random walk. Serves as the comparison method and as the
stiffness provider for the nominal-plus-estimate prediction variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .models import StateSpaceModel
from .mpf import FilterOutput

#: eigenvalues below -EIG_REPAIR_TOL count as covariance repairs
EIG_REPAIR_TOL = 1e-10


@dataclass
class UkfConfig:
    """Augmented-state UKF configuration.

    ``process_noise_cov`` is ``(n_x+1)`` square with the stiffness
    random-walk variance in the last diagonal entry.
    """

    process_noise_cov: np.ndarray
    measurement_noise_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        self.process_noise_cov = _check_psd("process_noise_cov", self.process_noise_cov)
        self.measurement_noise_cov = _check_psd(
            "measurement_noise_cov", self.measurement_noise_cov
        )
        self.init_mean = np.asarray(self.init_mean, dtype=float)
        self.init_cov = _check_psd("init_cov", self.init_cov)
        if not (0.0 < self.alpha <= 1.0):
            raise ValidationError("alpha must lie in (0, 1]")
        if self.kappa < 0.0:
            raise ValidationError("kappa must be non-negative")


def _check_psd(name: str, mat) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"{name} must be square")
    if np.max(np.abs(mat - mat.T)) > 1e-10:
        raise ValidationError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(mat)) < -1e-10:
        raise ValidationError(f"{name} must be positive semi-definite")
    return 0.5 * (mat + mat.T)


def unscented_weights(n: int, alpha: float, beta: float, kappa: float):
    """Mean and covariance weights of the scaled unscented transform."""
    scaled = alpha**2 * (n + kappa)
    lam = scaled - n
    wm = np.full(2 * n + 1, 1.0 / (2.0 * scaled))
    wc = wm.copy()
    wm[0] = lam / scaled
    wc[0] = lam / scaled + (1.0 - alpha**2 + beta)
    return wm, wc, scaled


class UnscentedKalmanFilter:
    """Joint state/stiffness estimation on the augmented state."""

    def __init__(self, model: StateSpaceModel, config: UkfConfig):
        self.model = model
        self.config = config
        self.n_aug = model.n_x + 1
        if config.process_noise_cov.shape[0] != self.n_aug:
            raise ValidationError("process noise must be (n_x+1) square")
        if config.init_mean.shape != (self.n_aug,):
            raise ValidationError("init_mean must have n_x+1 entries")
        if config.measurement_noise_cov.shape[0] != model.n_y:
            raise ValidationError("measurement noise dimension does not match model")
        self.mean = config.init_mean.copy()
        self.cov = config.init_cov.copy()
        self.repair_count = 0
        self._wm, self._wc, self._spread = unscented_weights(
            self.n_aug, config.alpha, config.beta, config.kappa
        )

    def _sqrt_psd(self, mat: np.ndarray) -> np.ndarray:
        """Symmetric matrix square root with eigenvalue flooring."""
        vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
        if np.min(vals) < -EIG_REPAIR_TOL * max(1.0, float(np.max(np.abs(vals)))):
            self.repair_count += 1
        vals = np.maximum(vals, 0.0)
        return vecs * np.sqrt(vals)[None, :]

    def _sigma_points(self, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
        root = np.sqrt(self._spread) * self._sqrt_psd(cov)
        points = np.empty((2 * self.n_aug + 1, self.n_aug))
        points[0] = mean
        points[1 : self.n_aug + 1] = mean[None, :] + root.T
        points[self.n_aug + 1 :] = mean[None, :] - root.T
        return points

    def step(self, u_prev, u_curr, y):
        """One predict/update cycle; returns the updated (mean, cov)."""
        model = self.model
        points = self._sigma_points(self.mean, self.cov)
        propagated = np.empty_like(points)
        propagated[:, : model.n_x] = model.transition(
            points[:, : model.n_x], u_prev, points[:, -1]
        )
        propagated[:, -1] = points[:, -1]
        mean_pred = self._wm @ propagated
        dev = propagated - mean_pred[None, :]
        cov_pred = (dev.T * self._wc) @ dev + self.config.process_noise_cov
        cov_pred = 0.5 * (cov_pred + cov_pred.T)

        points = self._sigma_points(mean_pred, cov_pred)
        outputs = model.observe(points[:, : model.n_x], u_curr, points[:, -1])
        y_mean = self._wm @ outputs
        y_dev = outputs - y_mean[None, :]
        z_dev = points - mean_pred[None, :]
        innovation_cov = (y_dev.T * self._wc) @ y_dev + self.config.measurement_noise_cov
        cross_cov = (z_dev.T * self._wc) @ y_dev
        gain = np.linalg.solve(innovation_cov.T, cross_cov.T).T
        self.mean = mean_pred + gain @ (np.asarray(y, dtype=float) - y_mean)
        cov = cov_pred - gain @ innovation_cov @ gain.T
        self.cov = 0.5 * (cov + cov.T)
        return self.mean.copy(), self.cov.copy()

    def run(self, inputs: np.ndarray, measurements: np.ndarray) -> FilterOutput:
        """Filter a whole sequence; shares the output shape with the PF."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        measurements = np.atleast_2d(np.asarray(measurements, dtype=float))
        if len(inputs) != len(measurements):
            raise ValidationError("inputs and measurements must have equal length")
        n_steps = len(measurements) - 1
        state_mean = np.empty((n_steps + 1, self.model.n_x))
        stiffness_mean = np.empty(n_steps + 1)
        state_mean[0] = self.mean[: self.model.n_x]
        stiffness_mean[0] = self.mean[-1]
        for t in range(1, n_steps + 1):
            mean, _ = self.step(inputs[t - 1], inputs[t], measurements[t])
            state_mean[t] = mean[: self.model.n_x]
            stiffness_mean[t] = mean[-1]
        return FilterOutput(
            state_mean=state_mean,
            stiffness_mean=stiffness_mean,
            ess=np.full(n_steps + 1, np.nan),
            clamp_count=0,
            psi_clamp_count=0,
        )


def ukf_step(ukf: UnscentedKalmanFilter, u_prev, u_curr, y):
    """Functional alias for :meth:`UnscentedKalmanFilter.step`."""
    return ukf.step(u_prev, u_curr, y)
