"""Conjugate normal-inverse-gamma recursion for the stiffness coefficients.

Observations ``k = a^T phi(q) + noise`` with unknown noise variance are
absorbed into four sufficient statistics, from which the coefficient
posterior and the Student-t predictive follow in closed form. Prior and
data contributions are stored separately: exponential forgetting discounts
only the data part, so the prior never decays and the prior covariance can
be swapped (hyperparameter learning) without replaying history. With a
forgetting multiplier of 1 this is identical to accumulating everything in
one set of statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegeneracyError, ValidationError

#: floor applied to the posterior scale when clamping is requested
PSI_FLOOR = 1e-12


@dataclass
class NigStatistics:
    """Sufficient statistics of the normal-inverse-gamma posterior.

    Exposes the combined statistics ``s1``, ``s2``, ``r1``, ``r2``
    (prior part plus accumulated data part).
    """

    prior_gram: np.ndarray  # inverse of the coefficient prior covariance
    prior_scale: float
    prior_dof: float
    cross_sum: np.ndarray = None  # sum of phi * k over observations
    output_sq_sum: float = 0.0  # sum of k^2
    gram_data: np.ndarray = None  # sum of outer(phi, phi)
    count: float = 0.0  # (discounted) observation count

    def __post_init__(self):
        self.prior_gram = np.asarray(self.prior_gram, dtype=float)
        if self.prior_gram.ndim != 2 or self.prior_gram.shape[0] != self.prior_gram.shape[1]:
            raise ValidationError("prior_gram must be a square matrix")
        if not (self.prior_scale > 0.0 and self.prior_dof > 0.0):
            raise ValidationError("prior scale and dof must be strictly positive")
        m = self.prior_gram.shape[0]
        if self.cross_sum is None:
            self.cross_sum = np.zeros(m)
        if self.gram_data is None:
            self.gram_data = np.zeros((m, m))
        self.cross_sum = np.asarray(self.cross_sum, dtype=float)
        self.gram_data = np.asarray(self.gram_data, dtype=float)

    @property
    def dim(self) -> int:
        return self.prior_gram.shape[0]

    @property
    def s1(self) -> np.ndarray:
        return self.cross_sum.copy()

    @property
    def s2(self) -> float:
        return self.prior_scale + self.output_sq_sum

    @property
    def r1(self) -> np.ndarray:
        return self.prior_gram + self.gram_data

    @property
    def r2(self) -> float:
        return self.prior_dof + self.count

    def copy(self) -> "NigStatistics":
        return NigStatistics(
            prior_gram=self.prior_gram.copy(),
            prior_scale=self.prior_scale,
            prior_dof=self.prior_dof,
            cross_sum=self.cross_sum.copy(),
            output_sq_sum=self.output_sq_sum,
            gram_data=self.gram_data.copy(),
            count=self.count,
        )


@dataclass
class NigParams:
    """Posterior density parameters recovered from the statistics."""

    mean: np.ndarray
    covariance_shape: np.ndarray
    scale: float
    dof: float
    psi_clamped: bool = False


@dataclass(frozen=True)
class StudentTParams:
    """Location-scale Student-t: ``location + sqrt(squared_scale) * t(dof)``."""

    dof: float
    location: float
    squared_scale: float


def prior_statistics(V: np.ndarray, psi: float, nu: float) -> NigStatistics:
    """Statistics matching a zero-mean prior with covariance shape ``V``.

    Inverting the parameter map gives ``s1 = 0``, ``r1 = V^{-1}``,
    ``s2 = psi`` and ``r2 = nu``.
    """
    V = np.asarray(V, dtype=float)
    if not (psi > 0.0 and nu > 0.0):
        raise ValidationError("psi and nu must be strictly positive")
    try:
        factor = cho_factor(V, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"prior covariance not SPD: {exc}") from exc
    prior_gram = cho_solve(factor, np.eye(V.shape[0]))
    prior_gram = 0.5 * (prior_gram + prior_gram.T)
    return NigStatistics(prior_gram=prior_gram, prior_scale=float(psi), prior_dof=float(nu))


def measurement_update(stats: NigStatistics, phi: np.ndarray, k: float) -> NigStatistics:
    """Absorb one observation pair ``(phi, k)``; returns new statistics."""
    phi = np.asarray(phi, dtype=float)
    out = stats.copy()
    out.cross_sum += phi * k
    out.output_sq_sum += float(k) ** 2
    out.gram_data += np.outer(phi, phi)
    out.count += 1.0
    return out


def time_update(stats: NigStatistics, forgetting_multiplier: float) -> NigStatistics:
    """Discount the accumulated data part by the forgetting multiplier.

    The prior part is left intact so long runs with forgetting keep a
    proper posterior; a multiplier of 1 is the identity.
    """
    lam = float(forgetting_multiplier)
    if not (0.0 < lam <= 1.0):
        raise ValidationError("forgetting multiplier must lie in (0, 1]")
    out = stats.copy()
    out.cross_sum *= lam
    out.output_sq_sum *= lam
    out.gram_data *= lam
    out.count *= lam
    return out


def posterior_params(stats: NigStatistics, psi_floor: float | None = None) -> NigParams:
    """Recover the posterior parameters ``(m, V, psi, nu)``.

    ``psi_floor=None`` raises :class:`DegeneracyError` if the posterior
    scale is not positive; passing a floor clamps instead (used in filter
    hot paths where a single degenerate particle must not abort the run).
    """
    try:
        factor = cho_factor(stats.r1, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(
            "posterior gram matrix not SPD", details={"r1": stats.r1}
        ) from exc
    s1 = stats.cross_sum
    mean = cho_solve(factor, s1)
    cov = cho_solve(factor, np.eye(stats.dim))
    cov = 0.5 * (cov + cov.T)
    psi = stats.s2 - float(s1 @ mean)
    clamped = False
    if psi <= 0.0 or not np.isfinite(psi):
        if psi_floor is None:
            raise DegeneracyError(
                "non-positive posterior scale",
                details={"psi": psi, "s2": stats.s2, "count": stats.count},
            )
        psi = psi_floor
        clamped = True
    elif psi_floor is not None and psi < psi_floor:
        psi = psi_floor
        clamped = True
    return NigParams(
        mean=mean,
        covariance_shape=cov,
        scale=float(psi),
        dof=float(stats.r2),
        psi_clamped=clamped,
    )


def predictive_student_t(
    stats: NigStatistics,
    phi: np.ndarray,
    psi_floor: float | None = None,
    allow_zero_features: bool = False,
) -> StudentTParams:
    """Marginal predictive of a new observation at features ``phi``.

    Student-t with dof ``r2``, location ``m^T phi`` and squared scale
    ``psi (1 + phi^T V phi) / r2``. A zero feature vector makes the
    projection degenerate; by default that raises, but the filter passes
    ``allow_zero_features=True`` to use the exact limiting predictive
    (pure noise marginal) instead.
    """
    phi = np.asarray(phi, dtype=float)
    try:
        factor = cho_factor(stats.r1, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(
            "posterior gram matrix not SPD", details={"r1": stats.r1}
        ) from exc
    solved = cho_solve(factor, np.column_stack([stats.cross_sum, phi]))
    location = float(phi @ solved[:, 0])
    quad = float(phi @ solved[:, 1])  # phi^T V phi
    if quad <= 0.0:
        if not allow_zero_features:
            raise DegeneracyError(
                "degenerate basis direction: phi^T V phi is zero",
                details={"phi_norm": float(np.linalg.norm(phi))},
            )
        quad = 0.0
    psi = stats.s2 - float(stats.cross_sum @ solved[:, 0])
    clamped = psi <= 0.0 or not np.isfinite(psi)
    if clamped:
        if psi_floor is None:
            raise DegeneracyError(
                "non-positive posterior scale",
                details={"psi": psi, "count": stats.count},
            )
        psi = psi_floor
    dof = stats.r2
    return StudentTParams(
        dof=float(dof),
        location=location,
        squared_scale=float(psi * (1.0 + quad) / dof),
    )


def sample_student_t(params: StudentTParams, rng: np.random.Generator) -> float:
    """Draw once from the location-scale Student-t."""
    return float(
        params.location + np.sqrt(params.squared_scale) * rng.standard_t(params.dof)
    )


def gp_posterior_mean(stats: NigStatistics, phi: np.ndarray) -> float:
    """Posterior mean prediction ``m^T phi`` (the predictive location)."""
    phi = np.asarray(phi, dtype=float)
    factor = cho_factor(stats.r1, lower=True)
    return float(stats.cross_sum @ cho_solve(factor, phi))


class StatisticsEnsemble:
    """Vectorized statistics for many particles with diagonal priors.

    Mirrors the scalar functions above for the filter hot path: one
    batched solve per step instead of one factorization per particle.
    The prior covariance is restricted to diagonal (the spectral prior),
    stored per particle so hyperparameter learning can swap it.
    """

    def __init__(
        self,
        prior_diag: np.ndarray,
        psi: float,
        nu: float,
        n_particles: int | None = None,
    ):
        prior_diag = np.asarray(prior_diag, dtype=float)
        if prior_diag.ndim == 1:
            if n_particles is None:
                raise ValidationError("n_particles required for a shared prior")
            prior_diag = np.tile(prior_diag, (n_particles, 1))
        if np.any(prior_diag <= 0.0):
            raise ValidationError("prior covariance diagonal must be positive")
        if not (psi > 0.0 and nu > 0.0):
            raise ValidationError("psi and nu must be strictly positive")
        self.prior_gram_diag = 1.0 / prior_diag
        self.prior_scale = float(psi)
        self.prior_dof = float(nu)
        n, m = self.prior_gram_diag.shape
        self.cross_sum = np.zeros((n, m))
        self.output_sq_sum = np.zeros(n)
        self.gram_data = np.zeros((n, m, m))
        self.count = np.zeros(n)

    @property
    def n_particles(self) -> int:
        return self.prior_gram_diag.shape[0]

    @property
    def dim(self) -> int:
        return self.prior_gram_diag.shape[1]

    def copy(self) -> "StatisticsEnsemble":
        out = StatisticsEnsemble.__new__(StatisticsEnsemble)
        out.prior_gram_diag = self.prior_gram_diag.copy()
        out.prior_scale = self.prior_scale
        out.prior_dof = self.prior_dof
        out.cross_sum = self.cross_sum.copy()
        out.output_sq_sum = self.output_sq_sum.copy()
        out.gram_data = self.gram_data.copy()
        out.count = self.count.copy()
        return out

    def time_update(self, forgetting_multiplier: float) -> None:
        lam = float(forgetting_multiplier)
        if not (0.0 < lam <= 1.0):
            raise ValidationError("forgetting multiplier must lie in (0, 1]")
        if lam == 1.0:
            return
        self.cross_sum *= lam
        self.output_sq_sum *= lam
        self.gram_data *= lam
        self.count *= lam

    def measurement_update(self, phi: np.ndarray, k: np.ndarray) -> None:
        """Absorb one ``(phi_i, k_i)`` pair per particle, in place."""
        phi = np.asarray(phi, dtype=float)
        k = np.asarray(k, dtype=float)
        self.cross_sum += phi * k[:, None]
        self.output_sq_sum += k**2
        self.gram_data += phi[:, :, None] * phi[:, None, :]
        self.count += 1.0

    def gather(self, ancestors: np.ndarray) -> None:
        """Replace each particle's statistics by its ancestor's (resampling)."""
        self.prior_gram_diag = self.prior_gram_diag[ancestors]
        self.cross_sum = self.cross_sum[ancestors]
        self.output_sq_sum = self.output_sq_sum[ancestors]
        self.gram_data = self.gram_data[ancestors]
        self.count = self.count[ancestors]

    def set_prior_diag(self, prior_diag: np.ndarray) -> None:
        """Swap the per-particle prior covariance diagonal."""
        prior_diag = np.asarray(prior_diag, dtype=float)
        if prior_diag.shape != self.prior_gram_diag.shape:
            raise ValidationError("prior diagonal shape mismatch")
        if np.any(prior_diag <= 0.0):
            raise ValidationError("prior covariance diagonal must be positive")
        self.prior_gram_diag = 1.0 / prior_diag

    def _effective_gram(self) -> np.ndarray:
        r1 = self.gram_data.copy()
        idx = np.arange(self.dim)
        r1[:, idx, idx] += self.prior_gram_diag
        return r1

    def predictive(self, phi: np.ndarray, psi_floor: float = PSI_FLOOR):
        """Per-particle Student-t predictive at features ``phi`` (N, M).

        Returns ``(dof, location, squared_scale, n_clamped)`` with the
        posterior scale floored at ``psi_floor`` (clamps counted). Zero
        feature rows fall back to the limiting pure-noise predictive.
        """
        phi = np.asarray(phi, dtype=float)
        r1 = self._effective_gram()
        rhs = np.stack([self.cross_sum, phi], axis=-1)
        solved = np.linalg.solve(r1, rhs)
        location = np.einsum("nm,nm->n", phi, solved[:, :, 0])
        quad = np.maximum(np.einsum("nm,nm->n", phi, solved[:, :, 1]), 0.0)
        psi = (
            self.prior_scale
            + self.output_sq_sum
            - np.einsum("nm,nm->n", self.cross_sum, solved[:, :, 0])
        )
        bad = ~(psi > psi_floor) | ~np.isfinite(psi)
        n_clamped = int(np.count_nonzero(bad))
        psi = np.where(bad, psi_floor, psi)
        dof = self.prior_dof + self.count
        squared_scale = psi * (1.0 + quad) / dof
        return dof, location, squared_scale, n_clamped

    def posterior_mean_coeffs(self) -> np.ndarray:
        """Posterior mean coefficient vector of every particle, ``(N, M)``."""
        return np.linalg.solve(self._effective_gram(), self.cross_sum[:, :, None])[
            :, :, 0
        ]

    def particle(self, i: int) -> NigStatistics:
        """Extract particle ``i`` as scalar-path statistics (tests, export)."""
        return NigStatistics(
            prior_gram=np.diag(self.prior_gram_diag[i]),
            prior_scale=self.prior_scale,
            prior_dof=self.prior_dof,
            cross_sum=self.cross_sum[i].copy(),
            output_sq_sum=float(self.output_sq_sum[i]),
            gram_data=self.gram_data[i].copy(),
            count=float(self.count[i]),
        )
