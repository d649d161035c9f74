"""Reduced-rank GP machinery on a rectangular domain.

The scalar stiffness function is represented by a finite expansion in
eigenfunctions of the Laplace operator on a box, weighted through the
spectral density of a squared exponential kernel. All objects here are
immutable after construction; the only mutable state is a clamp tally on
the basis, incremented when inputs outside the box are clipped to its
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box ``[-L_1, L_1] x ... x [-L_n, L_n]``."""

    half_widths: np.ndarray

    def __post_init__(self):
        hw = np.atleast_1d(np.asarray(self.half_widths, dtype=float))
        if hw.ndim != 1 or hw.size == 0:
            raise ValidationError("half_widths must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(hw)) or np.any(hw <= 0.0):
            raise ValidationError("half_widths must be finite and strictly positive")
        hw.setflags(write=False)
        object.__setattr__(self, "half_widths", hw)

    @property
    def ndim(self) -> int:
        return int(self.half_widths.size)


@dataclass(frozen=True)
class KernelHyperparams:
    """Squared exponential kernel hyperparameters: scale and length scale."""

    signal_variance: float
    length_scale: float

    def __post_init__(self):
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0.0):
            raise ValidationError("signal_variance must be finite and > 0")
        if not (np.isfinite(self.length_scale) and self.length_scale > 0.0):
            raise ValidationError("length_scale must be finite and > 0")


@dataclass
class LaplacianBasis:
    """Sinusoidal eigenbasis of the Laplacian on a box, sorted by eigenvalue.

    ``index_grid`` holds one positive multi-index per basis function;
    ``eigenvalues`` the matching Laplacian eigenvalues, non-decreasing.
    ``clamp_count`` tallies inputs that had to be clipped to the box; it is
    the only mutable field (merge per-worker bases if evaluating in
    parallel).
    """

    domain: DomainBox
    index_grid: np.ndarray
    eigenvalues: np.ndarray
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.index_grid = np.asarray(self.index_grid, dtype=np.int64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if self.index_grid.ndim != 2 or self.index_grid.shape[1] != self.domain.ndim:
            raise ValidationError("index_grid must have shape (M, n_q)")
        if self.eigenvalues.shape != (self.index_grid.shape[0],):
            raise ValidationError("eigenvalues must match index_grid rows")
        if np.any(np.diff(self.eigenvalues) < 0):
            raise ValidationError("eigenvalues must be sorted non-decreasing")
        self.index_grid.setflags(write=False)
        self.eigenvalues.setflags(write=False)

    @property
    def n_q(self) -> int:
        return self.domain.ndim

    @property
    def num_functions(self) -> int:
        return int(self.index_grid.shape[0])

    def features(self, q: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions at pose(s) ``q``.

        Accepts a single ``(n_q,)`` point or a batch ``(B, n_q)``; returns
        ``(M,)`` or ``(B, M)``. Components outside the box are clamped to
        the boundary (where every basis function is zero) and counted.
        """
        q = np.asarray(q, dtype=float)
        if not np.all(np.isfinite(q)):
            raise ValidationError("basis input must be finite")
        single = q.ndim == 1
        qb = np.atleast_2d(q)
        if qb.shape[1] != self.n_q:
            raise ValidationError(
                f"basis input has {qb.shape[1]} components, expected {self.n_q}"
            )
        half = self.domain.half_widths
        clipped = np.clip(qb, -half, half)
        n_out = int(np.count_nonzero(np.any(clipped != qb, axis=1)))
        if n_out:
            self.clamp_count += n_out
        # phi_m(q) = prod_i L_i^{-1/2} sin(pi j_{m,i} (q_i + L_i) / (2 L_i))
        angles = (clipped + half) * (np.pi / (2.0 * half))
        args = self.index_grid[None, :, :] * angles[:, None, :]
        phi = np.prod(np.sin(args), axis=2) / np.sqrt(np.prod(half))
        return phi[0] if single else phi


def build_basis(n_q: int, num_functions: int, domain: DomainBox) -> LaplacianBasis:
    """Select the ``num_functions`` lowest-eigenvalue multi-indices.

    Enumerates the tensor grid ``{1..J}^{n_q}``, growing ``J`` until the
    selection provably contains the global minimizers, then keeps the
    smallest eigenvalues with lexicographic tie-break on the index row.
    """
    if n_q < 1 or num_functions < 1:
        raise ValidationError("n_q and num_functions must be >= 1")
    if domain.ndim != n_q:
        raise ValidationError("domain dimension must equal n_q")
    half = domain.half_widths
    j_max = max(2, int(np.ceil(num_functions ** (1.0 / n_q))))
    while True:
        axes = [np.arange(1, j_max + 1)] * n_q
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n_q)
        rows = [(eigenvalue_of(row, half), tuple(int(v) for v in row)) for row in grid]
        rows.sort()
        selected = rows[:num_functions]
        # any index outside {1..J}^n has some j_i >= J+1, hence an eigenvalue
        # of at least pi^2 (J+1)^2 / (4 max(L)^2)
        outside_floor = np.pi**2 * (j_max + 1) ** 2 / (4.0 * np.max(half) ** 2)
        if len(rows) >= num_functions and selected[-1][0] <= outside_floor:
            break
        j_max *= 2
    index_grid = np.array([row for _, row in selected], dtype=np.int64)
    eigenvalues = np.array([rho for rho, _ in selected], dtype=float)
    return LaplacianBasis(domain=domain, index_grid=index_grid, eigenvalues=eigenvalues)


def eigenvalue_of(index_row, half_widths) -> float:
    """Laplacian eigenvalue ``sum_i pi^2 j_i^2 / (4 L_i^2)`` of one multi-index.

    Terms are accumulated in sorted order so permutation-symmetric rows tie
    exactly on symmetric domains.
    """
    terms = (np.pi * np.asarray(index_row, dtype=float)) ** 2 / (
        4.0 * np.asarray(half_widths, dtype=float) ** 2
    )
    return float(np.sum(np.sort(terms)[::-1]))


def eval_basis(basis: LaplacianBasis, q: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`LaplacianBasis.features`."""
    return basis.features(q)


def spectral_density_se(omega, hp: KernelHyperparams, n_q: int):
    """Spectral density of the squared exponential kernel at frequency omega.

    ``sigma_f^2 (2 pi ell^2)^{n_q/2} exp(-ell^2 omega^2 / 2)``; vectorized
    over ``omega``.
    """
    omega = np.asarray(omega, dtype=float)
    ell2 = hp.length_scale**2
    out = (
        hp.signal_variance
        * (2.0 * np.pi * ell2) ** (n_q / 2.0)
        * np.exp(-0.5 * ell2 * omega**2)
    )
    return out if out.ndim else float(out)


def prior_covariance_diag(basis: LaplacianBasis, hp: KernelHyperparams) -> np.ndarray:
    """Diagonal of the coefficient prior covariance: ``S(sqrt(rho_m))``."""
    return spectral_density_se(np.sqrt(basis.eigenvalues), hp, basis.n_q)


def prior_covariance(basis: LaplacianBasis, hp: KernelHyperparams) -> np.ndarray:
    """Coefficient prior covariance ``diag(S(sqrt(rho_1)), ..., S(sqrt(rho_M)))``."""
    return np.diag(prior_covariance_diag(basis, hp))


def approx_kernel(basis: LaplacianBasis, hp: KernelHyperparams, q, q_other):
    """Reduced-rank kernel ``sum_m S(sqrt(rho_m)) phi_m(q) phi_m(q')``.

    For 1-D inputs returns a scalar; for batches ``(A, n_q)`` and
    ``(B, n_q)`` returns the ``(A, B)`` cross-kernel matrix.
    """
    weights = prior_covariance_diag(basis, hp)
    phi_a = basis.features(q)
    phi_b = basis.features(q_other)
    if phi_a.ndim == 1 and phi_b.ndim == 1:
        return float(np.sum(weights * phi_a * phi_b))
    return np.atleast_2d(phi_a * weights) @ np.atleast_2d(phi_b).T


@dataclass(frozen=True)
class InputScaler:
    """Affine map from raw pose units into the basis domain.

    ``transform(q) = (q - center) / scale``. Built from a declared
    workspace box so the workspace lands on an interior fraction of the
    domain, keeping clear of the boundary where all basis functions
    vanish.
    """

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if center.shape != scale.shape or center.ndim != 1:
            raise ValidationError("center and scale must be 1-D and equally sized")
        if not np.all(np.isfinite(center)) or not np.all(np.isfinite(scale)):
            raise ValidationError("scaler parameters must be finite")
        if np.any(scale <= 0.0):
            raise ValidationError("scale entries must be strictly positive")
        center.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def from_workspace(
        cls,
        lower,
        upper,
        domain: DomainBox,
        margin: float = 0.8,
    ) -> "InputScaler":
        """Map the box ``[lower, upper]`` onto ``margin`` of ``domain``."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or lower.size != domain.ndim:
            raise ValidationError("workspace bounds must match the domain dimension")
        if np.any(upper <= lower):
            raise ValidationError("workspace upper bounds must exceed lower bounds")
        if not (0.0 < margin <= 1.0):
            raise ValidationError("margin must lie in (0, 1]")
        center = 0.5 * (lower + upper)
        scale = 0.5 * (upper - lower) / (margin * domain.half_widths)
        return cls(center=center, scale=scale)

    def transform(self, q_raw):
        return (np.asarray(q_raw, dtype=float) - self.center) / self.scale

    def inverse_transform(self, q_scaled):
        return np.asarray(q_scaled, dtype=float) * self.scale + self.center


def scale_input(scaler: InputScaler, q_raw):
    """Map raw pose units into domain units."""
    return scaler.transform(q_raw)


def unscale_input(scaler: InputScaler, q_scaled):
    """Inverse of :func:`scale_input`."""
    return scaler.inverse_transform(q_scaled)
