"""Metrics and the multi-step forward-prediction harness.

RMSE follows the group-average-of-MSE convention (square root of the MSE
pooled over the selected states and all time steps). NMSE is the
per-state MSE normalized by that state's ground-truth variance, averaged
across states, so predicting the truth's mean gives exactly 1.

Multi-step prediction anchors a rollout at every ground-truth sample,
integrates the model forward ``h`` steps of size ``dt`` with zero-order
held inputs, and scores the landing error against linearly interpolated
ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import InputScaler, LaplacianBasis
from .errors import ValidationError
from .models import ContinuousStateSpaceModel, SimTrace, rk4_step


def rmse(estimates, truth, index_group=None) -> float:
    """Root of the MSE pooled over the selected state indices and all steps."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if estimates.shape != truth.shape:
        raise ValidationError("estimates and truth must have equal shapes")
    err = estimates - truth
    if index_group is not None:
        err = err[:, np.asarray(index_group, dtype=int)]
    return float(np.sqrt(np.mean(err**2)))


def nmse(estimates, truth) -> float:
    """Per-state variance-normalized MSE, averaged over states.

    States whose ground truth has (near-)zero variance are excluded with
    a warning.
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if estimates.shape != truth.shape:
        raise ValidationError("estimates and truth must have equal shapes")
    variances = np.var(truth, axis=0)
    keep = variances > 1e-300
    if not np.all(keep):
        warnings.warn(
            f"excluding {int(np.count_nonzero(~keep))} zero-variance state(s) from NMSE",
            stacklevel=2,
        )
    if not np.any(keep):
        raise ValidationError("no state with nonzero variance")
    mse = np.mean((estimates - truth) ** 2, axis=0)
    return float(np.mean(mse[keep] / variances[keep]))


@dataclass
class StateMetrics:
    """Table-style state estimation accuracy summary."""

    per_state_rmse: np.ndarray
    position_rmse: float
    velocity_rmse: float
    nmse: float


def state_metrics(estimates, truth, n_positions: int) -> StateMetrics:
    """RMSE by state group (leading positions vs the rest) plus overall NMSE."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    n_x = truth.shape[1]
    per_state = np.sqrt(np.mean((estimates - truth) ** 2, axis=0))
    return StateMetrics(
        per_state_rmse=per_state,
        position_rmse=rmse(estimates, truth, range(n_positions)),
        velocity_rmse=rmse(estimates, truth, range(n_positions, n_x)),
        nmse=nmse(estimates, truth),
    )


# -- stiffness providers ----------------------------------------------------


@dataclass
class GpStiffnessField:
    """Pose-dependent stiffness prediction from learned basis coefficients."""

    basis: LaplacianBasis
    scaler: InputScaler
    coeffs: np.ndarray

    def __call__(self, q_raw, anchor_idx=None):
        phi = self.basis.features(self.scaler.transform(q_raw))
        return phi @ np.asarray(self.coeffs, dtype=float)


@dataclass
class TrackStiffness:
    """Stiffness frozen per anchor at a filter's time-indexed estimate."""

    track: np.ndarray

    def __call__(self, q_raw, anchor_idx):
        return np.asarray(self.track, dtype=float)[anchor_idx]


@dataclass
class ConstantStiffness:
    """Single fixed stiffness value."""

    value: float

    def __call__(self, q_raw, anchor_idx=None):
        q_raw = np.asarray(q_raw, dtype=float)
        return np.full(q_raw.shape[:-1], self.value)


# -- multi-step prediction ----------------------------------------------------


@dataclass
class MultistepResult:
    """NMSE of one (horizon, step size) cell."""

    per_state_nmse: np.ndarray
    mean: float
    std: float
    n_anchors: int
    n_excluded: int


def multistep_nmse(
    model: ContinuousStateSpaceModel,
    trace: SimTrace,
    stiffness_fn,
    horizon: int,
    dt: float,
    stride: int = 1,
    blowup_threshold: float = 1e6,
) -> MultistepResult:
    """Roll the model ``horizon`` steps of ``dt`` from every anchor and score.

    ``stiffness_fn(q_raw, anchor_idx)`` supplies the stiffness during the
    rollout. Diverged anchors are excluded and counted.
    """
    if horizon < 1 or dt <= 0.0 or stride < 1:
        raise ValidationError("horizon and stride must be >= 1, dt positive")
    times = trace.times
    fly_time = horizon * dt
    if fly_time > times[-1] - times[0] + 1e-12:
        raise ValidationError("trace too short for the requested horizon")
    last_anchor_time = times[-1] - fly_time
    anchors = np.nonzero(times <= last_anchor_time + 1e-12)[0][::stride]
    x = trace.states[anchors].copy()
    tau = times[anchors].copy()
    n_samples = len(times)
    with np.errstate(all="ignore"):
        for _ in range(horizon):
            u_idx = np.minimum(
                (tau / trace.dt + 1e-9).astype(int), n_samples - 1
            )
            u = trace.inputs[u_idx]
            k = stiffness_fn(model.pose_projection(x), anchors)
            x = rk4_step(
                model.continuous_dynamics, x, u, k, dt, check=False
            )
            tau += dt

    landing = times[anchors] + fly_time
    truth = _interp_states(trace, landing)
    with np.errstate(all="ignore"):
        valid = np.all(np.isfinite(x), axis=1) & (
            np.max(np.abs(np.nan_to_num(x, nan=np.inf)), axis=1) < blowup_threshold
        )
    n_excluded = int(np.count_nonzero(~valid))
    if not np.any(valid):
        raise ValidationError("every rollout diverged; model variant unusable")
    err = x[valid] - truth[valid]
    variances = np.var(trace.states, axis=0)
    keep = variances > 1e-300
    per_state = np.full(trace.states.shape[1], np.nan)
    per_state[keep] = np.mean(err[:, keep] ** 2, axis=0) / variances[keep]
    return MultistepResult(
        per_state_nmse=per_state,
        mean=float(np.mean(per_state[keep])),
        std=float(np.std(per_state[keep])),
        n_anchors=int(len(anchors)),
        n_excluded=n_excluded,
    )


def _interp_states(trace: SimTrace, query_times: np.ndarray) -> np.ndarray:
    out = np.empty((len(query_times), trace.states.shape[1]))
    for j in range(trace.states.shape[1]):
        out[:, j] = np.interp(query_times, trace.times, trace.states[:, j])
    return out


@dataclass
class PredictionGrid:
    """Multi-step NMSE over a (horizon x step size) grid for one variant."""

    horizons: np.ndarray
    step_sizes_ms: np.ndarray
    mean: np.ndarray  # (H, W)
    std: np.ndarray  # (H, W)
    excluded: np.ndarray  # (H, W) ints


def compare_variants(
    model: ContinuousStateSpaceModel,
    trace: SimTrace,
    stiffness_providers: dict,
    horizons=(5, 10, 20),
    step_sizes_ms=(1.0, 2.5, 5.0, 7.5, 10.0),
    stride: int = 1,
) -> dict:
    """Evaluate every multi-step cell for every stiffness provider."""
    horizons = np.asarray(horizons, dtype=int)
    step_sizes_ms = np.asarray(step_sizes_ms, dtype=float)
    grids = {}
    for name, provider in stiffness_providers.items():
        mean = np.empty((len(horizons), len(step_sizes_ms)))
        std = np.empty_like(mean)
        excluded = np.zeros(mean.shape, dtype=int)
        for i, h in enumerate(horizons):
            for j, dt_ms in enumerate(step_sizes_ms):
                res = multistep_nmse(
                    model, trace, provider, int(h), dt_ms * 1e-3, stride=stride
                )
                mean[i, j] = res.mean
                std[i, j] = res.std
                excluded[i, j] = res.n_excluded
        grids[name] = PredictionGrid(
            horizons=horizons,
            step_sizes_ms=step_sizes_ms,
            mean=mean,
            std=std,
            excluded=excluded,
        )
    return grids


def render_prediction_table(grids: dict) -> str:
    """Aligned-text table of the NMSE grids; cells above 1 are flagged."""
    if not grids:
        return ""
    first = next(iter(grids.values()))
    header = ["h", "variant"] + [f"dt={dt:g}ms" for dt in first.step_sizes_ms]
    rows = []
    for i, h in enumerate(first.horizons):
        for name, grid in grids.items():
            cells = []
            for j in range(len(grid.step_sizes_ms)):
                cell = f"{grid.mean[i, j]:.3f} ({grid.std[i, j]:.3f})"
                if grid.mean[i, j] > 1.0:
                    cell += " >1"
                cells.append(cell)
            rows.append([str(int(h)), name] + cells)
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


# -- stiffness recovery over visited poses -----------------------------------


@dataclass
class VisitedCells:
    """Visit statistics of pose space, binned on a regular grid."""

    mean_poses: np.ndarray  # (C, n_q), visit-mean pose of each kept cell
    counts: np.ndarray  # (C,)


def pose_visit_cells(
    poses: np.ndarray, lower, upper, bins_per_axis: int, min_visits: int
) -> VisitedCells:
    """Bin visited poses; keep cells with at least ``min_visits`` visits."""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n_q = poses.shape[1]
    widths = (upper - lower) / bins_per_axis
    idx = np.clip(((poses - lower) / widths).astype(int), 0, bins_per_axis - 1)
    flat = np.ravel_multi_index(idx.T, (bins_per_axis,) * n_q)
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    poses_sorted = poses[order]
    cell_ids, starts, counts = np.unique(
        flat_sorted, return_index=True, return_counts=True
    )
    keep = counts >= min_visits
    mean_poses = np.add.reduceat(poses_sorted, starts, axis=0) / counts[:, None]
    return VisitedCells(mean_poses=mean_poses[keep], counts=counts[keep])


def recovery_fraction(predicted, truth, relative_tolerance: float) -> float:
    """Fraction of points with relative error within the tolerance."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    rel = np.abs(predicted - truth) / np.maximum(np.abs(truth), 1e-300)
    return float(np.mean(rel <= relative_tolerance))
