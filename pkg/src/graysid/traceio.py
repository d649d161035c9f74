"""CSV and binary file formats: traces, estimates, learned models, metrics.

CSV files are UTF-8, comma-separated with '.'-decimal and a mandatory
header row. Floats are written in shortest round-trip form so identical
runs produce identical bytes. Schema violations are reported with the
offending line number.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .basis import DomainBox, InputScaler, LaplacianBasis
from .errors import ValidationError
from .evaluation import GpStiffnessField, PredictionGrid, StateMetrics
from .mpf import FilterOutput

MODEL_FORMAT_VERSION = 1


@dataclass
class TraceTable:
    """In-memory view of a trace file; ground truth columns are optional."""

    times: np.ndarray
    inputs: np.ndarray
    measurements: np.ndarray
    states: np.ndarray | None = None
    true_stiffness: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self) -> int:
        return len(self.times)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_trace_csv(path, trace) -> None:
    """Write a trace (``SimTrace`` or ``TraceTable``) with available columns."""
    inputs = np.atleast_2d(trace.inputs)
    measurements = np.atleast_2d(trace.measurements)
    states = None if trace.states is None else np.atleast_2d(trace.states)
    stiffness = trace.true_stiffness
    header = (
        ["t"]
        + [f"u_{i + 1}" for i in range(inputs.shape[1])]
        + [f"y_{i + 1}" for i in range(measurements.shape[1])]
    )
    if states is not None:
        header += [f"x_{i + 1}" for i in range(states.shape[1])]
    if stiffness is not None:
        header += ["k_true"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row_i, t in enumerate(trace.times):
            row = [_fmt(t)]
            row += [_fmt(v) for v in inputs[row_i]]
            row += [_fmt(v) for v in measurements[row_i]]
            if states is not None:
                row += [_fmt(v) for v in states[row_i]]
            if stiffness is not None:
                row.append(_fmt(stiffness[row_i]))
            writer.writerow(row)


def _column_block(header: list, prefix: str, line_no: int):
    cols = [name for name in header if name.startswith(prefix)]
    expected = [f"{prefix}{i + 1}" for i in range(len(cols))]
    if cols != expected:
        raise ValidationError(
            f"line {line_no}: columns {cols} must be contiguous {prefix}1..{prefix}{len(cols)}"
        )
    return [header.index(c) for c in cols]


def read_trace_csv(path) -> TraceTable:
    """Parse and validate a trace file."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("line 1: empty trace file (header row mandatory)")
        if header[:1] != ["t"]:
            raise ValidationError("line 1: first column must be 't'")
        u_idx = _column_block(header, "u_", 1)
        y_idx = _column_block(header, "y_", 1)
        x_idx = _column_block(header, "x_", 1)
        has_k = "k_true" in header
        k_col = header.index("k_true") if has_k else None
        known = 1 + len(u_idx) + len(y_idx) + len(x_idx) + int(has_k)
        if len(header) != known:
            raise ValidationError("line 1: unrecognized columns in header")
        if not u_idx or not y_idx:
            raise ValidationError("line 1: trace needs at least one u and one y column")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"line {line_no}: expected {len(header)} fields, found {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from exc
    if len(rows) < 2:
        raise ValidationError("line 2: trace must contain at least two samples")
    data = np.asarray(rows)
    times = data[:, 0]
    steps = np.diff(times)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0))
        raise ValidationError(f"line {bad + 3}: time column must be strictly increasing")
    if np.ptp(steps) > 1e-9:
        bad = int(np.argmax(np.abs(steps - steps[0]) > 1e-9))
        raise ValidationError(f"line {bad + 3}: sampling interval must be constant")
    return TraceTable(
        times=times,
        inputs=data[:, u_idx],
        measurements=data[:, y_idx],
        states=data[:, x_idx] if x_idx else None,
        true_stiffness=data[:, k_col] if has_k else None,
    )


def write_estimates_csv(path, times, output: FilterOutput) -> None:
    """Per-step weighted means, stiffness estimate and effective sample size."""
    n_x = output.state_mean.shape[1]
    header = ["t"] + [f"xhat_{i + 1}" for i in range(n_x)] + ["khat", "ess"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(times):
            row = [_fmt(t)]
            row += [_fmt(v) for v in output.state_mean[i]]
            row += [_fmt(output.stiffness_mean[i]), _fmt(output.ess[i])]
            writer.writerow(row)


def read_estimates_csv(path) -> dict:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        x_idx = _column_block(header, "xhat_", 1)
        if header[:1] != ["t"] or "khat" not in header or "ess" not in header:
            raise ValidationError("line 1: not an estimates file")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from exc
    data = np.asarray(rows)
    return {
        "times": data[:, 0],
        "state_mean": data[:, x_idx],
        "stiffness_mean": data[:, header.index("khat")],
        "ess": data[:, header.index("ess")],
    }


# -- learned-model export -------------------------------------------------------


def save_learned_model(
    path,
    basis: LaplacianBasis,
    scaler: InputScaler,
    coeff_mean: np.ndarray,
    cov_shape: np.ndarray,
    noise_scale: float,
    noise_dof: float,
    log_hyperparams: np.ndarray,
) -> None:
    """Persist the learned stiffness model (posterior snapshot + basis)."""
    np.savez_compressed(
        path,
        format_version=MODEL_FORMAT_VERSION,
        half_widths=basis.domain.half_widths,
        index_grid=basis.index_grid,
        eigenvalues=basis.eigenvalues,
        scaler_center=scaler.center,
        scaler_scale=scaler.scale,
        coeff_mean=np.asarray(coeff_mean, dtype=float),
        cov_shape=np.asarray(cov_shape, dtype=float),
        noise_scale=float(noise_scale),
        noise_dof=float(noise_dof),
        log_hyperparams=np.asarray(log_hyperparams, dtype=float),
    )


def load_learned_model(path) -> dict:
    """Load a learned model; returns the stiffness field plus posterior parts."""
    data = np.load(path)
    version = int(data["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {version}")
    basis = LaplacianBasis(
        domain=DomainBox(half_widths=data["half_widths"]),
        index_grid=data["index_grid"],
        eigenvalues=data["eigenvalues"],
    )
    scaler = InputScaler(center=data["scaler_center"], scale=data["scaler_scale"])
    field = GpStiffnessField(basis=basis, scaler=scaler, coeffs=data["coeff_mean"])
    return {
        "field": field,
        "basis": basis,
        "scaler": scaler,
        "cov_shape": data["cov_shape"],
        "noise_scale": float(data["noise_scale"]),
        "noise_dof": float(data["noise_dof"]),
        "log_hyperparams": data["log_hyperparams"],
    }


def write_surface_csv(
    path,
    field: GpStiffnessField,
    lower,
    upper,
    fixed_pose,
    points_per_axis: int,
    cov_shape: np.ndarray | None = None,
    noise_scale: float | None = None,
    noise_dof: float | None = None,
) -> None:
    """Posterior mean (and variance, if available) on a 2-D pose grid.

    The grid spans the first two pose axes; remaining components are held
    at ``fixed_pose``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    fixed_pose = np.asarray(fixed_pose, dtype=float)
    axis0 = np.linspace(lower[0], upper[0], points_per_axis)
    axis1 = np.linspace(lower[1], upper[1], points_per_axis)
    g0, g1 = np.meshgrid(axis0, axis1, indexing="ij")
    poses = np.tile(fixed_pose, (g0.size, 1))
    poses[:, 0] = g0.ravel()
    poses[:, 1] = g1.ravel()
    mean = field(poses)
    variance = None
    if cov_shape is not None and noise_dof is not None and noise_dof > 2.0:
        phi = field.basis.features(field.scaler.transform(poses))
        quad = np.einsum("nm,mk,nk->n", phi, cov_shape, phi)
        scale2 = noise_scale * (1.0 + quad) / noise_dof
        variance = scale2 * noise_dof / (noise_dof - 2.0)
    n_q = fixed_pose.size
    header = [f"q_{i + 1}" for i in range(n_q)] + ["k_mean"]
    if variance is not None:
        header.append("k_variance")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(poses.shape[0]):
            row = [_fmt(v) for v in poses[i]] + [_fmt(mean[i])]
            if variance is not None:
                row.append(_fmt(variance[i]))
            writer.writerow(row)


# -- metric exports --------------------------------------------------------------


def write_state_metrics_csv(path, metrics: dict) -> None:
    """One row per method: grouped RMSE and NMSE."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "position_rmse", "velocity_rmse", "nmse"])
        for name in sorted(metrics):
            m: StateMetrics = metrics[name]
            writer.writerow(
                [name, _fmt(m.position_rmse), _fmt(m.velocity_rmse), _fmt(m.nmse)]
            )


def write_prediction_grid_csv(path, grids: dict) -> None:
    """Long-format multi-step NMSE grid: one row per variant/horizon/step."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "horizon", "dt_ms", "nmse_mean", "nmse_std", "excluded_anchors"]
        )
        for name in sorted(grids):
            grid: PredictionGrid = grids[name]
            for i, h in enumerate(grid.horizons):
                for j, dt_ms in enumerate(grid.step_sizes_ms):
                    writer.writerow(
                        [
                            name,
                            int(h),
                            _fmt(dt_ms),
                            _fmt(grid.mean[i, j]),
                            _fmt(grid.std[i, j]),
                            int(grid.excluded[i, j]),
                        ]
                    )
