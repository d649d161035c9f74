"""Experiment runner: simulate, filter, eval and sweep commands.

Exit codes: 0 success, 1 validation error, 2 numerical degeneracy,
3 IO error. All randomness is derived from the configured root seed, so
every command is idempotent: identical inputs and seed produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import statistics
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from . import evaluation, traceio
from .errors import DegeneracyError, ValidationError


def _resolve_out(cfg, out_arg) -> Path:
    out = out_arg or cfg.output_dir
    if not out:
        raise ValidationError("an output directory is required (--out or output_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "particles", None) is not None:
        cfg.filter.particles = args.particles
    if getattr(args, "no_hyperlearn", False):
        cfg.filter.hyperparam_learning = False
    return cfg


def cmd_simulate(cfg, out_dir: Path) -> Path:
    """Simulate the surrogate and write a trace with ground truth columns."""
    trace = cfgmod.simulate_from_config(cfg)
    trace_path = out_dir / "trace.csv"
    traceio.write_trace_csv(trace_path, trace)
    cfgmod.save_config(cfg, out_dir / "config_used.yaml")
    return trace_path


def cmd_filter(cfg, trace_path, out_dir: Path, method: str = "mpf") -> Path:
    """Run a filter over a trace; write estimates, checkpoint and model export."""
    trace = traceio.read_trace_csv(trace_path)
    model = cfgmod.build_model(cfg)
    if trace.inputs.shape[1] != model.n_u or trace.measurements.shape[1] != model.n_y:
        raise ValidationError(
            "trace input/output dimensions do not match the configured model"
        )
    cfgmod.save_config(cfg, out_dir / "config_used.yaml")
    if method == "mpf":
        filt = cfgmod.build_filter(cfg, model=model)
        output = filt.run(trace.inputs, trace.measurements)
        filt.save_checkpoint(out_dir / "checkpoint.npz")
        coeffs = filt.posterior_coefficients()
        map_stats = filt.stats.particle(filt.map_particle_index())
        from .conjugate import posterior_params

        map_params = posterior_params(map_stats, psi_floor=filt.config.psi_floor)
        log_hp = filt.weights() @ filt.log_hyperparams
        traceio.save_learned_model(
            out_dir / "learned_model.npz",
            filt.basis,
            filt.scaler,
            coeffs,
            map_params.covariance_shape,
            map_params.scale,
            map_params.dof,
            log_hp,
        )
        field = evaluation.GpStiffnessField(
            basis=filt.basis, scaler=filt.scaler, coeffs=coeffs
        )
        traceio.write_surface_csv(
            out_dir / "surface.csv",
            field,
            cfg.basis.workspace_lower_m,
            cfg.basis.workspace_upper_m,
            cfg.evaluation.surface_fixed_pose_m,
            cfg.evaluation.surface_points_per_axis,
            cov_shape=map_params.covariance_shape,
            noise_scale=map_params.scale,
            noise_dof=map_params.dof,
        )
        summary = {
            "method": "mpf",
            "steps": int(len(trace) - 1),
            "particles": int(cfg.filter.particles),
            "clamp_count": int(output.clamp_count),
            "psi_clamp_count": int(output.psi_clamp_count),
            "min_ess": float(np.min(output.ess)),
            "mean_ess": float(np.mean(output.ess)),
            "final_log_hyperparams": [float(v) for v in log_hp],
            "mean_stiffness_estimate": float(np.mean(output.stiffness_mean)),
        }
    elif method == "ukf":
        ukf = cfgmod.build_ukf(cfg, model=model)
        output = ukf.run(trace.inputs, trace.measurements)
        summary = {
            "method": "ukf",
            "steps": int(len(trace) - 1),
            "covariance_repairs": int(ukf.repair_count),
            "mean_stiffness_estimate": float(np.mean(output.stiffness_mean)),
        }
    else:
        raise ValidationError(f"unknown filter method '{method}'")
    est_path = out_dir / "estimates.csv"
    traceio.write_estimates_csv(est_path, trace.times, output)
    with open(out_dir / "summary.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(summary, fh, sort_keys=True)
    return est_path


def cmd_eval(
    cfg,
    trace_path,
    out_dir: Path,
    mpf_estimates=None,
    ukf_estimates=None,
    learned_model=None,
) -> None:
    """State-accuracy table and multi-step prediction grid from run exports."""
    trace = traceio.read_trace_csv(trace_path)
    if trace.states is None:
        raise ValidationError("evaluation requires ground-truth state columns")
    cfgmod.save_config(cfg, out_dir / "config_used.yaml")
    model = cfgmod.build_model(cfg)

    metrics = {}
    mean_stiffness = None
    ukf_track = None
    for name, path in (("mpf", mpf_estimates), ("ukf", ukf_estimates)):
        if path is None:
            continue
        est = traceio.read_estimates_csv(path)
        if est["state_mean"].shape != trace.states.shape:
            raise ValidationError(f"{name} estimates do not match the trace length")
        metrics[name] = evaluation.state_metrics(
            est["state_mean"], trace.states, model.n_q
        )
        if name == "mpf":
            mean_stiffness = float(np.mean(est["stiffness_mean"]))
        else:
            ukf_track = est["stiffness_mean"]
    if metrics:
        traceio.write_state_metrics_csv(out_dir / "state_metrics.csv", metrics)
        with open(out_dir / "state_metrics.txt", "w", encoding="utf-8") as fh:
            fh.write(f"{'method':8s}{'pos RMSE':>14s}{'vel RMSE':>14s}{'NMSE':>10s}\n")
            for name in sorted(metrics):
                m = metrics[name]
                fh.write(
                    f"{name:8s}{m.position_rmse:14.6g}{m.velocity_rmse:14.6g}"
                    f"{m.nmse:10.4g}\n"
                )

    providers = {}
    if learned_model is not None:
        providers["learned_gp"] = traceio.load_learned_model(learned_model)["field"]
    if ukf_track is not None:
        providers["nominal_ukf_estimate"] = evaluation.TrackStiffness(track=ukf_track)
    if mean_stiffness is not None:
        providers["nominal_mean_stiffness"] = evaluation.ConstantStiffness(
            value=mean_stiffness
        )
    if providers:
        grids = evaluation.compare_variants(
            model,
            trace,
            providers,
            horizons=cfg.evaluation.horizons,
            step_sizes_ms=cfg.evaluation.step_sizes_ms,
            stride=cfg.evaluation.anchor_stride,
        )
        traceio.write_prediction_grid_csv(out_dir / "prediction_grid.csv", grids)
        with open(out_dir / "prediction_grid.txt", "w", encoding="utf-8") as fh:
            fh.write(evaluation.render_prediction_table(grids))


def _run_sweep_cell(cfg_dict: dict, seed: int, particles: int, cell_dir: str) -> dict:
    """One isolated sweep cell: simulate, filter (mpf + ukf), evaluate."""
    cfg = cfgmod.from_dict(cfgmod.ExperimentConfig, cfg_dict)
    cfg.seed = seed
    cfg.filter.particles = particles
    cell = Path(cell_dir)
    cell.mkdir(parents=True, exist_ok=True)
    result = {"seed": seed, "particles": particles, "status": "ok", "error": ""}
    try:
        trace_path = cmd_simulate(cfg, cell)
        mpf_dir = cell / "mpf"
        ukf_dir = cell / "ukf"
        mpf_dir.mkdir(exist_ok=True)
        ukf_dir.mkdir(exist_ok=True)
        mpf_est = cmd_filter(cfg, trace_path, mpf_dir, method="mpf")
        ukf_est = cmd_filter(cfg, trace_path, ukf_dir, method="ukf")
        trace = traceio.read_trace_csv(trace_path)
        model = cfgmod.build_model(cfg)
        for name, path in (("mpf", mpf_est), ("ukf", ukf_est)):
            est = traceio.read_estimates_csv(path)
            m = evaluation.state_metrics(est["state_mean"], trace.states, model.n_q)
            result[f"{name}_position_rmse"] = m.position_rmse
            result[f"{name}_velocity_rmse"] = m.velocity_rmse
            result[f"{name}_nmse"] = m.nmse
    except (ValidationError, DegeneracyError, OSError) as exc:
        result["status"] = "failed"
        result["error"] = str(exc)
    return result


_METRIC_COLS = [
    "mpf_position_rmse",
    "mpf_velocity_rmse",
    "mpf_nmse",
    "ukf_position_rmse",
    "ukf_velocity_rmse",
    "ukf_nmse",
]


def cmd_sweep(cfg, out_dir: Path, workers: int = 1) -> None:
    """Run the configured seed/particle grid and aggregate metrics."""
    seeds = list(cfg.sweep.seeds)
    particle_counts = cfg.sweep.particle_counts or [cfg.filter.particles]
    cells = [(s, n) for n in particle_counts for s in seeds]
    cfg_dict = cfgmod.to_dict(cfg)
    cfgmod.save_config(cfg, out_dir / "config_used.yaml")

    jobs = [
        (cfg_dict, seed, n, str(out_dir / f"cell_seed{seed}_n{n}")) for seed, n in cells
    ]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sweep_cell_star, jobs))
    else:
        results = [_run_sweep_cell_star(job) for job in jobs]
    results.sort(key=lambda r: (r["particles"], r["seed"]))

    with open(out_dir / "sweep_results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "particles", "status"] + _METRIC_COLS + ["error"])
        for r in results:
            writer.writerow(
                [r["seed"], r["particles"], r["status"]]
                + [repr(float(r[c])) if c in r else "" for c in _METRIC_COLS]
                + [r["error"]]
            )

    with open(out_dir / "sweep_summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["particles", "n_ok", "n_failed"]
        for col in _METRIC_COLS:
            header += [f"{col}_mean", f"{col}_std"]
        writer.writerow(header)
        for n in sorted(set(p for _, p in cells)):
            group = [r for r in results if r["particles"] == n]
            ok = [r for r in group if r["status"] == "ok"]
            row = [n, len(ok), len(group) - len(ok)]
            for col in _METRIC_COLS:
                values = [r[col] for r in ok if col in r]
                row.append(repr(statistics.fmean(values)) if values else "")
                row.append(
                    repr(statistics.pstdev(values)) if len(values) > 1 else ""
                )
            writer.writerow(row)


def _run_sweep_cell_star(job):
    return _run_sweep_cell(*job)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graysid",
        description="Gray-box online system identification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trace=False):
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the root seed")
        if trace:
            p.add_argument("--trace", required=True, help="trace CSV file")

    p_sim = sub.add_parser("simulate", help="simulate the surrogate system")
    common(p_sim)

    p_filt = sub.add_parser("filter", help="run a filter over a trace")
    common(p_filt, trace=True)
    p_filt.add_argument("--method", choices=["mpf", "ukf"], default="mpf")
    p_filt.add_argument("--particles", type=int, help="override particle count")
    p_filt.add_argument(
        "--no-hyperlearn", action="store_true", help="disable hyperparameter learning"
    )
    p_filt.add_argument("--workers", type=int, default=1, help="reserved; filtering is single-threaded")

    p_eval = sub.add_parser("eval", help="evaluate run exports against a trace")
    common(p_eval, trace=True)
    p_eval.add_argument("--mpf-estimates", help="estimates.csv from a mpf run")
    p_eval.add_argument("--ukf-estimates", help="estimates.csv from a ukf run")
    p_eval.add_argument("--learned-model", help="learned_model.npz from a mpf run")

    p_sweep = sub.add_parser("sweep", help="run the configured seed/particle grid")
    common(p_sweep)
    p_sweep.add_argument("--particles", type=int, help="override base particle count")
    p_sweep.add_argument(
        "--no-hyperlearn", action="store_true", help="disable hyperparameter learning"
    )
    p_sweep.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
        cfg = _apply_overrides(cfg, args)
        out_dir = _resolve_out(cfg, args.out)
        if args.command == "simulate":
            path = cmd_simulate(cfg, out_dir)
            print(f"wrote {path}")
        elif args.command == "filter":
            path = cmd_filter(cfg, args.trace, out_dir, method=args.method)
            print(f"wrote {path}")
        elif args.command == "eval":
            cmd_eval(
                cfg,
                args.trace,
                out_dir,
                mpf_estimates=args.mpf_estimates,
                ukf_estimates=args.ukf_estimates,
                learned_model=args.learned_model,
            )
            print(f"wrote evaluation reports to {out_dir}")
        elif args.command == "sweep":
            cmd_sweep(cfg, out_dir, workers=args.workers)
            print(f"wrote sweep results to {out_dir}")
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except DegeneracyError as exc:
        print(f"numerical degeneracy: {exc} {exc.details}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
