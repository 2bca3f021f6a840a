"""Twin-experiment orchestration and artifact writing.

One experiment produces: a truth trajectory (the reference run), a
no-assimilation baseline started from the biased belief, and one filtered
run per exploration weight.  Error time series, drone path logs, field
snapshots, section-cut samples, and per-step diagnostics all land in the
output directory as delimited files stamped with the config hash and seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .enkf import (
    EnsembleInitConfig,
    FilterStepConfig,
    Observation,
    enkf_step,
    init_ensemble,
)
from .geometry import DronePose, Grid, load_domain, rasterize
from .transport import OperatorCache, StepInfo, gaussian_initial_condition, transition
from .windfield import WindParams, solve_steady_flow

log = logging.getLogger(__name__)

# fixed substream labels: adding or removing one consumer never shifts the
# draws seen by another
_STREAM = {"ensemble-init": 1, "process-noise": 2, "observation-noise": 3}


def substream(seed: int, purpose: str, run_tag: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM[purpose], run_tag]))


def theta_tag(theta) -> int:
    """Stable per-theta stream tag (schedules tag by their first value)."""
    first = theta if np.isscalar(theta) else list(theta)[0]
    return int(round(float(first) * 10**6)) + 1


def build_grid(cfg: ExperimentConfig) -> Grid:
    domain = load_domain(cfg.geojson_path().read_text())
    return rasterize(domain, cfg.domain.h)


def err_l2(c_true: np.ndarray, c_star: np.ndarray) -> float:
    """Relative l2 difference in percent; NaN when the truth norm vanishes."""
    denom = np.linalg.norm(c_true)
    if denom == 0.0:
        return math.nan
    return float(np.linalg.norm(c_true - c_star) / denom * 100.0)


def observe_truth(truth_next: np.ndarray, node_ids, sigma_ob: float,
                  rng: np.random.Generator) -> Observation:
    """Noisy readings of the post-step truth at the operator's nodes."""
    ids = np.asarray(node_ids, dtype=np.int64)
    eta = rng.normal(0.0, sigma_ob, size=len(ids)) if sigma_ob > 0 else np.zeros(len(ids))
    return Observation(ids, truth_next[ids] + eta, max(sigma_ob, 1e-300))


def simulate_plume(grid: Grid, params: WindParams, epsilon: float, c0: np.ndarray,
                   dt: float, steps: int, wind_cfg, rtol: float = 1e-8,
                   require_converged: bool = False) -> np.ndarray:
    """Deterministic model run: one flow solve, then repeated transport steps.

    Returns the (steps+1, M) concentration history including the initial
    state.  This is the shared forward path of the truth and the
    no-assimilation baseline (the filter pipeline with observation and
    analysis disabled).
    """
    fld = solve_steady_flow(grid, params, wind_cfg)
    if require_converged and not fld.converged:
        raise RuntimeError(
            f"flow solve for the reference run did not converge (residual {fld.residual:.3e})")
    cache = OperatorCache()
    out = np.empty((steps + 1, grid.M))
    out[0] = c0
    info = StepInfo()
    for k in range(steps):
        out[k + 1] = transition(grid, out[k], fld, epsilon, dt, cache=cache,
                                rtol=rtol, info=info)
    if info.fallbacks:
        log.warning("%d transport solves fell back to the direct path", info.fallbacks)
    return out


def run_truth(cfg: ExperimentConfig, grid: Grid) -> np.ndarray:
    """The reference trajectory with the true parameters (must be clean)."""
    c0 = gaussian_initial_condition(grid, cfg.release.center, cfg.release.sigma0)
    params = WindParams(cfg.truth.w_in, cfg.truth.w_dir)
    return simulate_plume(grid, params, cfg.truth.epsilon, c0, cfg.time.dt,
                          cfg.time.steps, cfg.wind_solver, rtol=cfg.run.krylov_rtol,
                          require_converged=True)


def run_baseline(cfg: ExperimentConfig, grid: Grid) -> np.ndarray:
    """Model run from the biased initial belief, no assimilation."""
    c0 = gaussian_initial_condition(grid, cfg.release.center, cfg.release.sigma0)
    params = WindParams(cfg.belief.w_in, cfg.belief.w_dir)
    return simulate_plume(grid, params, cfg.belief.epsilon, c0, cfg.time.dt,
                          cfg.time.steps, cfg.wind_solver, rtol=cfg.run.krylov_rtol)


@dataclass
class PathRow:
    t: float
    x: float
    y: float
    heading: float | None
    sector: int
    fallbacks: int
    held: bool
    observed_nodes: tuple


@dataclass
class FilterRun:
    theta: object
    errors: np.ndarray            # (steps+1,), percent vs truth
    mean_conc: np.ndarray         # (steps+1, M) ensemble mean history
    path: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    visited_nodes: set = field(default_factory=set)


def run_filtered(cfg: ExperimentConfig, grid: Grid, truth: np.ndarray, theta) -> FilterRun:
    """Full assimilation run for one exploration weight against a stored truth."""
    c0 = gaussian_initial_condition(grid, cfg.release.center, cfg.release.sigma0)
    tag = theta_tag(theta)
    init = EnsembleInitConfig(
        w_in_init=cfg.belief.w_in, sigma_in=cfg.ensemble.sigma_in,
        w_dir_init=cfg.belief.w_dir, sigma_dir=cfg.ensemble.sigma_dir,
        n_members=cfg.ensemble.n_members)
    state = init_ensemble(init, c0, rng=substream(cfg.run.seed, "ensemble-init", tag))
    noise_rng = substream(cfg.run.seed, "process-noise", tag)
    obs_rng = substream(cfg.run.seed, "observation-noise", tag)

    pose = DronePose(position=cfg.drone.start, speed=cfg.drone.speed, heading=0.0)
    step_cfg = FilterStepConfig(
        epsilon=cfg.belief.epsilon, dt=cfg.time.dt,
        tr_intensity=cfg.gating.tr_intensity, tr_direction=cfg.gating.tr_direction,
        epsilon_spurious=cfg.ensemble.epsilon_spurious,
        r_inverse_mode=cfg.observation.r_inverse_mode,
        krylov_rtol=cfg.run.krylov_rtol)
    policy = cfg.policy_config(theta)
    cache = OperatorCache(maxsize=4 * cfg.ensemble.n_members)
    member_wind_cfg = dataclasses.replace(
        cfg.wind_solver, max_iterations=cfg.ensemble.wind_max_iterations)

    steps = cfg.time.steps
    run = FilterRun(theta=theta, errors=np.empty(steps + 1),
                    mean_conc=np.empty((steps + 1, grid.M)))
    run.mean_conc[0] = state.conc.mean(axis=0)
    run.errors[0] = err_l2(truth[0], run.mean_conc[0])

    for k in range(steps):
        t_next = (k + 1) * cfg.time.dt

        def observe(node_ids, _k=k):
            return observe_truth(truth[_k + 1], node_ids, cfg.observation.sigma_ob, obs_rng)

        state, decision, record = enkf_step(
            state, pose, grid, observe, step_cfg, policy, noise_rng,
            wind_cfg=member_wind_cfg, cache=cache, step_index=k)
        pose = decision.pose

        run.mean_conc[k + 1] = state.conc.mean(axis=0)
        run.errors[k + 1] = err_l2(truth[k + 1], run.mean_conc[k + 1])
        run.visited_nodes.update(record.observed_nodes)
        run.path.append(PathRow(
            t=t_next, x=float(pose.position[0]), y=float(pose.position[1]),
            heading=decision.heading, sector=decision.sector,
            fallbacks=decision.fallbacks, held=decision.held,
            observed_nodes=record.observed_nodes))
        run.diagnostics.append({
            "step": k, "t": t_next, "theta": policy.theta_at(k),
            "mean_wind_speed": float(state.wind_speed.mean()),
            "std_wind_speed": float(state.wind_speed.std(ddof=1)),
            "circ_mean_wind_dir": _circ_mean(state.wind_dir),
            "flow_solves": record.flow_solves,
            "krylov_iterations": record.krylov_iterations,
            "direct_fallbacks": record.direct_fallbacks,
            "observed_nodes": list(record.observed_nodes),
            "innovation_norm": record.innovation_norm,
            "analysis_applied": record.analysis_applied,
        })
    return run


def _circ_mean(angles) -> float:
    return float(math.atan2(np.mean(np.sin(angles)), np.mean(np.cos(angles))) % (2 * math.pi))


def sample_polyline(field_values: np.ndarray, grid: Grid, polyline, n_stations: int):
    """Nearest-node samples at uniform arc-length stations along a polyline.

    Stations falling on solid cells (or outside the grid) are reported as NaN
    markers.  Returns a list of (arc length, value) pairs.
    """
    pts = np.asarray(polyline, dtype=float)
    if pts.ndim != 2 or len(pts) < 1:
        raise ValueError("polyline needs at least one vertex")
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1]) if len(seg) else np.array([])
    total = float(seg_len.sum())
    if total == 0.0 or n_stations <= 1:
        node = grid.node_at(pts[0])
        return [(0.0, float(field_values[node]) if node >= 0 else math.nan)]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    out = []
    for s in np.linspace(0.0, total, n_stations):
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(seg) - 1)
        frac = (s - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
        p = pts[i] + frac * seg[i]
        node = grid.node_at(p)
        out.append((float(s), float(field_values[node]) if node >= 0 else math.nan))
    return out


# ------------------------------------------------------------------ writers

def _stamp(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.run.seed}\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


def write_metrics_csv(path: Path, cfg: ExperimentConfig, times, columns: dict):
    with open(path, "w") as fh:
        fh.write(_stamp(cfg))
        fh.write("t," + ",".join(columns) + "\n")
        for i, t in enumerate(times):
            row = [_fmt(t)] + [_fmt(series[i]) for series in columns.values()]
            fh.write(",".join(row) + "\n")


def write_path_csv(path: Path, cfg: ExperimentConfig, rows):
    with open(path, "w") as fh:
        fh.write(_stamp(cfg))
        fh.write("t,x,y,heading,sector,fallbacks,held,observed_nodes\n")
        for r in rows:
            fh.write(",".join([
                _fmt(r.t), _fmt(r.x), _fmt(r.y),
                "" if r.heading is None else _fmt(r.heading),
                str(r.sector), str(r.fallbacks), str(int(r.held)),
                ";".join(str(n) for n in r.observed_nodes),
            ]) + "\n")


def write_snapshot_csv(path: Path, cfg: ExperimentConfig, grid: Grid, conc: np.ndarray):
    with open(path, "w") as fh:
        fh.write(_stamp(cfg))
        fh.write("cell_x_index,cell_y_index,concentration\n")
        for n in range(grid.M):
            ix, iy = grid.node_cells[n]
            fh.write(f"{ix},{iy},{_fmt(conc[n])}\n")


def write_gamma_csv(path: Path, cfg: ExperimentConfig, grid: Grid, history: np.ndarray):
    times = [t for t in cfg.gamma.times if t <= cfg.time.total + 1e-9]
    with open(path, "w") as fh:
        fh.write(_stamp(cfg))
        fh.write("t,s,value\n")
        for t in times:
            k = int(round(t / cfg.time.dt))
            samples = sample_polyline(history[k], grid, cfg.gamma.polyline,
                                      cfg.gamma.n_stations)
            for s, v in samples:
                fh.write(f"{_fmt(t)},{_fmt(s)},{_fmt(v)}\n")


def write_diagnostics_jsonl(path: Path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class RunArtifacts:
    out_dir: Path
    config_hash: str
    seed: int
    files: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def add(self, path: Path):
        self.files.append(str(path.name))

    def write_manifest(self):
        payload = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "files": sorted(self.files),
            "errors": self.errors,
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def _snapshot_steps(cfg: ExperimentConfig):
    for t in cfg.run.snapshot_times:
        k = int(round(t / cfg.time.dt))
        if 0 <= k <= cfg.time.steps:
            yield t, k


def run_experiment(cfg: ExperimentConfig, thetas=None, out_dir=None,
                   include_baseline: bool = True) -> RunArtifacts:
    """Truth, baseline, and one filtered run per theta; all artifacts written.

    A failing filtered run is recorded and skipped; everything already
    computed is still written.
    """
    thetas = list(cfg.run.theta) if thetas is None else list(thetas)
    out = Path(out_dir if out_dir is not None else cfg.base_dir / cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(out_dir=out, config_hash=cfg.hash(), seed=cfg.run.seed)

    grid = build_grid(cfg)
    times = np.arange(cfg.time.steps + 1) * cfg.time.dt

    truth = run_truth(cfg, grid)
    for t, k in _snapshot_steps(cfg):
        p = out / f"snapshot_t{t:g}_truth.csv"
        write_snapshot_csv(p, cfg, grid, truth[k])
        art.add(p)
    p = out / "gamma_truth.csv"
    write_gamma_csv(p, cfg, grid, truth)
    art.add(p)

    columns: dict = {}
    if include_baseline:
        baseline = run_baseline(cfg, grid)
        columns["err_baseline"] = [err_l2(truth[k], baseline[k])
                                   for k in range(cfg.time.steps + 1)]
        for t, k in _snapshot_steps(cfg):
            if k == 0:
                continue  # identical to the truth release
            p = out / f"snapshot_t{t:g}_baseline.csv"
            write_snapshot_csv(p, cfg, grid, baseline[k])
            art.add(p)
        p = out / "gamma_baseline.csv"
        write_gamma_csv(p, cfg, grid, baseline)
        art.add(p)

    filter_runs = []
    for theta in thetas:
        label = f"theta{theta:g}" if np.isscalar(theta) else "theta_schedule"
        try:
            run = run_filtered(cfg, grid, truth, theta)
        except Exception as exc:  # noqa: BLE001 - partial artifacts by contract
            log.exception("filtered run %s failed", label)
            art.errors.append({"run": label, "error": str(exc)})
            continue
        filter_runs.append((label, run))
        columns[f"err_filter_{label}"] = run.errors
        p = out / f"path_{label}.csv"
        write_path_csv(p, cfg, run.path)
        art.add(p)
        p = out / f"diagnostics_{label}.jsonl"
        write_diagnostics_jsonl(p, run.diagnostics)
        art.add(p)
        for t, k in _snapshot_steps(cfg):
            if k == 0:
                continue
            p = out / f"snapshot_t{t:g}_filter_{label}.csv"
            write_snapshot_csv(p, cfg, grid, run.mean_conc[k])
            art.add(p)
        p = out / f"gamma_filter_{label}.csv"
        write_gamma_csv(p, cfg, grid, run.mean_conc)
        art.add(p)

    if columns:
        p = out / "metrics.csv"
        write_metrics_csv(p, cfg, times, columns)
        art.add(p)

    echo = {"config": cfg.as_dict(), "config_hash": cfg.hash(), "seed": cfg.run.seed}
    p = out / "config_echo.json"
    with open(p, "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True, default=str)
    art.add(p)

    art.write_manifest()
    return art
