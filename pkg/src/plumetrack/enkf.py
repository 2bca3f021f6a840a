"""Ensemble transform Kalman filter over concentration and wind parameters.

The ensemble state couples, per trajectory, a concentration vector with the
boundary-wind intensity and direction driving its flow field.  One filter
step runs: routing decision -> multiplicative process noise on concentration
-> conditional flow re-solves -> transport forecast -> observation ->
square-root analysis in ensemble space.

The analysis diagonalizes  Y R^-1 Y^T + (N-1) I  (Y: observed anomalies),
builds the symmetric square-root transform  T = sqrt(N-1) V d^-1/2 V^T  and
the mean-shift weights  dy R^-1 Y^T V d^-1 V^T,  and applies both jointly to
the concatenated anomaly block [concentration | intensity | direction].
Directions use circular statistics: anomalies about the circular mean,
wrapped to [-pi, pi).  Posterior concentrations and intensities are clipped
at zero; posterior directions wrap mod 2 pi.  Neither inflation nor
localization is applied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .angles import wrap_to_2pi, wrap_to_pm_pi
from .geometry import Grid
from .transport import OperatorCache, StepInfo, transition
from .windfield import WindConfig, WindField, WindParams, needs_recompute, solve_steady_flow

log = logging.getLogger(__name__)


class AnalysisError(RuntimeError):
    """Raised when the analysis update cannot be applied (NaN contamination)."""


@dataclass
class EnsembleState:
    """Per-trajectory concentrations, wind parameters, and flow-field cache."""

    conc: np.ndarray          # (N, M), non-negative
    wind_speed: np.ndarray    # (N,), non-negative
    wind_dir: np.ndarray      # (N,), in [0, 2pi)
    last_solved: list         # WindParams the cached field was solved for
    wind_fields: list         # WindField | None, lazily solved

    def __post_init__(self):
        self.conc = np.asarray(self.conc, dtype=float)
        self.wind_speed = np.asarray(self.wind_speed, dtype=float)
        self.wind_dir = wrap_to_2pi(np.asarray(self.wind_dir, dtype=float))
        if self.conc.ndim != 2:
            raise ValueError("conc must be (N, M)")
        n = self.conc.shape[0]
        if not (len(self.wind_speed) == len(self.wind_dir)
                == len(self.last_solved) == len(self.wind_fields) == n):
            raise ValueError("inconsistent ensemble sizes")
        if np.any(self.wind_speed < 0):
            raise ValueError("wind speeds must be non-negative")

    @property
    def size(self) -> int:
        return self.conc.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.conc.shape[1]

    def params(self, i: int) -> WindParams:
        return WindParams(float(self.wind_speed[i]), float(self.wind_dir[i]))


@dataclass(frozen=True)
class Observation:
    """Point readings at grid nodes with i.i.d. Gaussian error (std sigma_ob)."""

    node_ids: np.ndarray
    values: np.ndarray
    sigma_ob: float

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "values", vals)
        if len(ids) != len(vals) or len(ids) == 0:
            raise ValueError("node_ids and values must be matching non-empty vectors")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("observed node ids must be distinct")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observed values must be finite")
        if self.sigma_ob <= 0:
            raise ValueError("sigma_ob must be positive")


@dataclass
class EnsembleInitConfig:
    w_in_init: float
    sigma_in: float
    w_dir_init: float
    sigma_dir: float
    n_members: int
    seed: int = 0

    def __post_init__(self):
        if self.sigma_in < 0 or self.sigma_dir < 0:
            raise ValueError("spread parameters must be non-negative")
        if self.n_members < 2:
            raise ValueError("need at least two trajectories")


def weibull_from_moments(mean: float, std: float):
    """Invert (mean, std) to the Weibull (shape k, scale lam).

    Solves mean = lam G(1+1/k), var = lam^2 [G(1+2/k) - G(1+1/k)^2] for k by
    bracketing the log coefficient-of-variation relation.
    """
    if mean <= 0:
        raise ValueError("Weibull mean must be positive")
    target = math.log1p((std / mean) ** 2)

    def f(k):
        return gammaln(1.0 + 2.0 / k) - 2.0 * gammaln(1.0 + 1.0 / k) - target

    lo, hi = 1e-3, 1e7
    if f(lo) < 0 or f(hi) > 0:
        raise ValueError(f"std/mean ratio {std / mean:.3g} is outside the Weibull-attainable range")
    k = brentq(f, lo, hi, xtol=1e-13, rtol=1e-15)
    lam = mean / math.exp(gammaln(1.0 + 1.0 / k))
    return k, lam


def init_ensemble(cfg: EnsembleInitConfig, c0: np.ndarray,
                  rng: np.random.Generator | None = None) -> EnsembleState:
    """Draw the initial ensemble about the prior wind belief.

    Intensities follow a Weibull law with the prescribed mean and standard
    deviation; directions follow a normal law wrapped mod 2 pi.  Zero spread
    degenerates to the exact prior values.  Every trajectory starts from the
    same release concentration; flow fields are solved lazily on first use.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    n = cfg.n_members
    if cfg.sigma_in == 0.0:
        speeds = np.full(n, float(cfg.w_in_init))
    else:
        k, lam = weibull_from_moments(cfg.w_in_init, cfg.sigma_in)
        speeds = lam * rng.weibull(k, size=n)
    if cfg.sigma_dir == 0.0:
        dirs = np.full(n, float(wrap_to_2pi(cfg.w_dir_init)))
    else:
        dirs = wrap_to_2pi(rng.normal(cfg.w_dir_init, cfg.sigma_dir, size=n))
    conc = np.tile(np.asarray(c0, dtype=float), (n, 1))
    last = [WindParams(float(s), float(d)) for s, d in zip(speeds, dirs)]
    return EnsembleState(conc=conc, wind_speed=speeds, wind_dir=dirs,
                         last_solved=last, wind_fields=[None] * n)


class CircularAnomalies(NamedTuple):
    anomalies: np.ndarray   # in [-pi, pi)
    mean_angle: float       # in [0, 2pi)
    degenerate: bool = False


def circular_anomalies(angles) -> CircularAnomalies:
    """Anomalies about the circular mean of a direction sample.

    mean_angle = atan2(mean sin, mean cos) mod 2pi; anomalies are the wrapped
    differences in [-pi, pi).  A near-zero resultant (directions spread
    uniformly) leaves the mean ill-conditioned: it is reported as 0 with the
    degenerate flag set.
    """
    a = np.asarray(angles, dtype=float)
    if a.size < 1:
        raise ValueError("need at least one angle")
    if np.all(a == a.flat[0]):
        # degenerate sample: the mean is the common angle, exactly
        return CircularAnomalies(np.zeros_like(a), float(wrap_to_2pi(a.flat[0])), False)
    mean_sin = np.mean(np.sin(a))
    mean_cos = np.mean(np.cos(a))
    if math.hypot(mean_sin, mean_cos) < 1e-12:
        mu = 0.0
        degenerate = True
    else:
        mu = float(wrap_to_2pi(math.atan2(mean_sin, mean_cos)))
        degenerate = False
    return CircularAnomalies(wrap_to_pm_pi(a - mu), mu, degenerate)


def add_process_noise(conc: np.ndarray, epsilon_spurious: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Multiplicative-scale Gaussian noise with a spurious-value cutoff.

    Each entry receives zero-mean noise with std equal to 10% of its own
    value; perturbed entries at or below epsilon_spurious are zeroed.
    """
    noise = rng.standard_normal(conc.shape) * (0.1 * np.abs(conc))
    out = conc + noise
    out[out <= epsilon_spurious] = 0.0
    return out


@dataclass
class ForecastStats:
    flow_solves: int = 0
    krylov_iterations: int = 0
    direct_fallbacks: int = 0
    degraded: list = field(default_factory=list)


def forecast(state: EnsembleState, grid: Grid, epsilon: float, dt: float,
             tr_intensity: float, tr_direction: float,
             wind_cfg: WindConfig | None = None,
             cache: OperatorCache | None = None,
             rtol: float = 1e-8) -> tuple[np.ndarray, ForecastStats]:
    """Advance every trajectory one transport step, re-solving flows as gated.

    A trajectory's flow is re-solved (warm-started from its cached field)
    when its parameters drifted past the thresholds, or when no field exists
    yet.  Wind parameters themselves are untouched: the belief about the wind
    only changes in the analysis.  Returns the forecast concentration matrix.
    """
    wind_cfg = wind_cfg or WindConfig()
    stats = ForecastStats()
    c_dag = np.empty_like(state.conc)
    for i in range(state.size):
        params = state.params(i)
        fld = state.wind_fields[i]
        if fld is None or needs_recompute(params, state.last_solved[i],
                                          tr_intensity, tr_direction):
            fld = solve_steady_flow(grid, params, wind_cfg, guess=fld)
            state.wind_fields[i] = fld
            state.last_solved[i] = params
            stats.flow_solves += 1
            if not fld.converged:
                stats.degraded.append(i)
        info = StepInfo()
        c_dag[i] = transition(grid, state.conc[i], fld, epsilon, dt,
                              cache=cache, rtol=rtol, info=info)
        stats.krylov_iterations += info.iterations
        stats.direct_fallbacks += info.fallbacks
    return c_dag, stats


@dataclass
class AnalysisResult:
    conc: np.ndarray
    wind_speed: np.ndarray
    wind_dir: np.ndarray
    raw: np.ndarray            # pre-clip, pre-wrap ensemble block (N, M+2)
    innovation: np.ndarray
    mean_angle: float
    degenerate_directions: bool


def _centered(values: np.ndarray):
    """Column means and anomalies, shifted by member 0 so that an ensemble of
    identical members yields exactly zero anomalies."""
    rel = values - values[0]
    rel_mean = rel.mean(axis=0)
    return values[0] + rel_mean, rel - rel_mean


def analysis(c_dagger: np.ndarray, wind_speed: np.ndarray, wind_dir: np.ndarray,
             obs: Observation, r_inverse_mode: str = "variance") -> AnalysisResult:
    """Square-root ensemble update from one set of point observations.

    r_inverse_mode selects the observation-error weighting: "variance" uses
    1/sigma_ob^2 (the statistically standard inverse covariance, the
    default); "std" uses 1/sigma_ob.
    """
    n, m = c_dagger.shape
    if n < 2:
        raise ValueError("analysis needs at least two trajectories")
    if np.any(obs.node_ids >= m):
        raise ValueError("observed node id out of range")
    if r_inverse_mode == "variance":
        r_inv = 1.0 / obs.sigma_ob**2
    elif r_inverse_mode == "std":
        r_inv = 1.0 / obs.sigma_ob
    else:
        raise ValueError(f"unknown r_inverse_mode {r_inverse_mode!r}")

    mean_c, anom_c = _centered(c_dagger)
    mean_speed, anom_speed = _centered(wind_speed[:, None])
    mean_speed, anom_speed = float(mean_speed[0]), anom_speed[:, 0]
    circ = circular_anomalies(wind_dir)

    mean_obs, y_anom = _centered(c_dagger[:, obs.node_ids])   # (p,), (N, p)
    innovation = obs.values - mean_obs

    gram = y_anom * r_inv @ y_anom.T + (n - 1) * np.eye(n)
    if not np.all(np.isfinite(gram)):
        raise AnalysisError("non-finite values entered the analysis")
    d, v = np.linalg.eigh(gram)
    transform = math.sqrt(n - 1) * (v * (1.0 / np.sqrt(d))) @ v.T
    projector = (v * (1.0 / d)) @ v.T
    shift_weights = (innovation * r_inv) @ (y_anom.T @ projector)   # (N,)

    block = np.column_stack([anom_c, anom_speed, circ.anomalies])   # (N, M+2)
    means = np.concatenate([mean_c, [mean_speed, circ.mean_angle]])
    raw = means + shift_weights @ block + transform @ block

    return AnalysisResult(
        conc=np.maximum(0.0, raw[:, :m]),
        wind_speed=np.maximum(0.0, raw[:, m]),
        wind_dir=wrap_to_2pi(raw[:, m + 1]),
        raw=raw,
        innovation=innovation,
        mean_angle=circ.mean_angle,
        degenerate_directions=circ.degenerate,
    )


@dataclass
class FilterStepConfig:
    epsilon: float
    dt: float
    tr_intensity: float
    tr_direction: float
    epsilon_spurious: float = 1e-6
    r_inverse_mode: str = "variance"
    krylov_rtol: float = 1e-8


@dataclass
class FilterStepRecord:
    flow_solves: int = 0
    krylov_iterations: int = 0
    direct_fallbacks: int = 0
    observed_nodes: tuple = ()
    innovation_norm: float = 0.0
    analysis_applied: bool = True
    degenerate_directions: bool = False


def enkf_step(state: EnsembleState, pose, grid: Grid,
              observe: Callable[[np.ndarray], Observation],
              cfg: FilterStepConfig, policy_cfg,
              noise_rng: np.random.Generator,
              wind_cfg: WindConfig | None = None,
              cache: OperatorCache | None = None,
              step_index: int = 0):
    """One complete filter step: S_t -> S_{t+1}.

    Order: the routing decision fixes the observation operator from the
    current (pre-noise) belief and moves the drone; concentrations receive
    process noise; flow fields are re-solved where gated; the transport
    forecast advances every trajectory; the external truth/sensor source is
    read at the operator's nodes; the analysis update and constraint
    projection produce the posterior.  A failed analysis keeps the forecast.

    Returns (posterior state, routing decision, step record).
    """
    from .routing import policy_step

    decision = policy_step(state.conc, pose, grid, policy_cfg, step_index=step_index)
    record = FilterStepRecord(observed_nodes=tuple(int(i) for i in decision.operator.node_ids))

    state.conc = add_process_noise(state.conc, cfg.epsilon_spurious, noise_rng)
    c_dag, stats = forecast(state, grid, cfg.epsilon, cfg.dt,
                            cfg.tr_intensity, cfg.tr_direction,
                            wind_cfg=wind_cfg, cache=cache, rtol=cfg.krylov_rtol)
    record.flow_solves = stats.flow_solves
    record.krylov_iterations = stats.krylov_iterations
    record.direct_fallbacks = stats.direct_fallbacks

    obs = observe(decision.operator.node_ids)

    try:
        result = analysis(c_dag, state.wind_speed, state.wind_dir, obs,
                          r_inverse_mode=cfg.r_inverse_mode)
        new_state = EnsembleState(
            conc=result.conc, wind_speed=result.wind_speed, wind_dir=result.wind_dir,
            last_solved=list(state.last_solved), wind_fields=list(state.wind_fields),
        )
        record.innovation_norm = float(np.linalg.norm(result.innovation))
        record.degenerate_directions = result.degenerate_directions
    except AnalysisError as exc:
        log.warning("analysis failed (%s); keeping forecast state", exc)
        new_state = EnsembleState(
            conc=np.maximum(0.0, c_dag), wind_speed=state.wind_speed,
            wind_dir=state.wind_dir, last_solved=list(state.last_solved),
            wind_fields=list(state.wind_fields),
        )
        record.analysis_applied = False
    return new_state, decision, record
