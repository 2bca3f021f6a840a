"""Sector-based exploration/exploitation routing for the drone.

Each decision step partitions the fluid nodes into Q circular sectors about
the drone, scores every sector by ensemble spread plus a weighted mean
concentration, and steers along the mid-angle of the best sector.  A blocked
heading falls back clockwise in sector-angle increments until a free one is
found.  The nodes at the move's endpoints become the observation operator:
at nominal speed and step length they number one or two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .angles import TWO_PI
from .geometry import DronePose, Grid, is_heading_free

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObservationOperator:
    """The set of node ids read during one step, as a 0/1 selection."""

    node_ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64)
        object.__setattr__(self, "node_ids", ids)
        if len(ids) == 0:
            raise ValueError("observation operator selects no nodes")


@dataclass
class PolicyConfig:
    sectors: int = 8                  # Q
    theta: float | list = 0.2         # constant or per-step schedule
    speed: float = 10.0               # m/s
    dt: float = 1.0                   # s

    def __post_init__(self):
        if self.sectors < 2:
            raise ValueError("need at least two sectors")
        if np.any(np.asarray(self.theta, dtype=float) < 0):
            raise ValueError("theta must be non-negative")

    def theta_at(self, step_index: int) -> float:
        if np.isscalar(self.theta):
            return float(self.theta)
        sched = list(self.theta)
        return float(sched[min(step_index, len(sched) - 1)])


@dataclass(frozen=True)
class SectorPartition:
    """Node -> sector assignment (1..Q; 0 marks the drone's own node)."""

    assignment: np.ndarray
    counts: np.ndarray
    sectors: int


def partition(grid: Grid, pose: DronePose, sectors: int) -> SectorPartition:
    """Assign each fluid node to the circular sector containing its bearing.

    Sector q covers bearings [(q-1) 2pi/Q, q 2pi/Q).  The node containing
    the drone itself has no bearing and is left out.
    """
    rel = grid.node_xy - np.asarray(pose.position, dtype=float)
    bearing = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), TWO_PI)
    assign = np.minimum(np.floor(bearing * sectors / TWO_PI).astype(np.int64), sectors - 1) + 1
    own = grid.node_at(pose.position)
    if own >= 0:
        assign[own] = 0
    counts = np.bincount(assign, minlength=sectors + 1)
    return SectorPartition(assignment=assign, counts=counts, sectors=sectors)


def sector_scores(conc: np.ndarray, part: SectorPartition, theta: float) -> np.ndarray:
    """Per-sector balance of ensemble spread and mean concentration.

    score(q) = (1/M_q) [ sqrt(tr(Aq Aq^T)/(N-1)) + theta * sum of node means ]
    with Aq the sector-restricted anomaly matrix (concentrations only).
    Empty sectors score -inf and are never selected.
    """
    n = conc.shape[0]
    scores = np.full(part.sectors + 1, -np.inf)
    for q in range(1, part.sectors + 1):
        cols = part.assignment == q
        m_q = int(part.counts[q])
        if m_q == 0:
            continue
        sub = conc[:, cols]
        means = sub.mean(axis=0)
        anom = sub - means
        spread = math.sqrt(float(np.sum(anom * anom)) / (n - 1))
        scores[q] = (spread + theta * float(means.sum())) / m_q
    return scores


def sector_mid_angle(q: int, sectors: int) -> float:
    return q * TWO_PI / sectors - math.pi / sectors


def select_heading(scores: np.ndarray, pose: DronePose, grid: Grid, sectors: int,
                   step_distance: float):
    """Mid-angle of the best-scoring sector, with clockwise obstacle fallback.

    Ties break to the smallest sector index.  Blocked candidates rotate by
    -2pi/Q up to Q-1 times; with every heading blocked the drone holds
    position (heading None).
    Returns (heading | None, chosen sector, fallback count).
    """
    q_star = int(np.argmax(scores[1:]) + 1)
    base = sector_mid_angle(q_star, sectors)
    for k in range(sectors):
        heading = float(np.mod(base - k * TWO_PI / sectors, TWO_PI))
        if is_heading_free(grid, pose, heading, step_distance):
            return heading, q_star, k
    log.warning("all %d sector headings blocked; drone holds position", sectors)
    return None, q_star, sectors


def advance(pose: DronePose, heading: float | None, speed: float, dt: float,
            grid: Grid) -> tuple[DronePose, ObservationOperator]:
    """Move along a free heading and read the nodes at the move's endpoints.

    heading None (fully enclosed drone) holds position and re-reads the
    current node.
    """
    if heading is None:
        return pose, ObservationOperator(np.array([grid.node_at(pose.position)]))
    new_position = pose.position + speed * dt * np.array([math.cos(heading), math.sin(heading)])
    new_pose = DronePose(position=new_position, speed=pose.speed, heading=heading)
    start = grid.node_at(pose.position)
    end = grid.node_at(new_position)
    ids = [start] if end == start else [start, end]
    return new_pose, ObservationOperator(np.array(ids))


@dataclass(frozen=True)
class PolicyDecision:
    heading: float | None
    sector: int
    fallbacks: int
    pose: DronePose
    operator: ObservationOperator
    held: bool


def policy_step(conc: np.ndarray, pose: DronePose, grid: Grid, cfg: PolicyConfig,
                step_index: int = 0) -> PolicyDecision:
    """Full routing decision: partition, score, select a free heading, move."""
    part = partition(grid, pose, cfg.sectors)
    scores = sector_scores(conc, part, cfg.theta_at(step_index))
    step_distance = cfg.speed * cfg.dt
    heading, q_star, fallbacks = select_heading(scores, pose, grid, cfg.sectors, step_distance)
    new_pose, operator = advance(pose, heading, cfg.speed, cfg.dt, grid)
    return PolicyDecision(heading=heading, sector=q_star, fallbacks=fallbacks,
                          pose=new_pose, operator=operator, held=heading is None)
