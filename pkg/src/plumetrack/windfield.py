"""Steady incompressible flow for a prescribed boundary wind.

Discretization: MAC staggered grid on the obstacle-masked cells.
  u[j, i]  x-velocity at vertical faces   (ny, nx+1)
  v[j, i]  y-velocity at horizontal faces (ny+1, nx)
  p[j, i]  kinematic pressure at centers  (ny, nx)

A pseudo-time projection iteration (upwind advection, central diffusion,
exact pressure projection via a prefactorized Poisson solve) is marched to
steady state.  On the MAC grid the discrete divergence and pressure-gradient
operators are adjoint, so every iterate is divergence-free to solver
precision and faces touching solid cells carry exactly zero velocity.

Outer-boundary split: edges where the prescribed wind has a positive inward
component get the Dirichlet value, the rest are treated as zero-traction
outflow (zero-gradient velocity, zero face pressure).  ``all_dirichlet``
forces the prescribed value on the whole outer rectangle instead.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .angles import wrap_to_2pi, wrap_to_pm_pi
from .geometry import Grid

log = logging.getLogger(__name__)

_field_serial = itertools.count()

EDGES = ("W", "E", "S", "N")


@dataclass(frozen=True)
class WindParams:
    """Boundary wind: intensity (m/s, >= 0) and direction (rad, [0, 2pi))."""

    intensity: float
    direction: float

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("wind intensity must be non-negative")
        object.__setattr__(self, "direction", float(wrap_to_2pi(self.direction)))

    def components(self):
        return self.intensity * math.cos(self.direction), self.intensity * math.sin(self.direction)


@dataclass
class WindConfig:
    nu: float = 1.0                # eddy-viscosity surrogate, m^2/s
    div_tol: float = 1e-6          # per-cell divergence bound, times intensity
    momentum_tol: float = 1e-3     # steady-state residual bound, times w^2/L
    max_iterations: int = 5000
    relaxation: float = 0.7        # pseudo-time CFL safety factor
    all_dirichlet: bool = False

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")


@dataclass
class WindField:
    """Converged velocity/pressure fields plus the parameters they solve."""

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    params: WindParams
    converged: bool
    residual: float
    div_max: float
    iterations: int
    grid_serial: int
    serial: int = field(default_factory=lambda: next(_field_serial))

    def cell_velocity(self, grid: Grid):
        """Cell-centered velocity vectors at the fluid nodes, shape (M, 2)."""
        ix = grid.node_cells[:, 0]
        iy = grid.node_cells[:, 1]
        uc = 0.5 * (self.u[iy, ix] + self.u[iy, ix + 1])
        vc = 0.5 * (self.v[iy, ix] + self.v[iy + 1, ix])
        return np.column_stack([uc, vc])

    def write_csv(self, grid: Grid, path):
        """Snapshot export: cell_x_index, cell_y_index, u, v, p."""
        vel = self.cell_velocity(grid)
        with open(path, "w") as fh:
            fh.write("cell_x_index,cell_y_index,u,v,p\n")
            for n in range(grid.M):
                ix, iy = grid.node_cells[n]
                fh.write(f"{ix},{iy},{vel[n, 0]!r},{vel[n, 1]!r},{self.p[iy, ix]!r}\n")


def uniform_wind_field(grid: Grid, wx: float, wy: float) -> WindField:
    """Analytic uniform field for obstacle-free grids (testing/verification)."""
    if not np.all(grid.mask):
        raise ValueError("uniform wind field requires an obstacle-free grid")
    u = np.full((grid.ny, grid.nx + 1), float(wx))
    v = np.full((grid.ny + 1, grid.nx), float(wy))
    p = np.zeros((grid.ny, grid.nx))
    params = WindParams(math.hypot(wx, wy), math.atan2(wy, wx))
    return WindField(u=u, v=v, p=p, params=params, converged=True, residual=0.0,
                     div_max=0.0, iterations=0, grid_serial=grid.serial)


def needs_recompute(current: WindParams, last_solved: WindParams,
                    tr_intensity: float, tr_direction: float) -> bool:
    """Gate for re-solving the flow when the boundary wind drifts.

    True when the intensity change exceeds tr_intensity * |current intensity|
    OR the wrapped direction change exceeds tr_direction * |current direction|.
    Identical parameters never trigger, even at zero thresholds.
    """
    di = abs(current.intensity - last_solved.intensity)
    dd = abs(float(wrap_to_pm_pi(current.direction - last_solved.direction)))
    if di == 0.0 and dd == 0.0:
        return False
    return (di >= tr_intensity * abs(current.intensity)
            or dd >= tr_direction * abs(current.direction))


# ------------------------------------------------------------------ masks

def face_masks(grid: Grid):
    """Active-face masks: a face may carry nonzero velocity only when every
    adjacent cell is fluid."""
    fl = grid.mask
    u_act = np.zeros((grid.ny, grid.nx + 1), dtype=bool)
    u_act[:, 0] = fl[:, 0]
    u_act[:, -1] = fl[:, -1]
    u_act[:, 1:-1] = fl[:, :-1] & fl[:, 1:]
    v_act = np.zeros((grid.ny + 1, grid.nx), dtype=bool)
    v_act[0, :] = fl[0, :]
    v_act[-1, :] = fl[-1, :]
    v_act[1:-1, :] = fl[:-1, :] & fl[1:, :]
    return u_act, v_act


def dirichlet_edges(params: WindParams, cfg: WindConfig):
    """Outer edges carrying the prescribed wind (inward-pointing component).

    The tolerance absorbs trig roundoff for axis-aligned directions, where
    e.g. cos(pi/2) is a harmless 1e-16 rather than zero.
    """
    if cfg.all_dirichlet:
        return frozenset(EDGES)
    wx, wy = params.components()
    tol = 1e-12 * params.intensity
    edges = set()
    if wx > tol:
        edges.add("W")
    if wx < -tol:
        edges.add("E")
    if wy > tol:
        edges.add("S")
    if wy < -tol:
        edges.add("N")
    return frozenset(edges)


# ------------------------------------------------------ pressure Poisson

_poisson_cache: dict = {}
_poisson_lock = threading.Lock()


def _poisson_factor(grid: Grid, dirichlet: frozenset):
    """LU-factorized Poisson operator on fluid cells for a given edge split.

    Open interior faces give the usual 5-point links, outflow boundary faces
    pin the face pressure to zero (ghost elimination), everything else is
    Neumann.  A pure-Neumann system (no outflow faces) gets its gauge fixed
    at node 0.
    """
    key = (grid.serial, dirichlet)
    with _poisson_lock:
        hit = _poisson_cache.get(key)
    if hit is not None:
        return hit

    fl = grid.mask
    idx = grid.node_index
    h2 = grid.h * grid.h
    rows, cols, vals = [], [], []
    diag = np.zeros(grid.M)
    outflow = [e for e in EDGES if e not in dirichlet]

    iys, ixs = np.nonzero(fl)
    for iy, ix in zip(iys, ixs):
        k = idx[iy, ix]
        for dx, dy, edge in ((-1, 0, "W"), (1, 0, "E"), (0, -1, "S"), (0, 1, "N")):
            jx, jy = ix + dx, iy + dy
            if 0 <= jx < grid.nx and 0 <= jy < grid.ny:
                if fl[jy, jx]:
                    rows.append(k)
                    cols.append(idx[jy, jx])
                    vals.append(1.0 / h2)
                    diag[k] -= 1.0 / h2
                # solid neighbor: Neumann, no entry
            elif edge in outflow:
                diag[k] -= 2.0 / h2  # p = 0 at the boundary face
            # Dirichlet-velocity edge: Neumann, no entry

    pure_neumann = not outflow
    if pure_neumann:
        # remove node 0's links and pin it to fix the gauge
        keep = [i for i, r in enumerate(rows) if r != 0]
        rows = [rows[i] for i in keep]
        cols = [cols[i] for i in keep]
        vals = [vals[i] for i in keep]
        diag[0] = 1.0

    rows += list(range(grid.M))
    cols += list(range(grid.M))
    vals += list(diag)
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(grid.M, grid.M))
    entry = (splu(A), pure_neumann)
    with _poisson_lock:
        _poisson_cache[key] = entry
    return entry


# ------------------------------------------------------------ the solver

def solve_steady_flow(grid: Grid, params: WindParams, cfg: WindConfig | None = None,
                      guess: WindField | None = None) -> WindField:
    """March the projection iteration to the steady flow for one boundary wind.

    A supplied guess seeds the iteration (warm start); otherwise the
    prescribed uniform wind does.  Returns a field whose per-cell divergence
    is at solver precision; non-convergence within max_iterations is reported
    on the returned field rather than raised.
    """
    cfg = cfg or WindConfig()
    if guess is not None and guess.grid_serial != grid.serial:
        raise ValueError("warm-start field was solved on a different grid")

    ny, nx, h = grid.ny, grid.nx, grid.h
    wx, wy = params.components()
    u_act, v_act = face_masks(grid)

    if params.intensity == 0.0:
        return WindField(u=np.zeros((ny, nx + 1)), v=np.zeros((ny + 1, nx)),
                         p=np.zeros((ny, nx)), params=params, converged=True,
                         residual=0.0, div_max=0.0, iterations=0,
                         grid_serial=grid.serial)

    edges = dirichlet_edges(params, cfg)
    lu, pure_neumann = _poisson_factor(grid, edges)

    if guess is not None:
        u = guess.u.copy()
        v = guess.v.copy()
    else:
        u = np.full((ny, nx + 1), wx)
        v = np.full((ny + 1, nx), wy)
    u[~u_act] = 0.0
    v[~v_act] = 0.0
    p = np.zeros((ny, nx))

    fl = grid.mask
    idx = grid.node_index
    nu = cfg.nu
    # advective residual scale; the floor keeps near-calm winds from
    # demanding sub-roundoff residuals
    scale = max(params.intensity, 0.01) ** 2 / max(nx * h, ny * h)
    tol = cfg.momentum_tol * scale

    def apply_bcs(u, v):
        u[:, 0] = wx if "W" in edges else u[:, 1]
        u[:, -1] = wx if "E" in edges else u[:, -2]
        v[0, :] = wy if "S" in edges else v[1, :]
        v[-1, :] = wy if "N" in edges else v[-2, :]
        u[~u_act] = 0.0
        v[~v_act] = 0.0

    apply_bcs(u, v)

    residual = math.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        vmax = max(np.abs(u).max(), np.abs(v).max(), params.intensity)
        dt = cfg.relaxation / (4.0 * nu / (h * h) + 2.0 * vmax / h)

        u_old = u.copy()
        v_old = v.copy()

        # ghosts for tangential components along the outer boundary
        ue = np.empty((ny + 2, nx + 1))
        ue[1:-1] = u
        ue[0] = (2.0 * wx - u[0]) if "S" in edges else u[0]
        ue[-1] = (2.0 * wx - u[-1]) if "N" in edges else u[-1]
        ve = np.empty((ny + 1, nx + 2))
        ve[:, 1:-1] = v
        ve[:, 0] = (2.0 * wy - v[:, 0]) if "W" in edges else v[:, 0]
        ve[:, -1] = (2.0 * wy - v[:, -1]) if "E" in edges else v[:, -1]

        # u-momentum on interior vertical faces
        uc = u[:, 1:-1]
        uw, ue_ = u[:, :-2], u[:, 2:]
        us, un = ue[:-2, 1:-1], ue[2:, 1:-1]
        vbar = 0.25 * (v[:-1, :-1] + v[:-1, 1:] + v[1:, :-1] + v[1:, 1:])
        adv = (np.where(uc > 0, uc * (uc - uw), uc * (ue_ - uc))
               + np.where(vbar > 0, vbar * (uc - us), vbar * (un - uc))) / h
        dif = nu * (uw + ue_ + un + us - 4.0 * uc) / (h * h)
        u[:, 1:-1] = uc + dt * (dif - adv)

        # v-momentum on interior horizontal faces
        vc = v_old[1:-1, :]
        vs, vn = v_old[:-2, :], v_old[2:, :]
        vw, ve_ = ve[1:-1, :-2], ve[1:-1, 2:]
        ubar = 0.25 * (u_old[:-1, :-1] + u_old[:-1, 1:] + u_old[1:, :-1] + u_old[1:, 1:])
        adv = (np.where(ubar > 0, ubar * (vc - vw), ubar * (ve_ - vc))
               + np.where(vc > 0, vc * (vc - vs), vc * (vn - vc))) / h
        dif = nu * (vw + ve_ + vn + vs - 4.0 * vc) / (h * h)
        v[1:-1, :] = vc + dt * (dif - adv)

        apply_bcs(u, v)

        # projection
        div = (u[:, 1:] - u[:, :-1] + v[1:, :] - v[:-1, :]) / h
        rhs = div[fl] / dt
        if pure_neumann:
            rhs = rhs - rhs.mean()
            rhs[0] = 0.0
        phi_nodes = lu.solve(rhs)
        phi = np.zeros((ny, nx))
        phi[fl] = phi_nodes

        gpx = (phi[:, 1:] - phi[:, :-1]) / h
        interior_u = u_act[:, 1:-1] & fl[:, :-1] & fl[:, 1:]
        u[:, 1:-1][interior_u] -= dt * gpx[interior_u]
        gpy = (phi[1:, :] - phi[:-1, :]) / h
        interior_v = v_act[1:-1, :] & fl[:-1, :] & fl[1:, :]
        v[1:-1, :][interior_v] -= dt * gpy[interior_v]

        if "W" not in edges:
            sel = u_act[:, 0]
            u[sel, 0] -= dt * 2.0 * phi[sel, 0] / h
        if "E" not in edges:
            sel = u_act[:, -1]
            u[sel, -1] += dt * 2.0 * phi[sel, -1] / h
        if "S" not in edges:
            sel = v_act[0, :]
            v[0, sel] -= dt * 2.0 * phi[0, sel] / h
        if "N" not in edges:
            sel = v_act[-1, :]
            v[-1, sel] += dt * 2.0 * phi[-1, sel] / h

        p = phi

        residual = max(np.abs(u - u_old).max(), np.abs(v - v_old).max()) / dt
        if residual <= tol:
            break

    converged = residual <= tol
    if not converged:
        log.info("flow solve did not converge: residual %.3e > %.3e after %d iterations",
                 residual, tol, it)

    div = (u[:, 1:] - u[:, :-1] + v[1:, :] - v[:-1, :]) / h
    div_max = float(np.abs(div[fl]).max())
    if div_max > cfg.div_tol * params.intensity:
        log.warning("divergence %.3e exceeds %.3e", div_max, cfg.div_tol * params.intensity)

    return WindField(u=u, v=v, p=p, params=params, converged=converged,
                     residual=float(residual), div_max=div_max, iterations=it,
                     grid_serial=grid.serial)
