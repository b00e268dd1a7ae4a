"""Grids, value-field storage, boundary slices and the theta-scheme step.

The state domain is truncated to [-x_radius, x_radius]; at the two
truncation rows the second derivative is closed by linear extrapolation
(v_xx = 0) and the first derivative by the one available one-sided
difference, so truncation errors stay confined near the edges.  The
reporting box is the inner 75% of the radius.

The control axis carries nc nodes c_lower + dc, ..., c_upper: the open
lower endpoint of (c_lower, c_upper] is excluded by one spacing, which
is harmless because the value function does not depend on the lower
bound.

Grid construction is single-threaded.  Distinct c-slices of a
ValueField may be written by distinct workers during PDE sweeps as long
as a full barrier precedes any cross-slice read (the ratchet
projection); the reference implementation runs the sweep sequentially,
which satisfies that contract trivially.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import (
    CFLViolationError,
    ConfigError,
    InvalidModelError,
    LinearSolveError,
    ParameterError,
)
from .model import Model, ProblemSpec

REPORTING_FRACTION = 0.75


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over [0,T] x [-R,R] x (c_lower, c_upper]."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    c_nodes: np.ndarray
    dt: float
    h: float
    dc: float
    x_radius: float

    @property
    def nt(self) -> int:
        return len(self.t_nodes) - 1

    @property
    def nx(self) -> int:
        return len(self.x_nodes) - 1

    @property
    def nc(self) -> int:
        return len(self.c_nodes)

    @property
    def shape(self):
        return (len(self.t_nodes), len(self.x_nodes), len(self.c_nodes))

    @property
    def reporting_radius(self) -> float:
        return REPORTING_FRACTION * self.x_radius

    def reporting_x_mask(self) -> np.ndarray:
        return np.abs(self.x_nodes) <= self.reporting_radius + 1e-12


class Stage(enum.Enum):
    RAW = "RAW"
    PROJECTED = "PROJECTED"


@dataclass
class ValueField:
    """Gridded value tensor indexed [i_t, j_x, k_c]."""

    values: np.ndarray
    grid: Grid
    stage: Stage = Stage.RAW
    meta: dict = field(default_factory=dict)

    def monotonicity_defect_in_c(self) -> float:
        """Largest violation of nondecreasing-in-c; <= 0 means monotone."""
        diffs = self.values[:, :, :-1] - self.values[:, :, 1:]
        return float(np.max(diffs)) if diffs.size else 0.0


def make_grid(
    spec: ProblemSpec, nt: int, nx: int, nc: int, x_radius: float
) -> Grid:
    """Build the uniform grid; endpoint nodes are assigned exactly.

    nt and nx count intervals (nt+1 and nx+1 nodes); nc counts c nodes,
    spanning [c_lower + dc, c_upper] with dc = (c_upper - c_lower) / nc.
    """
    if min(nt, nx, nc) < 3:
        raise ParameterError(f"nt, nx, nc must all be >= 3, got {(nt, nx, nc)}")
    if not np.isfinite(x_radius) or x_radius <= 0:
        raise ParameterError(f"x_radius must be positive and finite, got {x_radius}")
    T = spec.horizon_T
    dc = (spec.c_upper - spec.c_lower) / nc
    grid = Grid(
        t_nodes=np.linspace(0.0, T, nt + 1),
        x_nodes=np.linspace(-x_radius, x_radius, nx + 1),
        c_nodes=np.linspace(spec.c_lower + dc, spec.c_upper, nc),
        dt=T / nt,
        h=2.0 * x_radius / nx,
        dc=dc,
        x_radius=float(x_radius),
    )
    assert grid.t_nodes[-1] == T and grid.c_nodes[-1] == spec.c_upper
    return grid


def suggest_x_radius(reporting_radius: float, growth_K: float, horizon_T: float) -> float:
    """Truncation radius covering the reporting box plus a diffusion-reach margin."""
    return reporting_radius + growth_K * (1.0 + reporting_radius) * np.sqrt(horizon_T)


def allocate_field(grid: Grid) -> ValueField:
    return ValueField(np.zeros(grid.shape), grid, Stage.RAW)


def fill_terminal(fld: ValueField, model: Model) -> ValueField:
    """Set the t = T slice to H(x) for every control level.  Idempotent."""
    _, coeffs = model
    H = np.asarray(coeffs.terminal_cost(fld.grid.x_nodes[:, None]), dtype=float)
    fld.values[-1, :, :] = H[:, None]
    return fld


def _slice_coefficients(model: Model, grid: Grid, t: float, c: float):
    """sigma^2, b, f on the x line at time t, control level c."""
    _, coeffs = model
    xN = grid.x_nodes[:, None]
    n = len(grid.x_nodes)
    sig = np.broadcast_to(coeffs.diffusion(t, xN, c), (n, 1, 1))[:, 0, 0]
    b = np.broadcast_to(coeffs.drift(t, xN, c), (n, 1))[:, 0]
    f = np.broadcast_to(coeffs.running_cost(t, xN, c), (n,))
    vals = np.vstack([sig, b, f])
    if not np.all(np.isfinite(vals)):
        raise InvalidModelError(f"non-finite coefficient evaluation at t={t}, c={c}")
    return sig.astype(float) ** 2, b.astype(float), f.astype(float)


def _operator_bands(s2: np.ndarray, b: np.ndarray, h: float):
    """Tridiagonal bands of L[u] = 0.5 s2 u_xx + b u_x (upwinded).

    Interior rows use the monotone stencil; the two truncation rows drop
    the diffusion term (linear extrapolation) and keep the one-sided
    drift difference.
    """
    n = len(s2)
    sub = np.zeros(n)
    diag = np.zeros(n)
    sup = np.zeros(n)
    d2 = s2 / (2.0 * h * h)
    bp = np.maximum(b, 0.0) / h
    bm = np.maximum(-b, 0.0) / h
    sub[1:-1] = d2[1:-1] + bm[1:-1]
    sup[1:-1] = d2[1:-1] + bp[1:-1]
    diag[1:-1] = -(sub[1:-1] + sup[1:-1])
    # Truncation rows: v_xx = 0, one-sided first difference.
    sup[0] = b[0] / h
    diag[0] = -b[0] / h
    sub[-1] = -b[-1] / h
    diag[-1] = b[-1] / h
    return sub, diag, sup


def _apply_tridiag(sub, diag, sup, u):
    out = diag * u
    out[:-1] += sup[:-1] * u[1:]
    out[1:] += sub[1:] * u[:-1]
    return out


def cfl_bound(model: Model, grid: Grid) -> float:
    """Largest explicit-stable dt: h^2 / (max sigma^2 + h max|b|)."""
    _, coeffs = model
    t = grid.t_nodes[:, None, None]
    x = grid.x_nodes[None, :, None, None]
    c = grid.c_nodes[None, None, :]
    shape = (len(grid.t_nodes), len(grid.x_nodes), len(grid.c_nodes))
    sig = np.broadcast_to(coeffs.diffusion(t, x, c), shape + (1, 1))[..., 0, 0]
    b = np.broadcast_to(coeffs.drift(t, x, c), shape + (1,))[..., 0]
    s2max = float(np.max(sig**2))
    bmax = float(np.max(np.abs(b)))
    denom = s2max + grid.h * bmax
    return np.inf if denom == 0 else grid.h**2 / denom


def check_cfl(model: Model, grid: Grid, theta: float) -> None:
    """Monotonicity bound on the explicit part; no-op for theta = 1."""
    if theta >= 1.0:
        return
    bound = cfl_bound(model, grid)
    if (1.0 - theta) * grid.dt > bound * (1 + 1e-12):
        raise CFLViolationError(
            f"explicit part unstable: (1-theta) dt = {(1 - theta) * grid.dt:.3e} "
            f"exceeds CFL bound {bound:.3e}; increase nt or use theta = 1"
        )


def theta_parabolic_step(
    w: np.ndarray,
    t_target: float,
    c: float,
    model: Model,
    grid: Grid,
    theta: float = 1.0,
    linear_tol: float = 1e-8,
) -> np.ndarray:
    """One backward step of v_t + 0.5 sigma^2 v_xx + b v_x + f = 0.

    ``w`` holds the x line at t_target + dt; the return value is the
    line at t_target.  Coefficients are evaluated at t_target (the
    left endpoint of the step interval, matching the right-continuity
    convention for controls and the oracle's left-endpoint quadrature).
    The implicit part is a direct banded solve; linear_tol is verified
    against the solve residual.
    """
    dt = grid.dt
    s2, b, f = _slice_coefficients(model, grid, t_target, c)
    if theta < 1.0:
        denom = float(np.max(s2)) + grid.h * float(np.max(np.abs(b)))
        if denom > 0 and (1.0 - theta) * dt > grid.h**2 / denom * (1 + 1e-12):
            raise CFLViolationError(
                f"explicit part unstable at t={t_target:.6g}, c={c:.6g}: "
                f"(1-theta) dt = {(1 - theta) * dt:.3e} exceeds "
                f"{grid.h**2 / denom:.3e}"
            )
    sub, diag, sup = _operator_bands(s2, b, grid.h)

    rhs = w + dt * f
    if theta < 1.0:
        rhs = rhs + dt * (1.0 - theta) * _apply_tridiag(sub, diag, sup, w)
    if theta == 0.0:
        return rhs

    n = len(w)
    ab = np.zeros((3, n))
    ab[0, 1:] = -dt * theta * sup[:-1]
    ab[1, :] = 1.0 - dt * theta * diag
    ab[2, :-1] = -dt * theta * sub[1:]
    u = solve_banded((1, 1), ab, rhs)

    resid = ab[1] * u
    resid[:-1] += ab[0, 1:] * u[1:]
    resid[1:] += ab[2, :-1] * u[:-1]
    err = float(np.max(np.abs(resid - rhs))) / (1.0 + float(np.max(np.abs(rhs))))
    if not np.isfinite(err) or err > linear_tol:
        raise LinearSolveError(
            f"tridiagonal solve residual {err:.3e} exceeds linear_tol {linear_tol:.3e}"
        )
    return u


def solve_boundary_G(model: Model, grid: Grid, theta: float = 1.0) -> np.ndarray:
    """Backward-integrate the c = c_upper boundary slice G(t, x).

    At the top control level the only admissible control is the constant
    c_upper, so the slice solves the linear parabolic equation
    v_t + 0.5 sigma^2 v_xx + b v_x + f = 0 with v(T, .) = H and the
    control argument frozen at c_upper.  Returns a (nt+1, nx+1) matrix.
    """
    spec, coeffs = model
    check_cfl(model, grid, theta)
    G = np.empty((len(grid.t_nodes), len(grid.x_nodes)))
    G[-1] = np.asarray(coeffs.terminal_cost(grid.x_nodes[:, None]), dtype=float)
    c_bar = spec.c_upper
    for i in range(grid.nt - 1, -1, -1):
        G[i] = theta_parabolic_step(
            G[i + 1], grid.t_nodes[i], c_bar, model, grid, theta
        )
    return G


VALUE_CSV_HEADER = ["t", "x", "c", "v"]


def write_value_csv(fld: ValueField, path) -> None:
    """CSV serialization, row-major by t then x then c; header mandatory."""
    g = fld.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VALUE_CSV_HEADER)
        for i, t in enumerate(g.t_nodes):
            for j, x in enumerate(g.x_nodes):
                for k, c in enumerate(g.c_nodes):
                    writer.writerow(
                        [
                            f"{t:.17g}",
                            f"{x:.17g}",
                            f"{c:.17g}",
                            f"{fld.values[i, j, k]:.17g}",
                        ]
                    )


def read_value_csv(path) -> ValueField:
    """Reconstruct a ValueField (and its grid) from the CSV layout."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != VALUE_CSV_HEADER:
            raise ConfigError(f"bad value CSV header {header!r} in {path}")
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        raise ConfigError(f"empty value CSV {path}")
    t = np.unique(rows[:, 0])
    x = np.unique(rows[:, 1])
    c = np.unique(rows[:, 2])
    if len(t) * len(x) * len(c) != len(rows):
        raise ConfigError(f"value CSV {path} is not a full tensor grid")
    values = rows[:, 3].reshape(len(t), len(x), len(c))
    grid = Grid(
        t_nodes=t,
        x_nodes=x,
        c_nodes=c,
        dt=float(t[1] - t[0]),
        h=float(x[1] - x[0]),
        dc=float(c[1] - c[0]),
        x_radius=float(x[-1]),
    )
    return ValueField(values, grid, Stage.PROJECTED)
