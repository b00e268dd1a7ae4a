"""Backward solver for the ratcheting variational inequality.

The equation couples a parabolic operator in (t, x) with a gradient
constraint in the control level c:

    max{ -v_t + G(t, x, c, -v_x, -v_xx), -v_c } = 0,
    v(T, x, c) = H(x),        v(t, x, c_upper) = G_bar(t, x),

with Hamiltonian G(t, x, u, p, P) = 0.5 P sigma(t,x,u)^2 + b(t,x,u) p
- f(t,x,u) (written for N = m = 1).  Substituting p = -v_x, P = -v_xx
into the continuation branch and multiplying by -1 gives the forward
form actually stepped by the scheme:

    v_t + 0.5 sigma^2 v_xx + b v_x + f = 0,

so the two sign conventions describe the same equation.

Each backward step applies the monotone theta-scheme to every frozen
c-slice and then enforces the constraint by the ratchet projection
v(., ., c) <- min over c' >= c of v(., ., c'), i.e. diffuse over
[t, t+dt], then exercise the instantaneous costless option to raise the
control level.  Splitting the other way differs at O(dt) and converges
to the same limit.

Concurrency contract: pde_step calls for distinct c-slices within one
time level are independent; the projection requires all slices of that
level (barrier).  The reference implementation runs the sweep
sequentially, each (level, slice) has a single writer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

from .discretization import (
    Grid,
    Stage,
    ValueField,
    allocate_field,
    check_cfl,
    fill_terminal,
    solve_boundary_G,
    theta_parabolic_step,
)
from .errors import ParameterError
from .model import Model


@dataclass(frozen=True)
class HamiltonianInput:
    """Arguments of the Hamiltonian at one point: state plus derivative surrogates."""

    t: float
    x: float
    c: float
    p: float
    P: float


@dataclass(frozen=True)
class SchemeConfig:
    """Scheme knobs: theta in [0,1] (0 explicit, 1 implicit), jump tolerance.

    jump_tol scales relatively (threshold jump_tol * (1 + |v|)) so the
    region classifier separates a genuinely active constraint from
    rounding.  The tridiagonal system is solved directly; linear_tol is
    the accepted residual and max_linear_iters the retry allowance.
    """

    theta: float = 1.0
    jump_tol: float = 1e-9
    max_linear_iters: int = 1
    linear_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ParameterError(f"theta must lie in [0, 1], got {self.theta}")
        if self.jump_tol <= 0:
            raise ParameterError("jump_tol must be > 0")
        if self.linear_tol <= 0:
            raise ParameterError("linear_tol must be > 0")


class Region(enum.IntEnum):
    CONTINUE = 0
    JUMP = 1


@dataclass
class PolicyField:
    """Active set of the gradient constraint plus jump destinations.

    region[i, j, k] is JUMP where the projection strictly lowered the
    raw value; jump_target holds the destination c-index there (> k)
    and -1 elsewhere.  The top control level can never jump.
    """

    region: np.ndarray
    jump_target: np.ndarray
    grid: Grid


def hamiltonian_values(t, x, c, p, P, model: Model) -> np.ndarray:
    """Vectorized Hamiltonian 0.5 P sigma^2 + b p - f (N = m = 1)."""
    _, coeffs = model
    xN = np.asarray(x, dtype=float)[..., None]
    sig = np.asarray(coeffs.diffusion(t, xN, c), dtype=float)[..., 0, 0]
    b = np.asarray(coeffs.drift(t, xN, c), dtype=float)[..., 0]
    f = np.asarray(coeffs.running_cost(t, xN, c), dtype=float)
    vals = 0.5 * np.asarray(P) * sig**2 + b * np.asarray(p) - f
    if not np.all(np.isfinite(vals)):
        raise ParameterError("non-finite Hamiltonian evaluation")
    return vals


def hamiltonian_G(inp: HamiltonianInput, model: Model) -> float:
    return float(hamiltonian_values(inp.t, inp.x, inp.c, inp.p, inp.P, model))


def pde_step(
    field_slice: np.ndarray,
    i: int,
    k_c: int,
    cfg: SchemeConfig,
    model: Model,
    grid: Grid,
) -> np.ndarray:
    """One theta-scheme step of a frozen c-slice from t_{i+1} down to t_i.

    ``field_slice`` must be the finalized (projected) slice at t_{i+1}.
    Upwinded first derivative, central second derivative, linear
    extrapolation at the truncation rows; the returned slice is RAW
    (not yet projected).
    """
    if not 0 <= i < grid.nt:
        raise ParameterError(f"time index {i} outside [0, {grid.nt})")
    if not 0 <= k_c < grid.nc:
        raise ParameterError(f"control index {k_c} outside [0, {grid.nc})")
    return theta_parabolic_step(
        np.asarray(field_slice, dtype=float),
        grid.t_nodes[i],
        grid.c_nodes[k_c],
        model,
        grid,
        cfg.theta,
        cfg.linear_tol,
    )


def ratchet_project(raw: np.ndarray) -> np.ndarray:
    """Suffix minimum along the last (control) axis.

    Discrete form of v(t,x,c) <- min over c' >= c of v(t,x,c'): a
    descending sweep keeps v(., c) <= v(., c') for c <= c'.  Idempotent,
    non-expansive in sup-norm, and never increases any entry.
    """
    raw = np.asarray(raw, dtype=float)
    return np.minimum.accumulate(raw[..., ::-1], axis=-1)[..., ::-1]


def _project_with_policy(raw: np.ndarray, jump_tol: float):
    """Projection plus JUMP classification and suffix-argmin targets."""
    nc = raw.shape[-1]
    projected = np.empty_like(raw)
    target = np.full(raw.shape, -1, dtype=np.int32)
    best_val = raw[..., -1].copy()
    best_idx = np.full(raw.shape[:-1], nc - 1, dtype=np.int32)
    projected[..., -1] = best_val
    for k in range(nc - 2, -1, -1):
        take = raw[..., k] <= best_val
        best_val = np.where(take, raw[..., k], best_val)
        best_idx = np.where(take, np.int32(k), best_idx)
        projected[..., k] = best_val
        target[..., k] = best_idx
    drop = raw - projected
    region = (drop > jump_tol * (1.0 + np.abs(raw))).astype(np.int8)
    target[region == 0] = -1
    return projected, region, target


def solve_backward(model: Model, grid: Grid, cfg: SchemeConfig = None):
    """Backward sweep: theta-step every c-slice, then ratchet-project.

    This is the discrete dynamic programming principle: diffuse over
    [t_i, t_{i+1}], then take the pointwise best over reachable higher
    control levels.  The c_upper boundary slice is pinned to the
    solve_boundary_G output (assigned, never recomputed) and the
    terminal slice to H.  Returns (ValueField, PolicyField); the field
    is PROJECTED at every time level and carries solver diagnostics in
    ``meta``.
    """
    cfg = cfg or SchemeConfig()
    check_cfl(model, grid, cfg.theta)

    fld = allocate_field(grid)
    fill_terminal(fld, model)
    G = solve_boundary_G(model, grid, cfg.theta)
    fld.values[:, :, -1] = G

    region = np.zeros(grid.shape, dtype=np.int8)
    target = np.full(grid.shape, -1, dtype=np.int32)

    nt, nc = grid.nt, grid.nc
    raw = np.empty((len(grid.x_nodes), nc))
    for i in range(nt - 1, -1, -1):
        for k in range(nc):
            raw[:, k] = pde_step(fld.values[i + 1, :, k], i, k, cfg, model, grid)
        raw[:, -1] = G[i]
        projected, region_i, target_i = _project_with_policy(raw, cfg.jump_tol)
        fld.values[i] = projected
        region[i] = region_i
        target[i] = target_i

    fld.stage = Stage.PROJECTED
    fld.meta = {
        "theta": cfg.theta,
        "steps": nt,
        "slices_per_step": nc,
        "monotonicity_defect": fld.monotonicity_defect_in_c(),
        "jump_fraction": float(np.mean(region[:nt, :, : nc - 1])) if nt else 0.0,
    }
    return fld, PolicyField(region, target, grid)


class FeedbackRule:
    """Nearest-node lookup of a PolicyField: (t, x, c) -> c' >= c.

    Queries outside the grid box are clamped to it; ``n_clamped`` counts
    how many components were clamped across all calls.
    """

    def __init__(self, policy: PolicyField):
        self.policy = policy
        self.grid = policy.grid
        self.n_clamped = 0

    def _nearest(self, nodes: np.ndarray, q: np.ndarray):
        lo, hi = nodes[0], nodes[-1]
        clamped = (q < lo - 1e-12) | (q > hi + 1e-12)
        step = nodes[1] - nodes[0]
        idx = np.clip(np.rint((q - lo) / step).astype(int), 0, len(nodes) - 1)
        return idx, clamped

    def query(self, t, x, c):
        """Returns (c_next, clamped_mask); scalars in give scalars out."""
        g = self.grid
        t, x, c = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(x, dtype=float), np.asarray(c, dtype=float)
        )
        it, cl_t = self._nearest(g.t_nodes, t)
        jx, cl_x = self._nearest(g.x_nodes, x)
        kc, cl_c = self._nearest(g.c_nodes, c)
        clamped = cl_t | cl_x | cl_c
        self.n_clamped += int(np.sum(clamped))

        region = self.policy.region[it, jx, kc]
        tgt = self.policy.jump_target[it, jx, kc]
        c_next = np.where(region == Region.JUMP, g.c_nodes[np.maximum(tgt, 0)], c)
        c_next = np.maximum(c_next, c)
        if c_next.ndim == 0:
            return float(c_next), bool(clamped)
        return c_next, clamped

    def __call__(self, t, x, c) -> Union[float, np.ndarray]:
        return self.query(t, x, c)[0]


def extract_feedback(policy: PolicyField, grid: Grid = None) -> FeedbackRule:
    """Feedback rule backed by nearest-node lookup of the policy tensors."""
    if grid is not None and grid is not policy.grid:
        raise ParameterError("grid does not match the policy's grid")
    return FeedbackRule(policy)
