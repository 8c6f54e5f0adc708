"""Iterative machinery: block descent with continuation, plus IHT baselines.

The relaxed objective is biconvex, so each sweep solves the signal block
with FISTA (accelerated proximal gradient) and the auxiliary block in
closed form (capped-simplex projection in constrained mode, clipped soft
threshold in penalized mode).  An outer loop grows the coupling weight
geometrically until it clears the exactness threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .operators import LinearOp
from .reformulation import (
    FEAS_COEFF,
    ZERO_TOL,
    Constrained,
    Penalized,
    PrimalDualPair,
    ProblemInstance,
    RhoSchedule,
    coupling_gap,
    g_value,
    indicator_value,
    l0_norm,
    rho_threshold,
    tighten_u,
)


@dataclass(frozen=True)
class SolveConfig:
    """Tolerances, iteration caps and weights shared by all solvers."""

    pam_c: float = 1.0
    pam_b: float = 1.0
    fista_tol: float = 1e-10
    fista_fp_tol: float = 1e-8
    fista_max_iter: int = 5000
    pam_tol: float = 1e-8
    pam_max_iter: int = 500
    iht_max_iter: int = 2000
    rho0: float | None = None  # None: 1e-3 * rho_threshold
    rho_growth: float = 2.0
    rho_safety: float = 1.01
    zero_tol: float = ZERO_TOL
    feas_coeff: float = FEAS_COEFF
    spectral_tol: float = 1e-12
    spectral_max_iter: int = 10_000

    def __post_init__(self):
        if not (math.isfinite(self.pam_c) and self.pam_c > 0):
            raise ValueError("pam_c must be finite and > 0")
        if not (math.isfinite(self.pam_b) and self.pam_b > 0):
            raise ValueError("pam_b must be finite and > 0")
        for name in ("fista_tol", "fista_fp_tol", "pam_tol", "zero_tol", "feas_coeff", "spectral_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("fista_max_iter", "pam_max_iter", "iht_max_iter", "spectral_max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rho0 is not None and self.rho0 <= 0:
            raise ValueError("rho0 must be > 0 when given")
        if self.rho_growth <= 1:
            raise ValueError("rho_growth must be > 1")
        if self.rho_safety < 1:
            raise ValueError("rho_safety must be >= 1")


@dataclass(frozen=True)
class FistaResult:
    x: np.ndarray
    ax: np.ndarray  # operator applied to x, cached for objective reuse
    objective: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class PamResult:
    pair: PrimalDualPair
    iterations: int
    converged: bool
    #: relaxed objective at the initial pair and after every sweep
    objectives: tuple[float, ...]
    fista_converged: bool


@dataclass(frozen=True)
class OuterRecord:
    rho: float
    pam_iterations: int
    objective: float
    gap: float
    nnz: int
    pam_converged: bool
    fista_converged: bool


@dataclass(frozen=True)
class SolveTrace:
    """Per-stage observability of the continuation loop."""

    records: tuple[OuterRecord, ...]
    threshold: float  # exactness threshold sigma(A) * ||d||
    rho_max: float  # weight of the final solve (threshold * safety)
    converged: bool

    CSV_HEADER = "rho,pam_iterations,objective,gap,nnz,pam_converged,fista_converged"

    def csv_rows(self):
        for r in self.records:
            yield (
                f"{r.rho!r},{r.pam_iterations},{r.objective!r},{r.gap!r},"
                f"{r.nnz},{int(r.pam_converged)},{int(r.fista_converged)}"
            )

    def write_csv(self, path):
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(f"# threshold={self.threshold!r} rho_max={self.rho_max!r} converged={int(self.converged)}\n")
            fh.write(self.CSV_HEADER + "\n")
            for row in self.csv_rows():
                fh.write(row + "\n")


@dataclass(frozen=True)
class Solution:
    pair: PrimalDualPair
    objective: float
    trace: SolveTrace


@dataclass(frozen=True)
class IhtResult:
    x: np.ndarray
    iterations: int
    converged: bool


def prox_l1_nonneg(v: np.ndarray, t: float) -> np.ndarray:
    """Proximal map of t*||.||_1 restricted to the nonnegative orthant.

    Elementwise max(v_i - t, 0): negative inputs land on the constraint
    boundary at 0 rather than being shifted up.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    return np.maximum(np.asarray(v, dtype=float) - t, 0.0)


def _fista_l1_nonneg(
    op: LinearOp,
    d: np.ndarray,
    weight: float,
    anchor: np.ndarray | None,
    inv_c: float,
    x0: np.ndarray,
    lip: float,
    rel_tol: float,
    fp_tol: float,
    max_iter: int,
) -> FistaResult:
    """Minimize 0.5||Ax-d||^2 + (inv_c/2)||x-anchor||^2 + weight*||x||_1 over x >= 0.

    Accelerated proximal gradient with momentum restart on objective
    increase; the best iterate seen is returned, so the result never beats
    the warm start in the wrong direction.  Stops when the relative
    objective change drops below ``rel_tol`` (measured over a short window
    so momentum plateaus do not end the run early) or the fixed-point
    residual ||y - prox(y - grad(y)/L)|| drops below ``fp_tol``.
    """
    lip = max(lip, np.finfo(float).tiny)
    step = weight / lip
    window = 5

    def total(x, ax):
        r = ax - d
        val = 0.5 * float(np.dot(r, r))
        if inv_c > 0.0:
            dx = x - anchor
            val += 0.5 * inv_c * float(np.dot(dx, dx))
        return val + weight * float(np.sum(np.abs(x)))

    x = np.asarray(x0, dtype=float).copy()
    ax = op.apply(x)
    obj = total(x, ax)
    best_x, best_ax, best_obj = x, ax, obj
    y, ay = x, ax
    t_mom = 1.0
    converged = False
    iterations = 0
    history = [obj]

    for iterations in range(1, max_iter + 1):
        grad = op.adjoint(ay - d)
        if inv_c > 0.0:
            grad += inv_c * (y - anchor)
        x_new = prox_l1_nonneg(y - grad / lip, step)
        ax_new = op.apply(x_new)
        obj_new = total(x_new, ax_new)
        fp_residual = float(np.linalg.norm(y - x_new))

        if obj_new < best_obj:
            best_x, best_ax, best_obj = x_new, ax_new, obj_new
        if obj_new > obj:
            t_mom = 1.0  # restart momentum after an overshoot

        history.append(obj_new)
        small_change = (
            len(history) > window
            and abs(history[-1] - history[-1 - window]) <= rel_tol * (1.0 + abs(history[-1]))
        )
        x_prev, ax_prev = x, ax
        x, ax, obj = x_new, ax_new, obj_new
        if small_change or fp_residual <= fp_tol:
            converged = True
            break

        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        y = x + beta * (x - x_prev)
        ay = ax + beta * (ax - ax_prev)  # linearity spares one operator apply
        t_mom = t_next

    return FistaResult(best_x, best_ax, best_obj, iterations, converged)


def fista_x_update(
    inst: ProblemInstance,
    u_s: np.ndarray,
    x_s: np.ndarray,
    rho: float,
    cfg: SolveConfig,
) -> FistaResult:
    """Signal-block step: proximally anchored sparse least squares.

    Solves argmin_x 0.5||Ax-d||^2 + (1/2c)||x - (x_s + rho*c*u_s)||^2
    + rho*||x||_1 over x >= 0 with Lipschitz constant sigma(A)^2 + 1/c.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    u_s = np.asarray(u_s, dtype=float).ravel()
    x_s = np.asarray(x_s, dtype=float).ravel()
    sigma = inst.op.spectral_norm(cfg.spectral_tol, cfg.spectral_max_iter).sigma
    inv_c = 1.0 / cfg.pam_c
    anchor = x_s + rho * cfg.pam_c * u_s
    return _fista_l1_nonneg(
        inst.op,
        inst.d,
        weight=rho,
        anchor=anchor,
        inv_c=inv_c,
        x0=x_s,
        lip=sigma * sigma + inv_c,
        rel_tol=cfg.fista_tol,
        fp_tol=cfg.fista_fp_tol,
        max_iter=cfg.fista_max_iter,
    )


def l1_nonneg_solve(op: LinearOp, d: np.ndarray, weight: float, cfg: SolveConfig | None = None) -> FistaResult:
    """Plain nonnegative l1-weighted least squares, started from zero."""
    cfg = cfg or SolveConfig()
    d = np.asarray(d, dtype=float).ravel()
    sigma = op.spectral_norm(cfg.spectral_tol, cfg.spectral_max_iter).sigma
    return _fista_l1_nonneg(
        op,
        d,
        weight=weight,
        anchor=None,
        inv_c=0.0,
        x0=np.zeros(op.shape[1]),
        lip=sigma * sigma,
        rel_tol=cfg.fista_tol,
        fp_tol=cfg.fista_fp_tol,
        max_iter=cfg.fista_max_iter,
    )


def project_capped_simplex(w: np.ndarray, k: float) -> np.ndarray:
    """Euclidean projection onto {u : 0 <= u_i <= 1, sum(u) <= k}.

    If clipping to the unit box already lands inside the budget that clip
    is the projection; otherwise the budget is active and the shift tau in
    u = clip(w - tau, 0, 1) is found by bisection on the monotone map
    tau -> sum(clip(w - tau, 0, 1)).
    """
    w = np.asarray(w, dtype=float).ravel()
    if k < 0:
        raise ValueError("k must be >= 0")
    if w.size and float(w.min()) < 0:
        raise ValueError("w must be nonnegative")
    clipped = np.clip(w, 0.0, 1.0)
    if float(clipped.sum()) <= k:
        return clipped
    lo, hi = 0.0, float(w.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(np.clip(w - mid, 0.0, 1.0).sum()) > k:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    # the upper end keeps sum(u) <= k
    return np.clip(w - hi, 0.0, 1.0)


def u_update_constrained(z: np.ndarray, k: float) -> np.ndarray:
    """Auxiliary-block step under the sparsity budget: signed projection."""
    z = np.asarray(z, dtype=float).ravel()
    return np.sign(z) * project_capped_simplex(np.abs(z), k)


def u_update_penalized(z: np.ndarray, lam: float, b: float) -> np.ndarray:
    """Auxiliary-block step under the per-entry cost: clipped soft threshold."""
    if lam <= 0 or b <= 0:
        raise ValueError("lam and b must be > 0")
    z = np.asarray(z, dtype=float).ravel()
    t = lam * b
    return np.clip(np.sign(z) * np.maximum(np.abs(z) - t, 0.0), -1.0, 1.0)


def _u_step(inst: ProblemInstance, z: np.ndarray, cfg: SolveConfig) -> np.ndarray:
    if isinstance(inst.mode, Constrained):
        return u_update_constrained(z, inst.mode.k)
    return u_update_penalized(z, inst.mode.lam, cfg.pam_b)


def _g_rho_from_parts(inst, pair, ax, rho):
    r = ax - inst.d
    return 0.5 * float(np.dot(r, r)) + indicator_value(inst.mode, pair.u) + rho * coupling_gap(pair)


def pam_solve(
    inst: ProblemInstance,
    rho: float,
    init: PrimalDualPair,
    cfg: SolveConfig | None = None,
) -> PamResult:
    """Alternate the two block updates at a fixed coupling weight.

    Each sweep runs the FISTA signal step, then the closed-form auxiliary
    step on z = u + rho*b*x.  Terminates when neither block moved more
    than ``pam_tol`` in sup norm; the relaxed objective decreases at every
    sweep because both steps are proximally damped.
    """
    cfg = cfg or SolveConfig()
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if not init.is_valid(cfg.zero_tol):
        raise ValueError("init violates x >= 0 or -1 <= u <= 1")
    x, u = init.x, init.u

    objectives = [_g_rho_from_parts(inst, init, inst.op.apply(x), rho)]
    converged = False
    fista_ok = True
    iterations = 0
    for iterations in range(1, cfg.pam_max_iter + 1):
        fres = fista_x_update(inst, u, x, rho, cfg)
        fista_ok = fista_ok and fres.converged
        x_new = fres.x
        z = u + rho * cfg.pam_b * x_new
        u_new = _u_step(inst, z, cfg)

        dx = float(np.max(np.abs(x_new - x), initial=0.0))
        du = float(np.max(np.abs(u_new - u), initial=0.0))
        pair = PrimalDualPair(x_new, u_new)
        objectives.append(_g_rho_from_parts(inst, pair, fres.ax, rho))
        x, u = x_new, u_new
        if max(dx, du) <= cfg.pam_tol:
            converged = True
            break

    return PamResult(PrimalDualPair(x, u), iterations, converged, tuple(objectives), fista_ok)


def biconvex_minimize(inst: ProblemInstance, cfg: SolveConfig | None = None) -> Solution:
    """Continuation over the coupling weight, from (0, 0), warm started.

    The weight grows geometrically from rho0 and the final solve runs at
    rho_safety times the exactness threshold sigma(A)*||d||; gap-free
    minimizers are only guaranteed strictly above the threshold, so the
    safety factor stays > 1 by default.  In penalized mode the final pair
    is tightened so the coupling gap closes exactly.
    """
    cfg = cfg or SolveConfig()
    threshold = rho_threshold(inst, cfg.spectral_tol, cfg.spectral_max_iter)
    rho_max = cfg.rho_safety * threshold
    if rho_max > 0:
        rho0 = cfg.rho0 if cfg.rho0 is not None else 1e-3 * threshold
        schedule = RhoSchedule(min(rho0, rho_max), rho_max, cfg.rho_growth)
    else:
        schedule = RhoSchedule(0.0, 0.0, cfg.rho_growth)

    pair = PrimalDualPair.zeros(inst.n)
    records = []
    all_converged = True
    for rho in schedule.values():
        res = pam_solve(inst, rho, pair, cfg)
        pair = res.pair
        all_converged = all_converged and res.converged and res.fista_converged
        records.append(
            OuterRecord(
                rho=rho,
                pam_iterations=res.iterations,
                objective=res.objectives[-1],
                gap=coupling_gap(pair),
                nnz=l0_norm(pair.x, cfg.zero_tol),
                pam_converged=res.converged,
                fista_converged=res.fista_converged,
            )
        )

    if isinstance(inst.mode, Penalized):
        pair = tighten_u(pair, inst.mode.lam, max(rho_max, np.finfo(float).tiny), cfg.zero_tol)

    trace = SolveTrace(tuple(records), threshold, rho_max, all_converged)
    objective = g_value(inst, pair, cfg.zero_tol, cfg.feas_coeff)
    return Solution(pair, objective, trace)


def _keep_k_largest(v: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the k largest entries; ties go to the lowest index."""
    if k <= 0:
        return np.zeros_like(v)
    if k >= v.size:
        return v.copy()
    order = np.argsort(-v, kind="stable")
    out = np.zeros_like(v)
    keep = order[:k]
    out[keep] = v[keep]
    return out


def iht_constrained(inst: ProblemInstance, k: int, cfg: SolveConfig | None = None) -> IhtResult:
    """Projected gradient baseline keeping the k largest nonnegative entries."""
    cfg = cfg or SolveConfig()
    if k > inst.n:
        raise ValueError("k exceeds the number of unknowns")
    sigma = inst.op.spectral_norm(cfg.spectral_tol, cfg.spectral_max_iter).sigma
    lip = max(sigma * sigma, np.finfo(float).tiny)
    x = np.zeros(inst.n)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.iht_max_iter + 1):
        grad = inst.op.adjoint(inst.op.apply(x) - inst.d)
        v = np.maximum(x - grad / lip, 0.0)
        x_new = _keep_k_largest(v, k)
        delta = float(np.max(np.abs(x_new - x), initial=0.0))
        x = x_new
        if delta <= cfg.pam_tol:
            converged = True
            break
    return IhtResult(x, iterations, converged)


def iht_penalized(inst: ProblemInstance, lam: float, cfg: SolveConfig | None = None) -> IhtResult:
    """Gradient baseline hard-thresholding at sqrt(2*lam/L) after each step."""
    cfg = cfg or SolveConfig()
    if lam <= 0:
        raise ValueError("lam must be > 0")
    sigma = inst.op.spectral_norm(cfg.spectral_tol, cfg.spectral_max_iter).sigma
    lip = max(sigma * sigma, np.finfo(float).tiny)
    cut = math.sqrt(2.0 * lam / lip)
    x = np.zeros(inst.n)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.iht_max_iter + 1):
        grad = inst.op.adjoint(inst.op.apply(x) - inst.d)
        v = np.maximum(x - grad / lip, 0.0)
        x_new = np.where(v > cut, v, 0.0)
        delta = float(np.max(np.abs(x_new - x), initial=0.0))
        x = x_new
        if delta <= cfg.pam_tol:
            converged = True
            break
    return IhtResult(x, iterations, converged)
