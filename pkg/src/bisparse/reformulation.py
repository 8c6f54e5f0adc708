"""Objectives and exactness checks for the coupled sparse formulation.

The sparsity count of a nonnegative signal x is rewritten through an
auxiliary vector u in [-1, 1]^N tied to x by the coupling identity
||x||_1 = <x, u>.  This module evaluates the exact objective (coupling
enforced), its penalized relaxation (coupling violation weighted by rho),
and the structural predicates that minimizers must satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import LinearOp

#: entries at or below this magnitude count as zero everywhere
ZERO_TOL = 1e-12
#: coupling-gap feasibility is gap <= FEAS_COEFF * (1 + ||x||_1)
FEAS_COEFF = 1e-9
#: slack for box and budget membership of u
U_TOL = 1e-9

INFEASIBLE = float("inf")


@dataclass(frozen=True)
class Constrained:
    """At most ``k`` nonzero entries."""

    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")


@dataclass(frozen=True)
class Penalized:
    """Each nonzero entry costs ``lam``."""

    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


PenaltyMode = Constrained | Penalized


@dataclass(frozen=True)
class ProblemInstance:
    """Operator, observation and sparsity mode of one solve."""

    op: LinearOp
    d: np.ndarray
    mode: PenaltyMode

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        if d.size != self.op.shape[0]:
            raise ValueError(f"d has length {d.size}, operator expects {self.op.shape[0]}")
        if not np.all(np.isfinite(d)):
            raise ValueError("d must be finite")
        if isinstance(self.mode, Constrained) and self.mode.k > self.op.shape[1]:
            raise ValueError("k exceeds the number of unknowns")
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.op.shape[1]


@dataclass(frozen=True)
class PrimalDualPair:
    """Signal x and auxiliary u.

    Solver-produced pairs satisfy x >= 0 and -1 <= u <= 1; arbitrary pairs
    are representable so the objective can report infeasibility as a value.
    Use :meth:`is_valid` to test the solver invariants explicitly.
    """

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        u = np.asarray(self.u, dtype=float).ravel()
        if x.size != u.size:
            raise ValueError("x and u must have the same length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("x and u must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def is_valid(self, zero_tol: float = ZERO_TOL) -> bool:
        return bool(np.min(self.x, initial=0.0) >= -zero_tol and np.max(np.abs(self.u), initial=0.0) <= 1.0 + zero_tol)

    @classmethod
    def zeros(cls, n: int) -> "PrimalDualPair":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class RhoSchedule:
    """Geometric continuation schedule ending exactly at ``rho_max``."""

    rho0: float
    rho_max: float
    growth: float = 2.0

    def __post_init__(self):
        if self.rho_max < 0:
            raise ValueError("rho_max must be >= 0")
        if self.rho_max > 0 and not 0 < self.rho0 <= self.rho_max:
            raise ValueError("need 0 < rho0 <= rho_max")
        if self.growth <= 1:
            raise ValueError("growth must be > 1")

    def values(self):
        """Yield rho0, rho0*growth, ... capped at and including rho_max."""
        if self.rho_max == 0.0:
            yield 0.0
            return
        rho = self.rho0
        while True:
            yield rho
            if rho >= self.rho_max:
                return
            rho = min(self.rho_max, rho * self.growth)


def write_vector_csv(path, x: np.ndarray) -> None:
    """Serialize a vector as ``index,value`` lines."""
    x = np.asarray(x, dtype=float).ravel()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for i, value in enumerate(x):
            fh.write(f"{i},{float(value)!r}\n")


def read_vector_csv(path) -> np.ndarray:
    """Read an ``index,value`` file back into a dense vector."""
    entries = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                idx_text, value_text = line.split(",")
                idx, value = int(idx_text), float(value_text)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'index,value'") from exc
            if idx < 0 or idx in entries:
                raise ValueError(f"{path}:{lineno}: bad or repeated index {idx}")
            entries[idx] = value
    if not entries:
        return np.zeros(0)
    out = np.zeros(max(entries) + 1)
    for idx, value in entries.items():
        out[idx] = value
    return out


def l0_norm(x: np.ndarray, zero_tol: float = ZERO_TOL) -> int:
    """Number of entries with magnitude above ``zero_tol``."""
    x = np.asarray(x, dtype=float)
    return int(np.count_nonzero(np.abs(x) > zero_tol))


def l0_witness(x: np.ndarray, zero_tol: float = ZERO_TOL) -> tuple[int, np.ndarray]:
    """Sparsity count together with the auxiliary vector attaining it.

    The minimizing u places sign(x_i) on the support and 0 elsewhere, so
    ||u||_1 equals the nonzero count while <x, u> recovers ||x||_1.
    """
    x = np.asarray(x, dtype=float).ravel()
    u = np.where(np.abs(x) > zero_tol, np.sign(x), 0.0)
    return int(np.count_nonzero(u)), u


def coupling_gap(pair: PrimalDualPair) -> float:
    """||x||_1 - <x, u>; nonnegative whenever u stays inside the unit box.

    Summed coordinatewise as |x_i| - x_i*u_i so that pairs with u_i equal
    to sign(x_i) on the support cancel exactly, not merely to round-off.
    """
    return float(np.sum(np.abs(pair.x) - pair.x * pair.u))


def feasibility_tol(x: np.ndarray, coeff: float = FEAS_COEFF) -> float:
    return coeff * (1.0 + float(np.sum(np.abs(x))))


def indicator_value(mode: PenaltyMode, u: np.ndarray, u_tol: float = U_TOL) -> float:
    """Sparsity-side term: 0 or lam*||u||_1 inside the feasible set, else inf."""
    u = np.asarray(u, dtype=float)
    if np.max(np.abs(u), initial=0.0) > 1.0 + u_tol:
        return INFEASIBLE
    if isinstance(mode, Constrained):
        return 0.0 if np.sum(np.abs(u)) <= mode.k + u_tol else INFEASIBLE
    return mode.lam * float(np.sum(np.abs(u)))


def g_value(
    inst: ProblemInstance,
    pair: PrimalDualPair,
    zero_tol: float = ZERO_TOL,
    feas_coeff: float = FEAS_COEFF,
) -> float:
    """Exact objective: data misfit plus sparsity term on the coupling set.

    Returns inf (as a plain sentinel, never produced by arithmetic) when x
    has a negative entry beyond -zero_tol, when u leaves its feasible set,
    or when the coupling gap exceeds the scale-aware feasibility tolerance.
    """
    if np.min(pair.x, initial=0.0) < -zero_tol:
        return INFEASIBLE
    sparsity = indicator_value(inst.mode, pair.u)
    if sparsity == INFEASIBLE:
        return INFEASIBLE
    if coupling_gap(pair) > feasibility_tol(pair.x, feas_coeff):
        return INFEASIBLE
    r = inst.op.apply(pair.x) - inst.d
    return 0.5 * float(np.dot(r, r)) + sparsity


def g_rho_value(
    inst: ProblemInstance,
    pair: PrimalDualPair,
    rho: float,
    zero_tol: float = ZERO_TOL,
) -> float:
    """Relaxed objective: the coupling gap is charged at weight ``rho``."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if np.min(pair.x, initial=0.0) < -zero_tol:
        return INFEASIBLE
    sparsity = indicator_value(inst.mode, pair.u)
    if sparsity == INFEASIBLE:
        return INFEASIBLE
    r = inst.op.apply(pair.x) - inst.d
    return 0.5 * float(np.dot(r, r)) + sparsity + rho * coupling_gap(pair)


def rho_threshold(inst: ProblemInstance, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Penalty weight above which gap-free minimizers are guaranteed.

    Equals sigma(A) * ||d||_2.  If power iteration did not converge the
    estimate is inflated by 1% so downstream weights stay on the safe side.
    """
    est = inst.op.spectral_norm(tol=tol, max_iter=max_iter)
    value = est.sigma * float(np.linalg.norm(inst.d))
    return value if est.converged else 1.01 * value


def check_constrained_u_structure(
    pair: PrimalDualPair,
    k: int,
    zero_tol: float = ZERO_TOL,
    tol: float = 1e-9,
) -> bool:
    """Validate u against the constrained minimizer structure.

    With at least k nonzeros in x, u must place sign(x_i) on some set of k
    coordinates carrying the largest magnitudes (any tie resolution is
    accepted) and 0 elsewhere.  With fewer than k nonzeros, u must match
    sign(x) on the support while off-support entries stay in [-1, 1] and
    spend at most the leftover budget k - ||x||_0.
    """
    x, u = pair.x, pair.u
    ax = np.abs(x)
    supp = ax > zero_tol
    nnz = int(np.count_nonzero(supp))

    matches_sign = supp & (np.abs(u - np.sign(x)) <= tol)
    is_zero = np.abs(u) <= tol

    if nnz >= k:
        # every coordinate is either a selected support entry or zero
        if not np.all(matches_sign | is_zero):
            return False
        selected = matches_sign & ~is_zero
        if int(np.count_nonzero(selected)) != k:
            return False
        if k == 0:
            return True
        tie_tol = tol * (1.0 + float(ax.max(initial=0.0)))
        lo = float(ax[selected].min())
        hi = float(ax[~selected].max(initial=0.0))
        return lo >= hi - tie_tol

    # fewer nonzeros than budget: support forced, leftovers free within budget
    if not np.all(matches_sign[supp]):
        return False
    off = np.abs(u[~supp])
    if off.size and float(off.max()) > 1.0 + tol:
        return False
    return float(off.sum()) <= (k - nnz) + tol


def check_penalized_u_structure(
    pair: PrimalDualPair,
    lam: float,
    rho: float,
    tol: float = 1e-9,
) -> bool:
    """Validate u against the penalized minimizer structure.

    Coordinates of x strictly above lam/rho force u_i = 1 (below -lam/rho,
    u_i = -1), magnitudes strictly below force u_i = 0, and on the boundary
    |x_i| = lam/rho any u_i of matching sign in the unit interval passes.
    """
    if lam <= 0 or rho <= 0:
        raise ValueError("lam and rho must be > 0")
    bar = lam / rho
    btol = tol * (1.0 + bar)
    x, u = pair.x, pair.u
    for xi, ui in zip(x, u):
        if xi > bar + btol:
            ok = abs(ui - 1.0) <= tol
        elif xi < -bar - btol:
            ok = abs(ui + 1.0) <= tol
        elif abs(xi - bar) <= btol:
            ok = -tol <= ui <= 1.0 + tol
        elif abs(xi + bar) <= btol:
            ok = -1.0 - tol <= ui <= tol
        else:
            ok = abs(ui) <= tol
        if not ok:
            return False
    return True


def tighten_u(
    pair: PrimalDualPair,
    lam: float,
    rho: float,
    zero_tol: float = ZERO_TOL,
) -> PrimalDualPair:
    """Close the coupling gap of a penalized minimizer.

    Minimizers may carry fractional u (or u = 0) on coordinates sitting at
    the breakeven value lam/rho; raising those entries to 1 trades penalty
    weight rho*x_i*(1-u_i) for sparsity weight lam*(1-u_i) at no cost, and
    zeroes the gap exactly.  Off-support entries are kept as they are.
    The objective is unchanged or reduced provided no support entry of x
    lies strictly inside (0, lam/rho), which is the minimizer structure.
    """
    on = pair.x > zero_tol
    u = np.where(on, 1.0, pair.u)
    return PrimalDualPair(pair.x, u)
