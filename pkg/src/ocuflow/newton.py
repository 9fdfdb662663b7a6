"""Damped Newton iteration for the coupled flow/heat problem."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .forms import (HeatFluidProblem, State, assemble_constant_blocks, assemble_residual,
                    build_newton_system, conduction_state, initial_state, pack, unpack)
from .krylov import BlockOperators, SolveReport, SolverNode, preset, solve_block_system


class NewtonError(RuntimeError):
    """Unrecoverable failure inside the Newton loop."""


@dataclass(frozen=True)
class LineSearch:
    """Backtracking on the residual norm.

    A step ``alpha`` is accepted once
    ``||R(x + alpha d)|| <= (1 - c alpha) ||R(x)||``, shrinking by ``shrink``
    up to ``max_halvings`` times. With ``refine`` the accepted step keeps
    shrinking while the residual norm strictly decreases.
    """

    kind: str = "backtracking"
    c: float = 1e-4
    shrink: float = 0.5
    max_halvings: int = 10
    refine: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "backtracking"):
            raise ValueError(f"unknown line search {self.kind!r}")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0.0 <= self.c < 1.0:
            raise ValueError("c must lie in [0, 1)")


@dataclass(frozen=True)
class NewtonConfig:
    """Newton settings.

    Attributes
    ----------
    eps_tol : float
        Tolerance on the relative increment ``Crit``.
    max_iters : int
    line_search : LineSearch
    variant : (flow, radiation) or None
        Overrides the problem variant when given.
    radiation_jacobian : {"consistent", "frozen"}
        Rebuild ``4 sigma eps T^3`` every iteration, or keep it at the
        initial temperature.
    residual_gate : float
        Convergence also needs ``||R|| <= residual_gate * ||R_0||``.
    residual_rtol : float
        ``||R|| <= residual_rtol * ||R_0||`` counts as converged even if
        ``Crit`` is still large (0 disables); this is what ends a linear
        problem after one step.
    noise_floor : float
        A residual below ``noise_floor * || |J| |x| ||`` (round-off level of
        the residual evaluation) counts as converged.
    init : {"conduction", "constant"}
        Initial temperature: pure conduction solve or the constant
        ``init_T`` (default ``T_ref``).
    """

    eps_tol: float = 1e-8
    max_iters: int = 25
    line_search: LineSearch = field(default_factory=LineSearch)
    variant: tuple | None = None
    radiation_jacobian: str = "consistent"
    residual_gate: float = 1e-6
    residual_rtol: float = 1e-7
    noise_floor: float = 1e-10
    init: str = "conduction"
    init_T: float | None = None

    def __post_init__(self):
        if not self.eps_tol > 0:
            raise ValueError("eps_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.radiation_jacobian not in ("consistent", "frozen"):
            raise ValueError(f"unknown radiation_jacobian {self.radiation_jacobian!r}")
        if self.init not in ("conduction", "constant"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class IterationRecord:
    k: int
    crit: float
    r_u: float
    r_p: float
    r_T: float
    alpha: float
    linear_iterations: int
    linear_converged: bool
    time: float
    report: SolveReport | None = None


@dataclass
class NewtonLog:
    """Per-iteration history; residual norms are taken after the update."""

    records: list = field(default_factory=list)
    initial_residual: tuple = (0.0, 0.0, 0.0)

    def __len__(self):
        return len(self.records)

    @property
    def crits(self) -> list[float]:
        return [r.crit for r in self.records]

    COLUMNS = ("k", "crit", "r_u", "r_p", "r_T", "alpha", "linear_iterations")

    def rows(self) -> list[list]:
        return [[r.k, r.crit, r.r_u, r.r_p, r.r_T, r.alpha, r.linear_iterations] for r in self.records]

    def to_csv(self, path) -> None:
        """Write one row per iteration (timings go to a separate file)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


@dataclass
class NewtonResult:
    state: State
    log: NewtonLog
    converged: bool
    status: str

    @property
    def iterations(self) -> int:
        return len(self.log)


def compute_crit(deltas, deltas0) -> float:
    """``max_i ||delta_i|| / ||delta0_i||`` skipping components with ``delta0_i = 0``."""
    ratios = [float(np.linalg.norm(d)) / float(np.linalg.norm(d0))
              for d, d0 in zip(deltas, deltas0) if np.linalg.norm(d0) > 0]
    return max(ratios, default=0.0)


@dataclass
class LineSearchResult:
    alpha: float
    residual_norm: float
    warning: str = ""


def line_search(x: np.ndarray, direction: np.ndarray, residual: Callable, ls: LineSearch | None = None,
                r0: float | None = None) -> LineSearchResult:
    """Choose the relaxation factor ``alpha`` for ``x + alpha * direction``.

    ``residual(y)`` returns a residual vector or its norm.
    """
    ls = ls or LineSearch()

    def norm(y):
        v = residual(y)
        return float(np.linalg.norm(v)) if np.ndim(v) else abs(float(v))

    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    f0 = norm(x) if r0 is None else r0
    if not np.any(d):
        return LineSearchResult(1.0, f0, "stagnation: zero direction")
    if ls.kind == "none":
        return LineSearchResult(1.0, norm(x + d))
    alpha = 1.0
    f = norm(x + alpha * d)
    tried_finite = np.isfinite(f)
    halvings = 0
    while not (np.isfinite(f) and f <= (1.0 - ls.c * alpha) * f0):
        if halvings >= ls.max_halvings:
            if not tried_finite:
                raise NewtonError("residual is non-finite at every trial step")
            return LineSearchResult(alpha, f, "line search hit max_halvings without sufficient decrease")
        alpha *= ls.shrink
        halvings += 1
        f = norm(x + alpha * d)
        tried_finite = tried_finite or np.isfinite(f)
    # accepted; optionally keep shrinking while the residual keeps dropping
    while ls.refine and halvings < ls.max_halvings:
        a2 = alpha * ls.shrink
        f2 = norm(x + a2 * d)
        if not (np.isfinite(f2) and f2 < f):
            break
        alpha, f = a2, f2
        halvings += 1
    return LineSearchResult(alpha, f)


def _scaled_norm(r, blocks, scales) -> float:
    return float(np.sqrt(sum((np.linalg.norm(r[b]) / s) ** 2 for b, s in zip(blocks, scales))))


def block_operators(problem: HeatFluidProblem, system) -> BlockOperators:
    comps = problem.u_free // problem.V.n_scalar
    return BlockOperators(system.matrix(), system.A, system.blocks["B"], system.K,
                          system.blocks["Mp"], comps, problem.params.mu)


def _tree(solver) -> SolverNode:
    if solver is None:
        return preset("table2")
    if isinstance(solver, str):
        return preset(solver)
    return solver


def initial_guess(problem: HeatFluidProblem, cfg: NewtonConfig) -> State:
    if cfg.init == "conduction":
        return conduction_state(problem)
    return initial_state(problem, cfg.init_T)


def newton_solve(problem: HeatFluidProblem, init: State | None = None, cfg: NewtonConfig | None = None,
                 solver: SolverNode | str | None = None, timings: dict | None = None) -> NewtonResult:
    """Run the Newton loop from ``init`` (default: :func:`initial_guess`).

    Returns a :class:`NewtonResult`; ``converged=False`` with status
    ``"max_iters"`` when the iteration cap is hit. ``timings`` (if given)
    accumulates ``assembly`` and ``solve`` wall times.
    """
    cfg = cfg or NewtonConfig()
    if cfg.variant is not None:
        flow, radiation = cfg.variant
        problem = replace(problem, flow=flow, radiation=radiation)
    tree = _tree(solver)
    tree.validate()
    tm = timings if timings is not None else {}
    tm.setdefault("assembly", 0.0)
    tm.setdefault("solve", 0.0)

    t = time.perf_counter()
    st = initial_guess(problem, cfg) if init is None else init.copy()
    for f, sp_ in ((st.u, problem.V), (st.p, problem.Q), (st.T, problem.W)):
        if f.space is not sp_ and f.space.n_dofs != sp_.n_dofs:
            raise ValueError("initial fields are not on the problem spaces")
    constant = assemble_constant_blocks(problem)
    T_rad = st.T.copy() if cfg.radiation_jacobian == "frozen" else None
    res = assemble_residual(problem, st)
    tm["assembly"] += time.perf_counter() - t

    nu, np_, _ = problem.sizes
    blocks = (slice(0, nu), slice(nu, nu + np_), slice(nu + np_, None))

    def merit(x, scales):
        """Block-scaled residual norm, each block relative to the size of its terms."""
        try:
            trial = unpack(problem, x, st)
        except FloatingPointError:
            return np.inf
        return _scaled_norm(assemble_residual(problem, trial).vector, blocks, scales)

    log = NewtonLog(initial_residual=res.norms())
    r_ref = res.norm()
    if r_ref == 0.0:
        return NewtonResult(st, log, True, "converged")
    deltas0 = None
    status = "max_iters"
    converged = False
    for k in range(cfg.max_iters):
        t0 = time.perf_counter()
        system = build_newton_system(problem, st, constant, T_rad, res)
        ops = block_operators(problem, system)
        t1 = time.perf_counter()
        dx, rep = solve_block_system(ops, system.rhs(), tree)
        t2 = time.perf_counter()
        if not np.all(np.isfinite(dx)):
            raise NewtonError(f"linear solve produced non-finite values at Newton iteration {k}")
        if not rep.converged and rep.relative_residual > 1e-2:
            raise NewtonError(
                f"linear solve failed at Newton iteration {k} (relative residual {rep.relative_residual:.3e})")
        if not rep.converged:
            warnings.warn(f"linear solve at Newton iteration {k} stopped at relative residual "
                          f"{rep.relative_residual:.3e}", RuntimeWarning, stacklevel=2)
        x = pack(problem, st)
        # size of the individual terms of each equation, without cancellation
        mag = abs(ops.full) @ np.abs(x)
        floor = cfg.noise_floor * float(np.linalg.norm(mag))
        scales = [float(np.linalg.norm(mag[b])) or 1.0 for b in blocks]
        ls = line_search(x, dx, lambda y: merit(y, scales), cfg.line_search,
                         r0=_scaled_norm(res.vector, blocks, scales))
        step = ls.alpha * dx
        try:
            st = unpack(problem, x + step, st)
        except FloatingPointError:
            raise NewtonError(f"non-finite state after update at Newton iteration {k}") from None
        res = assemble_residual(problem, st)
        t3 = time.perf_counter()
        tm["assembly"] += (t1 - t0) + (t3 - t2)
        tm["solve"] += t2 - t1

        parts = tuple(step[b] for b in blocks)
        if deltas0 is None:
            deltas0 = parts
        crit = compute_crit(parts, deltas0)
        ru, rp, rT = res.norms()
        log.records.append(IterationRecord(k, crit, ru, rp, rT, ls.alpha, rep.iterations, rep.converged,
                                           t3 - t0, rep))
        rn = res.norm()
        if rn <= floor or (rn <= cfg.residual_gate * r_ref
                           and (crit <= cfg.eps_tol or rn <= cfg.residual_rtol * r_ref)):
            converged = True
            status = "converged"
            break
    return NewtonResult(st, log, converged, status)
