"""Krylov solvers, aggregation AMG and the nested block preconditioner tree."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """A (sub-)solver failed; ``block`` names the tree node."""

    def __init__(self, msg: str, block: str = ""):
        super().__init__(f"[{block}] {msg}" if block else msg)
        self.block = block


@dataclass
class SolveReport:
    """Outcome of a linear solve.

    Attributes
    ----------
    iterations : int
        Krylov iterations of this level.
    residual_norm : float
        True residual ``||b - A x||`` recomputed at exit.
    rhs_norm : float
    converged : bool
    breakdown : bool
        Set when the Hessenberg matrix became singular.
    history : list of float
        Relative residual estimates per iteration.
    levels : dict
        Per sub-block totals ``{name: {"calls": n, "iterations": m}}``.
    times : dict
        Wall time per phase [s].
    """

    iterations: int = 0
    residual_norm: float = 0.0
    rhs_norm: float = 0.0
    converged: bool = False
    breakdown: bool = False
    history: list = field(default_factory=list)
    levels: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)

    @property
    def relative_residual(self) -> float:
        return self.residual_norm / self.rhs_norm if self.rhs_norm > 0 else self.residual_norm


def _as_matvec(A) -> Callable:
    if callable(A) and not hasattr(A, "shape"):
        return A
    if isinstance(A, spla.LinearOperator):
        return A.matvec
    return lambda x: A @ x


def _identity(x):
    return x.copy()


def gmres(A, b, pc: Callable | None = None, tol: float = 1e-8, restart: int = 100, maxit: int = 1000,
          x0: np.ndarray | None = None, flexible: bool = False, project: Callable | None = None,
          atol: float = 0.0) -> tuple[np.ndarray, SolveReport]:
    """Right-preconditioned restarted GMRES (or FGMRES with ``flexible=True``).

    Solves ``A x = b`` to ``||b - A x|| <= max(tol ||b||, atol)``. Orthogonalization
    is modified Gram-Schmidt and the least-squares problem is updated with
    Givens rotations. Convergence is confirmed on the true residual at each
    restart; reaching ``maxit`` returns the current iterate with
    ``converged=False``.

    Parameters
    ----------
    A : matrix, LinearOperator or callable
    pc : callable, optional
        Right preconditioner ``z = M r``. FGMRES stores every ``z`` so it
        may change between iterations.
    project : callable, optional
        Applied to each preconditioned direction and to the final iterate,
        e.g. to remove a known null space.
    """
    t0 = time.perf_counter()
    mv = _as_matvec(A)
    M = pc or _identity
    proj = project or (lambda v: v)
    b = np.asarray(b, dtype=float)
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    rep = SolveReport(rhs_norm=bnorm)
    target = max(tol * bnorm, atol)
    if bnorm == 0.0 and x0 is None:
        rep.converged = True
        rep.times["solve"] = time.perf_counter() - t0
        return x, rep
    m = max(1, min(restart, n))
    r = b - mv(x)
    beta = float(np.linalg.norm(r))
    total = 0
    while True:
        if beta <= target:
            rep.converged = True
            break
        if total >= maxit:
            break
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n)) if flexible else None
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        happy = False
        for j in range(m):
            z = proj(M(V[j]))
            if flexible:
                Z[j] = z
            w = mv(z)
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            den = np.hypot(H[j, j], H[j + 1, j])
            k = j + 1
            total += 1
            if den == 0.0:
                rep.breakdown = True
                k = j
                break
            cs[j], sn[j] = H[j, j] / den, H[j + 1, j] / den
            happy = H[j + 1, j] <= 1e-14 * den
            if not happy:
                V[j + 1] = w / H[j + 1, j]
            H[j, j] = den
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            rep.history.append(abs(g[j + 1]) / bnorm if bnorm else abs(g[j + 1]))
            if abs(g[j + 1]) <= target or happy or total >= maxit:
                break
        if k > 0:
            y = np.linalg.solve(np.triu(H[:k, :k]), g[:k]) if not rep.breakdown else \
                np.linalg.lstsq(np.triu(H[:k, :k]), g[:k], rcond=None)[0]
            if flexible:
                x += Z[:k].T @ y
            else:
                x += proj(M(V[:k].T @ y))
        r = b - mv(x)
        beta = float(np.linalg.norm(r))
        if rep.breakdown:
            rep.converged = beta <= target
            break
        if happy and beta > target:
            # exact Krylov solution but the true residual disagrees: stop rather than loop
            rep.converged = False
            break
    if project is not None:
        x = proj(x)
        r = b - mv(x)
        beta = float(np.linalg.norm(r))
        rep.converged = rep.converged and beta <= 1.001 * target + 1e-300
    rep.iterations = total
    rep.residual_norm = beta
    rep.times["solve"] = time.perf_counter() - t0
    return x, rep


def fgmres(A, b, pc=None, **kw) -> tuple[np.ndarray, SolveReport]:
    """Flexible GMRES; see :func:`gmres`."""
    return gmres(A, b, pc=pc, flexible=True, **kw)


def cg(A, b, pc: Callable | None = None, tol: float = 1e-12, maxit: int = 10000,
       x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients for symmetric positive definite systems."""
    mv = _as_matvec(A)
    M = pc or _identity
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    rep = SolveReport(rhs_norm=bnorm)
    r = b - mv(x)
    if np.linalg.norm(r) <= tol * bnorm or bnorm == 0.0:
        rep.converged = True
        rep.residual_norm = float(np.linalg.norm(r))
        return x, rep
    z = M(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = mv(p)
        pAp = p @ Ap
        if pAp <= 0:
            rep.breakdown = True
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rep.iterations = it
        rn = float(np.linalg.norm(r))
        rep.history.append(rn / bnorm)
        if rn <= tol * bnorm:
            break
        z = M(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rep.residual_norm = float(np.linalg.norm(b - mv(x)))
    rep.converged = rep.residual_norm <= tol * bnorm * (1 + 1e-6) or rep.history[-1] <= tol
    return x, rep


def project_nullspace(v: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Remove the component of ``v`` along ``basis`` (default: constants).

    ``basis`` is one vector or a matrix whose columns span the null space.
    """
    v = np.asarray(v, dtype=float)
    if basis is None:
        return v - v.mean() if len(v) else v.copy()
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        nb = basis @ basis
        if nb == 0:
            raise ValueError("null-space basis vector must be nonzero")
        return v - (v @ basis) / nb * basis
    q, r = np.linalg.qr(basis)
    if np.any(np.abs(np.diag(r)) <= 1e-14 * np.abs(r).max(initial=0.0)):
        raise ValueError("null-space basis must have full column rank")
    return v - q @ (q.T @ v)


# -- algebraic multigrid ------------------------------------------------------------

@dataclass(eq=False)
class AMGHierarchy:
    """Aggregation multigrid hierarchy; ``apply`` performs one V-cycle."""

    ml: object
    sizes: list
    stagnated: bool

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self.ml.solve(np.asarray(r, dtype=float), x0=np.zeros(len(r)), maxiter=1, cycle="V", tol=1e-300)

    __call__ = apply

    @property
    def n_levels(self) -> int:
        return len(self.sizes)


def amg_build(A, theta: float = 0.0, omega: float = 2.0 / 3.0, sweeps: int = 2, max_coarse: int = 64,
              max_levels: int = 20, prolongation: str = "smoothed") -> AMGHierarchy:
    """Aggregation AMG hierarchy.

    Standard greedy aggregation on the symmetric strength graph, Galerkin
    coarse operators, damped Jacobi pre/post smoothing (``sweeps`` each) and
    a pseudo-inverse solve once a level has at most ``max_coarse`` dofs.
    ``prolongation="smoothed"`` applies one damped-Jacobi step to the
    piecewise-constant tentative prolongator; ``"tentative"`` keeps it
    (plain aggregation), which is cheaper but not mesh independent.
    A coarsening ratio below 1.1 is reported as stagnation (warning plus
    ``stagnated=True``).
    """
    import pyamg

    if prolongation not in ("smoothed", "tentative"):
        raise ValueError(f"unknown prolongation {prolongation!r}")
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError("AMG needs a square matrix")
    if A.shape[0] == 0:
        raise ValueError("AMG needs a nonempty matrix")
    smoother = ("jacobi", {"omega": omega, "iterations": sweeps})
    smooth = ("jacobi", {"omega": 4.0 / 3.0}) if prolongation == "smoothed" else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=sp.SparseEfficiencyWarning)
        ml = pyamg.smoothed_aggregation_solver(
            A, B=np.ones((A.shape[0], 1)), strength=("symmetric", {"theta": theta}),
            aggregate="standard", smooth=smooth, presmoother=smoother, postsmoother=smoother,
            improve_candidates=None, max_coarse=max_coarse, max_levels=max_levels,
            coarse_solver="pinv", keep=False)
    sizes = [lvl.A.shape[0] for lvl in ml.levels]
    stagnated = any(a < 1.1 * b for a, b in zip(sizes[:-1], sizes[1:])) or (
        sizes[-1] > max_coarse and len(sizes) < max_levels)
    if stagnated:
        warnings.warn(f"AMG coarsening stagnated (level sizes {sizes})", RuntimeWarning, stacklevel=2)
    return AMGHierarchy(ml, sizes, stagnated)


def amg_apply(h: AMGHierarchy, r: np.ndarray) -> np.ndarray:
    return h.apply(r)


# -- solver tree ------------------------------------------------------------------------

KSP_TYPES = ("gmres", "fgmres", "preonly", "direct")
PC_TYPES = ("none", "amg", "jacobi", "block-jacobi", "fieldsplit-additive", "schur-upper", "lu")


@dataclass(frozen=True)
class SolverNode:
    """One node of a nested solver description.

    ``children`` maps sub-block names to nodes: ``fieldsplit-additive`` uses
    ``fluid`` and ``heat``; ``schur-upper`` uses ``velocity`` and ``schur``;
    ``block-jacobi`` uses ``component``.
    """

    ksp: str = "gmres"
    pc: str = "none"
    tol: float = 1e-8
    restart: int = 100
    maxit: int = 1000
    children: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def validate(self, name: str = "outer"):
        if self.ksp not in KSP_TYPES:
            raise ValueError(f"[{name}] unknown ksp {self.ksp!r}")
        if self.pc not in PC_TYPES:
            raise ValueError(f"[{name}] unknown pc {self.pc!r}")
        if self.ksp == "preonly" and self.pc == "none":
            raise ValueError(f"[{name}] preonly node needs a preconditioner")
        if not self.tol > 0:
            raise ValueError(f"[{name}] tolerance must be positive")
        if self.restart < 1 or self.maxit < 1:
            raise ValueError(f"[{name}] restart and maxit must be >= 1")
        need = {"fieldsplit-additive": ("fluid", "heat"), "schur-upper": ("velocity", "schur"),
                "block-jacobi": ("component",)}.get(self.pc, ())
        for c in need:
            if c not in self.children:
                raise ValueError(f"[{name}] pc {self.pc!r} needs a {c!r} sub-node")
        for c, node in self.children.items():
            node.validate(c)
        return self

    def is_stationary(self) -> bool:
        """True when applying the node is a fixed linear map (no inner Krylov)."""
        if self.ksp in ("gmres", "fgmres"):
            return False
        return all(c.is_stationary() for c in self.children.values())

    def with_child(self, path: str, **changes) -> "SolverNode":
        """Copy with the node at dotted ``path`` updated."""
        head, _, rest = path.partition(".")
        child = self.children[head]
        child = child.with_child(rest, **changes) if rest else replace(child, **changes)
        return replace(self, children={**self.children, head: child})

    def to_dict(self) -> dict:
        return {"ksp": self.ksp, "pc": self.pc, "tol": self.tol, "restart": self.restart,
                "maxit": self.maxit, "options": dict(self.options),
                "children": {k: v.to_dict() for k, v in self.children.items()}}


SolverTree = SolverNode


def _table2() -> SolverNode:
    velocity = SolverNode("preonly", "block-jacobi", children={"component": SolverNode("preonly", "amg")})
    schur = SolverNode("preonly", "amg", options={"approximation": "mass"})
    fluid = SolverNode("fgmres", "schur-upper", tol=1e-5, restart=100, maxit=200,
                       children={"velocity": velocity, "schur": schur})
    heat = SolverNode("gmres", "amg", tol=1e-5, restart=100, maxit=200)
    return SolverNode("gmres", "fieldsplit-additive", tol=1e-8, restart=100, maxit=500,
                      children={"fluid": fluid, "heat": heat})


def preset(name: str) -> SolverNode:
    """Named solver trees.

    ``table2``
        Outer GMRES with additive fieldsplit; heat block GMRES+AMG; fluid
        block FGMRES with an upper Schur preconditioner whose velocity part
        is one block-Jacobi sweep of AMG V-cycles and whose Schur part is an
        AMG V-cycle on the pressure mass matrix scaled by ``-1/mu``.
    ``table2-velocity-gmres``
        As ``table2`` but the velocity block runs GMRES (tol 1e-2, 10 its).
    ``unpreconditioned``
        Plain GMRES on the whole system.
    ``direct``
        Sparse LU with one pressure dof pinned (verification).
    """
    if name == "table2":
        return _table2()
    if name == "table2-velocity-gmres":
        return _table2().with_child("fluid.velocity", ksp="gmres", tol=1e-2, maxit=10, restart=10)
    if name == "unpreconditioned":
        return SolverNode("gmres", "none", tol=1e-8, restart=100, maxit=5000)
    if name == "direct":
        return SolverNode("direct", "lu")
    raise KeyError(f"unknown solver preset {name!r}; choose from {PRESETS}")


PRESETS = ("table2", "table2-velocity-gmres", "unpreconditioned", "direct")


# -- block system application --------------------------------------------------------

@dataclass(eq=False)
class BlockOperators:
    """Matrices needed by the preconditioners of a flow/heat system.

    ``A`` velocity block, ``B`` divergence block (pressure rows), ``K`` heat
    block, ``Mp`` pressure mass matrix, ``u_components`` component index of
    each velocity dof, ``mu`` viscosity for the Schur scaling. ``full`` is
    the whole matrix in ``[u, p, T]`` order (``T`` may be empty).
    """

    full: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    K: sp.csr_matrix | None
    Mp: sp.csr_matrix
    u_components: np.ndarray
    mu: float

    @property
    def sizes(self):
        return self.A.shape[0], self.B.shape[0], 0 if self.K is None else self.K.shape[0]

    def fluid_only(self) -> "BlockOperators":
        nu, np_, _ = self.sizes
        K00 = self.full[: nu + np_][:, : nu + np_].tocsr()
        return BlockOperators(K00, self.A, self.B, None, self.Mp, self.u_components, self.mu)


class _Stats:
    def __init__(self):
        self.levels: dict = {}

    def add(self, name, rep: SolveReport | None):
        d = self.levels.setdefault(name, {"calls": 0, "iterations": 0, "failures": 0})
        d["calls"] += 1
        if rep is not None:
            d["iterations"] += rep.iterations
            d["failures"] += int(not rep.converged)


def _node_solver(node: SolverNode, mat, pc_builder, name, stats, project=None):
    """Callable applying ``node`` (Krylov or preonly) with preconditioner from ``pc_builder``."""
    pc = pc_builder()
    if node.ksp == "preonly":
        def apply(r):
            stats.add(name, None)
            return pc(r)
        return apply
    if node.ksp == "direct":
        lu = spla.splu(sp.csc_matrix(mat))
        return lambda r: lu.solve(r)
    flexible = node.ksp == "fgmres" or not _stationary_pc(node)

    def apply(r):
        x, rep = gmres(mat, r, pc, tol=node.tol, restart=node.restart, maxit=node.maxit,
                       flexible=flexible, project=project)
        stats.add(name, rep)
        return x
    return apply


def _stationary_pc(node: SolverNode) -> bool:
    return all(c.is_stationary() for c in node.children.values())


def _pc_amg(mat, node, name):
    h = amg_build(mat, **node.options.get("amg", {}))
    return h.apply


def _build_pc(node: SolverNode, ops: BlockOperators, part: str, stats: _Stats, name: str):
    """Preconditioner callable of ``node`` acting on the sub-system ``part``."""
    nu, np_, nT = ops.sizes
    pc = node.pc
    if pc == "none":
        return _identity
    if pc == "amg":
        mat = _part_matrix(ops, part)
        return _pc_amg(mat, node, name)
    if pc == "jacobi":
        d = _part_matrix(ops, part).diagonal()
        if np.any(d == 0):
            raise SolverError("zero diagonal entry", name)
        inv = 1.0 / d
        return lambda r: inv * r
    if pc == "lu":
        lu = spla.splu(sp.csc_matrix(_part_matrix(ops, part)))
        return lu.solve
    if pc == "block-jacobi":
        comp = ops.u_components
        groups = [np.flatnonzero(comp == c) for c in np.unique(comp)]
        child = node.children["component"]
        solvers = []
        for c, idx in enumerate(groups):
            Acc = ops.A[idx][:, idx].tocsr()
            cname = f"{name}.component{c}"
            solvers.append((idx, _node_solver(child, Acc, lambda Acc=Acc, cname=cname: _leaf_pc(child, Acc, cname),
                                              cname, stats)))

        def apply(r):
            z = np.zeros_like(r)
            for idx, s in solvers:
                z[idx] = s(r[idx])
            return z
        return apply
    if pc == "schur-upper":
        vnode, snode = node.children["velocity"], node.children["schur"]
        vname, sname = f"{name}.velocity", f"{name}.schur"
        if vnode.pc == "block-jacobi" or vnode.ksp != "preonly":
            vpc = lambda: _build_pc(vnode, ops, "velocity", stats, vname)  # noqa: E731
        else:
            vpc = lambda: _leaf_pc(vnode, ops.A, vname)  # noqa: E731
        vsolve = _node_solver(vnode, ops.A, vpc, vname, stats)
        S, scale = _schur_matrix(ops, snode)
        ssolve = _node_solver(snode, S, lambda: _leaf_pc(snode, S, sname), sname, stats,
                              project=project_nullspace)
        BT = ops.B.T.tocsr()

        def apply(r):
            ru, rp = r[:nu], r[nu:nu + np_]
            zp = project_nullspace(scale * ssolve(rp))
            zu = vsolve(ru - BT @ zp)
            return np.concatenate([zu, zp])
        return apply
    if pc == "fieldsplit-additive":
        fnode, hnode = node.children["fluid"], node.children["heat"]
        fluid_ops = ops.fluid_only()
        fpc = lambda: _build_pc(fnode, fluid_ops, "fluid", stats, "fluid")  # noqa: E731
        fsolve = _node_solver(fnode, fluid_ops.full, fpc, "fluid", stats, project=_pressure_projector(nu, np_))
        hsolve = None
        if nT:
            hpc = lambda: _build_pc(hnode, ops, "heat", stats, "heat")  # noqa: E731
            hsolve = _node_solver(hnode, ops.K, hpc, "heat", stats)

        def apply(r):
            zf = fsolve(r[:nu + np_])
            zT = hsolve(r[nu + np_:]) if hsolve is not None else r[nu + np_:].copy()
            return np.concatenate([zf, zT])
        return apply
    raise SolverError(f"unsupported preconditioner {pc!r}", name)


def _leaf_pc(node: SolverNode, mat, name):
    if node.pc == "amg":
        return _pc_amg(mat, node, name)
    if node.pc == "jacobi":
        inv = 1.0 / mat.diagonal()
        return lambda r: inv * r
    if node.pc == "lu":
        return spla.splu(sp.csc_matrix(mat)).solve
    if node.pc == "none":
        return _identity
    raise SolverError(f"pc {node.pc!r} is not a leaf preconditioner", name)


def _schur_matrix(ops: BlockOperators, node: SolverNode):
    """Matrix standing in for ``S = -B A^-1 B^T`` and the scale applied to its inverse.

    ``mass``: ``S ~ -Mp / mu``, so ``S^-1 ~ -mu Mp^-1``. ``diag``:
    ``S ~ -B diag(A)^-1 B^T``.
    """
    kind = node.options.get("approximation", "mass")
    if kind == "mass":
        return ops.Mp, -ops.mu
    if kind == "diag":
        d = ops.A.diagonal()
        S = (ops.B @ sp.diags(1.0 / d) @ ops.B.T).tocsr()
        return S, -1.0
    raise SolverError(f"unknown Schur approximation {kind!r}", "schur")


def _part_matrix(ops: BlockOperators, part: str):
    nu, np_, _ = ops.sizes
    if part == "heat":
        return ops.K
    if part == "velocity":
        return ops.A
    if part == "fluid":
        return ops.full[: nu + np_][:, : nu + np_]
    return ops.full


def _pressure_projector(nu, np_):
    def proj(x):
        y = x.copy()
        y[nu:nu + np_] = project_nullspace(x[nu:nu + np_])
        return y
    return proj


def direct_solve(ops: BlockOperators, b: np.ndarray) -> np.ndarray:
    """Sparse LU with pressure dof 0 pinned, then mean-free pressure."""
    nu, np_, nT = ops.sizes
    n = ops.full.shape[0]
    keep = np.ones(n, dtype=bool)
    if np_:
        keep[nu] = False
    M = ops.full[keep][:, keep].tocsc()
    x = np.zeros(n)
    x[keep] = spla.splu(M).solve(b[keep])
    if np_:
        x[nu:nu + np_] = project_nullspace(x[nu:nu + np_])
    return x


def solve_block_system(ops: BlockOperators, b: np.ndarray, tree: SolverNode,
                       x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveReport]:
    """Solve ``ops.full x = b`` with a solver tree.

    The pressure constant is projected out of the right-hand side and of
    every Krylov direction.
    """
    tree.validate()
    nu, np_, nT = ops.sizes
    proj = _pressure_projector(nu, np_) if np_ else None
    b = proj(b) if proj else np.asarray(b, dtype=float)
    t0 = time.perf_counter()
    if tree.ksp == "direct":
        x = direct_solve(ops, b)
        r = b - ops.full @ x
        rep = SolveReport(iterations=1, residual_norm=float(np.linalg.norm(r)),
                          rhs_norm=float(np.linalg.norm(b)), converged=True)
        rep.times["setup"] = 0.0
        rep.times["solve"] = time.perf_counter() - t0
        return x, rep
    stats = _Stats()
    part = "full" if nT else "fluid"
    try:
        pc = _build_pc(tree, ops, part, stats, "outer")
    except SolverError:
        raise
    except Exception as exc:  # surface setup failures with the block name
        raise SolverError(str(exc), "setup") from exc
    t1 = time.perf_counter()
    flexible = tree.ksp == "fgmres" or not _stationary_pc(tree)
    x, rep = gmres(ops.full, b, pc, tol=tree.tol, restart=tree.restart, maxit=tree.maxit,
                   flexible=flexible, project=proj, x0=x0)
    rep.levels = stats.levels
    rep.times = {"setup": t1 - t0, "solve": time.perf_counter() - t1}
    return x, rep


def export_matrix_market(A, path) -> None:
    """Write ``A`` as ``%%MatrixMarket matrix coordinate real general``."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), field="real", symmetry="general")
