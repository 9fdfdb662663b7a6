"""Lagrange finite-element spaces, quadrature and sparse assembly on simplices."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil, factorial
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import Mesh, SubMesh
from .mesh.core import row_keys

CHUNK = 2048  # cells per assembly task; fixed so results do not depend on thread count

EDGES = {
    2: np.array([[0, 1], [1, 2], [0, 2]]),
    3: np.array([[0, 1], [1, 2], [0, 2], [0, 3], [1, 3], [2, 3]]),
}


class AssemblyError(ValueError):
    """Raised for inconsistent assembly requests."""


def n_threads() -> int:
    """Worker count for assembly, from ``OCUFLOW_THREADS`` (default 1)."""
    raw = os.environ.get("OCUFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"OCUFLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# -- quadrature -----------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference simplex ``{x >= 0, sum(x) <= 1}``.

    Attributes
    ----------
    points : ndarray, shape (nq, dim)
    weights : ndarray, shape (nq,)
        Positive weights summing to ``1 / dim!``.
    order : int
        Total polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def barycentric(self) -> np.ndarray:
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])


@lru_cache(maxsize=None)
def quadrature(dim: int, order: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi rule of the given exactness order.

    The simplex is mapped to a cube by the Duffy transform; the last
    coordinate uses a Gauss-Jacobi rule whose weight absorbs the transform
    Jacobian, so ``ceil((order + 1) / 2)`` points per direction are exact.
    """
    if dim not in (1, 2, 3):
        raise ValueError("dim must be 1, 2 or 3")
    if order < 0:
        raise ValueError("order must be nonnegative")
    n = max(1, ceil((order + 1) / 2))
    pts = np.zeros((1, 0))
    wts = np.ones(1)
    for d in range(1, dim + 1):
        xi, w = roots_jacobi(n, d - 1, 0)
        t = 0.5 * (1.0 + xi)
        w = w / 2.0**d
        # embed the (d-1)-simplex rule scaled by (1 - t)
        new_pts = np.concatenate(
            [np.concatenate([pts * (1.0 - ti), np.full((len(pts), 1), ti)], axis=1) for ti in t])
        new_wts = np.concatenate([wts * wi for wi in w])
        pts, wts = new_pts, new_wts
    pts.flags.writeable = False
    wts.flags.writeable = False
    return QuadratureRule(pts, wts, order)


# -- reference basis ------------------------------------------------------------

def n_local(dim: int, degree: int) -> int:
    return dim + 1 if degree == 1 else (dim + 1) * (dim + 2) // 2


def basis_values(degree: int, lam: np.ndarray) -> np.ndarray:
    """Lagrange basis values at barycentric points ``lam[..., d+1]``."""
    if degree == 1:
        return lam.copy()
    d = lam.shape[-1] - 1
    e = EDGES[d]
    vert = lam * (2.0 * lam - 1.0)
    edge = 4.0 * lam[..., e[:, 0]] * lam[..., e[:, 1]]
    return np.concatenate([vert, edge], axis=-1)


def basis_lambda_derivatives(degree: int, lam: np.ndarray) -> np.ndarray:
    """Derivatives ``d phi_a / d lambda_k``, shape ``lam.shape[:-1] + (nloc, d+1)``."""
    d1 = lam.shape[-1]
    if degree == 1:
        return np.broadcast_to(np.eye(d1), lam.shape[:-1] + (d1, d1)).copy()
    e = EDGES[d1 - 1]
    nl = d1 + len(e)
    out = np.zeros(lam.shape[:-1] + (nl, d1))
    for a in range(d1):
        out[..., a, a] = 4.0 * lam[..., a] - 1.0
    for m, (i, j) in enumerate(e):
        out[..., d1 + m, i] = 4.0 * lam[..., j]
        out[..., d1 + m, j] = 4.0 * lam[..., i]
    return out


def _physical_gradients(degree, lam, bgrad):
    """Basis gradients ``(ne, nq, nloc, dim)`` from barycentrics and their gradients.

    ``lam`` is ``(nq, d+1)`` or ``(ne, nq, d+1)``; ``bgrad`` is ``(ne, d+1, dim)``.
    """
    dl = basis_lambda_derivatives(degree, lam)
    if dl.ndim == 3:
        return np.einsum("qak,ekx->eqax", dl, bgrad)
    return np.einsum("eqak,ekx->eqax", dl, bgrad)


# -- spaces and fields ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FunctionSpace:
    """Lagrange space of degree 1 or 2 on a mesh or submesh.

    Vector spaces use a blocked layout: global dof ``comp * n_scalar + node``
    and local dof ``comp * n_local + a``.

    Attributes
    ----------
    mesh : Mesh
        Mesh the space lives on (the child mesh for a submesh).
    submesh : SubMesh or None
        Parent relation when built on a submesh.
    degree, continuity, components
        Element description.
    scalar_dof_map : ndarray, shape (n_cells, n_local)
    n_scalar : int
        Number of scalar nodes.
    dof_coords : ndarray, shape (n_scalar, dim)
    """

    mesh: Mesh
    submesh: SubMesh | None
    degree: int
    continuity: str
    components: int
    scalar_dof_map: np.ndarray
    n_scalar: int
    dof_coords: np.ndarray
    edges: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.components

    @property
    def n_local_scalar(self) -> int:
        return self.scalar_dof_map.shape[1]

    @property
    def dof_map(self) -> np.ndarray:
        """Global dofs per cell, ``(n_cells, components * n_local)``."""
        return self.cell_dofs(np.arange(self.mesh.n_cells))

    def cell_dofs(self, cells: np.ndarray) -> np.ndarray:
        sdm = self.scalar_dof_map[cells]
        if self.components == 1:
            return sdm
        return np.concatenate([sdm + c * self.n_scalar for c in range(self.components)], axis=1)

    def component_dofs(self, comp: int, nodes: np.ndarray | None = None) -> np.ndarray:
        nodes = np.arange(self.n_scalar) if nodes is None else np.asarray(nodes)
        return comp * self.n_scalar + nodes

    def facet_nodes(self, labels) -> np.ndarray:
        """Sorted scalar nodes lying on the facets carrying ``labels``."""
        idx = self.mesh.facets_in(labels)
        cell, loc, _ = self.mesh.facet_adjacency
        cell, loc = cell[idx], loc[idx]
        d = self.mesh.dim
        if self.degree == 1:
            on = np.ones((len(idx), d + 1), dtype=bool)
        else:
            e = EDGES[d]
            on = np.ones((len(idx), n_local(d, 2)), dtype=bool)
            on[:, d + 1:] = (e[None, :, 0] != loc[:, None]) & (e[None, :, 1] != loc[:, None])
        on[np.arange(len(idx)), loc] = False
        return np.unique(self.scalar_dof_map[cell][on])

    def boundary_nodes(self) -> np.ndarray:
        """Scalar nodes on the whole boundary of the mesh."""
        _, cell, loc = self.mesh.boundary_faces()
        d = self.mesh.dim
        if self.degree == 1:
            on = np.ones((len(cell), d + 1), dtype=bool)
        else:
            e = EDGES[d]
            on = np.ones((len(cell), n_local(d, 2)), dtype=bool)
            on[:, d + 1:] = (e[None, :, 0] != loc[:, None]) & (e[None, :, 1] != loc[:, None])
        on[np.arange(len(cell)), loc] = False
        return np.unique(self.scalar_dof_map[cell][on])


def build_space(mesh: Mesh | SubMesh, degree: int = 1, continuity: str = "continuous",
                components: int = 1) -> FunctionSpace:
    """Build a Lagrange space.

    Parameters
    ----------
    mesh : Mesh or SubMesh
    degree : {1, 2}
    continuity : {"continuous", "discontinuous"}
    components : int
        1 for scalar fields, ``mesh.dim`` for vector fields.
    """
    if degree not in (1, 2):
        raise ValueError(f"unsupported degree {degree}; only 1 and 2 are available")
    if continuity not in ("continuous", "discontinuous"):
        raise ValueError(f"unknown continuity {continuity!r}")
    sub = mesh if isinstance(mesh, SubMesh) else None
    m = mesh.mesh if sub is not None else mesh
    if components < 1:
        raise ValueError("components must be >= 1")
    d = m.dim
    nl = n_local(d, degree)
    edges = None
    if continuity == "discontinuous":
        sdm = np.arange(m.n_cells * nl, dtype=np.int64).reshape(m.n_cells, nl)
        lam = np.eye(d + 1) if degree == 1 else _p2_nodes(d)
        coords = np.einsum("qk,ckx->cqx", lam, m.vertices[m.cells]).reshape(-1, d)
        n_scalar = m.n_cells * nl
    elif degree == 1:
        sdm = m.cells.copy()
        coords = m.vertices.copy()
        n_scalar = m.n_vertices
    else:
        e = EDGES[d]
        cell_edges = m.cells[:, e]  # (nc, ne, 2)
        keys = row_keys(cell_edges.reshape(-1, 2))
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        # number edges by first appearance for a cell-ordered, reproducible layout
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        edge_id = rank[inv].reshape(m.n_cells, len(e))
        edges = np.empty((len(first), 2), dtype=np.int64)
        edges[edge_id.ravel()] = np.sort(cell_edges.reshape(-1, 2), axis=1)
        sdm = np.concatenate([m.cells, m.n_vertices + edge_id], axis=1)
        coords = np.concatenate([m.vertices, m.vertices[edges].mean(axis=1)])
        n_scalar = m.n_vertices + len(edges)
    for a in (sdm, coords):
        a.flags.writeable = False
    return FunctionSpace(m, sub, degree, continuity, components, sdm, n_scalar, coords, edges)


def _p2_nodes(d: int) -> np.ndarray:
    lam = np.eye(d + 1)
    mids = 0.5 * (lam[EDGES[d][:, 0]] + lam[EDGES[d][:, 1]])
    return np.concatenate([lam, mids])


@dataclass(eq=False)
class Field:
    """Coefficient vector over a function space."""

    space: FunctionSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("field coefficients must be finite")
        self.coeffs = c

    def copy(self) -> "Field":
        return Field(self.space, self.coeffs.copy())

    def nodal(self) -> np.ndarray:
        """Coefficients reshaped to ``(n_scalar, components)`` (or ``(n_scalar,)``)."""
        if self.space.components == 1:
            return self.coeffs
        return self.coeffs.reshape(self.space.components, -1).T


def zero_field(space: FunctionSpace) -> Field:
    return Field(space, np.zeros(space.n_dofs))


def interpolate(space: FunctionSpace, f) -> Field:
    """Nodal interpolant of ``f``.

    ``f`` is a constant, a sequence of per-component constants, or a
    vectorized callable taking points ``(n, dim)`` and returning ``(n,)`` or
    ``(n, components)``.
    """
    x = space.dof_coords
    if callable(f):
        vals = np.asarray(f(x), dtype=float)
    else:
        vals = np.broadcast_to(np.asarray(f, dtype=float), (len(x),) + np.shape(f)).copy()
    nc = space.components
    if nc == 1:
        vals = vals.reshape(len(x), -1)
        if vals.shape[1] != 1:
            raise ValueError("scalar space needs a scalar function")
        vals = vals[:, 0]
    else:
        if vals.shape != (len(x), nc):
            raise ValueError(f"expected values of shape (n, {nc}), got {vals.shape}")
        vals = vals.T.ravel()
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0]) % len(x)
        raise ValueError(f"non-finite value at dof coordinate {x[bad].tolist()}")
    return Field(space, vals)


def _reference_to_barycentric(ref) -> np.ndarray:
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    return np.column_stack([1.0 - ref.sum(axis=1), ref])


def evaluate(u: Field, cell: int, ref_point) -> np.ndarray:
    """Value of ``u`` at reference point(s) ``ref_point`` of ``cell``.

    Returns ``(n,)`` for scalars or ``(n, components)`` for vectors, with a
    single point squeezed to a scalar or ``(components,)``.
    """
    sp_ = u.space
    lam = _reference_to_barycentric(ref_point)
    phi = basis_values(sp_.degree, lam)  # (n, nloc)
    c = u.coeffs[sp_.cell_dofs(np.array([cell]))[0]].reshape(sp_.components, -1)
    out = phi @ c.T
    out = out[:, 0] if sp_.components == 1 else out
    return out[0] if np.ndim(ref_point) == 1 else out


def evaluate_gradient(u: Field, cell: int, ref_point) -> np.ndarray:
    """Gradient of ``u`` at reference point(s); ``(n, dim)`` or ``(n, comps, dim)``."""
    sp_ = u.space
    det = sp_.mesh.determinants[cell]
    if abs(det) < 1e-300:
        raise AssemblyError(f"cell {cell} has a degenerate Jacobian")
    lam = _reference_to_barycentric(ref_point)
    g = _physical_gradients(sp_.degree, lam, sp_.mesh.barycentric_gradients[[cell]])[0]
    c = u.coeffs[sp_.cell_dofs(np.array([cell]))[0]].reshape(sp_.components, -1)
    out = np.einsum("qax,ca->qcx", g, c)
    out = out[:, 0] if sp_.components == 1 else out
    return out[0] if np.ndim(ref_point) == 1 else out


# -- assembly -------------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """Local integrand.

    ``func(ctx)`` returns local matrices ``(ne, n_test, n_trial)`` for
    bilinear forms, local vectors ``(ne, n_test)`` for linear forms or
    per-entity values ``(ne,)`` for functionals. ``degree`` is the total
    polynomial degree of the integrand; quadrature below it is rejected.
    """

    func: Callable
    degree: int
    name: str = "kernel"


class Context:
    """Geometry and basis data on a chunk of cells or facets.

    Attributes
    ----------
    mesh : Mesh
        Integration mesh.
    cells : ndarray
        Integration-mesh cells of the entities in this chunk.
    dx : ndarray, shape (ne, nq)
        Quadrature weights times the entity measure scaling.
    x : ndarray, shape (ne, nq, dim)
        Physical quadrature points.
    normal : ndarray, shape (ne, dim) or None
        Outward unit normals (facet integrals only).
    """

    def __init__(self, domain, cells, lam, dx, normal=None):
        self.domain = domain
        self.mesh = domain.mesh
        self.cells = cells
        self.lam = lam  # (nq, d+1) or (ne, nq, d+1)
        self.dx = dx
        self.normal = normal
        self._bg = self.mesh.barycentric_gradients[cells]
        lam_e = lam if lam.ndim == 3 else lam[None]
        self.x = np.einsum("eqk,ekx->eqx", np.broadcast_to(lam_e, (len(cells),) + lam_e.shape[1:]),
                           self.mesh.vertices[self.mesh.cells[cells]])
        self._cache: dict = {}

    @property
    def n(self) -> int:
        return len(self.cells)

    def labels(self) -> np.ndarray:
        return self.mesh.cell_labels[self.cells]

    def phi(self, degree: int) -> np.ndarray:
        """Scalar basis values ``(ne, nq, nloc)`` (broadcast view for cells)."""
        key = ("phi", degree)
        if key not in self._cache:
            v = basis_values(degree, self.lam)
            if v.ndim == 2:
                v = np.broadcast_to(v[None], (self.n,) + v.shape)
            self._cache[key] = v
        return self._cache[key]

    def dphi(self, degree: int) -> np.ndarray:
        """Scalar basis gradients ``(ne, nq, nloc, dim)``."""
        key = ("dphi", degree)
        if key not in self._cache:
            self._cache[key] = _physical_gradients(degree, self.lam, self._bg)
        return self._cache[key]

    def dofs(self, space: FunctionSpace) -> np.ndarray:
        return space.cell_dofs(self.domain.cells_for(space, self.cells))

    def value(self, u: Field) -> np.ndarray:
        """``u`` at the quadrature points: ``(ne, nq)`` or ``(ne, nq, comps)``."""
        s = u.space
        c = u.coeffs[self.dofs(s)].reshape(self.n, s.components, -1)
        v = np.einsum("eqa,eca->eqc", self.phi(s.degree), c)
        return v[..., 0] if s.components == 1 else v

    def grad(self, u: Field) -> np.ndarray:
        """Gradient of ``u``: ``(ne, nq, dim)`` or ``(ne, nq, comps, dim)``."""
        s = u.space
        c = u.coeffs[self.dofs(s)].reshape(self.n, s.components, -1)
        g = np.einsum("eqax,eca->eqcx", self.dphi(s.degree), c)
        return g[:, :, 0] if s.components == 1 else g


@dataclass(frozen=True, eq=False)
class Domain:
    """Integration mesh plus the maps to the meshes that spaces live on."""

    mesh: Mesh
    submesh: SubMesh | None = None

    def cells_for(self, space: FunctionSpace, cells: np.ndarray) -> np.ndarray:
        if space.mesh is self.mesh:
            return cells
        if self.submesh is not None and space.mesh is self.submesh.parent:
            return self.submesh.parent_cell_map[cells]
        raise AssemblyError("space is not defined on the integration mesh or its parent")


def as_domain(obj) -> Domain:
    if isinstance(obj, Domain):
        return obj
    if isinstance(obj, SubMesh):
        return Domain(obj.mesh, obj)
    if isinstance(obj, Mesh):
        return Domain(obj)
    if isinstance(obj, FunctionSpace):
        return Domain(obj.mesh, obj.submesh)
    raise TypeError(f"cannot integrate over {type(obj).__name__}")


def _infer_domain(spaces, domain) -> Domain:
    if domain is not None:
        return as_domain(domain)
    spaces = [s for s in spaces if s is not None]
    for s in spaces:
        if s.submesh is not None:
            return Domain(s.mesh, s.submesh)
    return Domain(spaces[0].mesh)


def _check_order(kernel: Kernel, order: int | None) -> int:
    if order is None:
        return kernel.degree
    if order < kernel.degree:
        raise AssemblyError(
            f"quadrature order {order} is below the degree {kernel.degree} of kernel {kernel.name!r}")
    return order


def _run_chunks(n: int, work):
    starts = list(range(0, n, CHUNK))
    nt = min(n_threads(), len(starts))
    if nt <= 1:
        return [work(s) for s in starts]
    with ThreadPoolExecutor(max_workers=nt) as pool:
        return list(pool.map(work, starts))


def _finish(results, test, trial, shape):
    """Merge per-chunk local tensors in chunk order."""
    if trial is None:
        if test is None:
            return float(sum(r[0] for r in results)) if results else 0.0
        rows = np.concatenate([r[0].ravel() for r in results]) if results else np.zeros(0, int)
        vals = np.concatenate([r[1].ravel() for r in results]) if results else np.zeros(0)
        return np.bincount(rows, weights=vals, minlength=shape[0])
    if not results:
        return sp.csr_matrix(shape)
    rows = np.concatenate([r[0] for r in results])
    cols = np.concatenate([r[1] for r in results])
    vals = np.concatenate([r[2] for r in results])
    keep = vals != 0.0
    A = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _local(kernel, ctx, test, trial):
    loc = np.asarray(kernel.func(ctx), dtype=float)
    if trial is None and test is None:
        if loc.shape != (ctx.n,):
            raise AssemblyError(f"functional kernel {kernel.name!r} returned shape {loc.shape}")
        return (float(loc.sum()),)
    rd = ctx.dofs(test)
    if trial is None:
        if loc.shape != rd.shape:
            raise AssemblyError(f"kernel {kernel.name!r} returned shape {loc.shape}, expected {rd.shape}")
        return rd, loc
    cd = ctx.dofs(trial)
    if loc.shape != (ctx.n, rd.shape[1], cd.shape[1]):
        raise AssemblyError(f"kernel {kernel.name!r} returned shape {loc.shape}")
    rows = np.broadcast_to(rd[:, :, None], loc.shape).ravel()
    cols = np.broadcast_to(cd[:, None, :], loc.shape).ravel()
    return rows, cols, loc.ravel()


def assemble_cells(kernel: Kernel, trial: FunctionSpace | None, test: FunctionSpace | None,
                   quad: QuadratureRule | int | None = None, region=None, domain=None):
    """Assemble a cell integral.

    Parameters
    ----------
    kernel : Kernel
    trial, test : FunctionSpace or None
        ``trial=None`` assembles a vector over ``test``; both None assemble a
        scalar functional.
    quad : QuadratureRule or int, optional
        Rule or exactness order; defaults to ``kernel.degree``.
    region : label or labels, optional
        Subdomain labels of the integration mesh; all cells by default.
    domain : Mesh, SubMesh or Domain, optional
        Integration mesh. Defaults to the submesh of any space built on one.

    Returns
    -------
    scipy.sparse.csr_matrix, ndarray or float
    """
    dom = _infer_domain([trial, test], domain)
    if trial is None and test is None and domain is None:
        raise AssemblyError("a domain is required for functionals")
    order = _check_order(kernel, quad.order if isinstance(quad, QuadratureRule) else quad)
    rule = quad if isinstance(quad, QuadratureRule) else quadrature(dom.mesh.dim, order)
    if rule.dim != dom.mesh.dim:
        raise AssemblyError("quadrature dimension does not match the mesh")
    cells = dom.mesh.cells_in(region)
    det = np.abs(dom.mesh.determinants)
    lam = rule.barycentric

    def work(s):
        c = cells[s: s + CHUNK]
        ctx = Context(dom, c, lam, det[c, None] * rule.weights[None, :])
        return _local(kernel, ctx, test, trial)

    shape = (test.n_dofs if test is not None else 0, trial.n_dofs if trial is not None else 0)
    return _finish(_run_chunks(len(cells), work), test, trial, shape)


def assemble_facets(kernel: Kernel, trial: FunctionSpace | None, test: FunctionSpace | None,
                    label, quad: QuadratureRule | int | None = None, domain=None):
    """Assemble an integral over the facets carrying ``label`` (or labels).

    Facets are integrated from their first adjacent cell; ``ctx.normal`` is
    the unit normal pointing out of that cell.
    """
    dom = _infer_domain([trial, test], domain)
    m = dom.mesh
    idx = m.facets_in(label)
    if not len(idx):
        raise AssemblyError(f"no facets carry label {label!r}")
    order = _check_order(kernel, quad.order if isinstance(quad, QuadratureRule) else quad)
    rule = quad if isinstance(quad, QuadratureRule) else quadrature(m.dim - 1, order)
    if rule.dim != m.dim - 1:
        raise AssemblyError("facet quadrature must have dimension dim - 1")
    cell, loc, _ = m.facet_adjacency
    cell, loc = cell[idx], loc[idx]
    d = m.dim
    local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
    fb = rule.barycentric  # (nq, d)
    meas = m.facet_measures(m.facets[idx]) * factorial(d - 1)
    g = m.barycentric_gradients[cell, loc]
    normals = -g / np.linalg.norm(g, axis=1, keepdims=True)

    def work(s):
        sl = slice(s, s + CHUNK)
        lc = loc[sl]
        lam = np.zeros((len(lc), len(fb), d + 1))
        rows = np.arange(len(lc))[:, None]
        for k in range(d):
            lam[rows, np.arange(len(fb))[None, :], local[lc, k][:, None]] = fb[None, :, k]
        ctx = Context(dom, cell[sl], lam, meas[sl, None] * rule.weights[None, :], normals[sl])
        return _local(kernel, ctx, test, trial)

    shape = (test.n_dofs if test is not None else 0, trial.n_dofs if trial is not None else 0)
    return _finish(_run_chunks(len(idx), work), test, trial, shape)


# -- common kernels ---------------------------------------------------------------

def mass_kernel(degree_trial: int, degree_test: int, coeff=None) -> Kernel:
    """``coeff * u * v`` for scalar spaces; coeff is a number or None."""
    c = 1.0 if coeff is None else float(coeff)

    def func(ctx):
        return c * np.einsum("eq,eqi,eqj->eij", ctx.dx, ctx.phi(degree_test), ctx.phi(degree_trial))

    return Kernel(func, degree_trial + degree_test, "mass")


def stiffness_kernel(degree: int, coeff=None) -> Kernel:
    """``coeff * grad u . grad v`` for scalar spaces."""
    c = 1.0 if coeff is None else float(coeff)

    def func(ctx):
        g = ctx.dphi(degree)
        return c * np.einsum("eq,eqix,eqjx->eij", ctx.dx, g, g)

    return Kernel(func, max(2 * degree - 2, 0), "stiffness")


def source_kernel(degree: int, f=None, components: int = 1) -> Kernel:
    """``f * v``; ``f(x)`` vectorized over points ``(..., dim)``, default 1."""

    def func(ctx):
        phi = ctx.phi(degree)
        if f is None:
            val = np.ones(ctx.dx.shape + ((components,) if components > 1 else ()))
        else:
            val = np.asarray(f(ctx.x), dtype=float)
        if components == 1:
            return np.einsum("eq,eq,eqa->ea", ctx.dx, val, phi)
        loc = np.einsum("eq,eqc,eqa->eca", ctx.dx, val, phi)
        return loc.reshape(ctx.n, -1)

    return Kernel(func, degree, "source")


def integrate(domain, f: Callable, order: int, region=None) -> float:
    """Integral of ``f(ctx) -> (ne, nq)`` over the cells of ``domain``."""
    k = Kernel(lambda ctx: np.einsum("eq,eq->e", ctx.dx, f(ctx)), order, "integrand")
    return assemble_cells(k, None, None, order, region=region, domain=domain)


def l2_error(u: Field, exact: Callable, order: int | None = None) -> float:
    """``||u - exact||_{L2}`` with ``exact`` vectorized over points ``(..., dim)``."""
    s = u.space
    order = order if order is not None else 2 * s.degree + 3

    def f(ctx):
        diff = ctx.value(u) - np.asarray(exact(ctx.x), dtype=float)
        return diff**2 if diff.ndim == 2 else (diff**2).sum(axis=-1)

    return float(np.sqrt(integrate(s, f, order)))
