"""Wall shear stress, field statistics, pressure normalization and exporters."""
from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .fem import Field, Kernel, _physical_gradients, as_domain, assemble_facets, integrate, quadrature
from .krylov import cg
from .mesh import Mesh

MMHG = 133.322387415  # Pa per mmHg

# Canning lubrication estimates: u_max = U_RATE * dT, |tau_w| = TAU_RATE * dT
U_RATE = 1.98e-4  # m/(s K)
TAU_RATE = 13.6e-4 / 2.03  # Pa/K, reproduces 13.6e-4 Pa at dT = 2.03 K


class PostprocError(ValueError):
    """Invalid post-processing request."""


# -- wall shear stress -----------------------------------------------------------------

def _local_faces(d: int) -> np.ndarray:
    return np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])


def _simplex_mass(k: int) -> np.ndarray:
    """Reference P1 mass matrix of a k-simplex divided by its measure."""
    n = k + 1
    return (np.ones((n, n)) + np.eye(n)) / ((k + 1) * (k + 2))


@dataclass(eq=False)
class WSSField:
    """Wall shear stress on the walls of a fluid mesh.

    Attributes
    ----------
    mesh : Mesh
        Fluid mesh.
    labels : tuple of str
        Wall labels covered.
    facets : ndarray, shape (nf, dim)
        Wall facet vertices (fluid mesh ids), ordered as in the adjacent cell.
    facet_labels : ndarray of str
    normals : ndarray, shape (nf, dim)
        Outward unit normals.
    areas : ndarray, shape (nf,)
    raw : ndarray, shape (nf, dim, dim)
        Discontinuous P1 trace: stress vector at each facet vertex [Pa].
    nodes : ndarray
        Fluid mesh vertices carrying the continuous field.
    projected : ndarray, shape (n_nodes, dim)
        Continuous P1 L2 projection of ``raw`` onto the wall surface [Pa].
    """

    mesh: Mesh
    labels: tuple
    facets: np.ndarray
    facet_labels: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    raw: np.ndarray
    nodes: np.ndarray
    projected: np.ndarray
    mass: sp.csr_matrix
    projection_residual: float

    @property
    def local_nodes(self) -> np.ndarray:
        """Facet vertex positions in ``nodes``, shape ``(nf, dim)``."""
        return np.searchsorted(self.nodes, self.facets)

    def _select(self, labels) -> np.ndarray:
        if labels is None:
            return np.arange(len(self.facets))
        labels = (labels,) if isinstance(labels, str) else tuple(labels)
        unknown = set(labels) - set(self.labels)
        if unknown:
            raise PostprocError(f"wall labels {sorted(unknown)} are not part of this WSS field")
        return np.flatnonzero(np.isin(self.facet_labels, labels))

    def _facet_quadrature(self, values_at_vertices: np.ndarray, order: int = 6):
        """Magnitudes of a per-facet linear vector field at facet quadrature points."""
        k = self.mesh.dim - 1
        rule = quadrature(k, order)
        lam = rule.barycentric  # (nq, k+1)
        vals = np.einsum("qa,fac->fqc", lam, values_at_vertices)
        w = rule.weights * math.factorial(k)
        return np.linalg.norm(vals, axis=2), w

    def facet_magnitude(self, which: str = "projected") -> np.ndarray:
        """Facet average of ``|tau_w|`` [Pa]."""
        vals = self.projected[self.local_nodes] if which == "projected" else self.raw
        mag, w = self._facet_quadrature(vals)
        return mag @ w

    @property
    def magnitude(self) -> np.ndarray:
        return self.facet_magnitude("projected")

    def mean(self, labels=None, which: str = "projected") -> float:
        """Area-weighted mean of ``|tau_w|`` over the walls with ``labels``."""
        sel = self._select(labels)
        if not len(sel):
            raise PostprocError("no wall facets selected")
        m = self.facet_magnitude(which)[sel]
        a = self.areas[sel]
        return float(m @ a / a.sum())

    def max(self, labels=None) -> float:
        """Largest nodal ``|tau_w|`` of the projected field on the selected walls."""
        sel = self._select(labels)
        nodes = np.unique(self.local_nodes[sel])
        return float(np.linalg.norm(self.projected[nodes], axis=1).max())

    def min(self, labels=None) -> float:
        """Smallest nodal ``|tau_w|`` of the projected field on the selected walls."""
        sel = self._select(labels)
        nodes = np.unique(self.local_nodes[sel])
        return float(np.linalg.norm(self.projected[nodes], axis=1).min())

    def l2_distance(self, w: np.ndarray) -> float:
        """``||raw - w||_{L2(walls)}`` for a continuous P1 field ``w`` (n_nodes, dim)."""
        diff = self.raw - np.asarray(w)[self.local_nodes]  # (nf, nv, dim)
        M = _simplex_mass(self.mesh.dim - 1)
        val = np.einsum("f,fac,ab,fbc->", self.areas, diff, M, diff)
        return float(np.sqrt(max(val, 0.0)))


def wall_shear_stress(u: Field, wall_labels, mu: float, tangential: bool = False,
                      tol: float = 1e-12) -> WSSField:
    """``tau_w = mu (grad u) n`` on the wall facets of the fluid mesh.

    The raw field is evaluated at the facet vertices from the adjacent cell
    (discontinuous P1 trace); ``projected`` is its L2 projection onto
    continuous P1 over the wall surface (CG on the surface mass matrix).
    With ``tangential`` the normal part ``(tau.n) n`` is removed first.
    """
    V = u.space
    if V.components != V.mesh.dim:
        raise PostprocError("wall shear stress needs a vector velocity field")
    m = V.mesh
    d = m.dim
    labels = (wall_labels,) if isinstance(wall_labels, str) else tuple(wall_labels)
    if not labels:
        raise PostprocError("no wall labels given")
    for lab in labels:
        if not m.has_boundary_label(lab):
            raise PostprocError(f"wall label {lab!r} is not a boundary of the fluid mesh")
    idx = m.facets_in(labels)
    if not len(idx):
        raise PostprocError(f"no facets carry wall labels {list(labels)}")
    cell, loc, count = m.facet_adjacency
    cell, loc = cell[idx], loc[idx]
    if np.any(count[idx] != 1):
        raise PostprocError("wall facets must lie on the boundary of the fluid mesh")
    local = _local_faces(d)[loc]  # (nf, d) local vertex ids of the facet
    fverts = m.cells[cell[:, None], local]
    bg = m.barycentric_gradients[cell]
    normals = -bg[np.arange(len(idx)), loc]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # gradients at all cell vertices, then pick the facet ones
    grads = _physical_gradients(V.degree, np.eye(d + 1), bg)  # (nf, d+1, nloc, dim)
    coeffs = u.coeffs[V.cell_dofs(cell)].reshape(len(idx), V.components, -1)
    gu = np.einsum("fqax,fca->fqcx", grads, coeffs)  # (nf, d+1, comp, dim)
    gu = np.take_along_axis(gu, local[:, :, None, None], axis=1)  # (nf, d, comp, dim)
    raw = mu * np.einsum("fvcx,fx->fvc", gu, normals)
    if tangential:
        raw = raw - np.einsum("fvc,fc->fv", raw, normals)[..., None] * normals[:, None, :]

    areas = m.facet_measures(fverts)
    nodes, inv = np.unique(fverts, return_inverse=True)
    inv = inv.reshape(fverts.shape)
    Mref = _simplex_mass(d - 1)
    rows = np.repeat(inv, d, axis=1).ravel()
    cols = np.tile(inv, (1, d)).ravel()
    vals = (areas[:, None, None] * Mref[None]).reshape(len(idx), -1).ravel()
    M = sp.coo_matrix((vals, (rows, cols)), shape=(len(nodes), len(nodes))).tocsr()
    b = np.zeros((len(nodes), d))
    np.add.at(b, inv, np.einsum("f,ab,fbc->fac", areas, Mref, raw))
    diag = M.diagonal()
    proj = np.zeros_like(b)
    worst = 0.0
    for c in range(d):
        bn = np.linalg.norm(b[:, c])
        if bn == 0.0:
            continue
        x, rep = cg(M, b[:, c], pc=lambda r: r / diag, tol=tol, maxit=10 * len(nodes) + 100)
        proj[:, c] = x
        worst = max(worst, float(np.linalg.norm(M @ x - b[:, c])) / bn)
    names = np.array([m.boundary_names[t] for t in m.facet_labels[idx]])
    return WSSField(m, labels, fverts, names, normals, areas, raw, nodes, proj, M, worst)


# -- statistics ----------------------------------------------------------------------

@dataclass(frozen=True)
class RegionStats:
    region: str
    name: str
    unit: str
    max: float
    mean: float
    min: float

    def as_dict(self) -> dict:
        return {"region": self.region, "field": self.name, "unit": self.unit,
                "max": self.max, "mean": self.mean, "min": self.min}


def _nodal_magnitude(f: Field, dofs: np.ndarray) -> np.ndarray:
    sp_ = f.space
    if sp_.components == 1:
        return f.coeffs[dofs]
    vals = f.coeffs.reshape(sp_.components, -1)[:, dofs]
    return np.linalg.norm(vals, axis=0)


def _value_at(ctx, f: Field) -> np.ndarray:
    v = ctx.value(f)
    return v if v.ndim == 2 else np.linalg.norm(v, axis=-1)


def field_statistics(f: Field, region, name: str = "field", unit: str = "", order: int = 6) -> RegionStats:
    """Max/min over dof values and quadrature mean of ``f`` (magnitude for vectors).

    ``region`` is a subdomain or boundary label of the field's mesh, or a
    subdomain of the parent mesh when the field lives on a submesh.
    """
    sp_ = f.space
    m = sp_.mesh
    region = str(region)
    sub_tags = {v: k for k, v in m.subdomain_names.items()}
    dom = as_domain(sp_)
    if region in sub_tags:
        cells = m.cells_in(region)
        if not len(cells):
            raise PostprocError(f"region {region!r} has no cells")
        dofs = np.unique(sp_.scalar_dof_map[cells])
        area = integrate(dom, lambda ctx: np.ones_like(ctx.dx), 0, region=region)
        total = integrate(dom, lambda ctx: _value_at(ctx, f), order, region=region)
    elif m.has_boundary_label(region):
        idx = m.facets_in(region)
        if not len(idx):
            raise PostprocError(f"region {region!r} has no facets")
        dofs = sp_.facet_nodes(region)
        area = assemble_facets(Kernel(lambda ctx: ctx.dx.sum(axis=1), 0, "area"), None, None, region,
                               domain=dom)
        total = assemble_facets(
            Kernel(lambda ctx: np.einsum("eq,eq->e", ctx.dx, _value_at(ctx, f)), order, "integral"),
            None, None, region, domain=dom)
    else:
        raise PostprocError(f"unknown region {region!r}")
    vals = _nodal_magnitude(f, dofs)
    mean = float(total / area)
    return RegionStats(region, name, unit, float(vals.max()), mean, float(vals.min()))


# -- pressure and reference estimates ---------------------------------------------------

def domain_mean(f: Field, domain=None, order: int = 4) -> float:
    dom = as_domain(f.space if domain is None else domain)
    area = integrate(dom, lambda ctx: np.ones_like(ctx.dx), 0)
    return float(integrate(dom, lambda ctx: ctx.value(f), order) / area)


def normalize_pressure(p: Field, target: float = 0.0, unit: str = "Pa") -> Field:
    """Shift ``p`` so its domain mean equals ``target`` (``unit`` ``"Pa"`` or ``"mmHg"``)."""
    if unit not in ("Pa", "mmHg"):
        raise PostprocError(f"unit must be 'Pa' or 'mmHg', got {unit!r}")
    t = target * MMHG if unit == "mmHg" else float(target)
    if p.space.components != 1:
        raise PostprocError("pressure must be a scalar field")
    shift = t - domain_mean(p)
    return Field(p.space, p.coeffs + shift)


@dataclass(frozen=True)
class CanningEstimate:
    delta_T: float
    u_max: float  # m/s
    tau_w: float  # Pa


def canning_prediction(delta_T: float) -> CanningEstimate:
    """Linear lubrication estimates ``u_max = 1.98e-4 dT`` and ``|tau_w| = 6.7e-4 dT``."""
    if not delta_T >= 0:
        raise PostprocError("delta_T must be nonnegative")
    return CanningEstimate(float(delta_T), U_RATE * delta_T, TAU_RATE * delta_T)


def boundary_mean(f: Field, label, domain=None, order: int = 4) -> float:
    """Mean of a scalar field over the facets with ``label``."""
    dom = as_domain(f.space if domain is None else domain)
    area = assemble_facets(Kernel(lambda ctx: ctx.dx.sum(axis=1), 0, "area"), None, None, label, domain=dom)
    tot = assemble_facets(Kernel(lambda ctx: np.einsum("eq,eq->e", ctx.dx, ctx.value(f)), order, "integral"),
                          None, None, label, domain=dom)
    return float(tot / area)


def wall_delta_T(T: Field, hot, cold, order: int = 4) -> float:
    """Mean temperature on the ``hot`` facets minus the mean on the ``cold`` facets [K]."""
    return boundary_mean(T, hot, order=order) - boundary_mean(T, cold, order=order)


# -- exporters ---------------------------------------------------------------------------

_VTK_CELL = {2: 5, 3: 10}  # triangle, tetrahedron


def _point_values(mesh: Mesh, f: Field, vertex_map: np.ndarray | None) -> np.ndarray:
    """Field sampled at the vertices of ``mesh`` (zero outside the field's mesh)."""
    sp_ = f.space
    if sp_.continuity != "continuous":
        raise PostprocError("discontinuous fields are exported as cell data")
    nv = sp_.mesh.n_vertices
    vals = f.coeffs.reshape(sp_.components, -1)[:, :nv].T  # vertex dofs come first
    out = np.zeros((mesh.n_vertices, sp_.components))
    if sp_.mesh is mesh:
        out[:] = vals
    elif vertex_map is not None:
        out[vertex_map] = vals
    elif sp_.submesh is not None and sp_.submesh.parent is mesh:
        out[sp_.submesh.parent_vertex_map] = vals
    else:
        raise PostprocError("field does not live on the export mesh or one of its submeshes")
    return out


def _fmt(a: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(a, dtype=float).ravel())


def export_vtu(mesh: Mesh, path, point_data: Mapping[str, Field | np.ndarray] | None = None,
               cell_data: Mapping[str, np.ndarray] | None = None) -> Path:
    """Write an ASCII VTK XML unstructured grid.

    ``point_data`` holds continuous fields (P2 fields are sampled at the
    vertices; fields on a submesh are zero elsewhere) or arrays with one row
    per vertex; ``cell_data`` holds arrays with one row per cell. Subdomain
    tags are always written as the ``subdomain`` cell array.
    """
    path = Path(path)
    d = mesh.dim
    root = ET.Element("VTKFile", type="UnstructuredGrid", version="0.1", byte_order="LittleEndian")
    grid = ET.SubElement(root, "UnstructuredGrid")
    piece = ET.SubElement(grid, "Piece", NumberOfPoints=str(mesh.n_vertices), NumberOfCells=str(mesh.n_cells))
    pts = np.zeros((mesh.n_vertices, 3))
    pts[:, :d] = mesh.vertices
    pd = ET.SubElement(piece, "PointData")
    for name, f in (point_data or {}).items():
        arr = _point_values(mesh, f, None) if isinstance(f, Field) else np.asarray(f, dtype=float)
        arr = arr.reshape(mesh.n_vertices, -1)
        if arr.shape[1] == 2:  # VTK vectors are 3D
            arr = np.concatenate([arr, np.zeros((len(arr), 1))], axis=1)
        da = ET.SubElement(pd, "DataArray", type="Float64", Name=name, NumberOfComponents=str(arr.shape[1]),
                           format="ascii")
        da.text = _fmt(arr)
    cd = ET.SubElement(piece, "CellData")
    da = ET.SubElement(cd, "DataArray", type="Int32", Name="subdomain", format="ascii")
    da.text = " ".join(str(int(t)) for t in mesh.cell_labels)
    for name, arr in (cell_data or {}).items():
        arr = np.asarray(arr, dtype=float).reshape(mesh.n_cells, -1)
        da = ET.SubElement(cd, "DataArray", type="Float64", Name=name, NumberOfComponents=str(arr.shape[1]),
                           format="ascii")
        da.text = _fmt(arr)
    p = ET.SubElement(ET.SubElement(piece, "Points"), "DataArray", type="Float64", NumberOfComponents="3",
                      format="ascii")
    p.text = _fmt(pts)
    cells = ET.SubElement(piece, "Cells")
    c = ET.SubElement(cells, "DataArray", type="Int64", Name="connectivity", format="ascii")
    c.text = " ".join(str(int(v)) for v in mesh.cells.ravel())
    o = ET.SubElement(cells, "DataArray", type="Int64", Name="offsets", format="ascii")
    o.text = " ".join(str(int(v)) for v in (d + 1) * np.arange(1, mesh.n_cells + 1))
    t = ET.SubElement(cells, "DataArray", type="UInt8", Name="types", format="ascii")
    t.text = " ".join([str(_VTK_CELL[d])] * mesh.n_cells)
    ET.indent(root)
    try:
        ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    except OSError as exc:
        raise OSError(f"cannot write VTU file {path}: {exc.strerror}") from exc
    return path


def read_vtu(path) -> dict:
    """Points, connectivity and data arrays of a file written by :func:`export_vtu`."""
    root = ET.parse(path).getroot()
    piece = root.find("UnstructuredGrid/Piece")
    out = {"n_points": int(piece.get("NumberOfPoints")), "n_cells": int(piece.get("NumberOfCells")),
           "point_data": {}, "cell_data": {}}

    def arr(el):
        ncomp = int(el.get("NumberOfComponents", "1"))
        a = np.array((el.text or "").split(), dtype=float)
        return a.reshape(-1, ncomp) if ncomp > 1 else a

    out["points"] = arr(piece.find("Points/DataArray"))
    for el in piece.findall("PointData/DataArray"):
        out["point_data"][el.get("Name")] = arr(el)
    for el in piece.findall("CellData/DataArray"):
        out["cell_data"][el.get("Name")] = arr(el)
    return out


def _csv_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def export_csv(path, records: Sequence[Mapping], columns: Sequence[str] | None = None,
               units: Mapping[str, str] | None = None) -> Path:
    """Write records as CSV: header row, one record per line, ``.`` decimals.

    Column headers get ``" (unit)"`` appended when ``units`` names one.
    """
    path = Path(path)
    records = list(records)
    if columns is None:
        columns = []
        for r in records:
            columns += [k for k in r if k not in columns]
    units = dict(units or {})
    header = [f"{c} ({units[c]})" if units.get(c) else c for c in columns]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in records:
                w.writerow([_csv_value(r.get(c, "")) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write CSV file {path}: {exc.strerror}") from exc
    return path


def stats_record(stats: Iterable[RegionStats], **keys) -> tuple[dict, dict]:
    """Flatten statistics into one record (``<field>_<region>_<max|mean|min>``) and its units."""
    rec, units = dict(keys), {}
    for s in stats:
        for k in ("max", "mean", "min"):
            col = f"{s.name}_{s.region}_{k}"
            rec[col] = getattr(s, k)
            units[col] = s.unit
    return rec, units


__all__ = [
    "CanningEstimate", "MMHG", "PostprocError", "RegionStats", "TAU_RATE", "U_RATE", "WSSField",
    "boundary_mean", "canning_prediction", "domain_mean", "export_csv", "export_vtu", "field_statistics",
    "normalize_pressure", "read_vtu", "stats_record", "wall_delta_T", "wall_shear_stress",
]
