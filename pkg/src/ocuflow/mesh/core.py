"""Tagged simplicial meshes and submeshes."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import factorial
from typing import Iterable, Mapping, Sequence

import numpy as np


class MeshError(ValueError):
    """Raised for inconsistent mesh data."""


def row_keys(rows: np.ndarray) -> np.ndarray:
    """Order-independent hashable keys for integer rows (one key per row)."""
    a = np.ascontiguousarray(np.sort(np.asarray(rows, dtype=np.int64), axis=1))
    return a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).ravel()


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh (triangles in 2D, tetrahedra in 3D) with integer tags.

    Cells carry one subdomain tag each; labelled facets carry one boundary tag
    each. Tags map to human-readable names through ``subdomain_names`` and
    ``boundary_names``. Labelled facets are usually on the boundary, but
    interfaces between subdomains may be labelled too (they then have two
    adjacent cells; ``facet_cells`` holds the first one).

    Cells are re-ordered on construction so that every cell has a positive
    signed volume.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_labels: np.ndarray
    facets: np.ndarray
    facet_labels: np.ndarray
    subdomain_names: Mapping[int, str]
    boundary_names: Mapping[int, str]

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("vertex coordinates must be finite")
        dim = vertices.shape[1]
        cells = np.array(self.cells, dtype=np.int64).reshape(-1, dim + 1)
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell references a vertex index out of range")
        cell_labels = np.array(self.cell_labels, dtype=np.int64).reshape(-1)
        if cell_labels.shape != (len(cells),):
            raise MeshError("exactly one subdomain label per cell is required")
        facets = np.array(self.facets, dtype=np.int64).reshape(-1, dim)
        facet_labels = np.array(self.facet_labels, dtype=np.int64).reshape(-1)
        if facet_labels.shape != (len(facets),):
            raise MeshError("exactly one boundary label per facet is required")
        if facets.size and (facets.min() < 0 or facets.max() >= len(vertices)):
            raise MeshError("facet references a vertex index out of range")

        # positive orientation
        if len(cells):
            jac = vertices[cells[:, 1:]] - vertices[cells[:, :1]]
            scale = np.max(np.abs(jac), axis=(1, 2))
            # determinant of the edge matrix scaled to unit size, so huge or tiny meshes do not overflow
            with np.errstate(divide="ignore", invalid="ignore"):
                det = np.linalg.det(jac / scale[:, None, None])
            degenerate = ~(np.abs(det) > 1e-14)
            if np.any(degenerate):
                bad = int(np.flatnonzero(degenerate)[0])
                raise MeshError(f"cell {bad} is degenerate (zero volume)")
            neg = det < 0
            if np.any(neg):
                cells[neg, 1], cells[neg, 2] = cells[neg, 2].copy(), cells[neg, 1].copy()

        sub_names = {int(k): str(v) for k, v in dict(self.subdomain_names).items()}
        bnd_names = {int(k): str(v) for k, v in dict(self.boundary_names).items()}
        for tag in np.unique(cell_labels):
            sub_names.setdefault(int(tag), str(int(tag)))
        for tag in np.unique(facet_labels):
            bnd_names.setdefault(int(tag), str(int(tag)))

        object.__setattr__(self, "vertices", _freeze(vertices))
        object.__setattr__(self, "cells", _freeze(cells))
        object.__setattr__(self, "cell_labels", _freeze(cell_labels))
        object.__setattr__(self, "facets", _freeze(facets))
        object.__setattr__(self, "facet_labels", _freeze(facet_labels))
        object.__setattr__(self, "subdomain_names", sub_names)
        object.__setattr__(self, "boundary_names", bnd_names)

        if len(facets):
            count = self._face_table[2][self._facet_face]
            if np.any(count == 0):
                bad = int(np.flatnonzero(count == 0)[0])
                raise MeshError(f"facet {bad} {facets[bad].tolist()} has no adjacent cell")

    # -- construction helpers ------------------------------------------------
    @classmethod
    def from_names(cls, vertices, cells, cell_names: Sequence[str], facets=(), facet_names: Sequence[str] = ()):
        """Build a mesh from per-entity label names; tags follow first appearance."""
        sub_tags: dict[str, int] = {}
        for name in cell_names:
            sub_tags.setdefault(name, len(sub_tags) + 1)
        bnd_tags: dict[str, int] = {}
        for name in facet_names:
            bnd_tags.setdefault(name, len(bnd_tags) + 1)
        dim = np.asarray(vertices).shape[1]
        return cls(
            vertices=vertices,
            cells=cells,
            cell_labels=[sub_tags[n] for n in cell_names],
            facets=np.asarray(facets, dtype=np.int64).reshape(-1, dim),
            facet_labels=[bnd_tags[n] for n in facet_names],
            subdomain_names={v: k for k, v in sub_tags.items()},
            boundary_names={v: k for k, v in bnd_tags.items()},
        )

    # -- basic sizes ------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def label_names(self) -> dict[str, str]:
        """Every subdomain and boundary name, keyed ``"cell:<tag>"`` / ``"facet:<tag>"``."""
        out = {f"cell:{k}": v for k, v in self.subdomain_names.items()}
        out.update({f"facet:{k}": v for k, v in self.boundary_names.items()})
        return out

    # -- label lookup -----------------------------------------------------------
    def subdomain_tag(self, label) -> int:
        return _resolve(label, self.subdomain_names, "subdomain")

    def boundary_tag(self, label) -> int:
        return _resolve(label, self.boundary_names, "boundary")

    def cells_in(self, labels: Iterable | None = None) -> np.ndarray:
        """Indices of the cells carrying any of ``labels`` (all cells for None)."""
        if labels is None:
            return np.arange(self.n_cells)
        tags = [self.subdomain_tag(lab) for lab in _as_list(labels)]
        return np.flatnonzero(np.isin(self.cell_labels, tags))

    def facets_in(self, labels: Iterable) -> np.ndarray:
        tags = [self.boundary_tag(lab) for lab in _as_list(labels)]
        return np.flatnonzero(np.isin(self.facet_labels, tags))

    def has_boundary_label(self, label) -> bool:
        try:
            self.boundary_tag(label)
        except KeyError:
            return False
        return True

    # -- topology ---------------------------------------------------------------
    @cached_property
    def _face_table(self):
        """Unique faces of all cells: (keys, inverse per (cell, local face), counts)."""
        d = self.dim
        local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
        faces = self.cells[:, local]  # (nc, d+1, d)
        keys = row_keys(faces.reshape(-1, d))
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        return uniq, inverse.reshape(self.n_cells, d + 1), counts

    @cached_property
    def _facet_face(self) -> np.ndarray:
        uniq = self._face_table[0]
        if not len(self.facets):
            return np.zeros(0, dtype=np.int64)
        keys = row_keys(self.facets)
        pos = np.searchsorted(uniq, keys)
        pos = np.clip(pos, 0, len(uniq) - 1)
        missing = uniq[pos] != keys
        if np.any(missing):
            bad = int(np.flatnonzero(missing)[0])
            raise MeshError(f"facet {bad} {self.facets[bad].tolist()} has no adjacent cell")
        return pos

    @cached_property
    def facet_adjacency(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(cell, local_face, n_adjacent)`` per labelled facet.

        ``local_face`` is the local index of the cell vertex opposite the facet.
        """
        _, inverse, counts = self._face_table
        face = self._facet_face
        _, first = np.unique(inverse.ravel(), return_index=True)
        entry = first[face]
        d1 = self.dim + 1
        return entry // d1, entry % d1, counts[face]

    @property
    def facet_cells(self) -> np.ndarray:
        return self.facet_adjacency[0]

    def boundary_faces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All faces on the boundary of the cell complex.

        Returns ``(vertices, cell, local_face)`` per boundary face, ordered by
        (cell, local face).
        """
        _, inverse, counts = self._face_table
        on_bnd = counts[inverse] == 1
        cell, loc = np.nonzero(on_bnd)
        d = self.dim
        local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
        verts = self.cells[cell[:, None], local[loc]]
        return verts, cell, loc

    # -- geometry ---------------------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        """Affine map Jacobians ``J[c] = [x1 - x0, ..., xd - x0]`` (columns)."""
        x = self.vertices[self.cells]
        return _freeze(np.ascontiguousarray(np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)))

    @cached_property
    def determinants(self) -> np.ndarray:
        return _freeze(np.linalg.det(self.jacobians))

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Physical gradients of the barycentric coordinates, ``(nc, d+1, dim)``."""
        inv = np.linalg.inv(self.jacobians)  # rows: gradients of reference coords
        grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
        return _freeze(grads)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return _freeze(np.abs(self.determinants) / factorial(self.dim))

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        x = self.vertices[self.cells]
        d = self.dim
        h = np.zeros(self.n_cells)
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                h = np.maximum(h, np.linalg.norm(x[:, i] - x[:, j], axis=1))
        return _freeze(h)

    @cached_property
    def cell_centroids(self) -> np.ndarray:
        return _freeze(self.vertices[self.cells].mean(axis=1))

    def facet_measures(self, facets: np.ndarray | None = None) -> np.ndarray:
        f = self.facets if facets is None else np.asarray(facets)
        return simplex_measures(self.vertices[f])

    def facet_centroids(self, facets: np.ndarray | None = None) -> np.ndarray:
        f = self.facets if facets is None else np.asarray(facets)
        return self.vertices[f].mean(axis=1)

    def measure(self, labels=None) -> float:
        return float(self.cell_volumes[self.cells_in(labels)].sum())


def simplex_measures(x: np.ndarray) -> np.ndarray:
    """Measures of (k-1)-simplices given vertex coordinates ``(n, k, dim)``."""
    e = x[:, 1:] - x[:, :1]
    k = e.shape[1]
    if k == 0:
        return np.ones(len(x))
    gram = np.einsum("nia,nja->nij", e, e)
    return np.sqrt(np.abs(np.linalg.det(gram))) / factorial(k)


def _as_list(labels) -> list:
    if isinstance(labels, (str, int, np.integer)):
        return [labels]
    return list(labels)


def _resolve(label, names: Mapping[int, str], kind: str) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if int(label) in names:
            return int(label)
        raise KeyError(f"unknown {kind} label {label!r}")
    for tag, name in names.items():
        if name == label:
            return tag
    raise KeyError(f"unknown {kind} label {label!r}")


@dataclass(frozen=True, eq=False)
class SubMesh:
    """A mesh made of a subset of the cells of ``parent``.

    Child cell ``i`` is parent cell ``parent_cell_map[i]`` with identical
    vertex ordering; child vertex ``j`` is parent vertex ``parent_vertex_map[j]``.
    """

    mesh: Mesh
    parent: Mesh
    parent_cell_map: np.ndarray
    parent_vertex_map: np.ndarray


def extract_subdomain(mesh: Mesh, labels, interface_label: str = "wall") -> SubMesh:
    """Extract the cells carrying ``labels`` as a standalone mesh.

    Boundary facets of the result are re-derived. A facet that the parent
    already labels keeps its parent label; every other new boundary facet
    (an interface with the rest of the parent) gets ``interface_label``.
    """
    labels = _as_list(labels)
    if not labels:
        raise ValueError("at least one subdomain label is required")
    cells = mesh.cells_in(labels)
    if not len(cells):
        raise ValueError(f"no cells carry labels {labels}")
    used, local_cells = np.unique(mesh.cells[cells], return_inverse=True)
    local_cells = local_cells.reshape(-1, mesh.dim + 1)
    vertices = mesh.vertices[used]
    sub_labels = mesh.cell_labels[cells]
    sub_names = {t: mesh.subdomain_names[t] for t in np.unique(sub_labels).tolist()}

    tmp = Mesh(vertices, local_cells, sub_labels, np.zeros((0, mesh.dim), int), [], sub_names, {})
    bverts, _, _ = tmp.boundary_faces()
    parent_faces = used[bverts]

    bnd_names = dict(mesh.boundary_names)
    try:
        wall = mesh.boundary_tag(interface_label)
    except KeyError:
        wall = max(bnd_names, default=0) + 1
        bnd_names[wall] = interface_label
    flabels = np.full(len(bverts), wall, dtype=np.int64)
    if len(mesh.facets):
        pkeys = row_keys(mesh.facets)
        order = np.argsort(pkeys, kind="stable")
        skeys = pkeys[order]
        ckeys = row_keys(parent_faces)
        pos = np.clip(np.searchsorted(skeys, ckeys), 0, len(skeys) - 1)
        hit = skeys[pos] == ckeys
        flabels[hit] = mesh.facet_labels[order[pos[hit]]]
    used_tags = np.unique(flabels).tolist()
    child = Mesh(
        vertices,
        local_cells,
        sub_labels,
        bverts,
        flabels,
        sub_names,
        {t: bnd_names[t] for t in used_tags},
    )
    return SubMesh(child, mesh, _freeze(cells.copy()), _freeze(used.copy()))


def facet_normals(mesh: Mesh, label) -> np.ndarray:
    """Unit outward normals (w.r.t. the adjacent cell) of facets with ``label``."""
    idx = mesh.facets_in(label)
    if not len(idx):
        raise KeyError(f"no facets carry label {label!r}")
    cell, loc, _ = mesh.facet_adjacency
    g = mesh.barycentric_gradients[cell[idx], loc[idx]]
    return -g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class MeshStats:
    h_min: float
    h_max: float
    h_mean: float
    n_elements: int


def mesh_stats(mesh: Mesh) -> MeshStats:
    """Element diameter statistics (diameter = longest vertex-pair distance)."""
    if not mesh.n_cells:
        raise MeshError("empty mesh")
    h = mesh.cell_diameters
    return MeshStats(float(h.min()), float(h.max()), float(h.mean()), mesh.n_cells)
