"""Structured mesh generators used as desk-scale geometries."""
from __future__ import annotations

from itertools import permutations
from typing import Callable, Sequence

import numpy as np

from .core import Mesh, MeshError

RECT_LABELS = {"left": "left", "right": "right", "bottom": "bottom", "top": "top"}
BOX_LABELS = {
    "left": "left", "right": "right", "bottom": "bottom",
    "top": "top", "front": "front", "back": "back",
}


def _crossed_grid(u, v, to_xy, block):
    """Crossed-triangle mesh of a tensor grid in parameter space.

    Each grid quad gets a centre vertex and four triangles. ``block(i, j)``
    names the region of quad ``(i, j)``; ``None`` leaves a hole.
    Returns vertices, cells, cell names and the parameter coordinates of the
    vertices.
    """
    nu, nv = len(u) - 1, len(v) - 1
    uu, vv = np.meshgrid(u, v, indexing="ij")
    corner_param = np.stack([uu.ravel(), vv.ravel()], axis=1)
    cu = 0.5 * (u[:-1] + u[1:])
    cv = 0.5 * (v[:-1] + v[1:])
    cuu, cvv = np.meshgrid(cu, cv, indexing="ij")
    centre_param = np.stack([cuu.ravel(), cvv.ravel()], axis=1)

    def corner(i, j):
        return i * (nv + 1) + j

    n_corner = (nu + 1) * (nv + 1)
    cells, names = [], []
    for i in range(nu):
        for j in range(nv):
            name = block(i, j)
            if name is None:
                continue
            c = n_corner + i * nv + j
            a, b, d, e = corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1)
            cells += [(a, b, c), (b, d, c), (d, e, c), (e, a, c)]
            names += [name] * 4
    if not cells:
        raise MeshError("generator produced no cells")
    params = np.concatenate([corner_param, centre_param])
    cells = np.asarray(cells, dtype=np.int64)
    used, inv = np.unique(cells, return_inverse=True)
    params = params[used]
    return to_xy(params), inv.reshape(cells.shape), names, params


def _faces_from_cells(vertices, cells, names, boundary_name, interface_name=None):
    """Label boundary faces (and optionally interfaces) of a named cell complex."""
    tmp = Mesh.from_names(vertices, cells, names)
    verts, cell, _ = tmp.boundary_faces()
    facets, facet_names = [], []
    for f, c in zip(verts, cell):
        label = boundary_name(f, names[c])
        if label is not None:
            facets.append(f)
            facet_names.append(label)
    if interface_name is not None:
        uniq, inverse, counts = tmp._face_table
        d = tmp.dim
        local = np.array([[j for j in range(d + 1) if j != i] for i in range(d + 1)])
        interior = np.flatnonzero(counts == 2)
        owners = {}
        for c in range(tmp.n_cells):
            for k in range(d + 1):
                owners.setdefault(int(inverse[c, k]), []).append((c, k))
        for face in interior:
            (c0, k0), (c1, _) = owners[int(face)]
            if names[c0] == names[c1]:
                continue
            label = interface_name(names[c0], names[c1])
            if label is not None:
                facets.append(tmp.cells[c0, local[k0]])
                facet_names.append(label)
    return facets, facet_names


def generate_rect(nx: int, ny: int, extent=(1.0, 1.0), labels: dict | None = None,
                  origin=(0.0, 0.0), subdomains: Callable | None = None,
                  subdomain: str = "domain") -> Mesh:
    """Crossed-triangle mesh of a rectangle.

    Parameters
    ----------
    nx, ny : int
        Number of divisions along x and y.
    extent : (float, float)
        Side lengths [m].
    labels : dict, optional
        Names for the ``left``/``right``/``bottom``/``top`` sides.
    subdomains : callable, optional
        Maps quad centres ``(n, 2)`` to subdomain names; defaults to a single
        ``subdomain``.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    lx, ly = (float(e) for e in extent)
    if lx <= 0 or ly <= 0:
        raise ValueError("extent must be positive")
    names = dict(RECT_LABELS, **(labels or {}))
    x0, y0 = origin
    xs = x0 + lx * np.arange(nx + 1) / nx
    ys = y0 + ly * np.arange(ny + 1) / ny

    if subdomains is None:
        def block(i, j):
            return subdomain
    else:
        centres = np.array([[0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])]
                            for i in range(nx) for j in range(ny)])
        region = list(subdomains(centres))

        def block(i, j):
            return region[i * ny + j]

    vertices, cells, cnames, _ = _crossed_grid(xs, ys, lambda p: p, block)
    tol = 1e-12 * max(lx, ly)

    def side(f, _name):
        p = vertices[f]
        if np.all(np.abs(p[:, 0] - xs[0]) < tol):
            return names["left"]
        if np.all(np.abs(p[:, 0] - xs[-1]) < tol):
            return names["right"]
        if np.all(np.abs(p[:, 1] - ys[0]) < tol):
            return names["bottom"]
        if np.all(np.abs(p[:, 1] - ys[-1]) < tol):
            return names["top"]
        return None

    facets, fnames = _faces_from_cells(vertices, cells, cnames, side)
    return Mesh.from_names(vertices, cells, cnames, facets, fnames)


def generate_box(nx: int, ny: int, nz: int, extent=(1.0, 1.0, 1.0), labels: dict | None = None,
                 origin=(0.0, 0.0, 0.0), subdomain: str = "domain") -> Mesh:
    """Tetrahedral mesh of a box, six tetrahedra per hexahedron (Kuhn split).

    Side labels: ``left``/``right`` (x), ``bottom``/``top`` (y),
    ``front``/``back`` (z).
    """
    if min(nx, ny, nz) < 1:
        raise ValueError("divisions must be >= 1")
    ext = np.asarray(extent, dtype=float)
    if np.any(ext <= 0):
        raise ValueError("extent must be positive")
    names = dict(BOX_LABELS, **(labels or {}))
    axes = [origin[k] + ext[k] * np.arange(n + 1) / n for k, n in enumerate((nx, ny, nz))]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    cells = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for perm in permutations(range(3)):
                    p = [i, j, k]
                    tet = [vid(*p)]
                    for ax in perm:
                        p[ax] += 1
                        tet.append(vid(*p))
                    cells.append(tet)
    cells = np.asarray(cells, dtype=np.int64)
    cnames = [subdomain] * len(cells)
    tol = 1e-12 * ext.max()
    sides = [("left", 0, 0), ("right", 0, -1), ("bottom", 1, 0), ("top", 1, -1), ("front", 2, 0), ("back", 2, -1)]

    def side(f, _name):
        p = vertices[f]
        for key, ax, end in sides:
            if np.all(np.abs(p[:, ax] - axes[ax][end]) < tol):
                return names[key]
        return None

    facets, fnames = _faces_from_cells(vertices, cells, cnames, side)
    return Mesh.from_names(vertices, cells, cnames, facets, fnames)


def _breakpoints(breaks: Sequence[float], divisions) -> tuple[np.ndarray, np.ndarray]:
    breaks = np.asarray(breaks, dtype=float)
    if np.any(np.diff(breaks) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    n_seg = len(breaks) - 1
    divs = [int(divisions)] * n_seg if np.isscalar(divisions) else [int(d) for d in divisions]
    if len(divs) != n_seg or min(divs) < 1:
        raise ValueError("one positive division count per segment is required")
    nodes = [breaks[:1]]
    owner = []
    for s, n in enumerate(divs):
        nodes.append(breaks[s] + (breaks[s + 1] - breaks[s]) * np.arange(1, n + 1) / n)
        owner += [s] * n
    return np.concatenate(nodes), np.asarray(owner)


def generate_polar_blocks(r_breaks, theta_breaks, nr, ntheta, region: Callable,
                          boundary: Callable, interface: Callable | None = None,
                          center=(0.0, 0.0)) -> Mesh:
    """Crossed-triangle mesh of a union of polar blocks.

    The parameter domain ``[r_breaks[0], r_breaks[-1]] x [theta_breaks[0],
    theta_breaks[-1]]`` is split into blocks by the break points;
    ``region(i, j)`` names block ``(radial layer i, angular segment j)`` or
    returns None for a hole. ``boundary(side, r, theta, cell_region)`` names
    a boundary facet, where ``side`` is ``"inner"``, ``"outer"``, ``"start"``,
    ``"end"`` or ``"hole"`` and ``(r, theta)`` is the facet midpoint in
    parameter space. ``interface(region_a, region_b)`` optionally labels
    facets between two regions.
    """
    r, r_owner = _breakpoints(r_breaks, nr)
    th, t_owner = _breakpoints(theta_breaks, ntheta)
    if r[0] <= 0:
        raise ValueError("inner radius must be positive")
    cx, cy = center

    def to_xy(p):
        return np.stack([cx + p[:, 0] * np.cos(p[:, 1]), cy + p[:, 0] * np.sin(p[:, 1])], axis=1)

    vertices, cells, cnames, params = _crossed_grid(
        r, th, to_xy, lambda i, j: region(int(r_owner[i]), int(t_owner[j])))
    rtol = 1e-12 * r[-1]
    ttol = 1e-12 * max(1.0, abs(th[-1] - th[0]))

    def side(f, name):
        p = params[f]
        mid = p.mean(axis=0)
        if np.all(np.abs(p[:, 0] - r[0]) < rtol):
            kind = "inner"
        elif np.all(np.abs(p[:, 0] - r[-1]) < rtol):
            kind = "outer"
        elif np.all(np.abs(p[:, 1] - th[0]) < ttol):
            kind = "start"
        elif np.all(np.abs(p[:, 1] - th[-1]) < ttol):
            kind = "end"
        else:
            kind = "hole"
        return boundary(kind, float(mid[0]), float(mid[1]), name)

    facets, fnames = _faces_from_cells(vertices, cells, cnames, side, interface)
    return Mesh.from_names(vertices, cells, cnames, facets, fnames)


def generate_annulus_sector(nr: int, ntheta: int, r_inner: float, r_outer: float,
                            theta0: float, theta1: float, labels: dict | None = None,
                            subdomain: str = "domain", center=(0.0, 0.0)) -> Mesh:
    """Crossed-triangle mesh of the wedge between two circular arcs.

    Boundary labels default to ``inner``, ``outer``, ``start`` and ``end``.
    """
    if nr < 1 or ntheta < 1:
        raise ValueError("divisions must be >= 1")
    if not 0 < r_inner < r_outer or theta1 <= theta0:
        raise ValueError("need 0 < r_inner < r_outer and theta0 < theta1")
    names = {"inner": "inner", "outer": "outer", "start": "start", "end": "end"}
    names.update(labels or {})
    return generate_polar_blocks(
        [r_inner, r_outer], [theta0, theta1], nr, ntheta,
        region=lambda i, j: subdomain,
        boundary=lambda kind, r, t, name: names.get(kind),
        center=center,
    )
