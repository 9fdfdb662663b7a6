"""Reader and writer for ASCII Gmsh MSH 4.1 files."""
from __future__ import annotations

import os
import shlex
import warnings

import numpy as np

from .core import Mesh, MeshError

# element type -> (topological dim, nodes per element)
_ELEMENTS = {15: (0, 1), 1: (1, 2), 2: (2, 3), 4: (3, 4)}


class MshParseError(MeshError):
    """Malformed MSH content; the message carries the offending line number."""


class _Lines:
    def __init__(self, text: str, path: str):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def error(self, msg: str, lineno: int | None = None) -> MshParseError:
        n = self.pos if lineno is None else lineno
        return MshParseError(f"{self.path}:{n}: {msg}")

    def next(self) -> tuple[int, str]:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return self.pos, line
        raise self.error("unexpected end of file")

    def numbers(self, count: int | None = None, kind=int) -> list:
        lineno, line = self.next()
        try:
            vals = [kind(t) for t in line.split()]
        except ValueError:
            raise self.error(f"expected numbers, got {line!r}", lineno) from None
        if count is not None and len(vals) < count:
            raise self.error(f"expected {count} values, got {len(vals)}", lineno)
        return vals

    def expect(self, token: str):
        lineno, line = self.next()
        if line != token:
            raise self.error(f"expected {token}, got {line!r}", lineno)


def load_msh(path) -> Mesh:
    """Load an ASCII MSH 4.1 file.

    Cells are the elements of the highest dimension present (triangles or
    tetrahedra); elements one dimension lower become labelled facets.
    Physical-group names are kept as label names. Entities without a
    physical group give cells the label ``"unlabeled"``; unlabelled lower
    dimensional elements are dropped. Nodes not referenced by any element are
    removed.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    MshParseError
        On malformed content, unsupported versions or binary files, and on
        elements referencing undefined node tags.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise MshParseError(f"{path}: binary or non-ASCII MSH content is not supported") from None
    src = _Lines(text, path)

    phys_names: dict[tuple[int, int], str] = {}
    entity_phys: dict[tuple[int, int], list[int]] = {}
    node_tags: list[np.ndarray] = []
    node_xyz: list[np.ndarray] = []
    blocks: list[tuple[int, int, int, np.ndarray]] = []
    seen_format = False

    while src.pos < len(src.lines):
        if not src.lines[src.pos].strip():
            src.pos += 1
            continue
        lineno, head = src.next()
        if not head.startswith("$"):
            raise src.error(f"expected a section header, got {head!r}", lineno)
        name = head[1:]
        if name == "MeshFormat":
            ver = src.numbers(kind=str)
            if len(ver) < 3:
                raise src.error("malformed $MeshFormat line")
            if ver[0] != "4.1":
                raise MshParseError(f"{path}: unsupported MSH version {ver[0]} (only 4.1 is supported)")
            if ver[1] != "0":
                raise MshParseError(f"{path}: binary MSH files are not supported")
            seen_format = True
        elif not seen_format:
            raise src.error("$MeshFormat must come first", lineno)
        elif name == "PhysicalNames":
            (n,) = src.numbers(1)[:1]
            for _ in range(n):
                ln, line = src.next()
                try:
                    parts = shlex.split(line)
                    phys_names[(int(parts[0]), int(parts[1]))] = parts[2]
                except (ValueError, IndexError):
                    raise src.error(f"malformed physical name {line!r}", ln) from None
        elif name == "Entities":
            counts = src.numbers(4)
            for dim, n in enumerate(counts[:4]):
                for _ in range(n):
                    ln, line = src.next()
                    tok = line.split()
                    try:
                        tag = int(tok[0])
                        at = 4 if dim == 0 else 7
                        n_phys = int(tok[at])
                        phys = [int(t) for t in tok[at + 1: at + 1 + n_phys]]
                    except (ValueError, IndexError):
                        raise src.error(f"malformed entity line {line!r}", ln) from None
                    if len(phys) != n_phys:
                        raise src.error("truncated physical tag list", ln)
                    entity_phys[(dim, tag)] = phys
        elif name == "Nodes":
            n_blocks = src.numbers(4)[0]
            for _ in range(n_blocks):
                _, _, parametric, n = src.numbers(4)[:4]
                if parametric:
                    raise src.error("parametric node coordinates are not supported")
                tags = np.array([src.numbers(1)[0] for _ in range(n)], dtype=np.int64)
                xyz = np.array([src.numbers(3, float)[:3] for _ in range(n)], dtype=float).reshape(n, 3)
                node_tags.append(tags)
                node_xyz.append(xyz)
        elif name == "Elements":
            n_blocks = src.numbers(4)[0]
            for _ in range(n_blocks):
                ln0 = src.pos + 1
                edim, etag, etype, n = src.numbers(4)[:4]
                if etype not in _ELEMENTS:
                    raise src.error(f"unsupported element type {etype}", ln0)
                k = _ELEMENTS[etype][1]
                conn = np.empty((n, k), dtype=np.int64)
                for i in range(n):
                    vals = src.numbers(k + 1)
                    conn[i] = vals[1: k + 1]
                blocks.append((edim, etag, etype, conn))
        else:
            warnings.warn(f"{path}: skipping unsupported section ${name}", stacklevel=2)
            end = f"$End{name}"
            while src.pos < len(src.lines) and src.lines[src.pos].strip() != end:
                src.pos += 1
            if src.pos >= len(src.lines):
                raise src.error(f"missing {end}")
            src.pos += 1
            continue
        src.expect(f"$End{name}")

    if not seen_format:
        raise MshParseError(f"{path}: missing $MeshFormat section")
    if not node_tags:
        raise MshParseError(f"{path}: no $Nodes section")
    tags = np.concatenate(node_tags)
    xyz = np.concatenate(node_xyz)
    dims = [_ELEMENTS[b[2]][0] for b in blocks]
    if not dims or max(dims) < 2:
        raise MshParseError(f"{path}: no triangle or tetrahedron elements")
    dim = max(dims)

    order = np.argsort(tags, kind="stable")
    stags = tags[order]

    def lookup(conn):
        pos = np.clip(np.searchsorted(stags, conn), 0, len(stags) - 1)
        missing = stags[pos] != conn
        if np.any(missing):
            bad = int(conn[missing][0])
            raise MshParseError(f"{path}: element references undefined node tag {bad}")
        return order[pos]

    cells, cell_tag, facets, facet_tag = [], [], [], []
    sub_names: dict[int, str] = {}
    bnd_names: dict[int, str] = {}
    unlabeled = None
    for (edim, etag, etype, conn), d in zip(blocks, dims):
        if d not in (dim, dim - 1):
            continue
        phys = entity_phys.get((edim, etag), [])
        if len(phys) > 1:
            warnings.warn(f"{path}: entity ({edim}, {etag}) has several physical groups; using {phys[0]}", stacklevel=2)
        idx = lookup(conn)
        if d == dim:
            if phys:
                tag = phys[0]
                sub_names[tag] = phys_names.get((dim, tag), str(tag))
            else:
                if unlabeled is None:
                    unlabeled = -1
                tag = unlabeled
            cells.append(idx)
            cell_tag.append(np.full(len(idx), tag, dtype=np.int64))
        elif phys:
            tag = phys[0]
            bnd_names[tag] = phys_names.get((dim - 1, tag), str(tag))
            facets.append(idx)
            facet_tag.append(np.full(len(idx), tag, dtype=np.int64))

    cells = np.concatenate(cells)
    cell_tag = np.concatenate(cell_tag)
    if unlabeled is not None:
        fresh = max(sub_names, default=0) + 1
        cell_tag[cell_tag == -1] = fresh
        sub_names[fresh] = "unlabeled"
    facets = np.concatenate(facets) if facets else np.zeros((0, dim), dtype=np.int64)
    facet_tag = np.concatenate(facet_tag) if facet_tag else np.zeros(0, dtype=np.int64)

    used, inv = np.unique(np.concatenate([cells.ravel(), facets.ravel()]), return_inverse=True)
    cells_l = inv[: cells.size].reshape(cells.shape)
    facets_l = inv[cells.size:].reshape(facets.shape)
    vertices = xyz[used, :dim]
    if dim == 2 and np.any(xyz[used, 2] != 0.0):
        raise MshParseError(f"{path}: 2D mesh with nonzero z coordinates")
    return Mesh(vertices, cells_l, cell_tag, facets_l, facet_tag, sub_names, bnd_names)


def write_msh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as ASCII MSH 4.1.

    Each subdomain and boundary label becomes one entity carrying a physical
    group of the same tag and name. Coordinates are written with 17
    significant digits so a reload reproduces them exactly.
    """
    path = os.fspath(path)
    dim = mesh.dim
    sub_tags = sorted(mesh.subdomain_names)
    bnd_tags = sorted(np.unique(mesh.facet_labels).tolist())
    xyz = np.zeros((mesh.n_vertices, 3))
    xyz[:, :dim] = mesh.vertices
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    box = " ".join(f"{v:.17g}" for v in (*lo, *hi))
    cell_type = 2 if dim == 2 else 4
    facet_type = 1 if dim == 2 else 2

    out = ["$MeshFormat", "4.1 0 8", "$EndMeshFormat", "$PhysicalNames"]
    names = [(dim - 1, t, mesh.boundary_names[t]) for t in bnd_tags]
    names += [(dim, t, mesh.subdomain_names[t]) for t in sub_tags]
    out.append(str(len(names)))
    for d, t, n in names:
        if '"' in n:
            raise ValueError(f"label name {n!r} contains a double quote")
        out.append(f'{d} {t} "{n}"')
    out += ["$EndPhysicalNames", "$Entities"]
    counts = [0, 0, 0, 0]
    counts[dim - 1] = len(bnd_tags)
    counts[dim] = len(sub_tags)
    out.append(" ".join(map(str, counts)))
    for tags in (bnd_tags, sub_tags):
        for t in tags:
            out.append(f"{t} {box} 1 {t} 0")
    out.append("$EndEntities")

    n = mesh.n_vertices
    out += ["$Nodes", f"1 {n} 1 {n}", f"{dim} {sub_tags[0]} 0 {n}"]
    out += [str(i + 1) for i in range(n)]
    out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in xyz]
    out.append("$EndNodes")

    blocks = []
    for t in bnd_tags:
        blocks.append((dim - 1, t, facet_type, mesh.facets[mesh.facet_labels == t]))
    for t in sub_tags:
        blocks.append((dim, t, cell_type, mesh.cells[mesh.cell_labels == t]))
    blocks = [b for b in blocks if len(b[3])]
    total = sum(len(b[3]) for b in blocks)
    out += ["$Elements", f"{len(blocks)} {total} 1 {total}"]
    eid = 1
    for d, t, etype, conn in blocks:
        out.append(f"{d} {t} {etype} {len(conn)}")
        for row in conn:
            out.append(f"{eid} " + " ".join(str(v + 1) for v in row))
            eid += 1
    out.append("$EndElements")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(out) + "\n")
