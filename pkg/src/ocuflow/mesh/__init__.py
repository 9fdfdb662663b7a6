"""Tagged simplicial meshes: generation, MSH I/O and submesh extraction."""
from .core import (
    Mesh,
    MeshError,
    MeshStats,
    SubMesh,
    extract_subdomain,
    facet_normals,
    mesh_stats,
)
from .generate import generate_annulus_sector, generate_box, generate_polar_blocks, generate_rect
from .msh import MshParseError, load_msh, write_msh

__all__ = [
    "Mesh", "MeshError", "MeshStats", "MshParseError", "SubMesh",
    "extract_subdomain", "facet_normals", "generate_annulus_sector", "generate_box",
    "generate_polar_blocks", "generate_rect", "load_msh", "mesh_stats", "write_msh",
]
