"""
Mesh module for the hdg-bddc solver.
Builds the structured triangulation of the unit square, its partition into
square subdomains and the classification of every mesh edge.
"""

import os
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Any

import numpy as np

from config import ConfigurationError

logger = logging.getLogger('hdg-bddc.mesh')

# Edge classes
DIRICHLET = 0
INTERIOR = 1
INTERFACE = 2

EDGE_CLASS_NAMES = {DIRICHLET: "dirichlet", INTERIOR: "interior", INTERFACE: "interface"}

# Local edge l of a triangle (v0, v1, v2) joins these local vertices
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))

SIDES = ("south", "east", "north", "west")


@dataclass(frozen=True)
class MeshConfig:
    """Number of subdomains per side (n) and elements per subdomain side (m)."""
    subdomains_per_side: int
    elements_per_subdomain_side: int

    def __post_init__(self):
        n, m = self.subdomains_per_side, self.elements_per_subdomain_side
        if int(n) != n or n < 1:
            raise ConfigurationError(f"subdomains_per_side must be a positive integer, got {n}")
        if int(m) != m or m < 1:
            raise ConfigurationError(f"elements_per_subdomain_side must be a positive integer, got {m}")

    @property
    def H(self) -> float:
        return 1.0 / self.subdomains_per_side

    @property
    def h(self) -> float:
        return self.H / self.elements_per_subdomain_side


@dataclass(frozen=True)
class MacroEdge:
    """
    Edge E_ij shared by two adjacent subdomains.

    The master side is the lower subdomain index; `normal` is its outward
    normal. Mesh edges are ordered by increasing global coordinate along the
    macro-edge, which is also the direction of the arc-length parameter.
    """
    index: int
    master: int
    slave: int
    orientation: str  # "vertical" or "horizontal"
    edges: np.ndarray
    normal: np.ndarray
    start: float  # coordinate where the parameter is -1
    length: float

    def parameter(self, points: np.ndarray) -> np.ndarray:
        """Map physical points on the macro-edge to s in [-1, 1]."""
        points = np.asarray(points, dtype=float)
        along = points[..., 1] if self.orientation == "vertical" else points[..., 0]
        return 2.0 * (along - self.start) / self.length - 1.0

    def side_sign(self, subdomain: int) -> float:
        """+1 on the master side, -1 on the other side (outward normal flip)."""
        if subdomain == self.master:
            return 1.0
        if subdomain == self.slave:
            return -1.0
        raise ValueError(f"Subdomain {subdomain} does not touch macro-edge {self.index}")


@dataclass(frozen=True)
class Mesh:
    """Immutable structured triangulation with subdomain ownership."""
    config: MeshConfig
    vertices: np.ndarray          # (nV, 2)
    triangles: np.ndarray         # (nT, 3), counter-clockwise
    subdomain_of: np.ndarray      # (nT,)
    edges: np.ndarray             # (nE, 2), sorted vertex pairs
    edge_triangles: np.ndarray    # (nE, 2), lower triangle index first, -1 if absent
    edge_normals: np.ndarray      # (nE, 2), from edge_triangles[:, 0] towards the other side
    edge_class: np.ndarray        # (nE,)
    triangle_edges: np.ndarray    # (nT, 3), edge id of local edge l
    element_normals: np.ndarray   # (nT, 3, 2), outward normal of local edge l
    subdomain_boundaries: List[Dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def num_subdomains(self) -> int:
        return self.config.subdomains_per_side ** 2

    @property
    def H(self) -> float:
        return self.config.H

    @property
    def h(self) -> float:
        return self.config.h

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def subdomain_triangles(self, subdomain: int) -> np.ndarray:
        return np.flatnonzero(self.subdomain_of == subdomain)

    def count_edges(self, edge_class: int) -> int:
        return int(np.count_nonzero(self.edge_class == edge_class))


def build_structured_mesh(cfg: MeshConfig) -> Mesh:
    """
    Build the (n*m) x (n*m) grid of squares, each cut by its lower-left to
    upper-right diagonal, and classify every edge.

    Args:
        cfg (MeshConfig): Subdomain and element counts.

    Returns:
        Mesh: The immutable mesh.
    """
    n = cfg.subdomains_per_side
    m = cfg.elements_per_subdomain_side
    N = n * m
    h = 1.0 / N

    gi, gj = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing='xy')
    vertices = np.column_stack([gi.ravel() * h, gj.ravel() * h])

    # Squares in row-major order (i fastest)
    si, sj = np.meshgrid(np.arange(N), np.arange(N), indexing='xy')
    si = si.ravel()
    sj = sj.ravel()
    v00 = sj * (N + 1) + si
    v10 = v00 + 1
    v01 = v00 + (N + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * N * N, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    square_sub = (sj // m) * n + (si // m)
    subdomain_of = np.repeat(square_sub, 2)

    # Edges from local triangle edges, numbered by sorted vertex pair
    local_pairs = np.stack([triangles[:, list(pair)] for pair in LOCAL_EDGES], axis=1)  # (nT, 3, 2)
    flat = np.sort(local_pairs.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    triangle_edges = inverse.reshape(-1, 3)

    # Outward normals of every local edge (triangles are counter-clockwise)
    tail = vertices[local_pairs[:, :, 0]]
    head = vertices[local_pairs[:, :, 1]]
    d = head - tail
    lengths = np.hypot(d[..., 0], d[..., 1])
    element_normals = np.stack([d[..., 1], -d[..., 0]], axis=-1) / lengths[..., None]

    n_edges = edges.shape[0]
    order = np.argsort(inverse, kind='stable')
    counts = np.bincount(inverse, minlength=n_edges)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    owner_tri = order // 3
    owner_local = order % 3

    edge_triangles = np.full((n_edges, 2), -1, dtype=np.int64)
    edge_triangles[:, 0] = owner_tri[starts]
    two = counts == 2
    edge_triangles[two, 1] = owner_tri[starts[two] + 1]
    edge_normals = element_normals[owner_tri[starts], owner_local[starts]]

    edge_class = np.full(n_edges, INTERIOR, dtype=np.int8)
    edge_class[counts == 1] = DIRICHLET
    cross = two & (subdomain_of[edge_triangles[:, 0]] != subdomain_of[np.maximum(edge_triangles[:, 1], 0)])
    edge_class[cross] = INTERFACE

    subdomain_boundaries = _subdomain_boundaries(edges, N, n, m)

    mesh = Mesh(
        config=cfg,
        vertices=vertices,
        triangles=triangles,
        subdomain_of=subdomain_of,
        edges=edges,
        edge_triangles=edge_triangles,
        edge_normals=edge_normals,
        edge_class=edge_class,
        triangle_edges=triangle_edges,
        element_normals=element_normals,
        subdomain_boundaries=subdomain_boundaries,
    )
    for arr in (vertices, triangles, subdomain_of, edges, edge_triangles, edge_normals,
                edge_class, triangle_edges, element_normals):
        arr.setflags(write=False)

    logger.info(f"Built mesh: {n}x{n} subdomains, H/h={m}, {triangles.shape[0]} triangles, "
                f"{n_edges} edges ({mesh.count_edges(INTERFACE)} on the interface)")
    return mesh


def _subdomain_boundaries(edges: np.ndarray, N: int, n: int, m: int) -> List[Dict[str, np.ndarray]]:
    """Ordered mesh edges on the four sides of every subdomain."""
    ai, aj = edges[:, 0] % (N + 1), edges[:, 0] // (N + 1)
    bi, bj = edges[:, 1] % (N + 1), edges[:, 1] // (N + 1)
    horizontal = {}
    vertical = {}
    for e in range(edges.shape[0]):
        if aj[e] == bj[e]:
            horizontal[(int(min(ai[e], bi[e])), int(aj[e]))] = e
        elif ai[e] == bi[e]:
            vertical[(int(ai[e]), int(min(aj[e], bj[e])))] = e

    boundaries = []
    for sub in range(n * n):
        sx, sy = sub % n, sub // n
        x0, y0 = sx * m, sy * m
        boundaries.append({
            "south": np.array([horizontal[(x0 + a, y0)] for a in range(m)], dtype=np.int64),
            "east": np.array([vertical[(x0 + m, y0 + a)] for a in range(m)], dtype=np.int64),
            "north": np.array([horizontal[(x0 + a, y0 + m)] for a in range(m)], dtype=np.int64),
            "west": np.array([vertical[(x0, y0 + a)] for a in range(m)], dtype=np.int64),
        })
    return boundaries


def macro_edges(mesh: Mesh) -> List[MacroEdge]:
    """
    One MacroEdge per pair of adjacent subdomains, sorted by (master, slave).

    Args:
        mesh (Mesh): The mesh.

    Returns:
        List[MacroEdge]: Macro-edges of the interface.
    """
    n = mesh.config.subdomains_per_side
    H = mesh.H
    pairs = []
    for sub in range(n * n):
        sx, sy = sub % n, sub // n
        if sx + 1 < n:
            pairs.append((sub, sub + 1, "vertical"))
        if sy + 1 < n:
            pairs.append((sub, sub + n, "horizontal"))
    pairs.sort(key=lambda p: (p[0], p[1]))

    result = []
    for idx, (a, b, orientation) in enumerate(pairs):
        sx, sy = a % n, a // n
        if orientation == "vertical":
            edges = mesh.subdomain_boundaries[a]["east"]
            normal = np.array([1.0, 0.0])
            start = sy * H
        else:
            edges = mesh.subdomain_boundaries[a]["north"]
            normal = np.array([0.0, 1.0])
            start = sx * H
        result.append(MacroEdge(index=idx, master=a, slave=b, orientation=orientation,
                                edges=edges, normal=normal, start=start, length=H))
    logger.debug(f"Found {len(result)} macro-edges")
    return result


def mesh_to_dict(mesh: Mesh) -> Dict[str, Any]:
    """Serializable view of the mesh (vertices, triangles, edge classes)."""
    return {
        "subdomains_per_side": mesh.config.subdomains_per_side,
        "elements_per_subdomain_side": mesh.config.elements_per_subdomain_side,
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "triangle_subdomain": mesh.subdomain_of.tolist(),
        "edges": mesh.edges.tolist(),
        "edge_class": [EDGE_CLASS_NAMES[int(c)] for c in mesh.edge_class],
    }


def dump_mesh(mesh: Mesh, file_path: str) -> str:
    """Write the mesh as JSON for debugging and return the path."""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(mesh_to_dict(mesh), f, indent=2)
    logger.info(f"Mesh dumped to {file_path}")
    return file_path
