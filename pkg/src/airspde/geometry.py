"""Triangular meshes, piecewise-linear FEM matrices and observation projectors.

Coordinates are planar kilometres. A mesh built by :func:`build_mesh` has a
fine inner region (the convex hull of the seed points, slightly offset) and
a coarse outer band that keeps the SPDE boundary conditions away from the
data.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp
import triangle as tr
from scipy.spatial import ConvexHull, Delaunay, cKDTree

log = logging.getLogger(__name__)

# Triangle guarantees termination for minimum angles up to ~33.8 degrees.
_MIN_ANGLE = 28.0
_MAX_REFINE_ROUNDS = 40


class MeshError(ValueError):
    """Invalid mesh input or degenerate geometry."""


@dataclass(frozen=True, eq=False)
class TriangularMesh:
    """Triangulation of the spatial domain.

    Attributes
    ----------
    vertices : (n, 2) array
        Vertex coordinates in km.
    triangles : (m, 3) int array
        Counter-clockwise vertex index triples.
    inner_boundary : (k, 2) array
        Polygon enclosing the study region (counter-clockwise).
    outer_extension_width : float
        Width of the coarse band outside ``inner_boundary``.
    seed_index : (s,) int array
        For every input point given to :func:`build_mesh`, the vertex it was
        mapped to (after cutoff merging). Empty for meshes read from disk.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    inner_boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    outer_extension_width: float = 0.0
    seed_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        """(m, 3) lengths of the edges opposite each triangle corner."""
        p = self.vertices[self.triangles]
        return np.stack(
            [
                np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
                np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
            ],
            axis=1,
        )

    def inner_triangles(self) -> np.ndarray:
        """Boolean mask of triangles whose centroid lies inside ``inner_boundary``."""
        if len(self.inner_boundary) < 3:
            return np.ones(self.n_triangles, dtype=bool)
        centroids = self.vertices[self.triangles].mean(axis=1)
        return points_in_polygon(centroids, self.inner_boundary)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test (boundary points may go either way)."""
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    x0, y0 = polygon[:, 0], polygon[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1


def _merge_close(points: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy merge: each point joins the first kept point within ``cutoff``."""
    if cutoff <= 0:
        kept, index = np.unique(points, axis=0, return_index=True)
        order = np.sort(index)
        kept = points[order]
        lookup = {tuple(p): i for i, p in enumerate(kept)}
        return kept, np.array([lookup[tuple(p)] for p in points], dtype=np.int64)
    tree = cKDTree(points)
    owner = np.full(len(points), -1, dtype=np.int64)
    kept = []
    for i in range(len(points)):
        if owner[i] >= 0:
            continue
        k = len(kept)
        kept.append(points[i])
        for j in tree.query_ball_point(points[i], cutoff):
            if owner[j] < 0 and np.linalg.norm(points[j] - points[i]) < cutoff:
                owner[j] = k
    return np.asarray(kept), owner


def _offset_convex(points: np.ndarray, distance: float, n_arc: int) -> np.ndarray:
    """Counter-clockwise convex polygon approximating the hull of ``points`` grown by ``distance``."""
    hull = points[ConvexHull(points).vertices]
    if distance > 0:
        angles = np.linspace(0.0, 2 * np.pi, n_arc, endpoint=False)
        ring = distance * np.column_stack([np.cos(angles), np.sin(angles)])
        grown = (hull[:, None, :] + ring[None, :, :]).reshape(-1, 2)
        hull = grown[ConvexHull(grown).vertices]
    return hull


def _densify(polygon: np.ndarray, max_edge: float) -> np.ndarray:
    out = []
    for a, b in zip(polygon, np.roll(polygon, -1, axis=0)):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / max_edge)))
        t = np.arange(n)[:, None] / n
        out.append(a + t * (b - a))
    return np.vstack(out)


def _check_not_collinear(points: np.ndarray) -> None:
    if len(points) < 3:
        raise MeshError(f"need at least 3 distinct points after merging, got {len(points)}")
    centred = points - points.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[1] <= 1e-10 * max(s[0], 1.0):
        raise MeshError("input points are collinear; cannot triangulate a 2-D domain")


def _equilateral_area(edge: float) -> float:
    return np.sqrt(3.0) / 4.0 * edge**2


def build_mesh(
    points,
    inner_max_edge: float,
    outer_max_edge: float,
    cutoff: float = 0.0,
    extension: float | None = None,
    inner_offset: float | None = None,
) -> TriangularMesh:
    """Constrained Delaunay mesh seeded by ``points``.

    Parameters
    ----------
    points : (n, 2) array_like
        Seed locations in km (typically monitoring stations). Seeds closer
        than ``cutoff`` are merged and every surviving seed is a mesh vertex.
    inner_max_edge, outer_max_edge : float
        Maximum triangle edge length inside the study region and in the
        outer band.
    cutoff : float
        Merge distance for seeds.
    extension : float, optional
        Width of the outer band. Defaults to ``2 * outer_max_edge``.
    inner_offset : float, optional
        How far the inner boundary sits outside the convex hull of the seeds.
        Defaults to ``inner_max_edge``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise MeshError(f"expected a non-empty (n, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise MeshError("points contain non-finite coordinates")
    if not 0 < inner_max_edge <= outer_max_edge:
        raise MeshError("require 0 < inner_max_edge <= outer_max_edge")
    if cutoff < 0:
        raise MeshError("cutoff must be non-negative")
    extension = 2.0 * outer_max_edge if extension is None else float(extension)
    inner_offset = inner_max_edge if inner_offset is None else float(inner_offset)
    if extension <= 0 or inner_offset < 0:
        raise MeshError("extension must be positive and inner_offset non-negative")

    seeds, seed_index = _merge_close(pts, cutoff)
    _check_not_collinear(seeds)

    inner = _offset_convex(seeds, inner_offset, n_arc=8)
    outer = _offset_convex(seeds, inner_offset + extension, n_arc=16)
    inner = _densify(inner, inner_max_edge)
    outer = _densify(outer, outer_max_edge)

    if inner_offset > 0:
        ring_inner = inner
        vertices = np.vstack([seeds, inner, outer])
        inner_ids = len(seeds) + np.arange(len(inner))
        outer_ids = len(seeds) + len(inner) + np.arange(len(outer))
    else:
        # inner ring runs through hull seeds; densified points are new vertices
        tree = cKDTree(seeds)
        dist, near = tree.query(inner)
        is_seed = dist < 1e-9 * max(1.0, np.abs(seeds).max())
        extra = inner[~is_seed]
        ring_inner = inner
        inner_ids = np.empty(len(inner), dtype=np.int64)
        inner_ids[is_seed] = near[is_seed]
        inner_ids[~is_seed] = len(seeds) + np.arange(len(extra))
        vertices = np.vstack([seeds, extra, outer])
        outer_ids = len(seeds) + len(extra) + np.arange(len(outer))

    segments = np.vstack(
        [
            np.column_stack([inner_ids, np.roll(inner_ids, -1)]),
            np.column_stack([outer_ids, np.roll(outer_ids, -1)]),
        ]
    )
    opts = f"pq{_MIN_ANGLE}"
    result = tr.triangulate(
        {"vertices": vertices, "segments": segments},
        opts + f"a{_equilateral_area(outer_max_edge):.17g}",
    )

    for _ in range(_MAX_REFINE_ROUNDS):
        verts = result["vertices"]
        tris = result["triangles"]
        mesh = TriangularMesh(verts, tris, ring_inner, extension)
        target = np.where(mesh.inner_triangles(), inner_max_edge, outer_max_edge)
        too_long = mesh.edge_lengths().max(axis=1) > target * (1 + 1e-9)
        if not too_long.any():
            break
        area = np.abs(mesh.signed_areas())
        max_area = np.where(too_long, np.minimum(0.5 * area, _equilateral_area(target)), -1.0)
        result = tr.triangulate(
            {
                "vertices": verts,
                "segments": result["segments"],
                "triangles": tris,
                "triangle_max_area": max_area,
            },
            "r" + opts + "a",
        )
    else:
        raise MeshError("mesh refinement did not reach the requested edge lengths")

    verts = np.asarray(result["vertices"], dtype=np.float64)
    tris = np.asarray(result["triangles"], dtype=np.int64)
    mesh = _oriented(TriangularMesh(verts, tris, ring_inner, extension, seed_index))
    log.info(
        "mesh: %d vertices, %d triangles (%d seeds)", mesh.n_vertices, mesh.n_triangles, len(seeds)
    )
    return mesh


def _oriented(mesh: TriangularMesh) -> TriangularMesh:
    area = mesh.signed_areas()
    tris = mesh.triangles.copy()
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriangularMesh(
        mesh.vertices, tris, mesh.inner_boundary, mesh.outer_extension_width, mesh.seed_index
    )


def regular_mesh(x0: float, y0: float, x1: float, y1: float, edge: float) -> TriangularMesh:
    """Near-equilateral lattice mesh of a rectangle with edge length at most ``edge``.

    Rows are spaced ``edge * sqrt(3) / 2`` apart and alternate rows are
    shifted by half an edge; the left and right borders get extra vertices so
    the rectangle is covered exactly.
    """
    if edge <= 0 or x1 <= x0 or y1 <= y0:
        raise MeshError("need edge > 0 and a non-empty rectangle")
    ny = int(np.ceil((y1 - y0) / (edge * np.sqrt(3.0) / 2.0) - 1e-9))
    ys = np.linspace(y0, y1, ny + 1)
    nx = int(np.ceil((x1 - x0) / edge - 1e-9))
    h = (x1 - x0) / nx
    rows = []
    for j, y in enumerate(ys):
        if j % 2 == 0:
            xs = x0 + h * np.arange(nx + 1)
        else:
            xs = np.concatenate([[x0], x0 + h * (np.arange(nx) + 0.5), [x1]])
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    vertices = np.vstack(rows)
    tris = Delaunay(vertices).simplices.astype(np.int64)
    boundary = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    return _oriented(TriangularMesh(vertices, tris, boundary, 0.0))


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass matrix ``C`` (diagonal, km^2) and stiffness matrix ``G``."""

    C: sp.csr_matrix
    G: sp.csr_matrix

    @property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()


def fem_matrices(mesh: TriangularMesh) -> FemMatrices:
    """Assemble the lumped mass and P1 stiffness matrices."""
    area = mesh.signed_areas()
    bad = np.flatnonzero(np.abs(area) <= 1e-14 * max(1.0, np.abs(mesh.vertices).max()) ** 2)
    if bad.size:
        i = int(bad[0])
        raise MeshError(f"triangle {i} {mesh.triangles[i].tolist()} has zero area")
    area = np.abs(area)
    p = mesh.vertices[mesh.triangles]
    # edge opposite corner k, rotated by 90 degrees, over 2*area is grad(phi_k)
    edges = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tid,tjd->tij", edges, edges) / (4.0 * area)[:, None, None]
    # sign: grad(phi_i).grad(phi_j) = e_i.e_j / (4 A^2) with consistent orientation
    n = mesh.n_vertices
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    G.sum_duplicates()
    c = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    if np.any(c <= 0):
        orphan = int(np.flatnonzero(c <= 0)[0])
        raise MeshError(f"vertex {orphan} belongs to no triangle")
    return FemMatrices(C=sp.diags(c, format="csr"), G=G)


@dataclass(frozen=True, eq=False)
class ProjectorMatrix:
    """Sparse barycentric interpolation matrix from mesh vertices to locations."""

    A: sp.csr_matrix
    outside: np.ndarray


class _Locator:
    def __init__(self, mesh: TriangularMesh):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self._p0 = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # inverse of [e1 e2] per triangle
        self._inv = np.stack(
            [np.stack([e2[:, 1], -e2[:, 0]], -1), np.stack([-e1[:, 1], e1[:, 0]], -1)], axis=1
        ) / det[:, None, None]
        self._tree = cKDTree(p.mean(axis=1))
        scale = np.sqrt(np.median(np.abs(det)))
        self._tol = 1e-12 * max(1.0, scale)

    def barycentric(self, tri: np.ndarray, q: np.ndarray) -> np.ndarray:
        d = q - self._p0[tri]
        l12 = np.einsum("...ij,...j->...i", self._inv[tri], d)
        return np.concatenate([1.0 - l12.sum(-1, keepdims=True), l12], axis=-1)

    def locate(self, q: np.ndarray, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
        n = len(q)
        found = np.full(n, -1, dtype=np.int64)
        weights = np.zeros((n, 3))
        m = self.mesh.n_triangles
        k = min(k, m)
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand).reshape(n, k)
        lam = self.barycentric(cand, q[:, None, :])
        ok = np.all(lam >= -1e-12, axis=-1)
        hit = ok.any(axis=1)
        first = ok.argmax(axis=1)
        rows = np.flatnonzero(hit)
        found[rows] = cand[rows, first[rows]]
        weights[rows] = lam[rows, first[rows]]
        for i in np.flatnonzero(~hit):
            tri, w = self._brute(q[i])
            if tri >= 0:
                found[i] = tri
                weights[i] = w
        return found, weights

    def _brute(self, point: np.ndarray) -> tuple[int, np.ndarray]:
        all_tris = np.arange(self.mesh.n_triangles)
        lam = self.barycentric(all_tris, np.broadcast_to(point, (len(all_tris), 2)))
        ok = np.flatnonzero(np.all(lam >= -1e-12, axis=1))
        if ok.size == 0:
            return -1, np.zeros(3)
        return int(ok[0]), lam[ok[0]]


def projector(mesh: TriangularMesh, locations) -> ProjectorMatrix:
    """Barycentric projector; rows of points outside the mesh are all zero."""
    q = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    n = len(q)
    if n == 0:
        return ProjectorMatrix(sp.csr_matrix((0, mesh.n_vertices)), np.zeros(0, dtype=bool))
    locator = _Locator(mesh)
    outside = np.zeros(n, dtype=bool)
    # cheap rejection against the vertex hull before any per-point search
    hull = ConvexHull(mesh.vertices)
    eq = hull.equations
    span = np.abs(mesh.vertices).max()
    beyond = np.any(q @ eq[:, :2].T + eq[:, 2] > 1e-9 * max(1.0, span), axis=1)
    outside[beyond] = True
    tri = np.full(n, -1, dtype=np.int64)
    w = np.zeros((n, 3))
    inside_idx = np.flatnonzero(~beyond)
    if inside_idx.size:
        t, lam = locator.locate(q[inside_idx])
        tri[inside_idx] = t
        w[inside_idx] = lam
    outside |= tri < 0
    w[outside] = 0.0
    w = np.where(np.abs(w) < 1e-12, 0.0, np.clip(w, 0.0, None))
    sums = w.sum(axis=1)
    w[~outside] /= sums[~outside, None]
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[np.maximum(tri, 0)].ravel()
    A = sp.coo_matrix((w.ravel(), (rows, cols)), shape=(n, mesh.n_vertices)).tocsr()
    A.eliminate_zeros()
    return ProjectorMatrix(A=A, outside=outside)


def write_mesh(mesh: TriangularMesh, directory) -> None:
    """Write ``vertices.csv`` (id,x,y), ``triangles.csv`` (v1,v2,v3) and ``boundary.csv``."""
    os.makedirs(directory, exist_ok=True)
    pd.DataFrame(
        {"id": np.arange(mesh.n_vertices), "x": mesh.vertices[:, 0], "y": mesh.vertices[:, 1]}
    ).to_csv(os.path.join(directory, "vertices.csv"), index=False, float_format="%.17g")
    pd.DataFrame(mesh.triangles, columns=["v1", "v2", "v3"]).to_csv(
        os.path.join(directory, "triangles.csv"), index=False
    )
    if len(mesh.inner_boundary):
        b = pd.DataFrame(mesh.inner_boundary, columns=["x", "y"])
        b.insert(0, "id", np.arange(len(b)))
        with open(os.path.join(directory, "boundary.csv"), "w") as fh:
            fh.write(f"# outer_extension_width={mesh.outer_extension_width!r}\n")
            b.to_csv(fh, index=False, float_format="%.17g")


def read_mesh(directory) -> TriangularMesh:
    """Inverse of :func:`write_mesh`; ``boundary.csv`` is optional."""
    v = pd.read_csv(os.path.join(directory, "vertices.csv"), float_precision="round_trip")
    t = pd.read_csv(os.path.join(directory, "triangles.csv"))
    v = v.sort_values("id")
    if not np.array_equal(v["id"].to_numpy(), np.arange(len(v))):
        raise MeshError("vertex ids must be 0..n-1")
    tris = t[["v1", "v2", "v3"]].to_numpy(dtype=np.int64)
    if tris.min() < 0 or tris.max() >= len(v):
        raise MeshError("triangle refers to an unknown vertex")
    boundary = np.zeros((0, 2))
    extension = 0.0
    bpath = os.path.join(directory, "boundary.csv")
    if os.path.exists(bpath):
        with open(bpath) as fh:
            first = fh.readline()
        if first.startswith("# outer_extension_width="):
            extension = float(first.split("=", 1)[1])
        b = pd.read_csv(bpath, comment="#", float_precision="round_trip")
        boundary = b[["x", "y"]].to_numpy(dtype=np.float64)
    return _oriented(
        TriangularMesh(v[["x", "y"]].to_numpy(dtype=np.float64), tris, boundary, extension)
    )
