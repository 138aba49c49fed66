"""Deformable tetrahedral grid and differentiable marching tetrahedra.

A :class:`TetGrid` tiles the unit cube with the six-tet Kuhn split of every
lattice cell. Each of the ``C`` classes owns an independent SDF field and an
independent per-vertex offset field, so a grid carries ``C`` deformable
tetrahedral meshes that share connectivity.

Coordinates stored on the grid (base vertices, offsets, SDF values) are in
normalized units; ``spacing_mm`` converts one normalized unit to millimetres.
Extracted surfaces are always reported in millimetres.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument

ZERO_EPS = 1e-12
OFFSET_CLAMP_FRACTION = 0.45
INIT_SPHERE_RADIUS = 0.25

# local edges of a tet, in the order used by the case table
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _kuhn_cell():
    """Six positively oriented tets of the unit cube, as corner bit codes.

    Corner code ``c`` sits at ``(c & 1, c >> 1 & 1, c >> 2 & 1)``. Each tet
    walks from corner 0 to corner 7 along one permutation of the axes.
    """
    corners = np.array([[c & 1, c >> 1 & 1, c >> 2 & 1] for c in range(8)], float)
    cell = []
    for perm in itertools.permutations(range(3)):
        a = 1 << perm[0]
        b = a | (1 << perm[1])
        tet = [0, a, b, 7]
        p = corners[tet]
        if np.linalg.det(p[1:] - p[0]) < 0:
            tet[2], tet[3] = tet[3], tet[2]
        cell.append(tet)
    return np.array(cell, dtype=np.int64), corners


KUHN_TETS, CUBE_CORNERS = _kuhn_cell()


def _build_case_table():
    """Oriented triangle table for the 16 sign configurations of a tet.

    Bit ``i`` of the configuration code is set when local vertex ``i`` is
    inside (negative SDF). Orientation is fixed once on a reference tet with
    positive volume: normals point from inside vertices to outside ones.
    Returns ``(ntri[16], edges[16, 2, 3, 2])``.
    """
    ref = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    ntri = np.zeros(16, dtype=np.int64)
    edges = np.zeros((16, 2, 3, 2), dtype=np.int64)
    for code in range(16):
        neg = [i for i in range(4) if code >> i & 1]
        pos = [i for i in range(4) if not code >> i & 1]
        if len(neg) in (0, 4):
            continue
        if len(neg) == 1 or len(neg) == 3:
            lone = neg[0] if len(neg) == 1 else pos[0]
            others = [i for i in range(4) if i != lone]
            tris = [[(lone, o) for o in others]]
        else:
            a, b = neg
            c, d = pos
            quad = [(a, c), (a, d), (b, d), (b, c)]
            tris = [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
        outward = ref[pos].mean(0) - ref[neg].mean(0)
        for k, tri in enumerate(tris):
            mid = np.array([(ref[i] + ref[j]) / 2 for i, j in tri])
            normal = np.cross(mid[1] - mid[0], mid[2] - mid[0])
            if normal @ outward < 0:
                tri = [tri[0], tri[2], tri[1]]
            edges[code, k] = [sorted(e) for e in tri]
        ntri[code] = len(tris)
    return ntri, edges


CASE_NTRI, CASE_EDGES = _build_case_table()


@dataclass
class TetGrid:
    resolution: int
    base_vertices: np.ndarray  # (V, 3) normalized
    tets: np.ndarray  # (T, 4) vertex indices, positively oriented
    class_count: int
    sdf: np.ndarray  # (C, V) normalized units, negative inside
    offsets: np.ndarray  # (C, V, 3) normalized units
    spacing_mm: float
    offset_clamp: float = None

    def __post_init__(self):
        if self.offset_clamp is None:
            self.offset_clamp = OFFSET_CLAMP_FRACTION * self.lattice_spacing

    @property
    def vertex_count(self):
        return self.base_vertices.shape[0]

    @property
    def lattice_spacing(self):
        """Distance between neighbouring lattice vertices, normalized units."""
        return 1.0 / (self.resolution - 1)

    @property
    def lattice_spacing_mm(self):
        return self.spacing_mm * self.lattice_spacing

    def positions(self, class_id):
        """Deformed vertex positions of one class, millimetres."""
        return (self.base_vertices + self.offsets[class_id]) * self.spacing_mm

    def tet_volumes(self, class_id, tets=None):
        """Signed volumes (mm^3) of the deformed tets of one class."""
        tets = self.tets if tets is None else tets
        p = self.positions(class_id)[tets]
        e = p[:, 1:] - p[:, :1]
        return np.einsum("ij,ij->i", e[:, 0], np.cross(e[:, 1], e[:, 2])) / 6.0

    def with_arrays(self, sdf=None, offsets=None, offset_clamp=None):
        """Copy sharing connectivity, with replaced per-class arrays."""
        return replace(
            self,
            sdf=self.sdf.copy() if sdf is None else np.asarray(sdf, float),
            offsets=self.offsets.copy() if offsets is None else np.asarray(offsets, float),
            offset_clamp=self.offset_clamp if offset_clamp is None else offset_clamp,
        )

    def validate(self):
        """Check structural invariants; raises InvalidArgument on violation."""
        V = self.vertex_count
        if self.class_count < 1:
            raise InvalidArgument("class_count must be >= 1")
        if self.sdf.shape != (self.class_count, V):
            raise InvalidArgument(f"sdf shape {self.sdf.shape} != {(self.class_count, V)}")
        if self.offsets.shape != (self.class_count, V, 3):
            raise InvalidArgument("offsets shape mismatch")
        if self.tets.min() < 0 or self.tets.max() >= V:
            raise InvalidArgument("tet index out of range")
        if np.abs(self.offsets).max(initial=0.0) > self.offset_clamp * (1 + 1e-12):
            raise InvalidArgument("offset exceeds clamp")


@lru_cache(maxsize=4)
def _lattice(resolution):
    R = resolution
    axis = np.linspace(0.0, 1.0, R)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    base = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    corner_off = (CUBE_CORNERS[:, 0] * R * R + CUBE_CORNERS[:, 1] * R + CUBE_CORNERS[:, 2]).astype(np.int64)
    c = np.arange(R - 1)
    CX, CY, CZ = np.meshgrid(c, c, c, indexing="ij")
    cell_base = (CX.ravel() * R * R + CY.ravel() * R + CZ.ravel()).astype(np.int64)
    tets = cell_base[:, None, None] + corner_off[KUHN_TETS][None]
    tets = tets.reshape(-1, 4)
    on_boundary = np.zeros((R, R, R), bool)
    on_boundary[[0, -1], :, :] = True
    on_boundary[:, [0, -1], :] = True
    on_boundary[:, :, [0, -1]] = True
    for arr in (base, tets, on_boundary):
        arr.setflags(write=False)
    return base, tets, on_boundary.ravel()


def sphere_sdf(points, center=(0.5, 0.5, 0.5), radius=INIT_SPHERE_RADIUS):
    return np.linalg.norm(np.asarray(points) - np.asarray(center), axis=-1) - radius


def build_grid(resolution, class_count, spacing_mm):
    """Kuhn-split lattice over [0,1]^3 with zero offsets and sphere SDFs.

    Every class starts from the centered sphere of radius 0.25.
    """
    if int(resolution) != resolution or resolution < 2:
        raise InvalidArgument(f"resolution must be an integer >= 2, got {resolution}")
    if int(class_count) != class_count or class_count < 1:
        raise InvalidArgument(f"class_count must be an integer >= 1, got {class_count}")
    if not spacing_mm > 0:
        raise InvalidArgument(f"spacing_mm must be positive, got {spacing_mm}")
    resolution, class_count = int(resolution), int(class_count)
    base, tets, _ = _lattice(resolution)
    sdf = np.tile(sphere_sdf(base), (class_count, 1))
    offsets = np.zeros((class_count, base.shape[0], 3))
    return TetGrid(resolution, base, tets, class_count, sdf, offsets, float(spacing_mm))


def apply_motion(grid, motion, clamp=None):
    """Move grid vertices by ``motion`` (normalized units); SDFs are untouched.

    Offsets become ``clip(offsets + motion, -clamp, clamp)``. ``clamp``
    defaults to the grid's own offset clamp.
    """
    motion = np.asarray(motion, float)
    if motion.shape != grid.offsets.shape:
        raise InvalidArgument(f"motion shape {motion.shape} != offsets shape {grid.offsets.shape}")
    clamp = grid.offset_clamp if clamp is None else float(clamp)
    offsets = np.clip(grid.offsets + motion, -clamp, clamp)
    return grid.with_arrays(offsets=offsets, offset_clamp=clamp)


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (N, 3) mm
    triangles: np.ndarray  # (M, 3)
    class_id: int = 0
    source_tet: np.ndarray = None  # (N,) lowest tet that generated the vertex
    source_edge: np.ndarray = None  # (N, 2) grid vertices (a, b), a < b
    source_t: np.ndarray = None  # (N,) p = v_a + t (v_b - v_a)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1, 3)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    @property
    def open_surface(self):
        return "open-surface" in self.warnings

    def flipped(self):
        return replace(self, triangles=self.triangles[:, ::-1].copy())

    def transformed(self, fn):
        return replace(self, vertices=fn(self.vertices))


@dataclass
class SurfaceGradients:
    """Jacobians of surface vertices w.r.t. their two generating grid vertices.

    ``d_vertex_d_sdf[i, k]`` is dp_i/ds for grid vertex ``grid_vertex[i, k]``
    (mm per SDF unit). The position Jacobian is ``weight[i, k] * I``: dp_i/dv
    with v the physical (mm) grid-vertex position.
    """

    grid_vertex: np.ndarray  # (N, 2)
    d_vertex_d_sdf: np.ndarray  # (N, 2, 3)
    weight: np.ndarray  # (N, 2) = (1 - t, t)
    vertex_count: int
    spacing_mm: float

    def d_vertex_d_position(self):
        """Dense (N, 2, 3, 3) position Jacobians."""
        return self.weight[..., None, None] * np.eye(3)

    def sdf_jacobian(self):
        """Sparse (3N, V) matrix d(vertices)/d(sdf)."""
        n = len(self.grid_vertex)
        rows = (3 * np.arange(n)[:, None, None] + np.arange(3)[None, None, :]).repeat(2, 1)
        cols = np.broadcast_to(self.grid_vertex[:, :, None], (n, 2, 3))
        return sp.csr_matrix(
            (self.d_vertex_d_sdf.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, self.vertex_count)
        )

    def pullback(self, grad_vertices):
        """Chain dL/dp (N, 3) back to dL/ds (V,) and dL/d(offset) (V, 3).

        Offsets are in normalized units, hence the ``spacing_mm`` factor.
        """
        g = np.asarray(grad_vertices, float)
        gs_local = np.einsum("nkj,nj->nk", self.d_vertex_d_sdf, g)
        grad_sdf = np.bincount(self.grid_vertex.ravel(), gs_local.ravel(), minlength=self.vertex_count)
        gv_local = (self.weight[..., None] * g[:, None, :]).reshape(-1, 3) * self.spacing_mm
        idx = self.grid_vertex.ravel()
        grad_off = np.stack(
            [np.bincount(idx, gv_local[:, k], minlength=self.vertex_count) for k in range(3)], axis=1
        )
        return grad_sdf, grad_off


def _active_tets(grid, neg):
    """Indices of tets whose cell has mixed corner signs, in tet order."""
    R = grid.resolution
    n3 = neg.reshape(R, R, R)
    cnt = np.zeros((R - 1,) * 3, np.uint8)
    for cx, cy, cz in CUBE_CORNERS.astype(int):
        cnt += n3[cx : R - 1 + cx, cy : R - 1 + cy, cz : R - 1 + cz]
    cells = np.flatnonzero((cnt > 0) & (cnt < 8))
    return (cells[:, None] * 6 + np.arange(6)).ravel()


def _polygonize(pos, s, tets, tet_ids):
    """Case-table triangulation of the listed tets.

    ``s`` must already be tie-broken. Returns vertices, triangles, the
    generating edge ``(a, b)`` with ``a < b`` and parameter ``t`` per vertex,
    the lowest generating tet per vertex, and the tets that produced faces.
    """
    V = len(pos)
    neg = s < 0
    verts = tets[tet_ids]
    code = neg[verts] @ np.array([1, 2, 4, 8])
    keep = (code > 0) & (code < 15)
    tet_ids, verts, code = tet_ids[keep], verts[keep], code[keep]

    ntri = CASE_NTRI[code]
    local = CASE_EDGES[code]  # (M, 2, 3, 2)
    slot_ok = np.arange(2)[None, :] < ntri[:, None]  # (M, 2)
    ge = verts[np.arange(len(code))[:, None, None, None], local][slot_ok]  # (F, 3, 2) in tet/slot order
    tri_tet = np.broadcast_to(tet_ids[:, None], slot_ok.shape)[slot_ok]
    ga = np.minimum(ge[..., 0], ge[..., 1])
    gb = np.maximum(ge[..., 0], ge[..., 1])

    keys = (ga * V + gb).ravel()
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    a = uniq // V
    b = uniq % V
    sa, sb = s[a], s[b]
    t = sa / (sa - sb)
    vertices = pos[a] + t[:, None] * (pos[b] - pos[a])
    triangles = inverse.reshape(-1, 3)
    source_tet = np.repeat(tri_tet, 3)[first]
    return vertices, triangles, a, b, t, source_tet, tet_ids


def polygonize_tets(positions, sdf, tets):
    """Marching tetrahedra on an arbitrary tet mesh (positions in mm).

    Uses the same case table and tie-breaking as :func:`marching_tets`;
    handy for single-tet checks.
    """
    pos = np.asarray(positions, float).reshape(-1, 3)
    s = np.asarray(sdf, float).ravel()
    s = np.where(np.abs(s) < ZERO_EPS, ZERO_EPS, s)
    tets = np.asarray(tets, np.int64).reshape(-1, 4)
    vertices, triangles, a, b, t, source_tet, _ = _polygonize(pos, s, tets, np.arange(len(tets)))
    return SurfaceMesh(vertices, triangles, 0, source_tet, np.stack([a, b], 1), t)


def _extract(grid, class_id):
    if not 0 <= class_id < grid.class_count:
        raise InvalidArgument(f"class_id {class_id} out of range [0, {grid.class_count})")
    s = grid.sdf[class_id]
    s = np.where(np.abs(s) < ZERO_EPS, ZERO_EPS, s)
    neg = s < 0
    pos = grid.positions(class_id)

    tet_ids = _active_tets(grid, neg)
    vertices, triangles, a, b, t, source_tet, tet_ids = _polygonize(pos, s, grid.tets, tet_ids)
    sa, sb = s[a], s[b]
    mesh = SurfaceMesh(vertices, triangles, class_id, source_tet, np.stack([a, b], 1), t)
    _, _, on_boundary = _lattice(grid.resolution)
    if np.any(neg & on_boundary):
        mesh.warnings.append("open-surface")
    # the per-component clamp does not rule out inversion of every Kuhn tet
    if len(tet_ids) and np.any(grid.tet_volumes(class_id, grid.tets[tet_ids]) <= 0):
        mesh.warnings.append("inverted-tets")
    return mesh, (a, b, sa, sb, t, pos)


def marching_tets(grid, class_id):
    """Zero level set of one class's SDF over the offset-deformed grid."""
    mesh, _ = _extract(grid, class_id)
    return mesh


def marching_tets_grad(grid, class_id):
    """Surface plus analytic Jacobians of its vertices."""
    mesh, (a, b, sa, sb, t, pos) = _extract(grid, class_id)
    edge = pos[b] - pos[a]
    denom = (sa - sb) ** 2
    d_sa = (-sb / denom)[:, None] * edge
    d_sb = (sa / denom)[:, None] * edge
    grads = SurfaceGradients(
        grid_vertex=np.stack([a, b], 1),
        d_vertex_d_sdf=np.stack([d_sa, d_sb], 1),
        weight=np.stack([1.0 - t, t], 1),
        vertex_count=grid.vertex_count,
        spacing_mm=grid.spacing_mm,
    )
    return mesh, grads


def vertex_neighbors(resolution):
    """Sparse symmetric adjacency of the lattice edge graph (Kuhn edges)."""
    return _adjacency(int(resolution))


@lru_cache(maxsize=4)
def _adjacency(resolution):
    _, tets, _ = _lattice(resolution)
    V = resolution**3
    pairs = np.concatenate([tets[:, [i, j]] for i, j in TET_EDGES])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    data = np.ones(2 * len(pairs))
    A = sp.csr_matrix(
        (data, (np.concatenate([pairs[:, 0], pairs[:, 1]]), np.concatenate([pairs[:, 1], pairs[:, 0]]))),
        shape=(V, V),
    )
    return A
