"""Mesh numerics: sampling, chamfer distance, volumes, voxelization, SDF queries."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGeometryError, InvalidArgument, OpenSurfaceError

# query points are nudged off exact ray/edge ties by this much (mm)
RAY_JITTER_MM = 1e-9


def _workers():
    try:
        return max(1, int(os.environ.get("TET4D_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PointSample:
    points: np.ndarray  # (N, 3) mm
    source_triangles: np.ndarray  # (N,)
    weights: np.ndarray  # (N,) sums to the mesh area
    barycentric: np.ndarray = None  # (N, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class LabelVolume:
    """Voxel label grid; voxel (i, j, k) is centred at origin + (i, j, k) * spacing."""

    dims: tuple
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = np.asarray(self.spacing_mm, float).reshape(3)
        self.origin_mm = np.asarray(self.origin_mm, float).reshape(3)
        if self.labels is None:
            self.labels = np.zeros(self.dims, np.uint8)
        self.labels = np.asarray(self.labels, np.uint8).reshape(self.dims)

    @classmethod
    def empty_like(cls, template):
        return cls(template.dims, template.spacing_mm, template.origin_mm, None)

    @classmethod
    def covering(cls, lo_mm, hi_mm, spacing_mm):
        """Template whose voxels tile the box [lo, hi] (last row may overhang)."""
        lo = np.asarray(lo_mm, float)
        spacing = np.broadcast_to(np.asarray(spacing_mm, float), (3,))
        dims = np.maximum(np.ceil((np.asarray(hi_mm, float) - lo) / spacing - 1e-9), 1).astype(int)
        return cls(tuple(dims), spacing, lo + spacing / 2, None)

    def same_geometry(self, other):
        return (
            self.dims == other.dims
            and np.array_equal(self.spacing_mm, other.spacing_mm)
            and np.array_equal(self.origin_mm, other.origin_mm)
        )

    def voxel_volume_mm3(self):
        return float(np.prod(self.spacing_mm))


def triangle_areas(mesh):
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface(mesh, n, seed, stratified=False):
    """Area-weighted uniform samples on the mesh surface.

    With ``stratified`` the triangle picks use one shared offset on an even
    grid of the area CDF (systematic sampling), so samples move smoothly
    when the mesh changes a little.
    """
    if int(n) != n or n < 1:
        raise InvalidArgument(f"sample count must be a positive integer, got {n}")
    if mesh.is_empty:
        raise EmptyGeometryError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    total = areas.sum()
    cdf = np.cumsum(areas) / total
    u = (np.arange(n) + rng.random()) / n if stratified else rng.random(n)
    tri = np.minimum(np.searchsorted(cdf, u, side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    v = mesh.vertices[mesh.triangles[tri]]
    points = np.einsum("nk,nkj->nj", bary, v)
    return PointSample(points, tri, np.full(n, total / n), bary)


def sample_points_grad(sample, mesh, grad_points):
    """Chain dL/d(sample points) to dL/d(mesh vertices) with frozen barycentrics."""
    tri = mesh.triangles[sample.source_triangles]
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(out, tri[:, k], sample.barycentric[:, k : k + 1] * grad_points)
    return out


def _nearest(tree, pts, n_ref):
    """Nearest neighbour with ties resolved to the lowest index."""
    k = min(4, n_ref)
    d, idx = tree.query(pts, k=k, workers=_workers())
    if k == 1:
        return d, idx
    tie = d == d[:, :1]
    idx = np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1)
    return d[:, 0], idx


def _as_points(x):
    return np.asarray(x.points if isinstance(x, PointSample) else x, float).reshape(-1, 3)


def chamfer(a, b, tree_b=None):
    """Symmetric squared-L2 chamfer distance (mean per direction, mm^2).

    Returns ``(value, grad_a)`` with ``grad_a`` the exact gradient of the
    value w.r.t. the points of ``a``; both directions contribute.
    """
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyGeometryError("chamfer of an empty point set")
    tree_a = cKDTree(pa)
    tree_b = cKDTree(pb) if tree_b is None else tree_b
    _, ia = _nearest(tree_b, pa, len(pb))
    _, ib = _nearest(tree_a, pb, len(pa))
    diff_a = pa - pb[ia]
    diff_b = pb - pa[ib]
    value = np.mean(np.einsum("ij,ij->i", diff_a, diff_a)) + np.mean(np.einsum("ij,ij->i", diff_b, diff_b))
    grad = 2.0 * diff_a / len(pa)
    back = -2.0 * diff_b / len(pb)
    for k in range(3):
        grad[:, k] += np.bincount(ib, back[:, k], minlength=len(pa))
    return float(value), grad


def edge_use(triangles):
    """Directed-edge bookkeeping: returns (undirected edges, use counts, balanced)."""
    tri = np.asarray(triangles)
    directed = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    und = np.sort(directed, axis=1).astype(np.int64)
    n = int(tri.max()) + 1
    keys, inv, counts = np.unique(und[:, 0] * n + und[:, 1], return_inverse=True, return_counts=True)
    edges = np.stack([keys // n, keys % n], axis=1)
    fwd = directed[:, 0] < directed[:, 1]
    balance = np.bincount(inv.ravel(), np.where(fwd, 1, -1), minlength=len(keys))
    return edges, counts, bool(np.all(balance == 0))


def is_watertight(mesh):
    if mesh.is_empty:
        return False
    _, counts, balanced = edge_use(mesh.triangles)
    return bool(np.all(counts == 2) and balanced)


def require_watertight(mesh, what="operation"):
    if mesh.is_empty or getattr(mesh, "open_surface", False) or not is_watertight(mesh):
        raise OpenSurfaceError(f"{what} needs a closed, consistently oriented mesh")


def signed_volume_mm3(mesh):
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def mesh_volume(mesh):
    """Enclosed volume in millilitres (positive for outward orientation)."""
    require_watertight(mesh, "mesh_volume")
    return signed_volume_mm3(mesh) / 1000.0


def _expand(lo, hi):
    """Pairs (owner, value) for every integer value in [lo_i, hi_i]."""
    n = np.maximum(hi - lo + 1, 0)
    owner = np.repeat(np.arange(len(lo)), n)
    start = np.repeat(np.cumsum(n) - n, n)
    vals = np.repeat(lo, n) + np.arange(n.sum()) - start
    return owner, vals


def _yz_hits(tri_v, qy, qz):
    """For each (triangle, query) pair: does the +x ray from (., qy, qz) cross, and where.

    ``tri_v`` is (P, 3, 3); qy, qz are (P,). Returns (hit mask, x intercept).
    """
    y, z = tri_v[:, :, 1], tri_v[:, :, 2]
    e0 = (y[:, 1] - y[:, 0]) * (qz - z[:, 0]) - (z[:, 1] - z[:, 0]) * (qy - y[:, 0])
    e1 = (y[:, 2] - y[:, 1]) * (qz - z[:, 1]) - (z[:, 2] - z[:, 1]) * (qy - y[:, 1])
    e2 = (y[:, 0] - y[:, 2]) * (qz - z[:, 2]) - (z[:, 0] - z[:, 2]) * (qy - y[:, 2])
    inside = ((e0 > 0) & (e1 > 0) & (e2 > 0)) | ((e0 < 0) & (e1 < 0) & (e2 < 0))
    area = e0 + e1 + e2
    with np.errstate(invalid="ignore", divide="ignore"):
        w0, w1, w2 = e1 / area, e2 / area, e0 / area
        x = w0 * tri_v[:, 0, 0] + w1 * tri_v[:, 1, 0] + w2 * tri_v[:, 2, 0]
    return inside, x


def voxelize(mesh, template, class_id, out=None):
    """Label every voxel whose centre lies inside the mesh with ``class_id``.

    Insideness is the parity of +x ray crossings. When ``out`` is given its
    labels are overwritten in place, so later calls win on shared voxels.
    """
    require_watertight(mesh, "voxelize")
    vol = LabelVolume.empty_like(template) if out is None else out
    D, H, W = vol.dims
    o, s = vol.origin_mm, vol.spacing_mm
    tv = mesh.vertices[mesh.triangles]
    ymin, ymax = tv[:, :, 1].min(1), tv[:, :, 1].max(1)
    zmin, zmax = tv[:, :, 2].min(1), tv[:, :, 2].max(1)
    jy = RAY_JITTER_MM
    jz = 2 * RAY_JITTER_MM
    j_lo = np.clip(np.ceil((ymin - o[1] - jy) / s[1]), 0, H).astype(int)
    j_hi = np.clip(np.floor((ymax - o[1] - jy) / s[1]), -1, H - 1).astype(int)
    k_lo = np.clip(np.ceil((zmin - o[2] - jz) / s[2]), 0, W).astype(int)
    k_hi = np.clip(np.floor((zmax - o[2] - jz) / s[2]), -1, W - 1).astype(int)
    tri_j, jj = _expand(j_lo, j_hi)
    nk = np.maximum(k_hi - k_lo + 1, 0)[tri_j]
    owner = np.repeat(np.arange(len(tri_j)), nk)
    start = np.repeat(np.cumsum(nk) - nk, nk)
    kk = np.repeat(k_lo[tri_j], nk) + np.arange(nk.sum()) - start
    tri = tri_j[owner]
    jj = jj[owner]
    qy = o[1] + jj * s[1] + jy
    qz = o[2] + kk * s[2] + jz
    hit, x = _yz_hits(tv[tri], qy, qz)
    jj, kk, x = jj[hit], kk[hit], x[hit]
    # a crossing at x lies ahead of voxel i iff o + i*s < x
    first_behind = np.clip(np.ceil((x - o[0]) / s[0]), 0, D).astype(int)
    hist = np.zeros((H, W, D + 1), np.int64)
    np.add.at(hist, (jj, kk, first_behind), 1)
    ahead = np.cumsum(hist[:, :, ::-1], axis=2)[:, :, ::-1][:, :, 1:]  # crossings with index > i
    inside = (ahead % 2 == 1).transpose(2, 0, 1)
    vol.labels[inside] = class_id
    return vol


def inside_mesh(mesh, points):
    """Ray-parity insideness for arbitrary points (+x rays)."""
    pts = np.asarray(points, float).reshape(-1, 3)
    tv = mesh.vertices[mesh.triangles]
    qy = pts[:, 1] + RAY_JITTER_MM
    qz = pts[:, 2] + 2 * RAY_JITTER_MM
    ymin, ymax = tv[:, :, 1].min(1), tv[:, :, 1].max(1)
    zmin, zmax = tv[:, :, 2].min(1), tv[:, :, 2].max(1)
    cell = max(np.median(np.maximum(ymax - ymin, zmax - zmin)), 1e-6)
    y0, z0 = min(ymin.min(), qy.min()), min(zmin.min(), qz.min())
    ny = int(np.floor((max(ymax.max(), qy.max()) - y0) / cell)) + 1
    nz = int(np.floor((max(zmax.max(), qz.max()) - z0) / cell)) + 1
    cy_lo = np.floor((ymin - y0) / cell).astype(int)
    cy_hi = np.floor((ymax - y0) / cell).astype(int)
    cz_lo = np.floor((zmin - z0) / cell).astype(int)
    cz_hi = np.floor((zmax - z0) / cell).astype(int)
    t1, cy = _expand(cy_lo, cy_hi)
    nzc = (cz_hi - cz_lo + 1)[t1]
    own = np.repeat(np.arange(len(t1)), nzc)
    start = np.repeat(np.cumsum(nzc) - nzc, nzc)
    cz = np.repeat(cz_lo[t1], nzc) + np.arange(nzc.sum()) - start
    bin_tri = t1[own]
    bin_id = cy[own] * nz + cz
    order = np.argsort(bin_id, kind="stable")
    bin_tri = bin_tri[order]
    bin_ptr = np.searchsorted(bin_id[order], np.arange(ny * nz + 1))
    qbin = np.floor((qy - y0) / cell).astype(int) * nz + np.floor((qz - z0) / cell).astype(int)
    q, slot = _expand(bin_ptr[qbin], bin_ptr[qbin + 1] - 1)
    tri = bin_tri[slot]
    hit, x = _yz_hits(tv[tri], qy[q], qz[q])
    ahead = hit & (x > pts[q, 0])
    count = np.bincount(q[ahead], minlength=len(pts))
    return count % 2 == 1


def dice(a, b, class_id):
    if not a.same_geometry(b):
        raise InvalidArgument("dice needs label volumes with identical geometry")
    ma = a.labels == class_id
    mb = b.labels == class_id
    total = ma.sum() + mb.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(ma, mb).sum() / total)


def point_triangle_distance(p, tri):
    """Closest-point distance from points p (N, 3) to triangles tri (N, 3, 3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a

    def dot(u, v):
        return np.einsum("ij,ij->i", u, v)

    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(p)
    done = np.zeros(len(p), bool)

    def put(mask, value):
        m = mask & ~done
        closest[m] = value[m]
        done[m] = True

    with np.errstate(invalid="ignore", divide="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(p - closest, axis=1)


def unsigned_distance(mesh, points, k0=8, k_max=32, chunk=8192):
    """Distance to the closest triangle.

    Candidates come from the k nearest triangle centroids; k doubles for a
    query until the k-th centroid is provably farther than the best hit.
    Queries still unresolved at ``k_max`` (nearly equidistant to many
    triangles, e.g. a sphere centre) keep their best candidate, which is
    off by at most the largest triangle circumradius.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    tv = mesh.vertices[mesh.triangles]
    cent = tv.mean(1)
    rmax = np.linalg.norm(tv - cent[:, None], axis=2).max()
    tree = cKDTree(cent)
    F = len(cent)
    best = np.full(len(pts), np.inf)
    for lo in range(0, len(pts), chunk):
        todo = np.arange(lo, min(lo + chunk, len(pts)))
        k = min(k0, F)
        while len(todo):
            dc, ic = tree.query(pts[todo], k=k, workers=_workers())
            dc, ic = dc.reshape(len(todo), k), ic.reshape(len(todo), k)
            d = point_triangle_distance(np.repeat(pts[todo], k, 0), tv[ic.ravel()]).reshape(len(todo), k)
            best[todo] = d.min(1)
            if k >= min(F, k_max):
                break
            todo = todo[dc[:, -1] - rmax < best[todo]]
            k = min(2 * k, F, k_max)
    return best


def mesh_sdf_query(mesh, points):
    """Signed distance (mm) to a closed mesh; negative inside."""
    require_watertight(mesh, "mesh_sdf_query")
    d = unsigned_distance(mesh, points)
    return np.where(inside_mesh(mesh, points), -d, d)


def compose_labels(meshes, template, class_ids=None):
    """Voxelize several closed meshes into one volume; later meshes overwrite earlier ones."""
    vol = LabelVolume.empty_like(template)
    for i, mesh in enumerate(meshes):
        cid = (i + 1) if class_ids is None else class_ids[i]
        if not mesh.is_empty:
            voxelize(mesh, template, cid, out=vol)
    return vol
