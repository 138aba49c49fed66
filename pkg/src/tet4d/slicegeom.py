"""Oriented slice planes, mesh/plane contours and nearest-slice selection.

Slice coordinates follow the DICOM convention: ``row_dir`` is the direction
of increasing column index, ``col_dir`` the direction of increasing row
index. ``(u, v)`` are millimetres along ``row_dir`` and ``col_dir`` from the
centre of pixel (0, 0); ``d`` is the signed distance along
``normal = row_dir x col_dir``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .meshops import inside_mesh, require_watertight

PLANE_ZERO_EPS = 1e-12
DEFAULT_PIXEL_MM = 1.25


@dataclass
class SlicePlane:
    origin_mm: np.ndarray
    row_dir: np.ndarray
    col_dir: np.ndarray
    pixel_spacing_mm: np.ndarray = field(default_factory=lambda: np.array([DEFAULT_PIXEL_MM] * 2))
    extent_px: tuple = (128, 128)  # (H, W)

    def __post_init__(self):
        self.origin_mm = np.asarray(self.origin_mm, float).reshape(3)
        self.row_dir = np.asarray(self.row_dir, float).reshape(3)
        self.col_dir = np.asarray(self.col_dir, float).reshape(3)
        self.pixel_spacing_mm = np.asarray(self.pixel_spacing_mm, float).reshape(2)
        self.extent_px = tuple(int(x) for x in self.extent_px)
        if abs(np.linalg.norm(self.row_dir) - 1) > 1e-9 or abs(np.linalg.norm(self.col_dir) - 1) > 1e-9:
            raise InvalidArgument("row_dir and col_dir must be unit vectors")
        if abs(self.row_dir @ self.col_dir) > 1e-9:
            raise InvalidArgument("row_dir and col_dir must be orthogonal")
        if np.any(self.pixel_spacing_mm <= 0) or min(self.extent_px) < 1:
            raise InvalidArgument("pixel spacing and extent must be positive")

    @property
    def normal(self):
        return np.cross(self.row_dir, self.col_dir)

    @property
    def size_mm(self):
        """In-plane (u, v) span of the pixel-centre lattice."""
        H, W = self.extent_px
        return np.array([(W - 1) * self.pixel_spacing_mm[1], (H - 1) * self.pixel_spacing_mm[0]])

    def to_dict(self):
        return {
            "origin_mm": self.origin_mm.tolist(),
            "row_dir": self.row_dir.tolist(),
            "col_dir": self.col_dir.tolist(),
            "pixel_spacing_mm": self.pixel_spacing_mm.tolist(),
            "extent_px": list(self.extent_px),
        }

    @classmethod
    def from_dict(cls, d):
        missing = {"origin_mm", "row_dir", "col_dir"} - set(d)
        if missing:
            raise InvalidArgument(f"slice plane JSON lacks {sorted(missing)}")
        return cls(
            d["origin_mm"],
            d["row_dir"],
            d["col_dir"],
            d.get("pixel_spacing_mm", [DEFAULT_PIXEL_MM] * 2),
            tuple(d.get("extent_px", (128, 128))),
        )

    def pixel_centers_uv(self):
        H, W = self.extent_px
        i, j = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        return np.stack([j.ravel() * self.pixel_spacing_mm[1], i.ravel() * self.pixel_spacing_mm[0]], axis=1)


def world_to_slice(plane, p_world):
    """(u, v, d) of world points; works on (3,) or (N, 3)."""
    q = np.asarray(p_world, float) - plane.origin_mm
    return np.stack([q @ plane.row_dir, q @ plane.col_dir, q @ plane.normal], axis=-1)


def slice_to_world(plane, uvd):
    uvd = np.asarray(uvd, float)
    d = uvd[..., 2:3] if uvd.shape[-1] == 3 else 0.0
    return plane.origin_mm + uvd[..., 0:1] * plane.row_dir + uvd[..., 1:2] * plane.col_dir + d * plane.normal


@dataclass
class ContourSet:
    """Mesh/plane intersection in edge-parametric form.

    Point ``i`` lies on mesh edge ``edge[i] = (a, b)`` at
    ``p = P[a] + tau[i] * (P[b] - P[a])``; ``loops`` lists the closed
    point-index cycles (first index not repeated).
    """

    edge: np.ndarray
    tau: np.ndarray
    points: np.ndarray  # (N, 3) world mm
    loops: list


def _signed_heights(plane, vertices):
    d = (vertices - plane.origin_mm) @ plane.normal
    return np.where(np.abs(d) < PLANE_ZERO_EPS, PLANE_ZERO_EPS, d)


def contour_edges(mesh, plane):
    """Intersect a closed mesh with a plane, keeping edge provenance.

    Each loop runs counter-clockwise around the inside of the mesh when
    seen from the plane normal, so holes come out clockwise.
    """
    V = mesh.vertices
    F = mesh.triangles
    d = _signed_heights(plane, V)
    above = d > 0
    fa = above[F]
    n_above = fa.sum(1)
    crossing = (n_above == 1) | (n_above == 2)
    if not crossing.any():
        return ContourSet(np.zeros((0, 2), np.int64), np.zeros(0), np.zeros((0, 3)), [])
    F = F[crossing]
    fa = fa[crossing]
    # lone vertex: the one on the minority side
    lone_is_above = fa.sum(1) == 1
    lone_local = np.where(lone_is_above, np.argmax(fa, 1), np.argmin(fa, 1))
    i0 = F[np.arange(len(F)), lone_local]
    i1 = F[np.arange(len(F)), (lone_local + 1) % 3]
    i2 = F[np.arange(len(F)), (lone_local + 2) % 3]
    # the cut crosses edges (i0, i1) and (i2, i0); walking from the (i0, i1)
    # side keeps the inside on the left when the lone vertex is above the plane
    start_e = np.stack([i0, i1], 1)
    end_e = np.stack([i2, i0], 1)
    swap = ~lone_is_above
    start_e[swap], end_e[swap] = end_e[swap].copy(), start_e[swap].copy()

    und_s = np.sort(start_e, 1)
    und_e = np.sort(end_e, 1)
    nV = len(V)
    keys = np.concatenate([und_s[:, 0] * nV + und_s[:, 1], und_e[:, 0] * nV + und_e[:, 1]])
    uniq, inv = np.unique(keys, return_inverse=True)
    s_id, e_id = inv[: len(F)], inv[len(F) :]
    a, b = uniq // nV, uniq % nV
    tau = d[a] / (d[a] - d[b])
    pts = V[a] + tau[:, None] * (V[b] - V[a])

    nxt = np.full(len(uniq), -1)
    nxt[s_id] = e_id
    seen = np.zeros(len(uniq), bool)
    loops = []
    for start in range(len(uniq)):
        if seen[start]:
            continue
        loop = []
        cur = start
        while not seen[cur] and cur >= 0:
            seen[cur] = True
            loop.append(cur)
            cur = nxt[cur]
        loops.append(np.array(loop))
    return ContourSet(np.stack([a, b], 1), tau, pts, loops)


def slice_mesh(mesh, plane):
    """Closed 2D polylines (u, v) of the mesh/plane intersection, first = last point."""
    require_watertight(mesh, "slice_mesh")
    cs = contour_edges(mesh, plane)
    out = []
    for loop in cs.loops:
        uv = world_to_slice(plane, cs.points[loop])[:, :2]
        out.append(np.concatenate([uv, uv[:1]]))
    return out


def polyline_area(poly):
    """Signed shoelace area of a closed polyline (positive when CCW)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def resample_polyline(poly, density_per_mm):
    """Arc-length-uniform samples along a closed polyline.

    Returns ``(segment index, fraction)`` pairs so callers can rebuild the
    samples from moving endpoints.
    """
    seg = np.diff(poly, axis=0)
    length = np.linalg.norm(seg, axis=1)
    total = length.sum()
    if total <= 0:
        return np.zeros(0, np.int64), np.zeros(0)
    n = max(3, int(np.ceil(total * density_per_mm)))
    s = (np.arange(n) + 0.5) * total / n
    cum = np.concatenate([[0.0], np.cumsum(length)])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(length[idx] > 0, (s - cum[idx]) / length[idx], 0.0)
    return idx, np.clip(frac, 0.0, 1.0)


@dataclass
class SliceObservation:
    plane: SlicePlane
    frame_index: int
    contours: dict  # class_id -> list of closed (K, 2) polylines, mm
    mask: np.ndarray = None  # (H, W) label image, 0 = background

    def contour_points_world(self, class_id):
        polys = self.contours.get(class_id, [])
        if not polys:
            return np.zeros((0, 3))
        uv = np.concatenate([p[:-1] for p in polys])
        return slice_to_world(self.plane, np.column_stack([uv, np.zeros(len(uv))]))

    def sampled_points_world(self, class_id, density_per_mm):
        out = []
        for poly in self.contours.get(class_id, []):
            idx, frac = resample_polyline(poly, density_per_mm)
            uv = poly[idx] + frac[:, None] * (poly[idx + 1] - poly[idx])
            out.append(uv)
        if not out:
            return np.zeros((0, 3))
        uv = np.concatenate(out)
        return slice_to_world(self.plane, np.column_stack([uv, np.zeros(len(uv))]))


@dataclass
class SliceSet:
    frame_index: int
    observations: list

    def __post_init__(self):
        if len(self.observations) < 1:
            raise InvalidArgument("a SliceSet needs at least one observation")
        if any(o.frame_index != self.frame_index for o in self.observations):
            raise InvalidArgument("all observations in a SliceSet must share frame_index")

    @property
    def planes(self):
        return [o.plane for o in self.observations]

    def __len__(self):
        return len(self.observations)


@dataclass
class NNSelection:
    """NN-Select result; entries beyond the available slices are absent.

    ``slice_index[n, a]`` is the a-th nearest slice of query n;
    ``pixel_index[n, a, b]`` the b-th nearest pixel (flat ``i * W + j``)
    in that slice, at 3D distance ``distance[n, a, b]``.
    """

    slice_index: np.ndarray
    pixel_index: np.ndarray
    distance: np.ndarray

    def triples(self, n):
        out = []
        for a, s in enumerate(self.slice_index[n]):
            for b in range(self.pixel_index.shape[2]):
                if self.pixel_index[n, a, b] >= 0:
                    out.append((int(s), int(self.pixel_index[n, a, b]), float(self.distance[n, a, b])))
        return out


def _planes_of(slices):
    if isinstance(slices, SliceSet):
        return slices.planes
    planes = list(slices)
    if planes and isinstance(planes[0], SliceObservation):
        planes = [o.plane for o in planes]
    return planes


def plane_distances(points, planes):
    """|out-of-plane distance| (N, S) from each point to each infinite plane."""
    pts = np.asarray(points, float).reshape(-1, 3)
    O = np.stack([p.origin_mm for p in planes])
    Nrm = np.stack([p.normal for p in planes])
    return np.abs(pts @ Nrm.T - np.einsum("sj,sj->s", O, Nrm)[None, :])


def nearest_slices(points, planes, k1):
    """Indices (N, min(k1, S)) of the nearest planes, ties to the lower index."""
    dist = plane_distances(points, planes)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, : min(k1, len(planes))], dist


def nn_select(query_points, slices, k1, k2):
    """k1 nearest slices per query, then k2 nearest pixel centres in each."""
    if k1 < 1 or k2 < 1:
        raise InvalidArgument("k1 and k2 must be >= 1")
    planes = _planes_of(slices)
    if not planes:
        raise InvalidArgument("nn_select needs at least one slice")
    pts = np.asarray(query_points, float).reshape(-1, 3)
    sel, _ = nearest_slices(pts, planes, k1)
    N, K1 = sel.shape
    K2 = min(k2, max(p.extent_px[0] * p.extent_px[1] for p in planes))
    pix = np.full((N, K1, K2), -1, np.int64)
    dist = np.full((N, K1, K2), np.inf)
    r = int(k2)
    offs = np.arange(-r, r + 1)
    for s_idx, plane in enumerate(planes):
        rows, cols = np.nonzero(sel == s_idx)
        if len(rows) == 0:
            continue
        H, W = plane.extent_px
        dy, dx = plane.pixel_spacing_mm
        uvd = world_to_slice(plane, pts[rows])
        jc = np.clip(np.rint(uvd[:, 0] / dx), 0, W - 1).astype(int)
        ic = np.clip(np.rint(uvd[:, 1] / dy), 0, H - 1).astype(int)
        jj = jc[:, None, None] + offs[None, None, :]
        ii = ic[:, None, None] + offs[None, :, None]
        valid = (jj >= 0) & (jj < W) & (ii >= 0) & (ii < H)
        d2 = (jj * dx - uvd[:, 0, None, None]) ** 2 + (ii * dy - uvd[:, 1, None, None]) ** 2 + uvd[:, 2, None, None] ** 2
        flat = ii * W + jj
        d2 = np.where(valid, d2, np.inf).reshape(len(rows), -1)
        flat = np.where(valid, flat, np.iinfo(np.int64).max).reshape(len(rows), -1)
        order = np.lexsort((flat, d2), axis=-1)[:, : min(K2, H * W)]
        k = order.shape[1]
        pix[rows, cols, :k] = np.take_along_axis(flat, order, 1)
        dist[rows, cols, :k] = np.sqrt(np.take_along_axis(d2, order, 1))
    return NNSelection(sel, pix, dist)


def nn_select_bruteforce(query_points, slices, k1, k2):
    """Exhaustive reference for :func:`nn_select` (O(N * S * H * W))."""
    planes = _planes_of(slices)
    pts = np.asarray(query_points, float).reshape(-1, 3)
    dist = plane_distances(pts, planes)
    K1 = min(k1, len(planes))
    K2 = min(k2, max(p.extent_px[0] * p.extent_px[1] for p in planes))
    sel = np.zeros((len(pts), K1), np.int64)
    pix = np.full((len(pts), K1, K2), -1, np.int64)
    dd = np.full((len(pts), K1, K2), np.inf)
    for n in range(len(pts)):
        order = sorted(range(len(planes)), key=lambda s: (dist[n, s], s))[:K1]
        sel[n] = order
        for a, s in enumerate(order):
            plane = planes[s]
            world = slice_to_world(plane, np.column_stack([plane.pixel_centers_uv(), np.zeros(plane.extent_px[0] * plane.extent_px[1])]))
            d = np.linalg.norm(world - pts[n], axis=1)
            ranked = sorted(range(len(d)), key=lambda i: (d[i], i))[:K2]
            pix[n, a, : len(ranked)] = ranked
            dd[n, a, : len(ranked)] = d[ranked]
    return NNSelection(sel, pix, dd)


def confidence_field(grid, slices, k1=3, scale_mm=10.0):
    """Per-class, per-vertex weights exp(-mean nearest-slice distance / scale).

    Returns a (C, V) array in [0, 1].
    """
    if not scale_mm > 0:
        raise InvalidArgument("scale_mm must be positive")
    if k1 < 1:
        raise InvalidArgument("k1 must be >= 1")
    planes = _planes_of(slices)
    if not planes:
        raise InvalidArgument("confidence_field needs at least one slice")
    out = np.empty((grid.class_count, grid.vertex_count))
    K1 = min(k1, len(planes))
    for c in range(grid.class_count):
        dist = plane_distances(grid.positions(c), planes)
        near = np.partition(dist, K1 - 1, axis=1)[:, :K1] if K1 < len(planes) else dist
        out[c] = np.exp(-near.mean(1) / scale_mm)
    return out


def rasterize_mask(meshes, plane, class_ids=None):
    """Label image of pixel centres inside each mesh; later meshes win."""
    H, W = plane.extent_px
    uv = plane.pixel_centers_uv()
    world = slice_to_world(plane, np.column_stack([uv, np.zeros(len(uv))]))
    mask = np.zeros(H * W, np.uint8)
    for i, mesh in enumerate(meshes):
        if mesh.is_empty:
            continue
        cid = i + 1 if class_ids is None else class_ids[i]
        mask[inside_mesh(mesh, world)] = cid
    return mask.reshape(H, W)


def slice_dice(pred, gt, planes):
    """2D Dice of one class pooled over the pixels of several slice planes.

    Both meshes are rasterized on every plane; returns nan when neither
    touches any of them.
    """
    inter = total = 0
    for plane in planes:
        a = rasterize_mask([pred], plane) > 0 if not pred.is_empty else False
        b = rasterize_mask([gt], plane) > 0
        inter += int(np.sum(a & b))
        total += int(np.sum(a)) + int(np.sum(b))
    return 2.0 * inter / total if total else float("nan")


def make_observation(frame, planes, with_masks=True):
    """Slice a phantom frame's ground-truth meshes with each plane."""
    planes = list(planes)
    if not planes:
        raise InvalidArgument("make_observation needs at least one plane")
    obs = []
    for plane in planes:
        contours = {cid: slice_mesh(mesh, plane) for cid, mesh in enumerate(frame.meshes)}
        mask = rasterize_mask(frame.meshes, plane) if with_masks else None
        obs.append(SliceObservation(plane, frame.index, contours, mask))
    return SliceSet(frame.index, obs)


# plane builders ------------------------------------------------------------


def axial_plane(z_mm, fov_mm=128.0, pixel_mm=DEFAULT_PIXEL_MM):
    """Short-axis plane at height z covering the field of view.

    The phantom's long axis is +z, so short-axis planes are z = const.
    """
    n = int(np.floor(fov_mm / pixel_mm)) + 1
    return SlicePlane([0.0, 0.0, z_mm], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [pixel_mm, pixel_mm], (n, n))


def sax_stack(z_lo, z_hi, spacing_mm, fov_mm=128.0, pixel_mm=DEFAULT_PIXEL_MM):
    """Parallel short-axis stack from z_lo to z_hi (inclusive when it lands on the grid)."""
    zs = np.arange(z_lo, z_hi + 1e-9, spacing_mm)
    return [axial_plane(float(z), fov_mm, pixel_mm) for z in zs]


def pick_planes(planes, count, seed):
    """``count`` planes drawn without replacement, kept in their original order."""
    planes = list(planes)
    if not 1 <= count <= len(planes):
        raise InvalidArgument(f"cannot pick {count} of {len(planes)} planes")
    idx = np.sort(np.random.default_rng(seed).choice(len(planes), size=count, replace=False))
    return [planes[i] for i in idx]


def tilted_plane(center_mm, tilt_deg, axis="row", fov_mm=128.0, pixel_mm=DEFAULT_PIXEL_MM):
    """Short-axis plane through ``center_mm`` rotated by ``tilt_deg`` about row_dir or col_dir.

    The plane origin is placed so ``center_mm`` maps to the middle of the image.
    """
    th = np.deg2rad(tilt_deg)
    row = np.array([1.0, 0.0, 0.0])
    col = np.array([0.0, 1.0, 0.0])
    if axis == "row":
        col = np.array([0.0, np.cos(th), np.sin(th)])
    elif axis == "col":
        row = np.array([np.cos(th), 0.0, -np.sin(th)])
    else:
        raise InvalidArgument("axis must be 'row' or 'col'")
    n = int(np.floor(fov_mm / pixel_mm)) + 1
    half = (n - 1) * pixel_mm / 2
    origin = np.asarray(center_mm, float) - half * row - half * col
    return SlicePlane(origin, row, col, [pixel_mm, pixel_mm], (n, n))
