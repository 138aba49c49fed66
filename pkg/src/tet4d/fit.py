"""Direct optimization of the tetrahedral representation.

Stage 1 (:func:`fit_static`) fits per-class SDF values and offsets of a
:class:`~tet4d.tetgrid.TetGrid` to a dense reference frame. Stage 2
(:func:`fit_motion`) keeps those SDFs fixed and recovers, frame by frame,
vertex displacements whose extracted surfaces reproduce the observed slice
contours.

Stage 1 uses Adam with step halving: an iterate that raises the loss
(measured on the same sample draw) or makes it non-finite is rejected and
the step is halved.

Stage-2 displacements live on a coarse control lattice and are spread to
every grid vertex by trilinear interpolation. Each class is a regularized
least-squares problem over the control nodes near its surface, solved by
damped Gauss-Newton. Smoothness is a second-difference energy (zero on
affine fields) and anchoring pulls poorly observed nodes toward rest.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from . import meshops
from .errors import DegenerateClassError, DivergedError, InvalidArgument, NoOverlapError
from .meshops import LabelVolume, chamfer, dice, mesh_sdf_query, mesh_volume, sample_points_grad, sample_surface
from .phantom import sax_planes
from .slicegeom import SliceSet, contour_edges, plane_distances, resample_polyline, slice_dice
from .tetgrid import apply_motion, marching_tets, marching_tets_grad

log = logging.getLogger(__name__)

STATIC, MOTION = 1, 2


@dataclass
class FitConfig:
    lambda_cd: float = 1.0
    lambda_sdf: float = 0.1
    lambda_smooth: float = 0.01
    lambda_anchor: float = 0.01
    step: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_floor: float = 1e-6
    max_iter_static: int = 2000
    max_iter_motion: int = 500
    damping: float = 1e-3  # initial Gauss-Newton damping, relative to the mean Hessian diagonal
    damping_max: float = 1e6
    tol: float = 1e-5
    tol_window: int = 20
    warmup_iters: int = 100  # SDF-term-only iterations before the full objective
    n_samples: int = 4096
    eval_samples: int = 30000
    contour_density: float = 2.0  # samples per mm of contour
    seed: int = 0
    k1: int = 3
    k2: int = 9
    confidence_scale_mm: float = 10.0
    control_spacing_mm: float = 8.0
    control_band_mm: float = 16.0  # free control nodes: inside a class or this close to it
    motion_clamp: float = 0.25  # per-component displacement bound, normalized units
    # neural-only terms, kept for the config echo
    lambda_ce: float = 0.0
    lambda_distill: float = 0.0

    def __post_init__(self):
        bad = []
        for name in ("lambda_cd", "lambda_sdf", "lambda_smooth", "lambda_anchor"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        if not self.step > 0:
            bad.append("step must be > 0")
        if self.max_iter_static < 1 or self.max_iter_motion < 1:
            bad.append("iteration caps must be >= 1")
        if self.n_samples < 1 or self.eval_samples < 1:
            bad.append("sample counts must be >= 1")
        if self.k1 < 1 or self.k2 < 1:
            bad.append("k1 and k2 must be >= 1")
        if self.lambda_ce != 0 or self.lambda_distill != 0:
            bad.append("lambda_ce and lambda_distill are not supported (no neural branch)")
        if bad:
            raise InvalidArgument("invalid fit config: " + "; ".join(bad))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def echo(self):
        d = self.to_dict()
        d["disabled_terms"] = ["lambda_ce (segmentation branch)", "L_distill (feature distillation)"]
        return d


@dataclass
class FitReport:
    config: dict
    trace: list = field(default_factory=list)  # one dict per iteration
    rows: list = field(default_factory=list)  # one dict per frame per class
    clinical: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    volume_curve: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def final_rows(self, frame):
        return [r for r in self.rows if r["frame"] == frame]

    def to_dict(self, with_timing=False):
        d = asdict(self)
        if not with_timing:
            d.pop("wall_clock_s")
        return d

    def merge(self, other):
        self.trace += other.trace
        self.rows += other.rows
        self.clinical.update(other.clinical)
        self.iterations.update(other.iterations)
        self.volume_curve.update(other.volume_curve)
        self.notes += other.notes
        self.wall_clock_s += other.wall_clock_s
        return self


def _seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class Adam:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def propose(self, x, g, lr):
        """Candidate iterate plus the moment state that goes with it."""
        t = self.t + 1
        m = self.beta1 * self.m + (1 - self.beta1) * g
        v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps), (m, v, t)

    def commit(self, state):
        self.m, self.v, self.t = state


def _optimize(x0, objective, cfg, max_iter, label, trace, warmup=0):
    """Adam with reject-and-halve; ``objective(x, seed, grad)`` -> (loss, grad|None).

    Returns (x, iterations run).
    """
    x = x0.copy()
    opt = Adam(x.shape, cfg.beta1, cfg.beta2, cfg.eps)
    step = cfg.step
    accepted = []
    floor_hits = 0
    k = 0
    for k in range(max_iter):
        seed = _seed(cfg.seed, *label["seed_key"], k)
        loss, g = objective(x, seed, True, k)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite loss in {label['name']} at iteration {k}", state=x)
        cand, state = opt.propose(x, g, step)
        cand_loss, _ = objective(cand, seed, False, k)
        ok = np.isfinite(cand_loss) and cand_loss <= loss
        row = {**label["row"], "iteration": k, "loss": float(loss), "candidate_loss": float(cand_loss)
               if np.isfinite(cand_loss) else None, "step": step, "accepted": bool(ok)}
        trace.append(row)
        if ok:
            x = cand
            opt.commit(state)
            accepted.append(cand_loss)
        else:
            step = max(step / 2, cfg.step_floor)
        floor_hits = floor_hits + 1 if step <= cfg.step_floor else 0
        if k >= warmup and floor_hits >= cfg.tol_window:
            break
        w = cfg.tol_window
        if k >= warmup and len(accepted) > w:
            ref = accepted[-w - 1]
            if abs(ref - accepted[-1]) <= cfg.tol * max(abs(ref), 1e-12):
                break
    return x, k + 1


# ---------------------------------------------------------------- stage 1


def _target_sdf(grid, mesh):
    """Ground-truth SDF at the undeformed lattice vertices, normalized units."""
    return mesh_sdf_query(mesh, grid.base_vertices * grid.spacing_mm) / grid.spacing_mm


def _pack(grid, c):
    """Stage-1 variables of one class: SDF (normalized) then offsets in lattice spacings."""
    return np.concatenate([grid.sdf[c], grid.offsets[c].ravel() / grid.lattice_spacing])


def _unpack(grid, x):
    V = grid.vertex_count
    h = grid.lattice_spacing
    return x[:V], np.clip(x[V:].reshape(V, 3) * h, -grid.offset_clamp, grid.offset_clamp)


def static_objective(grid, class_id, target_mesh, target_sdf, cfg, sdf_only=False):
    """Callable objective over the stacked per-class variables ``[sdf | offsets]``.

    The variable vector for class c is ``concat(sdf (V,), offsets (V*3,))``.
    Samples are drawn from ``seed`` so two calls with the same seed see the
    same target samples and the same uniform draws on the predicted surface.
    """
    V = grid.vertex_count
    clamp = grid.offset_clamp
    target_mesh_ok = target_mesh is not None and not target_mesh.is_empty

    def objective(x, seed, need_grad, it=0):
        s, off = _unpack(grid, x)
        g = grid.with_arrays(sdf=grid.sdf.copy(), offsets=grid.offsets.copy())
        g.sdf[class_id] = s
        g.offsets[class_id] = off
        loss = 0.0
        grad_s = np.zeros(V)
        grad_off = np.zeros((V, 3))
        if cfg.lambda_sdf > 0 and target_sdf is not None:
            r = (s - target_sdf) * grid.spacing_mm
            loss += cfg.lambda_sdf * np.mean(np.abs(r))
            grad_s += cfg.lambda_sdf * np.sign(r) * grid.spacing_mm / V
        if cfg.lambda_cd > 0 and target_mesh_ok and not sdf_only:
            if need_grad:
                mesh, sg = marching_tets_grad(g, class_id)
            else:
                mesh, sg = marching_tets(g, class_id), None
            if "inverted-tets" in mesh.warnings:
                return float("inf"), None
            if mesh.is_empty:
                raise DegenerateClassError(f"class {class_id} surface vanished", class_id=class_id)
            else:
                rng = np.random.default_rng(seed)
                tgt = sample_surface(target_mesh, cfg.n_samples, rng.integers(2**63))
                pred = sample_surface(mesh, cfg.n_samples, rng.integers(2**63), stratified=True)
                cd, gpts = chamfer(pred, tgt)
                loss += cfg.lambda_cd * cd
                if need_grad:
                    gv = sample_points_grad(pred, mesh, cfg.lambda_cd * gpts)
                    gs, go = sg.pullback(gv)
                    grad_s += gs
                    grad_off += go
        if not need_grad:
            return loss, None
        # clamped offsets receive no gradient pushing further out
        raw = x[V:].reshape(V, 3) * grid.lattice_spacing
        blocked = ((raw >= clamp) & (grad_off < 0)) | ((raw <= -clamp) & (grad_off > 0))
        grad_off[blocked] = 0.0
        return loss, np.concatenate([grad_s, grad_off.ravel() * grid.lattice_spacing])

    return objective


def fit_static(grid, target, cfg=None):
    """Fit every class of ``grid`` to ``target``.

    ``target`` is either a list of per-class closed meshes (mm) or a
    :class:`SliceSet` of dense contours; with contours the SDF term is
    dropped and the loss compares slice contours of the extracted surface
    with the observed ones.
    """
    cfg = FitConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    report = FitReport(cfg.echo())
    out = grid.with_arrays()
    V = grid.vertex_count
    if isinstance(target, SliceSet):
        return _fit_static_contours(grid, target, cfg, report, t0)
    if len(target) != grid.class_count:
        raise InvalidArgument(f"target has {len(target)} classes, grid has {grid.class_count}")
    for c in range(grid.class_count):
        tsdf = _target_sdf(grid, target[c]) if cfg.lambda_sdf > 0 else None
        x = _pack(grid, c)
        n_it = 0
        try:
            if tsdf is not None and cfg.warmup_iters > 0:
                warm = static_objective(grid, c, target[c], tsdf, cfg, sdf_only=True)
                label = {"name": f"warm-up class {c}", "seed_key": (STATIC, c, 0),
                         "row": {"stage": "static-warmup", "frame": 0, "class": c}}
                x, n_it = _optimize(x, warm, cfg, min(cfg.warmup_iters, cfg.max_iter_static), label, report.trace)
            obj = static_objective(grid, c, target[c], tsdf, cfg)
            label = {"name": f"static class {c}", "seed_key": (STATIC, c), "row": {"stage": "static", "frame": 0, "class": c}}
            if n_it < cfg.max_iter_static:
                x, n2 = _optimize(x, obj, cfg, cfg.max_iter_static - n_it, label, report.trace)
                n_it += n2
        except DivergedError as err:
            err.state = out
            err.report = report
            raise
        out.sdf[c], out.offsets[c] = _unpack(grid, x)
        report.iterations[f"static/{c}"] = n_it
        log.info("static class %d: %d iterations, loss %.4f", c, n_it, report.trace[-1]["loss"])
    report.wall_clock_s = time.perf_counter() - t0
    return out, report


def _fit_static_contours(grid, target, cfg, report, t0):
    out = grid.with_arrays()
    V = grid.vertex_count
    obs = _observed_points(target, grid.class_count, cfg.contour_density)
    for c in range(grid.class_count):
        def obj(x, seed, need_grad, it=0, c=c):
            g = out.with_arrays()
            g.sdf[c], g.offsets[c] = _unpack(grid, x)
            loss, gs, go = _contour_loss_class(g, c, target.planes, obs[c], cfg, need_grad)
            if not need_grad:
                return loss, None
            return loss, np.concatenate([gs, go.ravel() * grid.lattice_spacing])

        x0 = _pack(grid, c)
        label = {"name": f"static class {c}", "seed_key": (STATIC, c), "row": {"stage": "static", "frame": 0, "class": c}}
        x, n_it = _optimize(x0, obj, cfg, cfg.max_iter_static, label, report.trace, cfg.warmup_iters)
        out.sdf[c], out.offsets[c] = _unpack(grid, x)
        report.iterations[f"static/{c}"] = n_it
    report.wall_clock_s = time.perf_counter() - t0
    return out, report


# ---------------------------------------------------------------- stage 2


def _observed_points(slices, class_count, density):
    """Per class, per slice: arc-length samples of the observed contours (world mm)."""
    return [[o.sampled_points_world(c, density) for o in slices.observations] for c in range(class_count)]


def _contour_point_grad(mesh, plane, cs, g_pts):
    """Chain dL/d(contour points) onto mesh vertices."""
    n = plane.normal
    V = mesh.vertices
    a, b = cs.edge[:, 0], cs.edge[:, 1]
    da = (V[a] - plane.origin_mm) @ n
    db = (V[b] - plane.origin_mm) @ n
    tau = cs.tau
    denom = (da - db) ** 2
    e = V[b] - V[a]
    eg = np.einsum("ij,ij->i", e, g_pts)
    ga = (1 - tau)[:, None] * g_pts + ((-db / denom) * eg)[:, None] * n
    gb = tau[:, None] * g_pts + ((da / denom) * eg)[:, None] * n
    out = np.zeros_like(V)
    for k in range(3):
        out[:, k] = np.bincount(a, ga[:, k], minlength=len(V)) + np.bincount(b, gb[:, k], minlength=len(V))
    return out


def _contour_loss_class(grid, class_id, planes, observed, cfg, need_grad):
    """Sum over slices of contour chamfer for one class.

    ``observed[s]`` holds the observed samples of slice s (may be empty).
    Returns (loss, grad_sdf (V,), grad_offsets (V, 3)), or (loss, None, None)
    without gradients.
    """
    V = grid.vertex_count
    if need_grad:
        mesh, sg = marching_tets_grad(grid, class_id)
    else:
        mesh, sg = marching_tets(grid, class_id), None
    if "inverted-tets" in mesh.warnings:
        return float("inf"), None, None
    loss = 0.0
    gv = np.zeros_like(mesh.vertices) if need_grad else None
    for plane, obs_pts in zip(planes, observed):
        if len(obs_pts) == 0 or mesh.is_empty:
            continue
        cs = contour_edges(mesh, plane)
        if len(cs.points) == 0:
            # surface misses the plane: pull it toward the observed contour
            cd, g_mesh = _one_sided(obs_pts, mesh.vertices)
            loss += cd
            if need_grad:
                gv += g_mesh
            continue
        cd, gp = chamfer(cs.points, obs_pts)
        loss += cd
        if need_grad:
            gv += _contour_point_grad(mesh, plane, cs, gp)
    if not need_grad:
        return loss, None, None
    if mesh.is_empty:
        return loss, np.zeros(V), np.zeros((V, 3))
    gs, go = sg.pullback(gv)
    return loss, gs, go


def _one_sided(obs_pts, verts):
    """Mean squared distance from observed points to their nearest surface vertex."""
    tree = cKDTree(verts)
    _, idx = tree.query(obs_pts)
    diff = verts[idx] - obs_pts
    val = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
    g = np.zeros_like(verts)
    for k in range(3):
        g[:, k] = np.bincount(idx, 2 * diff[:, k] / len(obs_pts), minlength=len(verts))
    return val, g


def trilinear_matrix(points_unit, rc):
    """Sparse (N x rc^3) trilinear interpolation from an rc^3 lattice over [0, 1]^3."""
    u = np.asarray(points_unit, float) * (rc - 1)
    i0 = np.clip(np.floor(u).astype(int), 0, rc - 2)
    f = u - i0
    n = len(u)
    rows, cols, vals = [], [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                rows.append(np.arange(n))
                cols.append(((i0[:, 0] + dx) * rc + (i0[:, 1] + dy)) * rc + (i0[:, 2] + dz))
                vals.append(w)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, rc**3))
    M.eliminate_zeros()
    return M


def control_lattice(grid, spacing_mm):
    """Control lattice resolution and interpolation matrix onto grid vertices (V x Nc)."""
    rc = max(2, int(round(grid.spacing_mm / spacing_mm)) + 1)
    return rc, trilinear_matrix(grid.base_vertices, rc)


def lattice_hessian(rc, active=None):
    """Sparse second-difference operator on the control lattice restricted to ``active``.

    Rows are the pure second differences along each axis and the mixed
    differences over each unit square (scaled by sqrt 2), kept only where
    every node of the stencil is active. ``|H z|^2`` is a discrete thin-plate
    energy whose null space on a connected region is the affine fields.
    """
    idx = np.arange(rc**3).reshape(rc, rc, rc)
    act = np.ones(rc**3, bool) if active is None else np.asarray(active, bool)
    stencils = []

    def shifted(offsets):
        lo = [max(0, -min(o[k] for o in offsets)) for k in range(3)]
        hi = [rc - max(0, max(o[k] for o in offsets)) for k in range(3)]
        return [idx[lo[0] + o[0]:hi[0] + o[0], lo[1] + o[1]:hi[1] + o[1], lo[2] + o[2]:hi[2] + o[2]].ravel() for o in offsets]

    for a in range(3):
        e = [0, 0, 0]
        e[a] = 1
        m = tuple(-v for v in e)
        stencils.append((shifted([m, (0, 0, 0), tuple(e)]), [1.0, -2.0, 1.0]))
    for a in range(3):
        for b in range(a + 1, 3):
            ea, eb = [0, 0, 0], [0, 0, 0]
            ea[a] = 1
            eb[b] = 1
            eab = tuple(x + y for x, y in zip(ea, eb))
            w = np.sqrt(2.0)
            stencils.append((shifted([(0, 0, 0), tuple(ea), tuple(eb), eab]), [w, -w, -w, w]))
    rows, cols, vals = [], [], []
    n = 0
    for nodes, coef in stencils:
        keep = np.all([act[k] for k in nodes], axis=0)
        m = int(keep.sum())
        for k, c in zip(nodes, coef):
            rows.append(n + np.arange(m))
            cols.append(k[keep])
            vals.append(np.full(m, c))
        n += m
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, rc**3))


def control_band(grid, class_id, ctrl_pts_mm, band_mm):
    """Control nodes inside the class surface or within ``band_mm`` of it."""
    mesh = marching_tets(grid, class_id)
    if mesh.is_empty:
        raise DegenerateClassError(f"class {class_id} has no surface to move", class_id=class_id)
    d, _ = cKDTree(mesh.vertices).query(ctrl_pts_mm)
    return (d <= band_mm) | meshops.inside_mesh(mesh, ctrl_pts_mm)


def confidence_weights(points, planes, k1, scale_mm):
    dist = plane_distances(points, planes)
    K1 = min(k1, len(planes))
    near = np.sort(dist, axis=1)[:, :K1]
    return np.exp(-near.mean(1) / scale_mm)


@dataclass
class MotionState:
    """Per-frame control-lattice displacements relative to the Stage-1 grid.

    ``control[t]`` is a (C, Nc, 3) array in normalized units;
    :meth:`displacement` expands it to the per-vertex (C, V, 3) field.
    Frame 0 is identically zero.
    """

    grid0: object
    control_resolution: int
    control: dict
    clamp: float
    _interp: object = field(default=None, repr=False)

    @property
    def interp(self):
        if self._interp is None:
            rc, P = control_lattice(self.grid0, self.grid0.spacing_mm / (self.control_resolution - 1))
            self._interp = P
        return self._interp

    @property
    def frames(self):
        return sorted(self.control)

    def displacement(self, t):
        z = self.control[t]
        return np.stack([self.interp @ z[c] for c in range(z.shape[0])])

    def grid_at(self, t):
        return apply_motion(self.grid0, self.displacement(t), clamp=self.clamp)

    def meshes_at(self, t):
        g = self.grid_at(t)
        return [marching_tets(g, c) for c in range(g.class_count)]


def _contour_jacobian_blocks(mesh, plane, cs):
    """3x3 Jacobians of each contour point w.r.t. its two mesh vertices."""
    n = plane.normal
    V = mesh.vertices
    a, b = cs.edge[:, 0], cs.edge[:, 1]
    da = (V[a] - plane.origin_mm) @ n
    db = (V[b] - plane.origin_mm) @ n
    tau = cs.tau
    denom = (da - db) ** 2
    e = V[b] - V[a]
    eye = np.eye(3)
    ga = (1 - tau)[:, None, None] * eye + (-db / denom)[:, None, None] * e[:, :, None] * n[None, None, :]
    gb = tau[:, None, None] * eye + (da / denom)[:, None, None] * e[:, :, None] * n[None, None, :]
    return a, b, ga, gb


def _block_rows(rows_pt, cols_v, blocks, n_rows, n_cols):
    """Sparse (3 n_rows x 3 n_cols) matrix from per-point 3x3 blocks."""
    r = (3 * rows_pt[:, None, None] + np.arange(3)[None, :, None]).repeat(3, 2)
    c = (3 * cols_v[:, None, None] + np.arange(3)[None, None, :]).repeat(3, 1)
    return sp.csr_matrix((blocks.ravel(), (r.ravel(), c.ravel())), shape=(3 * n_rows, 3 * n_cols))


def _selector(rows_pt, cols_v, n_rows, n_cols):
    """Sparse (3 n_rows x 3 n_cols) picking whole 3-vectors."""
    eye = np.broadcast_to(np.eye(3), (len(rows_pt), 3, 3))
    return _block_rows(np.asarray(rows_pt), np.asarray(cols_v), eye, n_rows, n_cols)


def class_residuals(grid, class_id, planes, observed, with_jacobian=False):
    """Chamfer residuals of one class against observed contours.

    Returns ``(loss, r, w, J_mesh, mesh)`` where the loss is
    ``sum(w * |r|^2)`` (equal to the summed per-slice contour chamfer) and
    ``J_mesh`` is d r / d(mesh vertices) (3n x 3N), or None. A surface
    that misses a plane with an observed contour contributes a one-sided
    term from the observed points to the nearest surface vertex.
    """
    mesh = marching_tets(grid, class_id)
    if "inverted-tets" in mesh.warnings:
        return float("inf"), None, None, None, mesh
    R, W, J = [], [], []
    Nm = len(mesh.vertices)
    row0 = 0
    for plane, obs in zip(planes, observed):
        if len(obs) == 0 or mesh.is_empty:
            continue
        cs = contour_edges(mesh, plane)
        if len(cs.points) == 0:
            _, idx = cKDTree(mesh.vertices).query(obs)
            R.append(mesh.vertices[idx] - obs)
            W.append(np.full(len(obs), 1.0 / len(obs)))
            if with_jacobian:
                J.append(_selector(np.arange(len(obs)), idx, len(obs), Nm))
            continue
        p = cs.points
        _, fwd = meshops._nearest(cKDTree(obs), p, len(obs))
        _, bwd = meshops._nearest(cKDTree(p), obs, len(p))
        R += [p - obs[fwd], p[bwd] - obs]
        W += [np.full(len(p), 1.0 / len(p)), np.full(len(obs), 1.0 / len(obs))]
        if with_jacobian:
            a, b, ga, gb = _contour_jacobian_blocks(mesh, plane, cs)
            n = len(p)
            A = _block_rows(np.arange(n), a, ga, n, Nm) + _block_rows(np.arange(n), b, gb, n, Nm)
            J += [A, A[(3 * bwd[:, None] + np.arange(3)).ravel()]]
    if not R:
        return 0.0, np.zeros((0, 3)), np.zeros(0), (sp.csr_matrix((0, 3 * Nm)) if with_jacobian else None), mesh
    r = np.concatenate(R)
    w = np.concatenate(W)
    loss = float(np.sum(w * np.einsum("ij,ij->i", r, r)))
    return loss, r, w, (sp.vstack(J).tocsr() if with_jacobian else None), mesh


def _mesh_to_control(mesh, P, cols, mm):
    """d(mesh vertices)/d(control displacements) restricted to ``cols``, (3N x 3k)."""
    a, b = mesh.source_edge[:, 0], mesh.source_edge[:, 1]
    t = mesh.source_t
    N = len(t)
    Wm = sp.csr_matrix((np.concatenate([1 - t, t]), (np.r_[np.arange(N), np.arange(N)], np.r_[a, b])), shape=(N, P.shape[0]))
    S = (Wm @ P)[:, cols]
    return sp.kron(S, sp.eye(3), format="csr") * mm


class _ClassMotion:
    """Regularized least-squares problem of one class for one frame."""

    def __init__(self, grid0, class_id, P, hess, anchor, cols, planes, observed, cfg):
        self.grid0, self.c, self.P, self.cfg = grid0, class_id, P, cfg
        self.planes, self.observed, self.cols = planes, observed, cols
        mm = grid0.spacing_mm
        H = hess[:, cols]
        # smoothness is summed over the stencils, anchoring is a mean over the free nodes
        self.R = (sp.kron(H.T @ H, sp.eye(3)) * (cfg.lambda_smooth * mm * mm)).tocsr()
        self.A = sp.diags(np.repeat(anchor[cols], 3) * (cfg.lambda_anchor * mm * mm / max(len(cols), 1))).tocsr()
        self.Q = (self.R + self.A).tocsr()  # regularizer = u^T Q u over the free variables u

    def grid_for(self, u):
        z = np.zeros((self.P.shape[1], 3))
        z[self.cols] = u.reshape(-1, 3)
        offsets = self.grid0.offsets.copy()
        offsets[self.c] = np.clip(self.grid0.offsets[self.c] + self.P @ z, -self.cfg.motion_clamp, self.cfg.motion_clamp)
        return self.grid0.with_arrays(offsets=offsets, offset_clamp=self.cfg.motion_clamp)

    def loss(self, u, with_jacobian=False):
        data, r, w, Jm, mesh = class_residuals(self.grid_for(u), self.c, self.planes, self.observed, with_jacobian)
        if not np.isfinite(data):
            return float("inf"), None
        total = data + float(u @ (self.Q @ u))
        if not with_jacobian:
            return total, None
        J = Jm @ _mesh_to_control(mesh, self.P, self.cols, self.grid0.spacing_mm) if len(r) else None
        return total, (r, w, J)

    def step(self, u, lin, mu):
        r, w, J = lin
        H = self.Q.copy()
        g = self.Q @ u
        if J is not None:
            Wd = sp.diags(np.repeat(w, 3))
            H = H + J.T @ Wd @ J
            g = g + J.T @ (Wd @ r.ravel())
        scale = max(float(H.diagonal().mean()), 1e-12)
        H = H + sp.eye(H.shape[0]) * (mu * scale)
        # symmetric positive definite system; SuperLU is single-threaded, hence reproducible
        lu = splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        return u - lu.solve(g)


def _fit_class_motion(prob, u0, cfg, trace, row):
    """Damped Gauss-Newton: a step that raises the loss is rejected and the damping raised."""
    u = u0.copy()
    mu = cfg.damping
    loss, lin = prob.loss(u, True)
    if not np.isfinite(loss):
        raise DivergedError(f"non-finite motion loss for class {prob.c}")
    k = 0
    for k in range(cfg.max_iter_motion):
        cand = prob.step(u, lin, mu)
        cand_loss, _ = prob.loss(cand) if np.all(np.isfinite(cand)) else (float("inf"), None)
        ok = np.isfinite(cand_loss) and cand_loss <= loss
        trace.append({**row, "iteration": k, "loss": loss, "candidate_loss": cand_loss if np.isfinite(cand_loss) else None,
                      "step": mu, "accepted": bool(ok)})
        if ok:
            done = loss - cand_loss <= cfg.tol * max(loss, 1e-12)
            u = cand
            loss, lin = prob.loss(u, True)
            mu = max(mu / 3.0, 1e-12)
            if done:
                break
        else:
            mu *= 4.0
            if mu > cfg.damping_max:
                break
    return u, loss, k + 1


def fit_motion(grid, observations, cfg=None):
    """Recover per-frame displacements of ``grid`` from slice observations.

    ``observations`` maps frame index to a :class:`SliceSet` (a list is
    keyed by each set's frame index). Frames are fitted in increasing order,
    each warm-started from the previous fitted frame; frame 0 stays at zero.
    Each class is an independent regularized least-squares problem over the
    control lattice, solved by damped Gauss-Newton with chamfer
    correspondences recomputed at every iterate.
    """
    cfg = FitConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    if isinstance(observations, (list, tuple)):
        observations = {o.frame_index: o for o in observations}
    if not observations:
        raise InvalidArgument("fit_motion needs at least one observed frame")
    if min(observations) < 0:
        raise InvalidArgument("frame indices must be >= 0")
    rc, P = control_lattice(grid, cfg.control_spacing_mm)
    C = grid.class_count
    state = MotionState(grid, rc, {0: np.zeros((C, rc**3, 3))}, cfg.motion_clamp, P)
    report = FitReport(cfg.echo())
    ctrl_pts = _control_points(rc) * grid.spacing_mm
    bands = [control_band(grid, c, ctrl_pts, cfg.control_band_mm) for c in range(C)]
    cols = [np.flatnonzero(b) for b in bands]
    hess = [lattice_hessian(rc, b) for b in bands]
    z = np.zeros((C, rc**3, 3))
    for t in sorted(observations):
        obs = observations[t]
        if len(obs) < 1:
            raise InvalidArgument(f"frame {t} has no observations")
        planes = obs.planes
        observed = _observed_points(obs, C, cfg.contour_density)
        conf = confidence_weights(ctrl_pts, planes, cfg.k1, cfg.confidence_scale_mm)
        _check_overlap(grid, P, z, planes, observed, cfg, t)
        for c in range(C):
            prob = _ClassMotion(grid, c, P, hess[c], 1.0 - conf, cols[c], planes, observed[c], cfg)
            row = {"stage": "motion", "frame": t, "class": c}
            try:
                u, loss, n_it = _fit_class_motion(prob, z[c][cols[c]].ravel(), cfg, report.trace, row)
            except DivergedError as err:
                err.state, err.report = state, report
                raise
            z[c][cols[c]] = u.reshape(-1, 3)
            report.iterations[f"motion/{t}/{c}"] = n_it
            log.info("frame %d class %d: %d iterations, loss %.4f", t, c, n_it, loss)
        state.control[t] = z.copy()
    report.wall_clock_s = time.perf_counter() - t0
    return state, report


def _control_points(rc):
    a = np.linspace(0, 1, rc)
    X, Y, Z = np.meshgrid(a, a, a, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)


def _check_overlap(grid, P, z, planes, observed, cfg, frame):
    disp = np.stack([P @ z[c] for c in range(grid.class_count)])
    g = apply_motion(grid, disp, clamp=cfg.motion_clamp)
    for c in range(grid.class_count):
        mesh = marching_tets(g, c)
        if mesh.is_empty:
            continue
        for plane, obs_pts in zip(planes, observed[c]):
            if len(obs_pts) and len(contour_edges(mesh, plane).points):
                return
    raise NoOverlapError(f"frame {frame}: no observed contour meets the warm-start surface", frame=frame)


# ---------------------------------------------------------------- evaluation


def mesh_metrics(pred, gt, template, cfg, seed_key=(0,)):
    """Per-class CD (mm^2), 3D Dice and volume (ml) of predicted vs ground-truth meshes."""
    out = []
    for c, (p, g) in enumerate(zip(pred, gt)):
        rng = np.random.default_rng(_seed(cfg.seed, 99, *seed_key, c))
        if p.is_empty:
            cd = float("inf")
        else:
            cd, _ = chamfer(sample_surface(p, cfg.eval_samples, rng.integers(2**63)),
                            sample_surface(g, cfg.eval_samples, rng.integers(2**63)))
        vol = mesh_volume(p) if not p.is_empty else 0.0
        pm = meshops.voxelize(p, template, 1) if not p.is_empty else LabelVolume.empty_like(template)
        gm = meshops.voxelize(g, template, 1)
        out.append({"class": c, "cd_mm2": cd, "dice": dice(pm, gm, 1), "volume_ml": vol})
    return out


def ejection_fraction(ed_ml, es_ml):
    return (ed_ml - es_ml) / ed_ml if ed_ml > 0 else float("nan")


def evaluate(state, seq, cfg=None, frames=None, planes=None):
    """Score a motion state against a phantom sequence.

    Rows cover every fitted frame (or ``frames``) with 3D Dice plus a
    slice Dice over ``planes`` (the short-axis stack by default); clinical
    indexes compare the fitted ED and ES volumes with the phantom ground truth.
    """
    cfg = FitConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    fitted = state.frames if frames is None else list(frames)
    if max(fitted) >= seq.frame_count or state.grid0.class_count != len(seq.frames[0].meshes):
        raise InvalidArgument("motion state and phantom sequence do not match")
    report = FitReport(cfg.echo())
    template = seq.label_template()
    planes = sax_planes(seq.config) if planes is None else list(planes)
    vols = {}
    for t in fitted:
        pred = state.meshes_at(t)
        rows = mesh_metrics(pred, seq.frames[t].meshes, template, cfg, (t,))
        for r, p, g in zip(rows, pred, seq.frames[t].meshes):
            r["slice_dice"] = slice_dice(p, g, planes)
            r["frame"] = t
            r["headline"] = t == seq.es_frame
        report.rows += rows
        vols[t] = [r["volume_ml"] for r in rows]
    report.volume_curve = {str(t): v for t, v in sorted(vols.items())}
    es = seq.es_frame
    if 0 in vols and es in vols:
        gt_ef = seq.ejection_fraction
        gt_es = seq.frames[es].volumes_ml
        lv_ef = ejection_fraction(vols[0][0], vols[es][0])
        rv_ef = ejection_fraction(vols[0][2], vols[es][2]) if len(vols[0]) > 2 else float("nan")
        report.clinical = {
            "LVESV_ml": vols[es][0],
            "LVEF": lv_ef,
            "RVESV_ml": vols[es][2] if len(vols[es]) > 2 else float("nan"),
            "RVEF": rv_ef,
            "LVESV_MAE_ml": abs(vols[es][0] - gt_es[0]),
            "LVEF_MAE_pp": 100 * abs(lv_ef - gt_ef["LV"]),
            "RVESV_MAE_ml": abs(vols[es][2] - gt_es[2]) if len(vols[es]) > 2 else float("nan"),
            "RVEF_MAE_pp": 100 * abs(rv_ef - gt_ef["RV"]),
        }
    report.wall_clock_s = time.perf_counter() - t0
    return report


def template_for(grid):
    return LabelVolume.covering([0, 0, 0], [grid.spacing_mm] * 3, 1.25)
