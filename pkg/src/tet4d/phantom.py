"""Synthetic beating-heart phantom with exact ground-truth geometry.

Three classes are produced per frame (label ids 1, 2, 3):

* LV blood pool: a prolate spheroid (the endocardium).
* Myocardium: the shell between the epicardial and endocardial spheroids.
* RV blood pool: an offset spheroid whose septal side is pressed flat onto
  the epicardium, giving a crescent that shares the septal wall.

The LV spheroids contract radially by ``1 - alpha * phase`` and axially by
``1 - beta * phase`` about the LV centre; the RV contracts about its own
centre with the same phase curve.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument
from .meshops import LabelVolume, compose_labels, mesh_volume
from .tetgrid import SurfaceMesh

CLASS_NAMES = ("LV", "Myo", "RV")
LV, MYO, RV = 0, 1, 2


@dataclass
class PhantomConfig:
    frame_count: int = 30
    fov_mm: float = 128.0
    lv_center_mm: tuple = (58.0, 64.0, 60.0)
    lv_endo_radii_mm: tuple = (22.0, 36.0)  # (radial, axial) at ED
    lv_epi_radii_mm: tuple = (30.0, 42.0)
    rv_offset_mm: tuple = (32.0, 0.0, 6.0)  # RV spheroid centre relative to the LV centre
    rv_radii_mm: tuple = (18.0, 34.0, 32.0)  # (x, y, z) semi-axes at ED
    contraction: float = 0.33  # alpha
    shortening: float = 0.05  # beta
    rv_contraction: float = 0.25
    systolic_fraction: float = 1.0 / 3.0
    subdivisions: int = 4
    label_spacing_mm: float = 1.25
    seed: int = 0

    def __post_init__(self):
        for name in ("lv_center_mm", "lv_endo_radii_mm", "lv_epi_radii_mm", "rv_offset_mm", "rv_radii_mm"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))

    @classmethod
    def preset(cls, name, **overrides):
        """``"nor"`` (normal, EF near 57%) or ``"dcm"`` (dilated, EF near 25%)."""
        if name == "nor":
            base = {}
        elif name == "dcm":
            base = dict(
                lv_endo_radii_mm=(26.0, 40.0),
                lv_epi_radii_mm=(32.0, 45.0),
                contraction=0.12,
                shortening=0.03,
                rv_contraction=0.12,
            )
        else:
            raise InvalidArgument(f"unknown phantom preset {name!r}")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise InvalidArgument(f"unknown phantom config keys: {sorted(unknown)}")
        d = dict(d)
        preset = d.pop("preset", None)
        return cls.preset(preset, **d) if preset else cls(**d)

    def to_dict(self):
        return asdict(self)

    def violations(self):
        """Human-readable list of violated bounds (empty when valid)."""
        out = []
        endo_r, endo_a = self.lv_endo_radii_mm
        epi_r, epi_a = self.lv_epi_radii_mm
        if int(self.frame_count) != self.frame_count or self.frame_count < 2:
            out.append("frame_count must be an integer >= 2")
        if not 0 <= self.contraction < 1:
            out.append("contraction (alpha) must lie in [0, 1)")
        if not 0 <= self.shortening < 1:
            out.append("shortening (beta) must lie in [0, 1)")
        if not 0 <= self.rv_contraction < 1:
            out.append("rv_contraction must lie in [0, 1)")
        if not 0 < self.systolic_fraction < 1:
            out.append("systolic_fraction must lie in (0, 1)")
        if min(endo_r, endo_a, *self.rv_radii_mm) <= 0:
            out.append("all radii must be positive")
        if not epi_r > endo_r + 2 or not epi_a > endo_a + 2:
            out.append("epi radius must exceed endo radius + 2 mm")
        if (epi_r - endo_r) * (1 - self.contraction) < 1:
            out.append("radial wall thickness (epi - endo) * (1 - alpha) must stay >= 1 mm")
        if (epi_a - endo_a) * (1 - self.shortening) < 1:
            out.append("apical wall thickness (epi - endo) * (1 - beta) must stay >= 1 mm")
        rvc = np.asarray(self.rv_offset_mm)
        if _ellipsoid_norm(rvc, epi_r, epi_a) <= 1:
            out.append("RV centre must lie outside the ED epicardium")
        lo = np.asarray(self.lv_center_mm) - [epi_r, epi_r, epi_a]
        hi = np.asarray(self.lv_center_mm) + [epi_r, epi_r, epi_a]
        rv_lo = np.asarray(self.lv_center_mm) + rvc - self.rv_radii_mm
        rv_hi = np.asarray(self.lv_center_mm) + rvc + self.rv_radii_mm
        if min(lo.min(), rv_lo.min()) <= 0 or max(hi.max(), rv_hi.max()) >= self.fov_mm:
            out.append("heart must fit strictly inside the field of view")
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise InvalidArgument("invalid phantom config: " + "; ".join(bad))


def phase(t, frame_count, systolic_fraction=1.0 / 3.0):
    """Piecewise-cosine contraction phase; 0 at ED (t = 0), 1 at ES."""
    tau = (np.asarray(t, float) / frame_count) % 1.0
    sys_ = systolic_fraction
    up = 0.5 * (1 - np.cos(np.pi * tau / sys_))
    down = 0.5 * (1 + np.cos(np.pi * (tau - sys_) / (1 - sys_)))
    return np.where(tau <= sys_, up, down)


@lru_cache(maxsize=8)
def icosphere(subdivisions):
    """Unit icosphere (vertices, outward triangles)."""
    g = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
         [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]], float)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1).T  # midpoints of edges (01, 12, 20)
        v = np.concatenate([v, mid])
        f = np.concatenate([
            np.stack([f[:, 0], m[:, 0], m[:, 2]], 1),
            np.stack([f[:, 1], m[:, 1], m[:, 0]], 1),
            np.stack([f[:, 2], m[:, 2], m[:, 1]], 1),
            m,
        ])
    v.setflags(write=False)
    f.setflags(write=False)
    return v, f


def _ellipsoid_norm(q, radial, axial):
    q = np.asarray(q, float)
    return np.sqrt((q[..., 0] ** 2 + q[..., 1] ** 2) / radial**2 + q[..., 2] ** 2 / axial**2)


def _random_rotation(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@dataclass
class PhantomFrame:
    index: int
    phase: float
    meshes: list  # SurfaceMesh per class, mm
    volumes_ml: list


@dataclass
class PhantomSequence:
    config: PhantomConfig
    frames: list
    es_frame: int
    _labels: dict = field(default_factory=dict, repr=False)

    @property
    def frame_count(self):
        return len(self.frames)

    def volume_curve(self, class_id):
        return np.array([f.volumes_ml[class_id] for f in self.frames])

    @property
    def ejection_fraction(self):
        """Ground-truth EF per ventricle (fraction), measured on the meshes."""
        ed, es = self.frames[0], self.frames[self.es_frame]
        return {
            "LV": (ed.volumes_ml[LV] - es.volumes_ml[LV]) / ed.volumes_ml[LV],
            "RV": (ed.volumes_ml[RV] - es.volumes_ml[RV]) / ed.volumes_ml[RV],
        }

    def label_template(self):
        fov = self.config.fov_mm
        return LabelVolume.covering([0, 0, 0], [fov] * 3, self.config.label_spacing_mm)

    def label_volume(self, t):
        if t not in self._labels:
            self._labels[t] = compose_labels(self.frames[t].meshes, self.label_template())
        return self._labels[t]


def _lv_spheroid(unit, center, radii, scale_r, scale_a):
    r, a = radii
    return center + unit * np.array([r * scale_r, r * scale_r, a * scale_a])


def frame_meshes(cfg, ph):
    """Ground-truth meshes (LV, Myo, RV) for one phase value."""
    unit, tris = icosphere(cfg.subdivisions)
    unit = unit @ _random_rotation(cfg.seed).T
    c = np.asarray(cfg.lv_center_mm)
    sr = 1 - cfg.contraction * ph
    sa = 1 - cfg.shortening * ph
    endo = _lv_spheroid(unit, c, cfg.lv_endo_radii_mm, sr, sa)
    epi = _lv_spheroid(unit, c, cfg.lv_epi_radii_mm, sr, sa)

    n = len(unit)
    lv = SurfaceMesh(endo, tris.copy(), LV)
    myo = SurfaceMesh(np.concatenate([epi, endo]), np.concatenate([tris, tris[:, ::-1] + n]), MYO)

    rvc = c + np.asarray(cfg.rv_offset_mm)
    sr_rv = 1 - cfg.rv_contraction * ph
    rv_pts = rvc + unit * np.asarray(cfg.rv_radii_mm) * np.array([sr_rv, sr_rv, sa])
    # press the septal side onto the current epicardium, radially from the LV centre
    epi_r = cfg.lv_epi_radii_mm[0] * sr
    epi_a = cfg.lv_epi_radii_mm[1] * sa
    q = rv_pts - c
    e = _ellipsoid_norm(q, epi_r, epi_a)
    inside = e < 1
    q[inside] /= e[inside, None]
    rv = SurfaceMesh(c + q, tris.copy(), RV)
    return [lv, myo, rv]


def generate(config=None):
    """Build every frame of the phantom; deterministic for a fixed config."""
    cfg = PhantomConfig() if config is None else config
    cfg.validate()
    T = int(cfg.frame_count)
    phases = phase(np.arange(T), T, cfg.systolic_fraction)
    frames = []
    for t in range(T):
        meshes = frame_meshes(cfg, float(phases[t]))
        frames.append(PhantomFrame(t, float(phases[t]), meshes, [mesh_volume(m) for m in meshes]))
    lv_curve = np.array([f.volumes_ml[LV] for f in frames])
    es = int(np.argmin(lv_curve)) if cfg.contraction > 0 or cfg.shortening > 0 else int(np.argmax(phases))
    return PhantomSequence(cfg, frames, es)


def keyframe_annotations(seq):
    """The ED and ES frames only: ``((ed_meshes, ed_volumes), (es_meshes, es_volumes))``."""
    ed, es = seq.frames[0], seq.frames[seq.es_frame]
    return (ed.meshes, ed.volumes_ml), (es.meshes, es.volumes_ml)


def load_config(path):
    with open(path) as fh:
        return PhantomConfig.from_dict(json.load(fh))


def ground_truth_rows(seq):
    """Per-frame ground-truth rows: frame, phase, per-class volume."""
    rows = []
    for f in seq.frames:
        for cid, name in enumerate(CLASS_NAMES):
            rows.append({"frame": f.index, "phase": f.phase, "class": name, "volume_ml": f.volumes_ml[cid]})
    return rows


def wall_thickness_mm(cfg, ph):
    """Minimum LV wall thickness (radial and apical) at a given phase."""
    sr = 1 - cfg.contraction * ph
    sa = 1 - cfg.shortening * ph
    return min(
        (cfg.lv_epi_radii_mm[0] - cfg.lv_endo_radii_mm[0]) * sr,
        (cfg.lv_epi_radii_mm[1] - cfg.lv_endo_radii_mm[1]) * sa,
    )


def sax_planes(cfg, spacing_mm=8.0):
    """Short-axis stack through the LV centre covering the heart at ``spacing_mm``.

    Planes stop 4 mm short of the epicardial apex and base so every plane
    cuts the LV wall.
    """
    from .slicegeom import axial_plane

    zc = cfg.lv_center_mm[2]
    k = int(np.floor((cfg.lv_epi_radii_mm[1] - 4.0) / spacing_mm))
    return [axial_plane(zc + spacing_mm * i, cfg.fov_mm, cfg.label_spacing_mm) for i in range(-k, k + 1)]


def mid_sax_plane(cfg):
    """The mid-ventricular short-axis plane through the LV centre."""
    from .slicegeom import axial_plane

    return axial_plane(cfg.lv_center_mm[2], cfg.fov_mm, cfg.label_spacing_mm)


def ideal_ef(cfg):
    """EF of the analytic (untessellated) LV spheroid, for sanity checks."""
    return 1 - (1 - cfg.contraction) ** 2 * (1 - cfg.shortening)


__all__ = [
    "CLASS_NAMES", "PhantomConfig", "PhantomSequence", "PhantomFrame", "generate", "keyframe_annotations",
    "phase", "icosphere", "frame_meshes", "load_config", "ground_truth_rows", "wall_thickness_mm", "ideal_ef",
    "sax_planes", "mid_sax_plane",
]
