"""File formats: meshes, grid snapshots, label volumes, slices and reports.

Binary payloads are raw little-endian arrays next to a JSON sidecar that
records shape, dtype and a sha256 of the payload. Text tables are CSV with
LF line endings and dot decimals.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, StorageError
from .meshops import LabelVolume
from .slicegeom import SliceObservation, SlicePlane, SliceSet
from .tetgrid import SurfaceMesh, _lattice

FORMAT_VERSION = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _wrap(fn):
    """Turn OS-level failures into StorageError."""

    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StorageError:
            raise
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as err:
            if isinstance(err, InvalidArgument):
                raise
            raise StorageError(f"{fn.__name__}: {err}") from err

    inner.__name__ = fn.__name__
    inner.__doc__ = fn.__doc__
    return inner


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return "" if v is None else v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# raw arrays ------------------------------------------------------------------


def _write_raw(path, arr, dtype):
    a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    a.tofile(path)
    return {"file": Path(path).name, "shape": list(a.shape), "dtype": np.dtype(dtype).str.lstrip("<|=") ,
            "sha256": sha256_file(path)}


def _read_raw(folder, entry, dtype):
    path = Path(folder) / entry["file"]
    if sha256_file(path) != entry["sha256"]:
        raise StorageError(f"checksum mismatch for {path}")
    a = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    shape = tuple(entry["shape"])
    if a.size != int(np.prod(shape)):
        raise StorageError(f"{path} holds {a.size} values, header says {shape}")
    return a.reshape(shape).astype(dtype)


# meshes ----------------------------------------------------------------------


@_wrap
def write_obj(mesh, path):
    """Wavefront OBJ with 1-based face indices."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# class {mesh.class_id}\n")
        np.savetxt(fh, mesh.vertices, fmt="v %.9g %.9g %.9g")
        np.savetxt(fh, mesh.triangles + 1, fmt="f %d %d %d")


@_wrap
def read_obj(path, class_id=0):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return SurfaceMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3), class_id)


_PLY_FACE = np.dtype([("n", "u1"), ("v", "<i4", (3,))])


@_wrap
def write_ply(mesh, path):
    """Binary little-endian PLY: float32 xyz, uchar-counted int32 faces."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"comment class {mesh.class_id}\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(mesh.triangles), _PLY_FACE)
    faces["n"] = 3
    faces["v"] = mesh.triangles
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, "<f4").tobytes())
        fh.write(faces.tobytes())


@_wrap
def read_ply(path, class_id=0):
    with open(path, "rb") as fh:
        counts = {}
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("format") and "binary_little_endian" not in line:
                raise StorageError(f"{path}: only binary little-endian PLY is supported")
            if line.startswith("element"):
                _, name, n = line.split()
                counts[name] = int(n)
            if line == "end_header":
                break
            if not line and fh.tell() > 1 << 16:
                raise StorageError(f"{path}: no PLY header end")
        nv, nf = counts.get("vertex", 0), counts.get("face", 0)
        verts = np.frombuffer(fh.read(12 * nv), "<f4").reshape(nv, 3).astype(float)
        faces = np.frombuffer(fh.read(_PLY_FACE.itemsize * nf), _PLY_FACE)
    return SurfaceMesh(verts, faces["v"].astype(np.int64), class_id)


def write_mesh(mesh, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return write_obj(mesh, path)
    if suffix == ".ply":
        return write_ply(mesh, path)
    raise InvalidArgument(f"unknown mesh format {suffix!r} (use .obj or .ply)")


# grid snapshots --------------------------------------------------------------


@_wrap
def save_grid(grid, folder):
    """``grid.json`` plus raw f64 ``sdf.f64`` (C, V) and ``offsets.f64`` (C, V, 3)."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "tet-grid",
        "resolution": grid.resolution,
        "class_count": grid.class_count,
        "spacing_mm": grid.spacing_mm,
        "offset_clamp": grid.offset_clamp,
        "arrays": {
            "sdf": _write_raw(folder / "sdf.f64", grid.sdf, "f8"),
            "offsets": _write_raw(folder / "offsets.f64", grid.offsets, "f8"),
        },
    }
    write_json(folder / "grid.json", meta)
    return meta


@_wrap
def load_grid(folder):
    from .tetgrid import TetGrid

    folder = Path(folder)
    meta = read_json(folder / "grid.json")
    if meta.get("kind") != "tet-grid":
        raise StorageError(f"{folder} is not a grid snapshot")
    R = int(meta["resolution"])
    base, tets, _ = _lattice(R)
    sdf = _read_raw(folder, meta["arrays"]["sdf"], "f8")
    off = _read_raw(folder, meta["arrays"]["offsets"], "f8")
    g = TetGrid(R, base, tets, int(meta["class_count"]), sdf, off, float(meta["spacing_mm"]), float(meta["offset_clamp"]))
    g.validate()
    return g


# label volumes ---------------------------------------------------------------


@_wrap
def save_labels(vol, path_stem):
    """``<stem>.u8`` (C order over i, j, k) plus ``<stem>.json``."""
    stem = Path(path_stem)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "label-volume",
        "dims": list(vol.dims),
        "spacing_mm": vol.spacing_mm,
        "origin_mm": vol.origin_mm,
        "index_order": "ijk, k fastest; voxel centre = origin + index * spacing",
        "labels": _write_raw(stem.with_suffix(".u8"), vol.labels, "u1"),
    }
    write_json(stem.with_suffix(".json"), meta)
    return meta


@_wrap
def load_labels(path_stem):
    stem = Path(path_stem)
    meta = read_json(stem.with_suffix(".json"))
    labels = _read_raw(stem.parent, meta["labels"], "u1")
    return LabelVolume(meta["dims"], meta["spacing_mm"], meta["origin_mm"], labels)


# slices ----------------------------------------------------------------------


@_wrap
def save_plane(plane, path):
    write_json(path, plane.to_dict())


@_wrap
def load_plane(path):
    return SlicePlane.from_dict(read_json(path))


@_wrap
def save_slices(slices, folder):
    """``slices.json`` (planes), ``contours.csv`` and one raw u8 mask per slice."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    rows = []
    entries = []
    for s, obs in enumerate(slices.observations):
        entry = {"plane": obs.plane.to_dict(), "frame_index": obs.frame_index}
        if obs.mask is not None:
            entry["mask"] = _write_raw(folder / f"mask_{s:03d}.u8", obs.mask, "u1")
        entries.append(entry)
        for cid in sorted(obs.contours):
            for loop_id, poly in enumerate(obs.contours[cid]):
                for k, (u, v) in enumerate(poly[:-1]):
                    rows.append({"slice": s, "class": cid, "loop": loop_id, "point": k, "u_mm": u, "v_mm": v})
    write_csv(folder / "contours.csv", rows, ["slice", "class", "loop", "point", "u_mm", "v_mm"])
    write_json(folder / "slices.json", {"format_version": FORMAT_VERSION, "kind": "slice-set",
                                        "frame_index": slices.frame_index, "slices": entries})


@_wrap
def load_slices(folder):
    folder = Path(folder)
    meta = read_json(folder / "slices.json")
    polys = {}
    for r in read_csv(folder / "contours.csv"):
        key = (int(r["slice"]), int(r["class"]), int(r["loop"]))
        polys.setdefault(key, []).append((int(r["point"]), float(r["u_mm"]), float(r["v_mm"])))
    obs = []
    for s, entry in enumerate(meta["slices"]):
        contours = {}
        for (si, cid, _), pts in sorted(polys.items()):
            if si != s:
                continue
            uv = np.array([p[1:] for p in sorted(pts)])
            contours.setdefault(cid, []).append(np.concatenate([uv, uv[:1]]))
        mask = _read_raw(folder, entry["mask"], "u1") if "mask" in entry else None
        obs.append(SliceObservation(SlicePlane.from_dict(entry["plane"]), int(entry["frame_index"]), contours, mask))
    return SliceSet(int(meta["frame_index"]), obs)


# motion states ---------------------------------------------------------------


@_wrap
def save_motion(state, folder):
    """Stage-1 grid under ``grid/`` plus one raw f64 control array per frame."""
    folder = Path(folder)
    save_grid(state.grid0, folder / "grid")
    frames = {str(t): _write_raw(folder / f"control_{t:03d}.f64", state.control[t], "f8") for t in state.frames}
    write_json(folder / "motion.json", {"format_version": FORMAT_VERSION, "kind": "motion-state",
                                        "control_resolution": state.control_resolution,
                                        "clamp": state.clamp, "frames": frames})


@_wrap
def load_motion(folder):
    from .fit import MotionState

    folder = Path(folder)
    meta = read_json(folder / "motion.json")
    grid0 = load_grid(folder / "grid")
    control = {int(t): _read_raw(folder, e, "f8") for t, e in meta["frames"].items()}
    return MotionState(grid0, int(meta["control_resolution"]), control, float(meta["clamp"]))


# reports ---------------------------------------------------------------------

METRIC_COLUMNS = ["frame", "class", "cd_mm2", "dice", "slice_dice", "volume_ml", "headline"]
TRACE_COLUMNS = ["stage", "frame", "class", "iteration", "loss", "candidate_loss", "step", "accepted"]


@_wrap
def save_report(report, folder, prefix=""):
    """``<prefix>report.json`` plus metrics, trace and volume-curve CSVs."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    write_json(folder / f"{prefix}report.json", {k: v for k, v in report.to_dict().items() if k != "trace"})
    write_csv(folder / f"{prefix}metrics.csv", report.rows, METRIC_COLUMNS)
    write_csv(folder / f"{prefix}trace.csv", report.trace, TRACE_COLUMNS)
    curve = [{"frame": int(t), **{f"class_{c}_ml": v for c, v in enumerate(vals)}}
             for t, vals in sorted(report.volume_curve.items(), key=lambda kv: int(kv[0]))]
    if curve:
        write_csv(folder / f"{prefix}volume_curve.csv", curve)


def output_hashes(folder, exclude=("manifest.json",)):
    """sha256 of every file under ``folder``, keyed by relative path.

    Files whose name is in ``exclude`` are skipped at any depth, so nested
    run manifests (which record wall-clock time) do not enter the hashes.
    """
    folder = Path(folder)
    out = {}
    for root, _, files in os.walk(folder):
        for f in sorted(files):
            p = Path(root) / f
            rel = p.relative_to(folder).as_posix()
            if f not in exclude:
                out[rel] = sha256_file(p)
    return dict(sorted(out.items()))
