"""Command-line entry point.

Subcommands: ``phantom``, ``fit-static``, ``fit-motion``, ``sweep`` and
``export``. Progress goes to stderr; stdout carries a single JSON status
line. Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 diverged,
5 degenerate geometry.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import fit, io, meshops, phantom, slicegeom, tetgrid
from .errors import DegenerateClassError, DivergedError, InvalidArgument, NoOverlapError, StorageError, Tet4DError

log = logging.getLogger("tet4d")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_DIVERGED, EXIT_DEGENERATE = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"


def tool_version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0+unknown"


# ---------------------------------------------------------------- helpers


class Run:
    """Output directory of one command plus its manifest bookkeeping."""

    def __init__(self, command, out, force, argv):
        self.command = command
        self.out = Path(out)
        self.argv = list(argv)
        self.t0 = time.perf_counter()
        self.inputs = {}
        self.config_paths = {}
        self.seed = None
        self._prepare(force)

    def _prepare(self, force):
        out = self.out
        if out.exists() and not out.is_dir():
            raise InvalidArgument(f"{out} exists and is not a directory")
        if out.exists() and any(out.iterdir()):
            if not force:
                raise InvalidArgument(f"{out} is not empty; pass --force to overwrite")
            if not (out / MANIFEST).exists():
                raise InvalidArgument(f"refusing to clear {out}: it holds no {MANIFEST}")
            try:
                shutil.rmtree(out)
            except OSError as err:
                raise StorageError(f"cannot clear {out}: {err}") from err
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise StorageError(f"cannot create {out}: {err}") from err

    def add_input(self, name, path):
        path = Path(path)
        if path.is_dir():
            self.inputs[name] = {"path": str(path), "sha256": io.output_hashes(path)}
        elif path.exists():
            self.inputs[name] = {"path": str(path), "sha256": io.sha256_file(path)}

    def finish(self, status="ok"):
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "config_paths": self.config_paths,
            "inputs": self.inputs,
            "output_dir": str(self.out),
            "outputs": io.output_hashes(self.out),
            "seed": self.seed,
            "tool_version": tool_version(),
            "wall_clock_s": time.perf_counter() - self.t0,
        }
        io.write_json(self.out / MANIFEST, manifest)
        return manifest


def _read_config(path):
    if path is None:
        return {}
    try:
        d = io.read_json(path)
    except (OSError, StorageError) as err:
        raise StorageError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise InvalidArgument(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(d, dict):
        raise InvalidArgument(f"config {path} must hold a JSON object")
    return d


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


FIT_FLAGS = {
    "lambda_cd": float, "lambda_sdf": float, "lambda_smooth": float, "lambda_anchor": float,
    "confidence_scale_mm": float, "seed": int, "max_iter_static": int, "max_iter_motion": int,
    "k1": int, "k2": int, "n_samples": int, "eval_samples": int,
}


def _add_fit_flags(p):
    p.add_argument("--config", help="FitConfig JSON")
    for name, typ in FIT_FLAGS.items():
        flag = "--confidence-scale" if name == "confidence_scale_mm" else "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other FitConfig field")


def _fit_config(args):
    d = _read_config(args.config)
    d.update(_parse_set(args.set))
    d.update({k: getattr(args, k) for k in FIT_FLAGS if getattr(args, k, None) is not None})
    return fit.FitConfig.from_dict(d)


def _is_phantom_dir(path):
    return (Path(path) / "phantom.json").exists()


def load_phantom(folder):
    """Rebuild a phantom sequence from the config echoed into its output directory."""
    cfg = phantom.PhantomConfig.from_dict(io.read_json(Path(folder) / "phantom.json"))
    return phantom.generate(cfg)


def _read_target_meshes(folder):
    paths = sorted(Path(folder).glob("class_*.obj"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise InvalidArgument(f"{folder} has neither phantom.json, slices.json nor class_*.obj files")
    return [io.read_obj(p, class_id=i) for i, p in enumerate(paths)]


def _export_meshes(meshes, folder):
    for c, m in enumerate(meshes):
        if not m.is_empty:
            io.write_obj(m, Path(folder) / f"class_{c}.obj")


def _locate_grid(path):
    path = Path(path)
    for cand in (path / "grid", path):
        if (cand / "grid.json").exists():
            return cand
    return None


# ---------------------------------------------------------------- commands


def cmd_phantom(args):
    cfg_dict = _read_config(args.config)
    if args.preset:
        cfg_dict["preset"] = args.preset
    cfg_dict.update(_parse_set(args.set))
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = phantom.PhantomConfig.from_dict(cfg_dict)
    cfg.validate()
    run = Run("phantom", args.out, args.force, args.argv)
    if args.config:
        run.config_paths["phantom"] = str(args.config)
        run.add_input("config", args.config)
    run.seed = cfg.seed
    seq = phantom.generate(cfg)
    out = run.out
    io.write_json(out / "phantom.json", cfg.to_dict())
    for f in seq.frames:
        d = out / f"frame_{f.index:03d}"
        _export_meshes(f.meshes, d)
        io.save_labels(seq.label_volume(f.index), d / "labels")
        log.info("frame %d written", f.index)
    io.write_csv(out / "ground_truth.csv", phantom.ground_truth_rows(seq), ["frame", "phase", "class", "volume_ml"])
    ef = seq.ejection_fraction
    io.write_json(out / "ground_truth.json", {"ed_frame": 0, "es_frame": seq.es_frame, "LVEF": ef["LV"],
                                             "RVEF": ef["RV"], "frame_count": seq.frame_count})
    run.finish()
    return {"frames": seq.frame_count, "es_frame": seq.es_frame}


def cmd_fit_static(args):
    cfg = _fit_config(args)
    target_path = Path(args.target)
    if not target_path.exists():
        raise StorageError(f"target {target_path} does not exist")
    seq = None
    if _is_phantom_dir(target_path):
        seq = load_phantom(target_path)
        if not 0 <= args.frame < seq.frame_count:
            raise InvalidArgument(f"frame {args.frame} outside 0..{seq.frame_count - 1}")
        target = seq.frames[args.frame].meshes
        fov = seq.config.fov_mm
    elif (target_path / "slices.json").exists():
        target = io.load_slices(target_path)
        fov = args.fov
    else:
        target = _read_target_meshes(target_path)
        fov = args.fov
    C = len(target) if isinstance(target, list) else 1 + max(c for o in target.observations for c in o.contours)
    grid = tetgrid.build_grid(args.grid_res, C, fov)
    run = Run("fit-static", args.out, args.force, args.argv)
    run.seed = cfg.seed
    if args.config:
        run.config_paths["fit"] = str(args.config)
        run.add_input("config", args.config)
    run.add_input("target", target_path)
    io.write_json(run.out / "fit_config.json", cfg.to_dict())
    try:
        out_grid, report = fit.fit_static(grid, target, cfg)
    except DivergedError as err:
        if err.state is not None:
            io.save_grid(err.state, run.out / "grid")
        if getattr(err, "report", None) is not None:
            io.save_report(err.report, run.out)
        run.finish("diverged")
        raise
    except DegenerateClassError:
        run.finish("degenerate")
        raise
    io.save_grid(out_grid, run.out / "grid")
    meshes = [tetgrid.marching_tets(out_grid, c) for c in range(C)]
    if isinstance(target, list):
        template = seq.label_template() if seq is not None else fit.template_for(out_grid)
        rows = fit.mesh_metrics(meshes, target, template, cfg, (args.frame,))
        for r in rows:
            r["frame"] = args.frame
            r["headline"] = False
        report.rows = rows
    else:
        report.rows = [{"frame": target.frame_index, "class": c, "cd_mm2": None, "dice": None,
                        "volume_ml": meshops.mesh_volume(m) if not m.is_empty else 0.0, "headline": False}
                       for c, m in enumerate(meshes)]
    io.save_report(report, run.out)
    _export_meshes(meshes, run.out / "meshes" / f"frame_{args.frame:03d}")
    run.finish()
    return {"classes": C, "cd_mm2": [r["cd_mm2"] for r in report.rows]}


def candidate_planes(spec, seq):
    """Plane candidates from ``--planes``: a JSON file, ``mid-sax`` or ``sax`` (default)."""
    if spec in (None, "sax"):
        if seq is None:
            raise InvalidArgument("--planes sax needs a phantom observation source")
        return phantom.sax_planes(seq.config)
    if spec == "mid-sax":
        return [phantom.mid_sax_plane(seq.config if seq is not None else phantom.PhantomConfig())]
    d = _read_config_any(spec)
    items = d["planes"] if isinstance(d, dict) and "planes" in d else d
    if not isinstance(items, list) or not items:
        raise InvalidArgument(f"{spec} must hold a non-empty list of planes")
    return [slicegeom.SlicePlane.from_dict(p) for p in items]


def _read_config_any(path):
    try:
        return io.read_json(path)
    except json.JSONDecodeError as err:
        raise InvalidArgument(f"{path} is not valid JSON: {err}") from err
    except (OSError, StorageError) as err:
        raise StorageError(f"cannot read {path}: {err}") from err


def _parse_slices(value):
    if value in (None, "full"):
        return "full"
    try:
        n = int(value)
    except ValueError:
        raise InvalidArgument(f"--slices must be a positive integer or 'full', got {value!r}") from None
    if n < 1:
        raise InvalidArgument("--slices must be >= 1")
    return n


def _parse_frames(value, seq, available):
    if value in (None, "all"):
        frames = available
    elif value == "es":
        if seq is None:
            raise InvalidArgument("--frames es needs a phantom observation source")
        frames = [seq.es_frame]
    else:
        try:
            frames = sorted({int(x) for x in value.split(",")})
        except ValueError:
            raise InvalidArgument(f"--frames must be all, es or a comma list, got {value!r}") from None
    frames = [t for t in frames if t != 0]
    bad = [t for t in frames if t not in available]
    if bad or not frames:
        raise InvalidArgument(f"frames {bad or frames} are not available for fitting")
    return frames


def plan_observations(obs_path, slices, planes_spec, frames_spec, seed):
    """Per-frame SliceSets plus the phantom (or None) they come from."""
    obs_path = Path(obs_path)
    if not obs_path.exists():
        raise StorageError(f"observation source {obs_path} does not exist")
    count = _parse_slices(slices)
    if _is_phantom_dir(obs_path):
        seq = load_phantom(obs_path)
        cands = candidate_planes(planes_spec, seq)
        planes = cands if count == "full" else slicegeom.pick_planes(cands, count, seed)
        frames = _parse_frames(frames_spec, seq, list(range(seq.frame_count)))
        obs = {t: slicegeom.make_observation(seq.frames[t], planes, with_masks=False) for t in frames}
        return obs, seq, planes
    bundles = [obs_path] if (obs_path / "slices.json").exists() else sorted(
        p for p in obs_path.iterdir() if (p / "slices.json").exists())
    if not bundles:
        raise InvalidArgument(f"{obs_path} holds no phantom.json or slices.json")
    sets = {}
    for b in bundles:
        s = io.load_slices(b)
        sets[s.frame_index] = s
    frames = _parse_frames(frames_spec, None, sorted(sets))
    obs = {}
    for t in frames:
        s = sets[t]
        if count != "full":
            idx = slicegeom.pick_planes(list(range(len(s))), count, seed)
            s = slicegeom.SliceSet(t, [s.observations[i] for i in idx])
        obs[t] = s
    return obs, None, obs[frames[0]].planes


def cmd_fit_motion(args):
    cfg = _fit_config(args)
    if args.grid is None or _locate_grid(args.grid) is None:
        raise InvalidArgument(f"fit-motion needs a Stage-1 grid (fit-static output); none found at {args.grid}")
    grid_dir = _locate_grid(args.grid)
    grid = io.load_grid(grid_dir)
    seed = cfg.seed if args.plane_seed is None else args.plane_seed
    obs, seq, planes = plan_observations(args.obs, args.slices, args.planes, args.frames, seed)
    if seq is not None and len(seq.frames[0].meshes) != grid.class_count:
        raise InvalidArgument("grid and phantom class counts differ")
    run = Run("fit-motion", args.out, args.force, args.argv)
    run.seed = seed
    if args.config:
        run.config_paths["fit"] = str(args.config)
        run.add_input("config", args.config)
    run.add_input("grid", grid_dir)
    run.add_input("obs", args.obs)
    io.write_json(run.out / "fit_config.json", cfg.to_dict())
    io.write_json(run.out / "planes.json", {"slices": args.slices or "full", "seed": seed,
                                            "planes": [p.to_dict() for p in planes]})
    try:
        state, report = fit.fit_motion(grid, obs, cfg)
    except DivergedError as err:
        if isinstance(err.state, fit.MotionState):
            io.save_motion(err.state, run.out / "motion")
        if getattr(err, "report", None) is not None:
            io.save_report(err.report, run.out)
        run.finish("diverged")
        raise
    except (DegenerateClassError, NoOverlapError):
        run.finish("error")
        raise
    io.save_motion(state, run.out / "motion")
    if seq is not None:
        ev = fit.evaluate(state, seq, cfg)
        report.rows, report.clinical, report.volume_curve = ev.rows, ev.clinical, ev.volume_curve
    else:
        curve = {}
        for t in state.frames:
            vols = [meshops.mesh_volume(m) if not m.is_empty else 0.0 for m in state.meshes_at(t)]
            curve[str(t)] = vols
            report.rows += [{"frame": t, "class": c, "cd_mm2": None, "dice": None, "volume_ml": v,
                             "headline": False} for c, v in enumerate(vols)]
        report.volume_curve = curve
    io.save_report(report, run.out)
    for t in state.frames:
        _export_meshes(state.meshes_at(t), run.out / "meshes" / f"frame_{t:03d}")
    run.finish()
    return {"frames": state.frames, "clinical": report.clinical}


# sweep ---------------------------------------------------------------------

SWEEP_KEYS = {"phantom", "grid", "slice_counts", "seeds", "frames", "planes", "fit"}


def _sweep_spec(path):
    spec = _read_config(path)
    unknown = set(spec) - SWEEP_KEYS
    if unknown:
        raise InvalidArgument(f"unknown sweep keys: {sorted(unknown)}")
    base = Path(path).parent
    for key in ("phantom", "grid"):
        if key not in spec:
            raise InvalidArgument(f"sweep spec needs {key!r}")
        p = Path(spec[key])
        spec[key] = str(p if p.is_absolute() else base / p)
    counts = spec.get("slice_counts")
    if not counts:
        raise InvalidArgument("sweep spec needs a non-empty slice_counts list")
    for c in counts:
        _parse_slices(str(c))
    seeds = spec.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise InvalidArgument("sweep seeds must be a non-empty list of integers")
    fit.FitConfig.from_dict(spec.get("fit", {}))
    spec.setdefault("frames", "es")
    spec["slice_counts"] = [str(c) for c in counts]
    spec["seeds"] = seeds
    return spec


def _count_key(c):
    return (1, 0) if c == "full" else (0, int(c))


def _sweep_child(job):
    """Run one fit-motion child; returns (count, seed, exit code, run dir)."""
    count, seed, spec, out = job
    argv = ["fit-motion", "--grid", spec["grid"], "--obs", spec["phantom"], "--slices", count,
            "--plane-seed", str(seed), "--frames", str(spec["frames"]), "--out", out, "--force"]
    if spec.get("planes"):
        argv += ["--planes", str(spec["planes"])]
    for k, v in spec.get("fit", {}).items():
        argv += ["--set", f"{k}={json.dumps(v)}"]
    code, _ = run_command(argv, quiet=True)
    return count, seed, code, out


def cmd_sweep(args):
    spec = _sweep_spec(args.config)
    if _locate_grid(spec["grid"]) is None:
        raise InvalidArgument(f"sweep grid {spec['grid']} holds no Stage-1 grid")
    if not _is_phantom_dir(spec["phantom"]):
        raise InvalidArgument(f"sweep phantom {spec['phantom']} is not a phantom directory")
    run = Run("sweep", args.out, args.force, args.argv)
    run.config_paths["sweep"] = str(args.config)
    run.add_input("config", args.config)
    run.seed = spec["seeds"]
    jobs = [(c, s, spec, str(run.out / "runs" / f"slices_{c}_seed_{s}"))
            for c in sorted(spec["slice_counts"], key=_count_key) for s in spec["seeds"]]
    n_jobs = max(1, args.jobs)
    if n_jobs == 1:
        results = [_sweep_child(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_sweep_child, jobs))
    rows, worst = [], 0
    for count, seed, code, out in results:
        worst = max(worst, code)
        if code != 0:
            log.warning("child slices=%s seed=%s exited %d", count, seed, code)
            continue
        rep = io.read_json(Path(out) / "report.json")
        ef = rep.get("clinical", {}).get("LVEF_MAE_pp")
        for r in rep["rows"]:
            if r["frame"] == 0:
                continue
            rows.append({"slice_count": count, "seed": seed, "frame": r["frame"], "class": r["class"],
                         "cd_mm2": r["cd_mm2"], "dice": r["dice"], "LVEF_MAE_pp": ef})
    rows.sort(key=lambda r: (_count_key(r["slice_count"]), r["seed"], r["frame"], r["class"]))
    cols = ["slice_count", "seed", "frame", "class", "cd_mm2", "dice", "LVEF_MAE_pp"]
    io.write_csv(run.out / "sweep.csv", rows, cols)
    io.write_csv(run.out / "summary.csv", summarize(rows),
                 ["slice_count", "runs", "median_cd_mm2", "median_dice", "median_LVEF_MAE_pp"])
    run.finish("ok" if worst == 0 else "partial")
    if worst:
        raise _ChildFailure(worst)
    return {"runs": len(jobs)}


def summarize(rows):
    """Median over seeds of the per-run mean (over classes and frames) CD and Dice."""
    per_run = {}
    for r in rows:
        per_run.setdefault((r["slice_count"], r["seed"]), []).append(r)
    by_count = {}
    for (count, _), rs in per_run.items():
        by_count.setdefault(count, []).append((
            float(np.mean([float(r["cd_mm2"]) for r in rs])),
            float(np.mean([float(r["dice"]) for r in rs])),
            float(rs[0]["LVEF_MAE_pp"]) if rs[0]["LVEF_MAE_pp"] is not None else float("nan"),
        ))
    out = []
    for count in sorted(by_count, key=_count_key):
        vals = by_count[count]
        out.append({"slice_count": count, "runs": len(vals),
                    "median_cd_mm2": statistics.median(sorted(v[0] for v in vals)),
                    "median_dice": statistics.median(sorted(v[1] for v in vals)),
                    "median_LVEF_MAE_pp": statistics.median(sorted(v[2] for v in vals))})
    return out


class _ChildFailure(Tet4DError):
    def __init__(self, code):
        super().__init__(f"at least one sweep child failed (worst exit code {code})")
        self.exit_code = code


# export --------------------------------------------------------------------


def cmd_export(args):
    src = Path(args.run)
    if (src / "motion" / "motion.json").exists():
        state = io.load_motion(src / "motion")
        if args.frame not in state.frames:
            raise InvalidArgument(f"frame {args.frame} not in fitted frames {state.frames}")
        meshes = state.meshes_at(args.frame)
        grid = state.grid0
    elif _locate_grid(src) is not None:
        if args.frame != 0:
            raise InvalidArgument("a Stage-1 grid only has frame 0")
        grid = io.load_grid(_locate_grid(src))
        meshes = [tetgrid.marching_tets(grid, c) for c in range(grid.class_count)]
    else:
        raise InvalidArgument(f"{src} holds neither a motion state nor a grid")
    run = Run("export", args.out, args.force, args.argv)
    run.add_input("run", src)
    if args.what == "mesh":
        for c, m in enumerate(meshes):
            if not m.is_empty:
                io.write_mesh(m, run.out / f"frame_{args.frame:03d}_class_{c}.{args.format}")
    else:
        template = meshops.LabelVolume.covering([0, 0, 0], [grid.spacing_mm] * 3, args.voxel_mm)
        vol = meshops.compose_labels([m for m in meshes], template)
        io.save_labels(vol, run.out / f"frame_{args.frame:03d}_labels")
    run.finish()
    return {"what": args.what, "frame": args.frame}


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="tet4d", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic 4D heart")
    s.add_argument("--config", help="PhantomConfig JSON")
    s.add_argument("--preset", choices=["nor", "dcm"])
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("fit-static", help="Stage 1: fit a grid to a dense reference frame")
    s.add_argument("--grid-res", type=int, default=64)
    s.add_argument("--target", required=True, help="phantom directory, slice bundle or folder of class_*.obj")
    s.add_argument("--frame", type=int, default=0, help="phantom frame used as target")
    s.add_argument("--fov", type=float, default=128.0, help="grid extent in mm for non-phantom targets")
    _add_fit_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_fit_static)

    s = sub.add_parser("fit-motion", help="Stage 2: recover per-frame motion from slices")
    s.add_argument("--grid", help="fit-static output directory")
    s.add_argument("--obs", required=True, help="phantom directory or slice bundle(s)")
    s.add_argument("--slices", default="full", help="number of slices or 'full'")
    s.add_argument("--planes", help="plane JSON file, 'mid-sax' or 'sax' (default)")
    s.add_argument("--plane", dest="planes", help=argparse.SUPPRESS)
    s.add_argument("--plane-seed", type=int, help="seed of the random slice subset (default: fit seed)")
    s.add_argument("--frames", default="all", help="'all', 'es' or a comma list of frame indices")
    _add_fit_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_fit_motion)

    s = sub.add_parser("sweep", help="slice-count x seed grid of motion fits")
    s.add_argument("--config", required=True, help="sweep spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("export", help="export meshes or label volumes of a fitted run")
    s.add_argument("--run", required=True, help="fit-static or fit-motion output directory")
    s.add_argument("--what", choices=["mesh", "volume"], required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--format", choices=["obj", "ply"], default="obj")
    s.add_argument("--voxel-mm", type=float, default=1.25)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_export)
    return p


def _exit_code(err):
    if isinstance(err, Tet4DError) and err.exit_code != 1:
        return err.exit_code
    if isinstance(err, OSError):
        return EXIT_IO
    return EXIT_INVALID


def run_command(argv, quiet=False):
    """Parse and run one command; returns (exit code, status dict)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        code = EXIT_OK if err.code in (0, None) else EXIT_INVALID
        return code, {"status": "ok" if code == 0 else "error", "exit_code": code, "message": "usage"}
    args.argv = list(argv)
    if not quiet:
        logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
    status = {"command": args.command, "out": getattr(args, "out", None)}
    try:
        info = args.func(args)
        status.update(status="ok", exit_code=EXIT_OK, **(info or {}))
        return EXIT_OK, status
    except (Tet4DError, OSError, ValueError) as err:
        code = _exit_code(err)
        log.error("%s", err)
        status.update(status="error", exit_code=code, message=str(err))
        return code, status


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    code, status = run_command(argv)
    print(json.dumps(status, default=io._json_default, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
