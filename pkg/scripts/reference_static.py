"""Calibration run for the static-fit thresholds.

Fits the ED frame of both phantom presets at grid resolution 64 and writes
the measured CD and Dice next to the frozen thresholds in
tests/fixtures/static_reference.json.

    python3 scripts/reference_static.py [--res 64] [--write]
"""

import argparse
import json
import time
from pathlib import Path

from tet4d import fit, phantom, tetgrid

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "static_reference.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--write", action="store_true", help="update the committed fixture")
    args = ap.parse_args()
    cfg = fit.FitConfig()
    measured = {}
    for name in ("nor", "dcm"):
        seq = phantom.generate(phantom.PhantomConfig.preset(name))
        t0 = time.perf_counter()
        g0, report = fit.fit_static(tetgrid.build_grid(args.res, 3, seq.config.fov_mm), seq.frames[0].meshes, cfg)
        elapsed = time.perf_counter() - t0
        meshes = [tetgrid.marching_tets(g0, c) for c in range(3)]
        rows = fit.mesh_metrics(meshes, seq.frames[0].meshes, seq.label_template(), cfg, (0,))
        measured[name] = {"cd_mm2": [r["cd_mm2"] for r in rows], "dice": [r["dice"] for r in rows],
                          "seconds": round(elapsed, 1)}
        print(name, json.dumps(measured[name]))
    if args.write:
        ref = json.loads(FIXTURE.read_text())
        ref["reference_run"] = {"grid_resolution": args.res, **measured}
        FIXTURE.write_text(json.dumps(ref, indent=2, sort_keys=True) + "\n")
        print("wrote", FIXTURE)


if __name__ == "__main__":
    main()
