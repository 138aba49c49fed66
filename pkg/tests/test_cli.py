import json

import numpy as np
import pytest

from tet4d import cli, io


def run(*argv):
    return cli.run_command([str(a) for a in argv], quiet=True)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small phantom, a Stage-1 grid and a mid-slice motion fit shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    code, _ = run("phantom", "--preset", "nor", "--set", "frame_count=4", "--set", "subdivisions=3", "--out", root / "ph")
    assert code == 0
    code, status = run("fit-static", "--target", root / "ph", "--grid-res", 24, "--max-iter-static", 150,
                       "--eval-samples", 4000, "--out", root / "st")
    assert code == 0, status
    code, status = run("fit-motion", "--grid", root / "st", "--obs", root / "ph", "--planes", "mid-sax",
                       "--frames", "es", "--max-iter-motion", 10, "--eval-samples", 4000, "--out", root / "mo")
    assert code == 0, status
    return root


def test_phantom_outputs(workdir):
    ph = workdir / "ph"
    gt = io.read_json(ph / "ground_truth.json")
    assert gt["frame_count"] == 4 and gt["ed_frame"] == 0
    assert 0.5 < gt["LVEF"] < 0.65
    for t in range(4):
        assert sorted(p.name for p in (ph / f"frame_{t:03d}").glob("class_*.obj")) == ["class_0.obj", "class_1.obj", "class_2.obj"]
    assert len(io.read_csv(ph / "ground_truth.csv")) == 12
    labels = io.load_labels(ph / "frame_000" / "labels")
    assert set(np.unique(labels.labels)) == {0, 1, 2, 3}


def test_manifest_contents(workdir):
    m = io.read_json(workdir / "st" / "manifest.json")
    assert m["command"] == "fit-static" and m["status"] == "ok"
    assert m["outputs"] == io.output_hashes(workdir / "st")
    assert "manifest.json" not in m["outputs"]
    assert m["inputs"]["target"]["sha256"] == io.output_hashes(workdir / "ph")
    assert m["seed"] == 0 and m["wall_clock_s"] > 0
    assert m["argv"][0] == "fit-static"


def test_fit_static_outputs(workdir):
    st = workdir / "st"
    g = io.load_grid(st / "grid")
    assert g.resolution == 24 and g.class_count == 3
    rows = io.read_csv(st / "metrics.csv")
    assert len(rows) == 3
    # coarse grid, short run: still a usable fit
    assert all(float(r["dice"]) > 0.6 for r in rows)
    assert io.read_json(st / "fit_config.json")["max_iter_static"] == 150


def test_fit_motion_outputs(workdir):
    mo = workdir / "mo"
    rep = io.read_json(mo / "report.json")
    gt = io.read_json(workdir / "ph" / "ground_truth.json")
    es = gt["es_frame"]
    state = io.load_motion(mo / "motion")
    assert state.frames == [0, es]
    assert {r["frame"] for r in rep["rows"]} == {0, es}
    assert "LVEF_MAE_pp" in rep["clinical"]
    planes = io.read_json(mo / "planes.json")
    assert len(planes["planes"]) == 1
    assert (mo / "meshes" / f"frame_{es:03d}" / "class_0.obj").exists()


def test_export_mesh_and_volume(workdir):
    es = io.read_json(workdir / "ph" / "ground_truth.json")["es_frame"]
    code, _ = run("export", "--run", workdir / "mo", "--what", "mesh", "--frame", es, "--format", "ply",
                  "--out", workdir / "ex_mesh")
    assert code == 0
    m = io.read_ply(workdir / "ex_mesh" / f"frame_{es:03d}_class_0.ply")
    assert len(m.triangles) > 0
    code, _ = run("export", "--run", workdir / "st", "--what", "volume", "--voxel-mm", 2.0, "--out", workdir / "ex_vol")
    assert code == 0
    vol = io.load_labels(workdir / "ex_vol" / "frame_000_labels")
    assert vol.dims == (64, 64, 64)
    assert set(np.unique(vol.labels)) == {0, 1, 2, 3}
    code, _ = run("export", "--run", workdir / "st", "--what", "mesh", "--frame", 2, "--out", workdir / "ex_bad")
    assert code == 2


def test_sweep(workdir):
    spec = {"phantom": str(workdir / "ph"), "grid": str(workdir / "st"), "slice_counts": [1, "full"],
            "seeds": [0], "frames": "es", "fit": {"max_iter_motion": 5, "eval_samples": 3000}}
    (workdir / "sweep.json").write_text(json.dumps(spec))
    code, status = run("sweep", "--config", workdir / "sweep.json", "--out", workdir / "sw")
    assert code == 0, status
    summary = io.read_csv(workdir / "sw" / "summary.csv")
    assert [r["slice_count"] for r in summary] == ["1", "full"]
    assert all(r["runs"] == "1" for r in summary)
    rows = io.read_csv(workdir / "sw" / "sweep.csv")
    assert len(rows) == 2 * 3
    # child manifests stay out of the parent's hashes
    m = io.read_json(workdir / "sw" / "manifest.json")
    assert not any(k.endswith("manifest.json") for k in m["outputs"])


def test_non_empty_out_dir(workdir, tmp_path):
    (tmp_path / "junk.txt").write_text("x")
    code, status = run("phantom", "--preset", "nor", "--set", "frame_count=2", "--out", tmp_path)
    assert code == 2 and "not empty" in status["message"]
    # --force refuses a folder that is not a previous run
    code, _ = run("phantom", "--preset", "nor", "--set", "frame_count=2", "--out", tmp_path, "--force")
    assert code == 2 and (tmp_path / "junk.txt").exists()


def test_force_replaces_previous_run(tmp_path):
    args = ("phantom", "--preset", "dcm", "--set", "frame_count=2", "--set", "subdivisions=2")
    assert run(*args, "--out", tmp_path / "p")[0] == 0
    (tmp_path / "p" / "extra.txt").write_text("x")
    assert run(*args, "--out", tmp_path / "p", "--force")[0] == 0
    assert not (tmp_path / "p" / "extra.txt").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ("phantom", "--preset", "nor", "--set", "contraction=1.0"),
        ("phantom", "--set", "bogus=1"),
        ("fit-static", "--target", "{ph}", "--lambda-cd", "-1"),
        ("fit-static", "--target", "{ph}", "--frame", "9"),
        ("fit-motion", "--grid", "{ph}", "--obs", "{ph}"),
        ("fit-motion", "--grid", "{st}", "--obs", "{ph}", "--slices", "0"),
        ("fit-motion", "--grid", "{st}", "--obs", "{ph}", "--frames", "x"),
        ("nonsense",),
    ],
)
def test_invalid_input_exit_2(workdir, tmp_path, argv):
    argv = [a.format(ph=workdir / "ph", st=workdir / "st") for a in argv]
    if argv[0] != "nonsense":
        argv += ["--out", str(tmp_path / "o")]
    assert run(*argv)[0] == 2


def test_io_failures_exit_3(workdir, tmp_path):
    assert run("fit-static", "--target", tmp_path / "missing", "--out", tmp_path / "o")[0] == 3
    assert run("phantom", "--config", tmp_path / "missing.json", "--out", tmp_path / "o2")[0] == 3
    # a corrupted grid payload fails its checksum
    bad = tmp_path / "bad"
    io.save_grid(io.load_grid(workdir / "st" / "grid"), bad / "grid")
    (bad / "grid" / "sdf.f64").write_bytes(b"\0" * 16)
    assert run("fit-motion", "--grid", bad, "--obs", workdir / "ph", "--out", tmp_path / "o3")[0] == 3


def test_degenerate_class_exit_5(workdir, tmp_path):
    g = io.load_grid(workdir / "st" / "grid")
    g.sdf[2] = 1.0
    io.save_grid(g, tmp_path / "g" / "grid")
    code, status = run("fit-motion", "--grid", tmp_path / "g", "--obs", workdir / "ph", "--planes", "mid-sax",
                       "--frames", "es", "--out", tmp_path / "o")
    assert code == 5, status
    assert io.read_json(tmp_path / "o" / "manifest.json")["status"] == "error"


def test_main_prints_status_line(workdir, tmp_path, capsys):
    code = cli.main(["phantom", "--preset", "nor", "--set", "frame_count=2", "--set", "subdivisions=2",
                     "--out", str(tmp_path / "p")])
    out = capsys.readouterr().out.strip().splitlines()
    assert code == 0 and len(out) == 1
    status = json.loads(out[0])
    assert status["status"] == "ok" and status["frames"] == 2
