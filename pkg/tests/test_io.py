import json

import numpy as np
import pytest

from shapes import box_mesh, sphere_grid, sphere_mesh
from tet4d import fit, io, phantom
from tet4d.errors import InvalidArgument, StorageError
from tet4d.meshops import LabelVolume
from tet4d.slicegeom import axial_plane, make_observation


@pytest.fixture(scope="module")
def seq():
    return phantom.generate(phantom.PhantomConfig.preset("nor", frame_count=4, subdivisions=2))


def test_json_and_numpy_values(tmp_path):
    p = tmp_path / "a" / "x.json"
    io.write_json(p, {"b": np.float64(1.5), "a": np.arange(3), "c": tmp_path})
    d = io.read_json(p)
    assert d == {"a": [0, 1, 2], "b": 1.5, "c": str(tmp_path)}
    # sorted keys, LF line endings
    raw = p.read_bytes()
    assert b"\r\n" not in raw and raw.index(b'"a"') < raw.index(b'"b"')


def test_csv_round_trip(tmp_path):
    rows = [{"frame": 1, "cd": 0.1, "note": None}, {"frame": 2, "cd": np.float32(2.5), "note": "x"}]
    io.write_csv(tmp_path / "t.csv", rows, ["frame", "cd", "note"])
    back = io.read_csv(tmp_path / "t.csv")
    assert back == [{"frame": "1", "cd": "0.1", "note": ""}, {"frame": "2", "cd": "2.5", "note": "x"}]
    assert float(back[0]["cd"]) == 0.1


def test_obj_round_trip(tmp_path):
    m = sphere_mesh(7.3, (1.0, -2.0, 3.0), 2)
    io.write_obj(m, tmp_path / "m.obj")
    back = io.read_obj(tmp_path / "m.obj", class_id=2)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.allclose(back.vertices, m.vertices, rtol=1e-8, atol=1e-8)
    assert back.class_id == 2


def test_ply_round_trip(tmp_path):
    m = box_mesh((0, 0, 0), (1.5, 2.25, 3.0))
    io.write_mesh(m, tmp_path / "m.ply")
    back = io.read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.triangles, m.triangles)
    # float32 storage
    assert np.allclose(back.vertices, m.vertices, atol=1e-6)


def test_unknown_mesh_format(tmp_path):
    with pytest.raises(InvalidArgument):
        io.write_mesh(box_mesh((0, 0, 0), (1, 1, 1)), tmp_path / "m.stl")


def test_grid_round_trip_is_exact(tmp_path):
    g = sphere_grid(8, spacing_mm=32.0, class_count=2)
    g.offsets[...] = np.random.default_rng(0).uniform(-0.9, 0.9, g.offsets.shape) * g.offset_clamp
    io.save_grid(g, tmp_path / "g")
    back = io.load_grid(tmp_path / "g")
    assert back.resolution == g.resolution and back.class_count == 2
    assert np.array_equal(back.sdf, g.sdf) and np.array_equal(back.offsets, g.offsets)
    assert back.spacing_mm == g.spacing_mm and back.offset_clamp == g.offset_clamp


def test_grid_checksum_detects_corruption(tmp_path):
    g = sphere_grid(6, spacing_mm=20.0)
    io.save_grid(g, tmp_path / "g")
    raw = bytearray((tmp_path / "g" / "sdf.f64").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "g" / "sdf.f64").write_bytes(bytes(raw))
    with pytest.raises(StorageError):
        io.load_grid(tmp_path / "g")


def test_missing_grid_is_storage_error(tmp_path):
    with pytest.raises(StorageError):
        io.load_grid(tmp_path / "nowhere")


def test_labels_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vol = LabelVolume((4, 5, 6), (1.0, 1.25, 2.0), (-3.0, 0.0, 7.5), rng.integers(0, 4, (4, 5, 6)))
    io.save_labels(vol, tmp_path / "lab")
    back = io.load_labels(tmp_path / "lab")
    assert back.dims == vol.dims
    assert np.array_equal(back.labels, vol.labels)
    assert np.array_equal(back.spacing_mm, vol.spacing_mm) and np.array_equal(back.origin_mm, vol.origin_mm)
    # k varies fastest on disk
    flat = np.fromfile(tmp_path / "lab.u8", np.uint8)
    assert flat[1] == vol.labels[0, 0, 1]


def test_plane_round_trip(tmp_path):
    p = axial_plane(42.5)
    io.save_plane(p, tmp_path / "p.json")
    q = io.load_plane(tmp_path / "p.json")
    assert q.to_dict() == p.to_dict()


def test_slices_round_trip(tmp_path, seq):
    planes = phantom.sax_planes(seq.config)[2:5]
    obs = make_observation(seq.frames[1], planes, with_masks=True)
    io.save_slices(obs, tmp_path / "s")
    back = io.load_slices(tmp_path / "s")
    assert back.frame_index == obs.frame_index == 1
    assert len(back) == len(obs)
    for a, b in zip(obs.observations, back.observations):
        assert a.plane.to_dict() == b.plane.to_dict()
        assert np.array_equal(a.mask, b.mask)
        assert sorted(a.contours) == sorted(b.contours)
        for c in a.contours:
            assert len(a.contours[c]) == len(b.contours[c])
            for pa, pb in zip(a.contours[c], b.contours[c]):
                assert np.array_equal(pa, pb)


def test_motion_round_trip(tmp_path):
    g = sphere_grid(8, spacing_mm=32.0)
    state = fit.MotionState(g, 4, {1: np.random.default_rng(2).normal(0, 0.03, (1, 64, 3))}, 0.25)
    io.save_motion(state, tmp_path / "m")
    back = io.load_motion(tmp_path / "m")
    assert back.frames == state.frames
    assert np.array_equal(back.control[1], state.control[1])
    assert np.array_equal(back.grid_at(1).positions(0), state.grid_at(1).positions(0))


def test_report_files(tmp_path):
    rep = fit.FitReport(config={"a": 1}, trace=[{"stage": "static", "frame": 0, "class": 0, "iteration": 0,
                                                  "loss": 1.0, "candidate_loss": 0.9, "step": 1e-3, "accepted": True}],
                        rows=[{"frame": 0, "class": 0, "cd_mm2": 0.5, "dice": 0.9, "volume_ml": 10.0, "headline": True}],
                        volume_curve={"0": [10.0, 5.0], "2": [8.0, 5.0]})
    io.save_report(rep, tmp_path)
    d = io.read_json(tmp_path / "report.json")
    assert "trace" not in d and "wall_clock_s" not in d
    assert io.read_csv(tmp_path / "trace.csv")[0]["accepted"] == "True"
    assert io.read_csv(tmp_path / "metrics.csv")[0]["cd_mm2"] == "0.5"
    curve = io.read_csv(tmp_path / "volume_curve.csv")
    assert [r["frame"] for r in curve] == ["0", "2"] and curve[1]["class_0_ml"] == "8.0"


def test_output_hashes_skip_manifests(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "a.txt").write_text("a")
    (tmp_path / "manifest.json").write_text(json.dumps({"t": 1}))
    (tmp_path / "sub" / "manifest.json").write_text("x")
    (tmp_path / "sub" / "b.txt").write_text("b")
    h = io.output_hashes(tmp_path)
    assert list(h) == ["a.txt", "sub/b.txt"]
    assert h["a.txt"] == io.sha256_file(tmp_path / "a.txt")
