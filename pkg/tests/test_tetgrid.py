import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tet4d import tetgrid
from tet4d.errors import InvalidArgument
from tet4d.meshops import edge_use, is_watertight, signed_volume_mm3
from tet4d.tetgrid import apply_motion, build_grid, marching_tets, marching_tets_grad, polygonize_tets

import oracles
from shapes import blob_sdf, sphere_grid

REF_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)


def random_interior_grid(rng, resolution, class_count=1, spacing_mm=1.0, offsets=True):
    g = build_grid(resolution, class_count, spacing_mm)
    for c in range(class_count):
        g.sdf[c] = blob_sdf(g.base_vertices, rng)
        if offsets:
            g.offsets[c] = rng.uniform(-1, 1, g.offsets[c].shape) * g.offset_clamp
    return g


# construction ---------------------------------------------------------------


def test_minimal_lattice():
    g = build_grid(2, 1, 1.0)
    assert g.vertex_count == 8
    assert g.tets.shape == (6, 4)
    assert not g.offsets.any()


def test_array_sizes():
    g = build_grid(5, 3, 2.0)
    assert g.sdf.size == 3 * 5**3
    assert g.offsets.shape == (3, 125, 3)


def test_tet_enumeration_matches_bruteforce():
    g = build_grid(3, 2, 1.0)
    assert len(g.tets) == 48
    assert {tuple(sorted(t)) for t in g.tets.tolist()} == oracles.kuhn_tets_bruteforce(3)


def test_tets_positive_and_tile_the_cube():
    g = build_grid(4, 1, 1.0)
    vol = g.tet_volumes(0)
    assert np.all(vol > 0)
    assert np.isclose(vol.sum(), 1.0)


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
def test_lattice_symmetric_under_axis_permutation(perm):
    g = build_grid(4, 1, 1.0)
    moved = g.base_vertices[:, perm]
    key = lambda p: np.round(p * 3).astype(int) @ np.array([16, 4, 1])
    assert sorted(key(moved)) == sorted(key(g.base_vertices))
    # the tets map onto tets as vertex sets
    lookup = {k: i for i, k in enumerate(key(g.base_vertices))}
    remap = np.array([lookup[k] for k in key(moved)])
    mapped = {tuple(sorted(remap[t])) for t in g.tets.tolist()}
    assert mapped == {tuple(sorted(t)) for t in g.tets.tolist()}


@pytest.mark.parametrize("args", [(1, 1, 1.0), (0, 1, 1.0), (3, 0, 1.0), (3, 1, 0.0), (2.5, 1, 1.0)])
def test_build_grid_rejects(args):
    with pytest.raises(InvalidArgument):
        build_grid(*args)


def test_initial_sdf_is_centered_sphere():
    g = build_grid(9, 2, 1.0)
    center = np.argmin(np.linalg.norm(g.base_vertices - 0.5, axis=1))
    assert np.allclose(g.sdf[:, center], -0.25)


def test_validate_catches_out_of_clamp_offsets():
    g = build_grid(4, 1, 1.0)
    g.offsets[0, 0, 0] = 2 * g.offset_clamp
    with pytest.raises(InvalidArgument):
        g.validate()


# case table -----------------------------------------------------------------


def test_sixteen_configurations_match_bruteforce():
    counts = []
    for code in range(16):
        signs = [-1.0 if code >> i & 1 else 1.0 for i in range(4)]
        mesh = polygonize_tets(REF_TET, signs, [[0, 1, 2, 3]])
        expected = oracles.crossing_triangle_count(signs)
        assert len(mesh.triangles) == expected
        counts.append((bin(code).count("1"), code, expected))
        if expected:
            # triangle normals point from the inside vertices towards the outside ones
            inside = REF_TET[[i for i in range(4) if signs[i] < 0]].mean(0)
            outside = REF_TET[[i for i in range(4) if signs[i] > 0]].mean(0)
            v = mesh.vertices[mesh.triangles]
            n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
            assert np.all(n @ (outside - inside) > 0)
    by_popcount = [c for _, _, c in sorted(counts)]
    assert by_popcount == [0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 0]


def test_single_tet_midpoints():
    mesh = polygonize_tets(REF_TET, [-1, 1, 1, 1], [[0, 1, 2, 3]])
    assert len(mesh.triangles) == 1
    expected = {(0.5, 0, 0), (0, 0.5, 0), (0, 0, 0.5)}
    assert {tuple(np.round(v, 12)) for v in mesh.vertices} == expected
    assert np.allclose(mesh.source_t, 0.5)


def test_all_positive_is_empty():
    g = build_grid(6, 1, 1.0)
    g.sdf[0] = 1.0
    mesh = marching_tets(g, 0)
    assert mesh.is_empty and len(mesh.vertices) == 0


def test_class_id_out_of_range():
    g = build_grid(4, 2, 1.0)
    with pytest.raises(InvalidArgument):
        marching_tets(g, 2)
    with pytest.raises(InvalidArgument):
        marching_tets(g, -1)


def test_exact_zero_is_tie_broken():
    g = sphere_grid(8, radius=0.3)
    g.sdf[0, np.argmin(np.abs(g.sdf[0]))] = 0.0
    g.sdf[0, 0] = 0.0  # a corner, outside the sphere
    mesh = marching_tets(g, 0)
    assert np.all((mesh.source_t > 0) & (mesh.source_t < 1))
    assert is_watertight(mesh)


def test_open_surface_warning():
    g = sphere_grid(8, center=(0.1, 0.5, 0.5), radius=0.3)
    mesh = marching_tets(g, 0)
    assert mesh.open_surface
    assert not marching_tets(sphere_grid(8), 0).open_surface


# surface invariants -----------------------------------------------------------


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1), resolution=st.integers(8, 20))
def test_watertight_and_positive(seed, resolution):
    rng = np.random.default_rng(seed)
    g = random_interior_grid(rng, resolution)
    mesh = marching_tets(g, 0)
    assert not mesh.open_surface
    assert is_watertight(mesh)
    assert signed_volume_mm3(mesh) > 0
    assert np.all((mesh.source_t > 0) & (mesh.source_t < 1))
    assert np.all(mesh.source_edge[:, 0] < mesh.source_edge[:, 1])
    # every vertex is the stated interpolation along its edge
    pos = g.positions(0)
    a, b = mesh.source_edge.T
    assert np.allclose(mesh.vertices, pos[a] + mesh.source_t[:, None] * (pos[b] - pos[a]))


@settings(max_examples=15)
@given(seed=st.integers(0, 2**32 - 1))
def test_sign_flip_reverses_orientation(seed):
    rng = np.random.default_rng(seed)
    g = random_interior_grid(rng, 10)
    m1 = marching_tets(g, 0)
    m2 = marching_tets(g.with_arrays(sdf=-g.sdf), 0)
    assert np.allclose(m1.vertices, m2.vertices)
    key = lambda tris: sorted(tuple(np.roll(t, -np.argmin(t))) for t in tris.tolist())
    assert key(m1.triangles) == key(m2.triangles[:, ::-1])
    assert np.isclose(signed_volume_mm3(m1), -signed_volume_mm3(m2))


def test_per_class_fields_are_independent():
    g = build_grid(10, 2, 1.0)
    g.sdf[1] = tetgrid.sphere_sdf(g.base_vertices, (0.5, 0.5, 0.5), 0.35)
    v0 = signed_volume_mm3(marching_tets(g, 0))
    v1 = signed_volume_mm3(marching_tets(g, 1))
    assert v1 > v0


def test_sphere_volume_resolution_64():
    r = 0.3
    g = sphere_grid(64, radius=r)
    mesh = marching_tets(g, 0)
    assert is_watertight(mesh)
    assert abs(signed_volume_mm3(mesh) / oracles.sphere_volume(r) - 1) < 0.01


def test_sphere_volume_converges():
    rng = np.random.default_rng(3)
    centers = rng.uniform(0.45, 0.55, size=(5, 3))
    errors = []
    for R in (16, 32, 64):
        errs = []
        for c in centers:
            g = sphere_grid(R, center=c, radius=0.3)
            errs.append(abs(signed_volume_mm3(marching_tets(g, 0)) / oracles.sphere_volume(0.3) - 1))
        errors.append(np.median(errs))
    assert errors[0] >= errors[1] >= errors[2]


# gradients ---------------------------------------------------------------


def test_gradient_closed_form_edge():
    g = build_grid(2, 1, 1.0)
    g.sdf[0] = 1.0
    g.sdf[0, 0] = -1.0  # corner (0,0,0); grid vertex 4 sits at (1,0,0)
    mesh, grads = marching_tets_grad(g, 0)
    i = np.flatnonzero((mesh.source_edge == [0, 4]).all(1))[0]
    assert np.isclose(mesh.source_t[i], 0.5)
    assert np.allclose(mesh.vertices[i], [0.5, 0, 0])
    assert np.allclose(grads.d_vertex_d_sdf[i, 0], [-0.25, 0, 0])
    assert np.allclose(grads.d_vertex_d_sdf[i, 1], [-0.25, 0, 0])


def test_position_jacobians_sum_to_identity():
    g = sphere_grid(10)
    _, grads = marching_tets_grad(g, 0)
    J = grads.d_vertex_d_position()
    assert np.allclose(J.sum(1), np.eye(3))


def check_gradients_fd(seed, n_probe=6):
    """Compare every Jacobian entry touching a few random grid vertices with central differences."""
    rng = np.random.default_rng(seed)
    R = int(rng.integers(6, 10))
    spacing = float(rng.uniform(0.5, 2.0))
    g = random_interior_grid(rng, R, class_count=2, spacing_mm=spacing)
    c = int(rng.integers(2))
    mesh, grads = marching_tets_grad(g, c)
    probe = rng.choice(np.unique(grads.grid_vertex), size=n_probe, replace=False)
    h = 1e-4 * g.lattice_spacing
    fd = oracles.fd_surface_jacobians(g, c, probe, h)
    keys = {tuple(e): i for i, e in enumerate(mesh.source_edge)}
    worst = 0.0
    for (v, what), table in fd.items():
        for key, num in table.items():
            i = keys[key]
            k = 0 if key[0] == v else 1
            if key[k] != v:
                ana = np.zeros(3)
            elif what == "s":
                ana = grads.d_vertex_d_sdf[i, k]
            else:
                ana = grads.weight[i, k] * np.eye(3)[what] * g.spacing_mm
            err = np.abs(ana - num)
            scale = np.maximum(np.abs(num), np.abs(ana))
            bad = (err > 1e-8) & (err > 1e-4 * scale)
            assert not bad.any(), (seed, v, what, key, ana, num)
            worst = max(worst, float(np.max(np.where(scale > 1e-8, err / np.maximum(scale, 1e-300), 0))))
    # vertices not generated by a probed grid vertex do not move
    return worst


@pytest.mark.parametrize("block", range(4))
def test_gradients_match_finite_differences(block):
    for seed in range(25 * block, 25 * block + 25):
        assert check_gradients_fd(seed) < 1e-4


def test_pullback_matches_dense_chain():
    rng = np.random.default_rng(0)
    g = random_interior_grid(rng, 7)
    mesh, grads = marching_tets_grad(g, 0)
    up = rng.normal(size=mesh.vertices.shape)
    gs, go = grads.pullback(up)
    assert np.allclose(gs, grads.sdf_jacobian().T @ up.ravel())
    dense = np.zeros_like(go)
    for i, (a, b) in enumerate(grads.grid_vertex):
        dense[a] += grads.weight[i, 0] * up[i] * g.spacing_mm
        dense[b] += grads.weight[i, 1] * up[i] * g.spacing_mm
    assert np.allclose(go, dense)


# motion ---------------------------------------------------------------------


def test_zero_motion_is_identity():
    rng = np.random.default_rng(1)
    g = random_interior_grid(rng, 8)
    moved = apply_motion(g, np.zeros_like(g.offsets))
    assert np.array_equal(moved.offsets, g.offsets)
    assert np.array_equal(moved.sdf, g.sdf)


def test_uniform_translation_moves_surface():
    g = sphere_grid(12, spacing_mm=10.0)
    delta = np.array([0.2, -0.1, 0.3]) * g.offset_clamp
    moved = apply_motion(g, np.broadcast_to(delta, g.offsets.shape).copy())
    m0, m1 = marching_tets(g, 0), marching_tets(moved, 0)
    assert np.array_equal(m0.triangles, m1.triangles)
    assert np.allclose(m1.vertices - m0.vertices, delta * g.spacing_mm)


def test_motion_saturates_at_clamp():
    g = build_grid(4, 1, 1.0)
    motion = np.zeros_like(g.offsets)
    motion[0, 5, 1] = 10.0
    motion[0, 6, 2] = -10.0
    moved = apply_motion(g, motion)
    assert moved.offsets[0, 5, 1] == g.offset_clamp
    assert moved.offsets[0, 6, 2] == -g.offset_clamp


def test_motion_shape_mismatch():
    g = build_grid(4, 1, 1.0)
    with pytest.raises(InvalidArgument):
        apply_motion(g, np.zeros((1, 3, 3)))


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_default_clamp_bounds_offsets(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(5, 1, 1.0)
    moved = apply_motion(g, rng.uniform(-1, 1, g.offsets.shape) * g.offset_clamp * 3)
    assert np.abs(moved.offsets).max() <= g.offset_clamp
    moved.validate()


def test_inversion_is_reported():
    g = sphere_grid(6)
    motion = np.zeros_like(g.offsets)
    # push a vertex close to the surface far across its neighbours
    v = np.argmin(np.abs(g.sdf[0]))
    motion[0, v] = 3 * g.lattice_spacing
    moved = apply_motion(g, motion, clamp=1.0)
    assert "inverted-tets" in marching_tets(moved, 0).warnings


def test_edge_use_on_grid_surface():
    mesh = marching_tets(sphere_grid(10), 0)
    _, counts, balanced = edge_use(mesh.triangles)
    assert np.all(counts == 2) and balanced
