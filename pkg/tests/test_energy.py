import numpy as np
import pytest

from dsac.energy import (BilinearStencil, EnergyMaps, balloon_energy, balloon_force,
                         constant_maps, data_energy, data_force, internal_energy,
                         internal_matrices, load_maps, normals, node_weights, sample_bilinear,
                         save_maps, shoelace_energy, shoelace_matrix, total_energy)
from dsac.geometry import init_circle, rasterize, signed_area

from conftest import (central_difference, green_balloon_energy, rel_err, smooth_grid,
                      star_polygon)

UNIT_SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)


# -- bilinear sampling ---------------------------------------------------------

def test_sample_on_pixel_center(rng):
    g = rng.normal(size=(8, 10))
    assert sample_bilinear(g, (3, 5)) == g[5, 3]
    assert sample_bilinear(g, (9, 7)) == g[7, 9]  # last row and column


def test_sample_midpoint_is_mean(rng):
    g = rng.normal(size=(8, 10))
    assert sample_bilinear(g, (3.5, 5)) == pytest.approx(0.5 * (g[5, 3] + g[5, 4]))
    assert sample_bilinear(g, (3, 5.5)) == pytest.approx(0.5 * (g[5, 3] + g[6, 3]))


def test_sample_constant_and_clamped():
    g = np.full((6, 6), 2.5)
    pts = np.array([[-3.0, 2.0], [1.3, 4.7], [9.0, 9.0]])
    np.testing.assert_allclose(sample_bilinear(g, pts), 2.5)


def test_splat_is_adjoint_of_sample(rng):
    g = rng.normal(size=(12, 9))
    pts = rng.uniform(0, 8, (30, 2))
    w = rng.normal(size=30)
    st = BilinearStencil.at(pts, g.shape)
    assert np.dot(st.sample(g), w) == pytest.approx(np.sum(st.splat(w, g.shape) * g))


# -- data term -----------------------------------------------------------------

def test_data_force_ramp():
    uu, _ = np.meshgrid(np.arange(32.0), np.arange(24.0))
    c = init_circle((15, 12), 6, 20)
    np.testing.assert_allclose(data_force(uu, c), np.tile([-1.0, 0.0], (20, 1)), atol=1e-12)


def test_data_force_constant_is_zero():
    c = init_circle((15, 12), 6, 20)
    assert np.all(data_force(np.full((24, 32), 3.0), c) == 0)


def test_data_force_matches_finite_differences(rng):
    for _ in range(10):
        D = smooth_grid(rng, 64, 64)
        c = star_polygon(rng)
        fd = central_difference(lambda y: data_energy(D, y), c, 1e-6)
        assert rel_err(-data_force(D, c), fd) < 1e-4


# -- internal terms ------------------------------------------------------------

def test_internal_matrices_zero_weights():
    c = init_circle((10, 10), 5, 12)
    A, B = internal_matrices(np.zeros(12), np.zeros(12), c)
    assert not A.any() and not B.any()


def test_internal_rows_match_stencils():
    L = 9
    a = np.arange(1.0, L + 1)
    b = np.arange(10.0, 10 + L)
    A, B = internal_matrices(a, b, np.zeros((L, 2)))
    s = 4
    np.testing.assert_allclose(A[s, s - 1:s + 2], 2 * np.array([-a[s - 1], a[s - 1] + a[s], -a[s]]))
    expected = 2 * np.array([b[s - 1], -2 * b[s] - 2 * b[s - 1], b[s - 1] + 4 * b[s] + b[s + 1],
                             -2 * b[s + 1] - 2 * b[s], b[s + 1]])
    np.testing.assert_allclose(B[s, s - 2:s + 3], expected)


def test_band_structure_and_symmetry():
    L = 12
    A, B = internal_matrices(np.full(L, 0.7), np.full(L, 0.3), np.zeros((L, 2)))
    idx = np.arange(L)
    dist = np.abs(idx[:, None] - idx[None, :])
    circ = np.minimum(dist, L - dist)
    assert not A[circ > 1].any()
    assert not B[circ > 2].any()
    np.testing.assert_allclose(A, A.T)
    np.testing.assert_allclose(B, B.T)
    assert np.linalg.eigvalsh(A).min() > -1e-12
    assert np.linalg.eigvalsh(B).min() > -1e-12


def test_thin_plate_vanishes_on_straight_run():
    c = np.array([[0, 0], [1, 0], [2, 0], [3, 0], [4, 0], [4, 4], [0, 4]], float)
    _, B = internal_matrices(np.zeros(7), np.ones(7), c)
    # nodes 1..3 have zero second difference on both sides except through node 4
    assert (B @ c)[2] == pytest.approx([0, 0])


def test_internal_matrices_reject_negative():
    with pytest.raises(ValueError):
        internal_matrices(-np.ones(5), np.ones(5), np.zeros((5, 2)))


def test_internal_force_matches_finite_differences(rng):
    for _ in range(10):
        c = star_polygon(rng)
        a = node_weights(np.exp(smooth_grid(rng, 64, 64, scale=0.3)), c)
        b = node_weights(np.exp(smooth_grid(rng, 64, 64, scale=0.3)), c)
        A, B = internal_matrices(a, b, c)
        fd = central_difference(lambda y: internal_energy(a, b, y), c, 1e-4)
        assert rel_err((A + B) @ c, fd) < 1e-4


# -- balloon term --------------------------------------------------------------

def test_shoelace_examples(rng):
    assert shoelace_energy(UNIT_SQUARE) == pytest.approx(2.0)
    assert shoelace_energy(UNIT_SQUARE[::-1]) == pytest.approx(-2.0)
    for _ in range(20):
        c = rng.uniform(-50, 50, (int(rng.integers(3, 30)), 2))
        assert shoelace_energy(c) == pytest.approx(2 * signed_area(c), abs=1e-9)


def test_shoelace_matrix_pattern():
    C = shoelace_matrix(5)
    assert C[0, 1] == 1 and C[1, 0] == -1 and C[0, 4] == -1 and C[4, 0] == 1
    np.testing.assert_array_equal(C, -C.T)


def test_balloon_energy_examples():
    c = np.array([[1.5, 1.5], [9.5, 1.5], [9.5, 7.5], [1.5, 7.5]])
    assert balloon_energy(np.ones((10, 12)), c) == rasterize(c, 12, 10).sum() == 48
    assert balloon_energy(np.zeros((10, 12)), c) == 0
    k = np.zeros((10, 12))
    k[3:5, 4:7] = 1
    assert balloon_energy(k, c) == 6


def test_constant_kappa_force_is_half_normal(rng):
    for _ in range(20):
        c = star_polygon(rng)
        f = balloon_force(np.full((64, 64), 1.7), c)
        np.testing.assert_allclose(f, 0.85 * normals(c), atol=1e-9)


def test_normals_point_outward():
    c = init_circle((20, 20), 8, 16)
    n = normals(c)
    assert np.all(np.sum(n * (c - [20, 20]), axis=1) > 0)


def test_flat_neighbour_contributes_nothing():
    # v_{s-1} == v_s: the edge into node 1 is horizontal, so a u-move of
    # node 1 only sweeps along the other edge
    c = np.array([[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]])
    f = balloon_force(np.ones((10, 10)), c)
    assert f[1, 0] == pytest.approx(0.5 * (6.0 - 2.0))


def test_balloon_force_matches_smooth_energy(rng):
    for _ in range(8):
        k = smooth_grid(rng, 64, 64) + 0.5
        c = star_polygon(rng)
        fd = central_difference(lambda y: green_balloon_energy(k, y), c, 1e-3)
        assert rel_err(balloon_force(k, c), fd) < 5e-2


# -- totals and storage --------------------------------------------------------

def test_total_energy_zero_maps():
    c = init_circle((10, 10), 5, 12)
    assert total_energy(constant_maps(20, 20), c) == 0


def test_total_energy_data_only(rng):
    D = rng.normal(size=(20, 20))
    c = init_circle((10, 10), 5, 12)
    maps = EnergyMaps(D, 0.0, np.zeros_like(D), np.zeros_like(D))
    assert total_energy(maps, c) == pytest.approx(sum(sample_bilinear(D, p) for p in c))


def test_total_energy_regular_polygon_by_hand():
    # square of side 4 with 4 nodes: |y'|^2 = 16, |y''|^2 = 32 at each node
    c = np.array([[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]])
    maps = constant_maps(10, 10, D=0.5, alpha=0.25, beta=0.125, kappa=0.1)
    inside = rasterize(c, 10, 10).sum()
    expected = 4 * 0.5 + 4 * 0.25 * 16 + 4 * 0.125 * 32 - 0.1 * inside
    assert total_energy(maps, c) == pytest.approx(expected)


def test_total_energy_shift_invariant(rng):
    maps = EnergyMaps(smooth_grid(rng, 64, 64), 0.3, np.exp(smooth_grid(rng, 64, 64)),
                      smooth_grid(rng, 64, 64))
    c = star_polygon(rng)
    assert total_energy(maps, np.roll(c, 5, axis=0)) == pytest.approx(total_energy(maps, c))


def test_maps_validation():
    z = np.zeros((4, 4))
    with pytest.raises(ValueError):
        EnergyMaps(z, 0.0, -np.ones((4, 4)), z)
    with pytest.raises(ValueError):
        EnergyMaps(z, 0.0, np.zeros((4, 5)), z)
    with pytest.raises(ValueError):
        EnergyMaps(z, -1.0, z, z)


@pytest.mark.parametrize("alpha_local", [False, True])
def test_maps_roundtrip(tmp_path, rng, alpha_local):
    g = lambda lo=0.0: rng.uniform(lo, 1, (7, 9)).astype(np.float32).astype(np.float64)
    alpha = g() if alpha_local else 0.25
    maps = EnergyMaps(g(), alpha, g(), g(-1.0), kappa_local=False)
    save_maps(maps, tmp_path / "m")
    back = load_maps(tmp_path / "m")
    for name in ("D", "beta", "kappa"):
        np.testing.assert_array_equal(getattr(back, name), getattr(maps, name))
    np.testing.assert_array_equal(np.asarray(back.alpha), np.asarray(maps.alpha))
    assert back.alpha_local == alpha_local and back.kappa_local is False
