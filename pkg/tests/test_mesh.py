import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saddleprobe.mesh import (
    Grid2D,
    boundary_inner,
    build_grid,
    embed,
    normal_derivative,
    read_field,
    read_trace,
    surface_laplacian,
    surface_laplacian_matrix,
    trace,
    write_field,
    write_trace,
)

sizes = st.integers(min_value=3, max_value=12)


def test_smallest_grid():
    g = build_grid(3, 3)
    assert g.n_nodes == 9
    assert g.n_boundary == 8


def test_perimeter_count():
    assert build_grid(5, 4).n_boundary == 14


def test_spacing():
    g = build_grid(33, 33)
    assert g.hx == g.hy == 1 / 32
    assert g.hx * (g.nx - 1) == 1.0


@pytest.mark.parametrize("nx,ny", [(2, 5), (5, 2), (0, 3)])
def test_too_small(nx, ny):
    with pytest.raises(ValueError):
        build_grid(nx, ny)


@given(sizes, sizes)
def test_loop_visits_boundary_once_ccw(nx, ny):
    g = build_grid(nx, ny)
    i, j = g.loop
    assert len(set(zip(i, j))) == g.n_boundary == 2 * (nx - 1) + 2 * (ny - 1)
    assert (i[0], j[0]) == (0, 0)
    # consecutive nodes (including the closing step) are grid neighbours
    di = np.abs(np.diff(np.append(i, i[0])))
    dj = np.abs(np.diff(np.append(j, j[0])))
    assert np.all(di + dj == 1)
    # counterclockwise: positive signed area (shoelace)
    x, y = g.x[i], g.y[j]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert area == pytest.approx(1.0)
    assert g.segment_lengths.sum() == pytest.approx(4.0)
    assert g.arclength_weights.sum() == pytest.approx(4.0)


def test_constant_trace():
    g = build_grid(6, 5)
    assert np.all(trace(g, np.full(g.shape, 2.5)) == 2.5)


def test_x_coordinate_trace():
    g = build_grid(5, 5)
    X, _ = g.coords
    tr = trace(g, X)
    n = g.nx - 1
    assert np.allclose(tr[:n], g.x[:n])          # bottom 0 -> 1
    assert np.all(tr[n:2 * n] == 1.0)            # right edge
    assert np.allclose(tr[2 * n:3 * n], g.x[::-1][:n])  # top 1 -> 0
    assert np.all(tr[3 * n:] == 0.0)             # left edge


def test_trace_index_map(rng):
    g = build_grid(7, 6)
    u = rng.standard_normal(g.shape)
    tr = trace(g, u)
    i, j = g.loop
    for k in range(g.n_boundary):
        assert tr[k] == u[j[k], i[k]]


@given(sizes, sizes)
def test_trace_of_embed_is_identity(nx, ny):
    g = build_grid(nx, ny)
    v = np.arange(g.n_boundary, dtype=float)
    assert np.array_equal(trace(g, embed(g, v)), v)


def test_normal_derivative_constant_and_linear():
    g = build_grid(9, 7)
    X, Y = g.coords
    assert np.allclose(normal_derivative(g, np.ones(g.shape)), 0.0)
    dn = normal_derivative(g, X)
    i, j = g.loop
    right = (i == g.nx - 1) & (j > 0) & (j < g.ny - 1)
    left = (i == 0) & (j > 0) & (j < g.ny - 1)
    assert np.allclose(dn[right], 1.0)
    assert np.allclose(dn[left], -1.0)
    # any linear field on edge interiors
    dn = normal_derivative(g, 2 * X - 3 * Y)
    n = g.normals
    edge = ~g.corner_mask
    assert np.allclose(dn[edge], (2 * n[:, 0] - 3 * n[:, 1])[edge])


def _cos_dn_error(n):
    g = build_grid(n, n)
    X, Y = g.coords
    u = np.cos(np.pi * X) * np.cos(np.pi * Y)
    ux = -np.pi * np.sin(np.pi * X) * np.cos(np.pi * Y)
    uy = -np.pi * np.cos(np.pi * X) * np.sin(np.pi * Y)
    nrm = g.normals
    exact = nrm[:, 0] * trace(g, ux) + nrm[:, 1] * trace(g, uy)
    edge = ~g.corner_mask
    return np.max(np.abs(normal_derivative(g, u) - exact)[edge])


def test_normal_derivative_second_order():
    # cos(πx)cos(πy) has zero flux; use a shifted mode to get nonzero values
    def err(n):
        g = build_grid(n, n)
        X, Y = g.coords
        u = np.sin(np.pi * X / 2) * np.exp(Y)
        ux = np.pi / 2 * np.cos(np.pi * X / 2) * np.exp(Y)
        uy = u
        nrm = g.normals
        exact = nrm[:, 0] * trace(g, ux) + nrm[:, 1] * trace(g, uy)
        edge = ~g.corner_mask
        return np.max(np.abs(normal_derivative(g, u) - exact)[edge])

    ratio = err(17) / err(33)
    assert 3.4 < ratio < 4.6
    assert _cos_dn_error(33) < _cos_dn_error(17)


def test_surface_laplacian_constants_and_spike():
    g = build_grid(6, 6)
    assert np.allclose(surface_laplacian(g, np.full(g.n_boundary, 3.0)), 0.0)
    v = np.zeros(g.n_boundary)
    k = 2  # mid bottom edge, uniform spacing
    v[k] = 1.0
    out = surface_laplacian(g, v)
    h2 = g.hx ** 2
    assert out[k - 1] == pytest.approx(-1 / h2)
    assert out[k] == pytest.approx(2 / h2)
    assert out[k + 1] == pytest.approx(-1 / h2)
    assert np.count_nonzero(out) == 3


@pytest.mark.parametrize("kmode", [1, 2, 5])
def test_surface_laplacian_circulant_eigenvalue(kmode):
    g = build_grid(9, 9)
    S, h = g.n_boundary, g.hx
    s = np.arange(S)
    v = np.cos(2 * np.pi * kmode * s / S)
    # dense circulant oracle
    C = np.zeros((S, S))
    for r in range(S):
        C[r, r] = 2 / h**2
        C[r, (r - 1) % S] = C[r, (r + 1) % S] = -1 / h**2
    lam = 2 / h**2 * (1 - np.cos(2 * np.pi * kmode / S))
    assert np.allclose(C @ v, lam * v)
    assert np.allclose(surface_laplacian(g, v), lam * v)


@settings(max_examples=30, deadline=None)
@given(sizes, sizes, st.integers(0, 2**31 - 1))
def test_surface_laplacian_symmetric_psd(nx, ny, seed):
    g = build_grid(nx, ny)
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, g.n_boundary))
    Pa, Pb = surface_laplacian(g, a), surface_laplacian(g, b)
    scale = np.sqrt(boundary_inner(g, Pa, Pa) * boundary_inner(g, b, b)) + 1e-300
    assert abs(boundary_inner(g, Pa, b) - boundary_inner(g, a, Pb)) <= 1e-12 * scale
    assert boundary_inner(g, Pa, a) >= 0
    # kernel is exactly the constants
    P = surface_laplacian_matrix(g).toarray()
    w = np.sqrt(g.arclength_weights)
    ev = np.linalg.eigvalsh((w[:, None] * P) / w[None, :])
    assert np.sum(np.abs(ev) < 1e-8 * ev.max()) == 1


def test_surface_laplacian_power():
    g = build_grid(5, 4)
    v = np.random.default_rng(0).standard_normal(g.n_boundary)
    assert np.array_equal(surface_laplacian(g, v, 0), v)
    assert np.allclose(surface_laplacian(g, v, 2), surface_laplacian(g, surface_laplacian(g, v)))


def test_field_roundtrip(tmp_path, rng):
    g = build_grid(5, 7)
    u = rng.standard_normal(g.shape)
    write_field(tmp_path / "u.txt", g, u)
    g2, u2 = read_field(tmp_path / "u.txt")
    assert g2 == g
    assert np.array_equal(u, u2)
    v = rng.standard_normal(g.n_boundary)
    write_trace(tmp_path / "v.txt", v)
    assert np.array_equal(read_trace(tmp_path / "v.txt"), v)


def test_check_field_rejects_bad_shape():
    g = Grid2D(4, 4)
    with pytest.raises(ValueError):
        trace(g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        trace(g, np.full(g.shape, np.nan))
