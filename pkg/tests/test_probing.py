import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saddleprobe.forward import CauchyData, background_solve, make_cauchy, standard_phantom
from saddleprobe.mesh import boundary_inner, build_grid, field_inner, trace
from saddleprobe.operators import assemble, solve
from saddleprobe.probing import (
    IndexField,
    ProbeConfig,
    data_mismatch,
    index_adjoint,
    index_green,
    kernel_matrix,
    probe_matrix,
    probe_trace,
    project_nonnegative,
    surface_laplacian_power,
    weight_norms,
    write_index,
)
from saddleprobe.mesh import read_field

CENTER = (0.3, 0.7)


def _dist(grid, idx):
    x, y, _ = idx.argmax
    return np.hypot(x - CENTER[0], y - CENTER[1]) / grid.hx


def _with_mismatch(data, u0, m):
    """Cauchy data whose mismatch trace(u0) - f equals ``m``."""
    return CauchyData(data.grid, trace(data.grid, u0) - m, data.g, mu_bar=data.mu_bar)


@pytest.fixture(scope="module")
def setup33():
    g = build_grid(33, 33)
    d = make_cauchy(g, standard_phantom())
    return g, d, background_solve(g, 1.0, d.g)


def test_probe_trace_rotation_symmetry():
    g = build_grid(9, 9)
    tr = probe_trace(g, (4, 4))
    q = g.n_boundary // 4
    assert np.allclose(np.roll(tr, q), tr, rtol=1e-12)


def test_probe_matrix_rows_are_probe_traces():
    g = build_grid(9, 7)
    Z = probe_matrix(g)
    for node in [(1, 1), (4, 3), (7, 5)]:
        k = node[1] * g.nx + node[0]
        assert np.allclose(Z[k], probe_trace(g, node), rtol=1e-11, atol=1e-13)


def test_reciprocity():
    g = build_grid(13, 11)
    op = assemble(g, np.ones(g.shape))
    a, b = (3, 4), (9, 7)
    sa = np.zeros(g.shape)
    sa[a[1], a[0]] = 1 / (g.hx * g.hy)
    sb = np.zeros(g.shape)
    sb[b[1], b[0]] = 1 / (g.hx * g.hy)
    ua, ub = solve(op, sa), solve(op, sb)
    assert ua[b[1], b[0]] == pytest.approx(ub[a[1], a[0]], rel=1e-12)


def test_probe_traces_positive():
    g = build_grid(9, 9)
    op = assemble(g, np.ones(g.shape))
    inv = np.linalg.inv(op.matrix.toarray())
    assert np.all(inv > 0)
    Z = probe_matrix(g)[g.interior_mask.ravel()]
    assert np.all(Z > 0)


def test_non_interior_probe_rejected():
    g = build_grid(9, 9)
    with pytest.raises(ValueError):
        probe_trace(g, (0, 4))


def test_zero_anomaly_gives_zero_index():
    g = build_grid(17, 17)
    u0 = background_solve(g, 1.0, np.ones(g.n_boundary))
    d = CauchyData(g, trace(g, u0), np.ones(g.n_boundary))
    assert np.all(index_green(g, d, u0).values == 0)
    assert np.all(index_adjoint(g, d, u0).values == 0)


def test_index_green_localizes(setup33):
    g, d, u0 = setup33
    idx = index_green(g, d, u0, ProbeConfig(s=1, t=1))
    assert _dist(g, idx) <= 2.0
    # values outside the sample set stay zero
    assert np.all(idx.values[~idx.samples] == 0)


def test_noise_moves_argmax_little(setup33):
    g, d, u0 = setup33
    noisy = make_cauchy(g, standard_phantom(), noise_level=0.01, seed=0)
    a = index_green(g, d, u0).argmax
    b = index_green(g, noisy, u0).argmax
    assert np.hypot(a[0] - b[0], a[1] - b[1]) <= 2 * g.hx + 1e-12
    assert _dist(g, index_green(g, noisy, u0)) <= 2.0


def test_index_adjoint_localizes(setup33):
    g, d, u0 = setup33
    assert _dist(g, index_adjoint(g, d, u0, normalize=True)) <= 2.0


@pytest.mark.parametrize("s", [0, 1, 2])
def test_adjoint_equivalence(s):
    g = build_grid(8, 8)
    rng = np.random.default_rng(s)
    u0 = background_solve(g, 1.0, np.ones(g.n_boundary))
    d = _with_mismatch(CauchyData(g, trace(g, u0), np.ones(g.n_boundary)), u0,
                       rng.standard_normal(g.n_boundary))
    cfg = ProbeConfig(s=s, t=0)
    a = index_adjoint(g, d, u0, cfg)
    b = index_green(g, d, u0, cfg, normalize=False)
    m = b.samples
    assert m.any()
    assert np.allclose(a.values[m], b.values[m], rtol=1e-8, atol=1e-8 * np.abs(b.values[m]).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_index_linear_in_mismatch(seed, scale):
    g = build_grid(9, 9)
    u0 = background_solve(g, 1.0, np.ones(g.n_boundary))
    base = CauchyData(g, trace(g, u0), np.ones(g.n_boundary))
    m = np.random.default_rng(seed).standard_normal(g.n_boundary)
    i1 = index_green(g, _with_mismatch(base, u0, m), u0).values
    i2 = index_green(g, _with_mismatch(base, u0, scale * m), u0).values
    assert np.allclose(i2, scale * i1, rtol=1e-9, atol=1e-9 * (np.abs(i1).max() + 1))


def test_back_projection_identity():
    # index_adjoint with s = 0 is the adjoint of the source-to-trace map
    g = build_grid(9, 9)
    rng = np.random.default_rng(5)
    u0 = background_solve(g, 1.0, np.ones(g.n_boundary))
    m = rng.standard_normal(g.n_boundary)
    d = _with_mismatch(CauchyData(g, trace(g, u0), np.ones(g.n_boundary)), u0, m)
    op = assemble(g, np.ones(g.shape))
    x = rng.standard_normal(g.shape)
    Ax = trace(g, solve(op, x))
    Atm = index_adjoint(g, d, u0, ProbeConfig(s=0, margin=0)).values
    # margin=0 keeps every node in the field; the adjoint value is defined everywhere
    full = solve(op, None, m)
    assert np.allclose(Atm, full)
    assert boundary_inner(g, Ax, m) == pytest.approx(field_inner(g, x, full), rel=1e-10)
    # s >= 1 inserts the filter P^s in front of the same back-projection
    P = surface_laplacian_power(g, 1)
    filt = index_adjoint(g, d, u0, ProbeConfig(s=1, margin=0)).values
    assert np.allclose(filt, solve(op, None, P @ m))


def test_pseudoinverse_min_norm_oracle():
    # Dense small-grid check of the minimum-norm source reproducing a trace.
    g = build_grid(7, 7)
    op = assemble(g, np.ones(g.shape))
    inner = g.interior_mask.ravel()
    cols = []
    for k in np.flatnonzero(inner):
        e = np.zeros(g.n_nodes)
        e[k] = 1.0
        cols.append(trace(g, solve(op, e.reshape(g.shape))))
    A = np.array(cols).T                       # interior source -> trace
    Wb = np.diag(g.arclength_weights)
    wi = g.node_weights.ravel()[inner]
    Astar = (A.T @ Wb) / wi[:, None]           # adjoint in the weighted products
    x_true = np.random.default_rng(0).standard_normal(inner.sum())
    m = A @ x_true
    x = Astar @ np.linalg.solve(A @ Astar, m)
    assert np.allclose(A @ x, m, rtol=1e-6, atol=1e-8)
    # minimum weighted norm: agrees with the weighted least-squares pseudoinverse
    sw = np.sqrt(wi)
    x_ref = np.linalg.pinv(A / sw[None, :], rcond=1e-13) @ m / sw
    assert np.allclose(x, x_ref, rtol=1e-5, atol=1e-7 * np.abs(x_ref).max())
    assert np.sum(wi * x**2) <= np.sum(wi * x_true**2)
    # the back-projection is A* applied to the data
    Z = probe_matrix(g)[inner]
    assert np.allclose(Astar @ m, Z @ (g.arclength_weights * m), rtol=1e-10)


def test_weight_norms_positive_and_degenerate_guard(setup33):
    g, _, _ = setup33
    w = weight_norms(g, ProbeConfig())
    assert np.all(w[g.sample_mask()] > 0)
    assert np.all(w[~g.sample_mask()] == 0)


def test_fractional_power_consistent():
    g = build_grid(6, 6)
    P1 = surface_laplacian_power(g, 1)
    Ph = surface_laplacian_power(g, 0.5)
    assert np.allclose(Ph @ Ph, P1, atol=1e-8 * np.abs(P1).max())


def test_kernel_matrix_properties():
    g = build_grid(33, 33)
    nodes = [(8, 8), (24, 24), (16, 16)]
    rep = kernel_matrix(g, nodes, ProbeConfig(s=1, t=1))
    assert np.allclose(rep.C_sym, rep.C_sym.T, rtol=0, atol=1e-12 * np.abs(rep.C_sym).max())
    assert np.all(np.diag(rep.C) > 0)
    assert rep.dominance.shape == (3,)
    assert np.all(np.isfinite(rep.dominance))
    with pytest.raises(ValueError):
        kernel_matrix(g, [(8, 8), (8, 8)])


def test_project_nonnegative():
    g = build_grid(5, 5)
    cfg = ProbeConfig()
    mask = g.sample_mask(1)
    neg = IndexField(g, -np.ones(g.shape), mask, cfg)
    assert np.all(project_nonnegative(neg).values == 0)
    pos = IndexField(g, np.arange(25.0).reshape(5, 5), mask, cfg)
    assert np.array_equal(project_nonnegative(pos).values, pos.values)
    mix = IndexField(g, np.arange(25.0).reshape(5, 5) - 12, mask, cfg)
    out = project_nonnegative(mix).values
    assert np.all(out[mix.values < 0] == 0)
    assert np.array_equal(out[mix.values >= 0], mix.values[mix.values >= 0])


def test_argmax_tie_break_lowest_index():
    g = build_grid(7, 7)
    idx = IndexField(g, np.ones(g.shape), g.sample_mask(2), ProbeConfig())
    assert idx.argmax_node == (2, 2)


def test_as_source_and_write(tmp_path, setup33):
    g, d, u0 = setup33
    idx = index_green(g, d, u0, ProbeConfig(epsilon=0.5))
    assert np.allclose(idx.as_source(), idx.values / 0.5)
    write_index(tmp_path / "i.txt", idx)
    g2, vals = read_field(tmp_path / "i.txt")
    assert np.array_equal(vals, idx.values)
    assert "argmax" in (tmp_path / "i.txt").read_text()


def test_mismatch_sign(setup33):
    g, d, u0 = setup33
    assert np.all(data_mismatch(d, u0) >= -1e-12)


@pytest.mark.parametrize("kw", [dict(s=-1), dict(s=1.5), dict(t=-1), dict(epsilon=0), dict(mu_bar=0)])
def test_probe_config_validation(kw):
    with pytest.raises(ValueError):
        ProbeConfig(**kw)
