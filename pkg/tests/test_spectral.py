"""Operator assembly, kernel extraction, and the trace-valued index."""

import numpy as np
import pytest

from ncindex._errors import DegenerateSpectrumError, StructureError
from ncindex.algebra import (AlgebraElement, apply_trace, canonical_group_trace,
                             center_valued_trace, group_algebra, matrix_algebra,
                             normalized_trace)
from ncindex.bundle import (Monodromy, automorphy_bundle, flat_bundle,
                            gns_form_fields, gns_twist, line_bundle,
                            projection_bundle, random_connection,
                            random_projection_field, unitary_dressing_field)
from ncindex.forms import Grid
from ncindex.hilbert_module import ModuleMap, ProjectiveModule, dim_tau
from ncindex.spectral import (GAP_RATIO_FLOOR, KERNEL_TOL_FACTOR,
                              SECTION_DIM_CAP, IndexReport, TwistedOperator,
                              analytic_index, assemble_dolbeault, index_report,
                              k_theory_index, kernel_data)

SCALARS = matrix_algebra(1)


def _grid(n=16):
    return Grid("T2", n)


def _rng(seed):
    return np.random.default_rng(seed)


def _translation_monodromy(spec, g=1):
    u = ModuleMap.from_entries([[AlgebraElement.delta(spec, g)]])
    return Monodromy(u, ModuleMap.identity(spec, 1))


def _phase_monodromy(theta):
    u = ModuleMap.from_flat_blocks(SCALARS, 1, 1,
                                   [np.array([[np.exp(2j * np.pi * theta)]])])
    return Monodromy(u, ModuleMap.identity(SCALARS, 1))


def _commuting_monodromy(spec, rng):
    """Random commuting unitary pair, diagonalized in one common frame."""
    bu, bv = [], []
    for n in spec.blocks:
        h = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        w, _ = np.linalg.qr(h)
        bu.append(w @ np.diag(np.exp(2j * np.pi * rng.uniform(size=n))) @ np.conj(w.T))
        bv.append(w @ np.diag(np.exp(2j * np.pi * rng.uniform(size=n))) @ np.conj(w.T))
    return Monodromy(ModuleMap.from_flat_blocks(spec, 1, 1, bu),
                     ModuleMap.from_flat_blocks(spec, 1, 1, bv))


def _theta_samples(grid, c, r):
    """Kernel section of the Chern-c line bundle, built from the recursion
    a(m + c) = a(m) exp(-2 pi m - pi c) on the mode chain r + cZ."""
    n = grid.n
    coords = grid.coords
    modes = {r: 1.0}
    m, a = r, 1.0
    while m + c <= n // 2:
        a *= np.exp(-2 * np.pi * m - np.pi * c)
        m += c
        modes[m] = a
    m, a = r, 1.0
    while m - c >= -n // 2:
        a *= np.exp(2 * np.pi * (m - c) + np.pi * c)
        m -= c
        modes[m] = a
    x, y = np.meshgrid(coords, coords, indexing="ij")
    s = np.zeros((n, n), dtype=complex)
    for m, a in modes.items():
        s += a * np.exp(2j * np.pi * m * x - 2 * np.pi * m * y - np.pi * c * y * y)
    return s.reshape(-1)


# -- assembly ------------------------------------------------------------------------


def test_assembly_symbol_on_plane_waves():
    """On the trivial bundle the matrix acts as pi i (m + i l) on mode (m, l)."""
    n = 12
    grid = _grid(n)
    op = assemble_dolbeault(flat_bundle(grid, Monodromy.identity(SCALARS, 1)))
    x, y = np.meshgrid(grid.coords, grid.coords, indexing="ij")
    for m, l in [(0, 0), (1, 0), (0, 1), (-2, 3), (4, -5), (-n // 2, 1)]:
        wave = np.exp(2j * np.pi * (m * x + l * y)).reshape(-1)
        out = op.matrix @ wave
        want = np.pi * 1j * (m + 1j * l) * wave
        assert np.max(np.abs(out - want)) < 1e-10 * max(1.0, abs(m) + abs(l))


def test_assembly_rejects_wrong_supports():
    with pytest.raises(StructureError):
        assemble_dolbeault(projection_bundle(
            random_projection_field(ProjectiveModule.free(SCALARS, 1),
                                    _grid(8), _rng(0)).eps))
    with pytest.raises(StructureError):
        assemble_dolbeault(flat_bundle(Grid("S1", 12),
                                       Monodromy.identity(SCALARS, 1, circle=True)))


def test_assembly_respects_dense_cap():
    spec = matrix_algebra(2)
    b = flat_bundle(Grid("T2", 40), Monodromy.identity(spec, 1))
    with pytest.raises(StructureError):
        assemble_dolbeault(b)


def test_assembly_refinement_needs_divisible_grid():
    b = line_bundle(_grid(12), 1)
    with pytest.raises(StructureError):
        assemble_dolbeault(b, _grid(18))


def test_operator_rejects_non_equivariant_matrix():
    spec = matrix_algebra(2)
    b = flat_bundle(_grid(8), Monodromy.identity(spec, 1))
    op = assemble_dolbeault(b)
    bad = op.matrix.copy()
    bad[0, 1] += 1.0
    with pytest.raises(StructureError):
        TwistedOperator(op.grid, b, op.space, bad)


# -- kernels -------------------------------------------------------------------------


def test_trivial_bundle_kernel_is_constants():
    op = assemble_dolbeault(flat_bundle(_grid(), Monodromy.identity(SCALARS, 1)))
    kd = kernel_data(op)
    assert kd.kernel_dim == 1 and kd.cokernel_dim == 1
    assert kd.kernel_artifacts == 0 and kd.cokernel_artifacts == 0
    v = kd.kernel[:, 0]
    assert np.max(np.abs(v - v.mean())) < 1e-12


def test_theta_sections_span_the_kernel():
    grid = _grid()
    for c in (1, 2, 3):
        op = assemble_dolbeault(line_bundle(grid, c))
        kd = kernel_data(op)
        assert kd.kernel_dim == c and kd.cokernel_dim == 0
        assert kd.kernel_artifacts == 0 and kd.cokernel_artifacts == c
        p = kd.kernel_projection()
        for r in range(c):
            s = _theta_samples(grid, c, r)
            s /= np.linalg.norm(s)
            assert np.linalg.norm(op.matrix @ s) < 1e-8 * kd.sigma_max
            assert np.linalg.norm(p @ s - s) < 1e-6


def test_flat_phase_monodromy_gives_invertible_operator():
    """A flat line bundle with non-trivial holonomy has no kernel at all."""
    op = assemble_dolbeault(flat_bundle(_grid(12), _phase_monodromy(1.0 / 5)))
    kd = kernel_data(op)
    assert kd.kernel_dim == 0 and kd.cokernel_dim == 0
    assert analytic_index(op, normalized_trace(SCALARS), data=kd) == 0


def test_translation_blocks_match_scalar_operators():
    """The flat Z/3 operator splits into scalar operators, one per character."""
    spec = group_algebra("Z/3")
    grid = _grid(12)
    b = automorphy_bundle(grid, _translation_monodromy(spec), 1)
    op = assemble_dolbeault(b)
    d = op.space.dim
    assert d == 3
    u0 = gns_twist(b, op.space).u0
    assert np.max(np.abs(u0 - np.diag(np.diag(u0)))) < 1e-12
    view = op.matrix.reshape(op.copies, d, op.copies, d)
    for j in range(d):
        theta = float(np.angle(u0[j, j])) / (2 * np.pi)
        scalar = assemble_dolbeault(automorphy_bundle(grid, _phase_monodromy(theta), 1))
        assert np.max(np.abs(view[:, j, :, j] - scalar.matrix)) < 1e-12
        for jj in range(d):
            if jj != j:
                assert np.max(np.abs(view[:, j, :, jj])) < 1e-12


def test_kernel_gap_guard_raises():
    n, dim = 8, 64
    grid = Grid("T2", n)
    b = flat_bundle(grid, Monodromy.identity(SCALARS, 1))
    space = assemble_dolbeault(b).space
    smooth = np.diag(np.geomspace(1.0, 1e-9, dim).astype(complex))
    op = TwistedOperator(grid, b, space, smooth)
    with pytest.raises(DegenerateSpectrumError) as err:
        kernel_data(op)
    assert err.value.gap_ratio < GAP_RATIO_FLOOR


def test_ambiguous_null_vector_is_refused():
    """A null vector with partial band-edge mass is neither state nor artifact."""
    n = 8
    grid = Grid("T2", n)
    b = flat_bundle(grid, Monodromy.identity(SCALARS, 1))
    space = assemble_dolbeault(b).space
    x, y = np.meshgrid(grid.coords, grid.coords, indexing="ij")
    v = (np.sqrt(0.8) * np.ones((n, n)) +
         np.sqrt(0.2) * np.exp(2j * np.pi * (n // 2) * x)).reshape(-1)
    v /= np.linalg.norm(v)
    m = np.eye(n * n, dtype=complex) - np.outer(v, np.conj(v))
    op = TwistedOperator(grid, b, space, m)
    with pytest.raises(DegenerateSpectrumError, match="wrap artifact"):
        kernel_data(op)


# -- the index -----------------------------------------------------------------------


def test_line_bundle_index_is_the_chern_number():
    grid = _grid()
    t = normalized_trace(SCALARS)
    for c in range(-3, 4):
        op = assemble_dolbeault(line_bundle(grid, c))
        kd = kernel_data(op)
        assert kd.kernel_dim == (max(c, 0) if c else 1)
        assert kd.cokernel_dim == (max(-c, 0) if c else 1)
        assert kd.gap_ratio >= 1e10
        idx = analytic_index(op, t, data=kd)
        assert abs(idx - c) < 1e-10


def test_flat_twist_index_scales_by_trace_dimension():
    """Twisting by a flat bundle multiplies the index by dim_tau of the fiber."""
    grid = _grid(12)
    cases = [
        (group_algebra("Z/3"), _translation_monodromy(group_algebra("Z/3")),
         canonical_group_trace(group_algebra("Z/3"))),
        (matrix_algebra(2), _commuting_monodromy(matrix_algebra(2), _rng(5)),
         normalized_trace(matrix_algebra(2))),
        (matrix_algebra(2, 1), _commuting_monodromy(matrix_algebra(2, 1), _rng(6)),
         normalized_trace(matrix_algebra(2, 1))),
    ]
    for spec, mono, t in cases:
        for c in (-2, 1):
            op = assemble_dolbeault(automorphy_bundle(grid, mono, c))
            idx = analytic_index(op, t)
            assert abs(idx - c * 1.0) < 1e-8


def test_center_valued_index():
    spec = matrix_algebra(2, 1)
    tc = center_valued_trace(spec)
    op = assemble_dolbeault(automorphy_bundle(_grid(12), Monodromy.identity(spec, 1), 2))
    kd = kernel_data(op)
    idx = np.asarray(analytic_index(op, tc, data=kd))
    assert np.max(np.abs(idx - 2.0)) < 1e-10
    k = k_theory_index(op, data=kd)
    assert k.ranks == (4, 2)
    assert np.max(np.abs(idx - np.asarray(dim_tau(tc, k)))) < 1e-10


def test_k_theory_route_agrees_with_extended_trace():
    grid = _grid(12)
    spec = group_algebra("Z/3")
    t = canonical_group_trace(spec)
    for c in (-1, 2):
        op = assemble_dolbeault(automorphy_bundle(grid, _translation_monodromy(spec), c))
        kd = kernel_data(op)
        k = k_theory_index(op, data=kd)
        assert abs(analytic_index(op, t, data=kd) - dim_tau(t, k)) < 1e-10


def test_index_survives_conjugation_by_gauge_fields():
    rng = _rng(3)
    grid = _grid()
    n = grid.n
    for spec, mono, c in (
        (SCALARS, Monodromy.identity(SCALARS, 1), 2),
        (group_algebra("Z/3"), _translation_monodromy(group_algebra("Z/3")), -1),
    ):
        b = automorphy_bundle(grid, mono, c)
        op = assemble_dolbeault(b)
        d = op.space.dim
        t = normalized_trace(spec)
        before = analytic_index(op, t)
        w = gns_form_fields(unitary_dressing_field(spec, grid, 1, rng, scale=0.4),
                            op.space)[0]
        big = np.zeros((n, n, d, n, n, d), dtype=complex)
        for ix in range(n):
            for iy in range(n):
                big[ix, iy, :, ix, iy, :] = w[ix, iy]
        gauge = big.reshape(n * n * d, n * n * d)
        moved = TwistedOperator(grid, b, op.space,
                                gauge @ op.matrix @ np.conj(gauge.T))
        after = analytic_index(moved, t)
        assert abs(before - after) < 1e-8


def test_index_stable_under_refinement():
    t = normalized_trace(SCALARS)
    b = line_bundle(_grid(12), -2)
    coarse = analytic_index(assemble_dolbeault(b), t)
    fine = analytic_index(assemble_dolbeault(b, _grid(24)), t)
    assert abs(coarse - fine) < 1e-8


def test_deviation_needs_resolution_and_refines_to_the_index():
    """A perturbed connection moves the kernel off exact zero.  At N = 16 the
    default cut refuses (the guard fires instead of guessing); a looser
    explicit cut and a refined grid both give the Chern number back."""
    t = normalized_trace(SCALARS)
    rng = _rng(9)
    base = line_bundle(_grid(16), 1)
    dev = line_bundle(_grid(16), 1, random_connection(base, rng, scale=0.2))
    op = assemble_dolbeault(dev)
    with pytest.raises(DegenerateSpectrumError):
        kernel_data(op)
    loose = kernel_data(op, tol=1e-5 * np.linalg.norm(op.matrix, 2))
    assert loose.kernel_dim == 1 and loose.cokernel_dim == 0
    assert abs(analytic_index(op, t, data=loose) - 1.0) < 1e-8
    fine = analytic_index(assemble_dolbeault(dev, _grid(32)), t)
    assert abs(fine - 1.0) < 1e-8


def test_index_report_fields_and_determinism():
    b = line_bundle(_grid(12), 1)
    t = normalized_trace(SCALARS)
    rep = index_report(b, t)
    again = index_report(b, t)
    assert isinstance(rep, IndexReport)
    assert rep.to_json() == again.to_json()
    d = rep.to_dict()
    for key in ("analytic_index", "topological_index", "kernel_dim_t",
                "cokernel_dim_t", "gap_ratio", "grid_n", "tolerances"):
        assert key in d
    assert d["grid_n"] == 12
    assert d["tolerances"]["gap_ratio_floor"] == GAP_RATIO_FLOOR
    assert rep.discrepancy < 1e-8
    assert abs(d["analytic_index"][0] - 1.0) < 1e-6


def test_kernel_tolerance_default_tracks_sigma_max():
    op = assemble_dolbeault(line_bundle(_grid(12), 1))
    kd = kernel_data(op)
    assert kd.tol == pytest.approx(KERNEL_TOL_FACTOR * kd.sigma_max)
    assert op.dim <= SECTION_DIM_CAP
