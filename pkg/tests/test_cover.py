"""Cyclic covers: lifting, the section dictionary, and deck-group indices."""

import numpy as np
import pytest

from ncindex._errors import StructureError
from ncindex.algebra import (AlgebraElement, canonical_group_trace,
                             cyclic_group, delocalized_trace, group_algebra,
                             group_from_label, matrix_algebra, scalar_trace)
from ncindex.bundle import (Monodromy, automorphy_bundle, gns_twist,
                            line_bundle, random_connection)
from ncindex.cover import (CoverSpec, cover_from_deck, cover_kernel_data,
                           cyclic_cover, dictionary, l2_index, lift_operator,
                           twisted_base_bundle)
from ncindex.forms import Grid
from ncindex.hilbert_module import ModuleMap
from ncindex.spectral import (TwistedOperator, analytic_index,
                              assemble_dolbeault, kernel_data)

SCALARS = matrix_algebra(1)


def _grid(n=12):
    return Grid("T2", n)


def _scalar_monodromy(u_phase=1.0, v_phase=1.0):
    u = ModuleMap.from_flat_blocks(SCALARS, 1, 1, [np.array([[u_phase]])])
    v = ModuleMap.from_flat_blocks(SCALARS, 1, 1, [np.array([[v_phase]])])
    return Monodromy(u, v)


def _lifted(grid, k, chern, deviation=None):
    cov = cyclic_cover(grid, k)
    op = assemble_dolbeault(line_bundle(grid, chern, deviation))
    return cov, op, lift_operator(op, cov)


def _prolongation(cov):
    """Sections constant along the deck direction, as a matrix."""
    n2 = cov.base_grid.n ** 2
    return np.tile(np.eye(n2), (cov.fold, 1))


def test_cover_spec_deck_action():
    cov = cyclic_cover(_grid(), 3)
    assert cov.fold == 3 and cov.nx == 36 and cov.points == 432
    perm = cov.deck_permutation(1)
    # free on fibers: no fixed points, and the k-th power closes up
    assert np.all(perm != np.arange(cov.points))
    walked = np.arange(cov.points)
    for _ in range(3):
        walked = perm[walked]
    assert np.array_equal(walked, np.arange(cov.points))
    assert cov.element_of_power(2) == 2


def test_cover_spec_rejects_bad_data():
    with pytest.raises(StructureError, match="torus"):
        CoverSpec(Grid("S1", 12), cyclic_group(2), (0, 1))
    with pytest.raises(StructureError, match="isomorphism"):
        CoverSpec(_grid(), cyclic_group(4), (0, 2, 1, 3))
    with pytest.raises(StructureError, match="identity"):
        cover_from_deck(_grid(), cyclic_group(3), 1, y_image=1)
    with pytest.raises(StructureError, match="generate"):
        cover_from_deck(_grid(), cyclic_group(4), 2)
    with pytest.raises(StructureError, match="generate"):
        cover_from_deck(_grid(), group_from_label("Z/2xZ/2"), 1)


def test_cover_from_deck_table():
    cov = cover_from_deck(_grid(), cyclic_group(5), 2)
    # powers of the generator image 2 in Z/5: e, 2, 4, 1, 3
    assert cov.deck_powers == (0, 3, 1, 4, 2)


def test_trivial_cover_returns_base():
    grid = _grid()
    _, op, lifted = _lifted(grid, 1, 2)
    assert np.max(np.abs(lifted.matrix - op.matrix)) < 1e-12
    dic = dictionary(cyclic_cover(grid, 1), line_bundle(grid, 2))
    assert np.array_equal(dic.matrix, np.eye(grid.n ** 2))


def test_lift_commutes_with_deck_and_restricts():
    grid = _grid()
    dev = random_connection(line_bundle(grid, 1), np.random.default_rng(3),
                            scale=0.1)
    cov, op, lifted = _lifted(grid, 3, 1, dev)
    n = grid.n
    t = lifted.matrix.reshape(cov.nx, n, cov.nx, n)
    resid = np.max(np.abs(np.roll(t, -n, axis=0) - np.roll(t, n, axis=2)))
    assert resid < 1e-12 * np.max(np.abs(lifted.matrix))
    r = _prolongation(cov)
    assert np.max(np.abs(lifted.matrix @ r - r @ op.matrix)) < 1e-12


def test_lift_rejects_unliftable_bases():
    grid = _grid()
    cov = cyclic_cover(grid, 2)
    sloped = assemble_dolbeault(automorphy_bundle(
        grid, _scalar_monodromy(u_phase=np.exp(0.4j)), 1))
    with pytest.raises(StructureError, match="x-periodic"):
        lift_operator(sloped, cov)
    translated = assemble_dolbeault(automorphy_bundle(
        grid, Monodromy(
            ModuleMap.from_entries(
                [[AlgebraElement.delta(group_algebra(cyclic_group(3)), 1)]]),
            ModuleMap.identity(group_algebra(cyclic_group(3)), 1)), 1))
    with pytest.raises(StructureError, match="scalar"):
        lift_operator(translated, cov)
    with pytest.raises(StructureError, match="grid"):
        lift_operator(assemble_dolbeault(line_bundle(Grid("T2", 8), 1)), cov)


def test_flat_lift_splits_into_characters():
    grid = _grid()
    cov, _, lifted = _lifted(grid, 2, 0)
    dic = dictionary(cov, line_bundle(grid, 0))
    n, k = grid.n, 2
    conj = dic.matrix @ lifted.matrix @ np.conj(dic.matrix.T)
    view = conj.reshape(n, n, k, n, n, k)
    chi = np.diag(gns_twist(dic.bundle, dic.space).u0)
    for j in range(k):
        for i in range(k):
            if i != j:
                assert np.max(np.abs(view[:, :, j, :, :, i])) < 1e-12
        scalar = assemble_dolbeault(automorphy_bundle(
            grid, _scalar_monodromy(u_phase=chi[j]), 0))
        block = view[:, :, j, :, :, j].reshape(n * n, n * n)
        assert np.max(np.abs(block - scalar.matrix)) < 1e-12


def test_lifted_kernel_counts_characters():
    grid = _grid()
    for chern in (0, 2):
        cov, _, lifted = _lifted(grid, 3, chern)
        kd = cover_kernel_data(lifted)
        chi = np.diag(gns_twist(dictionary(cov, line_bundle(grid, chern)).bundle,
                                dictionary(cov, line_bundle(grid, chern)).space).u0)
        expected = 0
        for j in range(3):
            scalar = assemble_dolbeault(automorphy_bundle(
                grid, _scalar_monodromy(u_phase=chi[j]), chern))
            expected += kernel_data(scalar).kernel_dim
        assert kd.kernel_dim == expected


def test_dictionary_roundtrip_and_constant_section():
    grid = _grid()
    cov = cyclic_cover(grid, 3)
    dic = dictionary(cov, line_bundle(grid, 1))
    rng = np.random.default_rng(11)
    s = rng.normal(size=cov.points) + 1j * rng.normal(size=cov.points)
    assert np.max(np.abs(dic.to_cover(dic.to_twisted(s)) - s)) < 1e-12
    # a deck-constant section carries equal weight from every sheet and
    # lands on the trivial character, scaled by sqrt(k)
    image = dic.to_twisted(np.ones(cov.points, complex)).reshape(grid.n, grid.n, 3)
    chi = np.diag(gns_twist(dic.bundle, dic.space).u0)
    trivial = int(np.argmin(np.abs(chi - 1.0)))
    assert np.max(np.abs(image[:, :, trivial] - np.sqrt(3))) < 1e-12
    rest = np.delete(image, trivial, axis=2)
    assert np.max(np.abs(rest)) < 1e-12


def test_dictionary_intertwines_right_action():
    grid = _grid()
    cov = cyclic_cover(grid, 3)
    dic = dictionary(cov, line_bundle(grid, 0))
    for power in range(3):
        deck = np.eye(cov.points)[cov.deck_permutation(power)]
        g = cov.element_of_power(power)
        rho = dic.space.right_action_matrix(
            AlgebraElement.delta(cov.group_spec, g))
        moved = dic.matrix @ deck @ np.conj(dic.matrix.T)
        assert np.max(np.abs(moved - np.kron(np.eye(grid.n ** 2), rho))) < 1e-12


def test_dictionary_conjugates_operators():
    grid = _grid()
    for k in (2, 3):
        for chern in (-2, 0, 1):
            cov, _, lifted = _lifted(grid, k, chern)
            dic = dictionary(cov, line_bundle(grid, chern))
            dh = assemble_dolbeault(dic.bundle)
            conj = dic.matrix @ lifted.matrix @ np.conj(dic.matrix.T)
            assert np.max(np.abs(conj - dh.matrix)) < 1e-10


def test_dictionary_conjugates_kernel_projections():
    grid = _grid()
    cov, _, lifted = _lifted(grid, 3, 1)
    dic = dictionary(cov, line_bundle(grid, 1))
    kd_cover = cover_kernel_data(lifted)
    kd_base = kernel_data(assemble_dolbeault(dic.bundle))
    for ours, theirs in ((kd_cover.kernel_projection(), kd_base.kernel_projection()),
                         (kd_cover.cokernel_projection(), kd_base.cokernel_projection())):
        moved = dic.matrix @ ours @ np.conj(dic.matrix.T)
        assert np.max(np.abs(moved - theirs)) < 1e-9


def test_untwisted_l2_index_vanishes():
    grid = _grid()
    for k in (2, 3):
        cov, _, lifted = _lifted(grid, k, 0)
        value = l2_index(lifted, canonical_group_trace(cov.group_spec))
        assert abs(value) < 1e-10


def test_l2_index_equals_base_chern_and_flat_twist():
    grid = _grid()
    for k in (2, 3, 4):
        for chern in (-2, -1, 0, 1, 2):
            cov, _, lifted = _lifted(grid, k, chern)
            kd = cover_kernel_data(lifted)
            spec = cov.group_spec
            dh = assemble_dolbeault(dictionary(cov, line_bundle(grid, chern)).bundle)
            for t in (canonical_group_trace(spec),
                      delocalized_trace(spec, 1 % k)):
                ours = l2_index(lifted, t, data=kd)
                theirs = analytic_index(dh, t)
                assert abs(ours - theirs) < 1e-8
            value = l2_index(lifted, canonical_group_trace(spec), data=kd)
            assert abs(value - chern) < 1e-8
            # whole-cover index over the fold equals the base index exactly
            plain = kd.kernel_dim - kd.cokernel_dim
            assert plain % k == 0 and plain // k == chern


def test_delocalized_l2_index_vanishes():
    grid = _grid()
    cov, _, lifted = _lifted(grid, 3, 2)
    kd = cover_kernel_data(lifted)
    for g in (1, 2):
        value = l2_index(lifted, delocalized_trace(cov.group_spec, g), data=kd)
        assert abs(value) < 1e-8


def test_l2_index_validates_traces():
    grid = _grid()
    cov, _, lifted = _lifted(grid, 3, 1)
    with pytest.raises(StructureError, match="deck group"):
        l2_index(lifted, canonical_group_trace(group_algebra(cyclic_group(2))))
    with pytest.raises(StructureError, match="canonical"):
        l2_index(lifted, scalar_trace(cov.group_spec, (1.0, 0.0, 0.0)))


def test_v_phase_carries_through_the_dictionary():
    grid = _grid()
    cov = cyclic_cover(grid, 2)
    bundle = automorphy_bundle(grid, _scalar_monodromy(v_phase=np.exp(2j * np.pi / 7)), 1)
    lifted = lift_operator(assemble_dolbeault(bundle), cov)
    dic = dictionary(cov, bundle)
    dh = assemble_dolbeault(dic.bundle)
    conj = dic.matrix @ lifted.matrix @ np.conj(dic.matrix.T)
    assert np.max(np.abs(conj - dh.matrix)) < 1e-10
    value = l2_index(lifted, canonical_group_trace(cov.group_spec))
    assert abs(value - 1) < 1e-8


def test_twisted_base_bundle_refuses_deviations():
    grid = _grid()
    b = line_bundle(grid, 1)
    dev = random_connection(b, np.random.default_rng(0), scale=0.1)
    with pytest.raises(StructureError, match="deviation"):
        twisted_base_bundle(cyclic_cover(grid, 2), line_bundle(grid, 1, dev))
