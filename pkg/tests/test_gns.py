"""Completions l2(pA^n), commutants, module recovery and the extended trace.

Oracles: extension norms against dense SVD, commutant dimensions against
closed-form counts, delocalized values against direct coefficient sums, and
the recovery roundtrip against the projection it started from.
"""

from __future__ import annotations

import numpy as np
import pytest

from ncindex._errors import StructureError
from ncindex.algebra import (
    AlgebraElement,
    apply_trace,
    canonical_group_trace,
    center_valued_trace,
    delocalized_trace,
    group_algebra,
    matrix_algebra,
    normalized_trace,
    scalar_trace,
)
from ncindex.gns import (
    algebra_generators,
    commutant,
    extend_map,
    extended_trace_of_projection,
    extended_trace_value,
    gns_dimension,
    l2_free,
    l2_of_module,
    module_map_from_commutant,
    recover_module,
    twist_space,
)
from ncindex.hilbert_module import ModuleMap, ProjectiveModule, polar_decomposition


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _projection_from_hermitian(spec, n, rng) -> ProjectiveModule:
    h = ModuleMap.random(spec, n, n, rng)
    h = h + h.adjoint()
    blocks = []
    for b in h.blocks:
        w, v = np.linalg.eigh(b)
        keep = v[:, w > 0]
        blocks.append(keep @ keep.conj().T)
    return ProjectiveModule(ModuleMap.from_flat_blocks(spec, n, n, blocks))


def _unitary_map(spec, n, rng) -> ModuleMap:
    g = ModuleMap.identity(spec, n) + 0.2 * ModuleMap.random(spec, n, n, rng)
    u, _ = polar_decomposition(g)
    return u


# ---------------------------------------------------------------------------
# dimensions and grams
# ---------------------------------------------------------------------------

def test_dimension_of_full_matrix_algebra():
    spec = matrix_algebra(2)
    space = l2_free(spec, 1, normalized_trace(spec))
    assert space.dim == 4


def test_dimension_of_group_algebra_and_gram():
    spec = group_algebra("Z/3")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 1, tau)
    assert space.dim == 3
    g = space.gram()
    assert np.max(np.abs(g - np.eye(3))) < 1e-12
    # the delta basis itself is orthonormal under the canonical trace
    deltas = [AlgebraElement.delta(spec, i) for i in range(3)]
    direct = np.array([[apply_trace(tau, a.adjoint() * b) for b in deltas] for a in deltas])
    assert np.max(np.abs(direct - np.eye(3))) < 1e-12


def test_dimension_of_rank_one_corner():
    spec = matrix_algebra(2)
    p = ModuleMap.from_flat_blocks(spec, 1, 1, [np.diag([1.0, 0.0]).astype(complex)])
    space = l2_of_module(ProjectiveModule(p), normalized_trace(spec))
    assert space.dim == 2


def test_dimension_formula_random_projections():
    rng = _rng(1)
    spec = matrix_algebra(2, 3)
    for _ in range(10):
        module = _projection_from_hermitian(spec, 3, rng)
        space = l2_of_module(module, normalized_trace(spec))
        ranks = [round(np.trace(b).real) for b in module.projection.blocks]
        assert space.dim == sum(r * ni for r, ni in zip(ranks, spec.blocks))


def test_projection_onto_completion_is_left_multiplication():
    rng = _rng(2)
    spec = matrix_algebra(2, 1)
    module = _projection_from_hermitian(spec, 2, rng)
    space = l2_of_module(module, normalized_trace(spec))
    free = l2_free(spec, 2, normalized_trace(spec))
    left = extend_map(module.projection, free)
    for i, q in enumerate(space.frames):
        o = free.offsets[i]
        d = free.block_dims[i]
        assert np.max(np.abs(q @ q.conj().T - left[o:o + d, o:o + d])) < 1e-10


def test_l2_requires_faithful_scalar_trace():
    spec = matrix_algebra(2, 1)
    with pytest.raises(StructureError):
        l2_free(spec, 1, scalar_trace(spec, [1.0, 0.0]))
    with pytest.raises(StructureError):
        l2_free(spec, 1, center_valued_trace(spec))


# ---------------------------------------------------------------------------
# extensions
# ---------------------------------------------------------------------------

def test_extension_of_identity_and_unitary():
    rng = _rng(3)
    spec = matrix_algebra(2)
    space = l2_free(spec, 2, normalized_trace(spec))
    ext = extend_map(ModuleMap.identity(spec, 2), space)
    assert np.max(np.abs(ext - np.eye(space.dim))) < 1e-12
    u = _unitary_map(spec, 2, rng)
    ue = extend_map(u, space)
    assert np.max(np.abs(ue.conj().T @ ue - np.eye(space.dim))) < 1e-10


def test_extension_norm_bound_and_compatibility():
    rng = _rng(4)
    for spec in (matrix_algebra(2), matrix_algebra(2, 1), group_algebra("Z/4")):
        tau = normalized_trace(spec) if not spec.is_group_algebra else canonical_group_trace(spec)
        dom = l2_free(spec, 3, tau)
        cod = l2_free(spec, 2, tau)
        for _ in range(20):
            f = ModuleMap.random(spec, 2, 3, rng)
            ext = extend_map(f, dom, cod)
            assert np.linalg.svd(ext, compute_uv=False).max() <= f.norm() + 1e-10
            adj = extend_map(f.adjoint(), cod, dom)
            assert np.max(np.abs(adj - ext.conj().T)) < 1e-12


def test_extension_commutes_with_right_action():
    rng = _rng(5)
    spec = group_algebra("Z/3")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 2, tau)
    f = ModuleMap.random(spec, 2, 2, rng)
    ext = extend_map(f, space)
    for gen in algebra_generators(spec):
        r = space.right_action_matrix(gen)
        assert np.max(np.abs(ext @ r - r @ ext)) < 1e-12


def test_extension_functorial():
    rng = _rng(6)
    spec = matrix_algebra(2, 1)
    tau = normalized_trace(spec)
    s3 = l2_free(spec, 3, tau)
    s2 = l2_free(spec, 2, tau)
    f = ModuleMap.random(spec, 2, 3, rng)
    g = ModuleMap.random(spec, 3, 3, rng)
    lhs = extend_map(f @ g, s3, s2)
    rhs = extend_map(f, s3, s2) @ extend_map(g, s3)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_right_action_norm_bound():
    # ||v a||_2 <= ||a|| ||v||_2 over many random triples
    rng = _rng(7)
    trials = 0
    specs = [matrix_algebra(2), group_algebra("Z/5"), matrix_algebra(2, 2)]
    while trials < 1000:
        spec = specs[trials % len(specs)]
        tau = normalized_trace(spec)
        space = l2_free(spec, 1, tau)
        a = AlgebraElement.random(spec, rng)
        r = space.right_action_matrix(a)
        v = rng.standard_normal(space.dim) + 1j * rng.standard_normal(space.dim)
        lhs = np.linalg.norm(r @ v)
        assert lhs <= a.norm() * np.linalg.norm(v) + 1e-10
        trials += 1


# ---------------------------------------------------------------------------
# commutants
# ---------------------------------------------------------------------------

def test_commutant_of_right_regular_action():
    for k in (2, 3, 4, 5):
        spec = group_algebra(f"Z/{k}")
        tau = canonical_group_trace(spec)
        space = l2_free(spec, 1, tau)
        basis = commutant(space.right_action_matrices())
        assert len(basis) == k
        # left translations commute, so they lie in the span
        lift = extend_map(ModuleMap.from_entries([[AlgebraElement.delta(spec, 1)]]), space)
        coeffs = np.array([np.vdot(b, lift) for b in basis])
        recon = sum(c * b for c, b in zip(coeffs, basis))
        assert np.max(np.abs(recon - lift)) < 1e-9


def test_commutant_of_two_sided_matrix_action():
    spec = matrix_algebra(3)
    tau = normalized_trace(spec)
    space = l2_free(spec, 1, tau)
    rights = space.right_action_matrices()
    lefts = [extend_map(ModuleMap.from_entries([[g]]), space)
             for g in algebra_generators(spec)]
    basis = commutant(rights + lefts)
    assert len(basis) == 1


def test_commutant_of_scalars_is_everything():
    basis = commutant([np.eye(3)])
    assert len(basis) == 9


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------

def test_recover_module_on_the_nose():
    rng = _rng(8)
    for spec in (matrix_algebra(2), matrix_algebra(2, 1), group_algebra("Z/3")):
        tau = normalized_trace(spec)
        module = _projection_from_hermitian(spec, 2, rng)
        space = l2_of_module(module, tau)
        back = recover_module(space)
        assert (back.projection - module.projection).norm() < 1e-10


def test_recover_twisted_module():
    rng = _rng(9)
    spec = matrix_algebra(2)
    tau = normalized_trace(spec)
    module = _projection_from_hermitian(spec, 2, rng)
    u = _unitary_map(spec, 2, rng)
    space = twist_space(l2_of_module(module, tau), u)
    back = recover_module(space)
    expected = u @ module.projection @ u.adjoint()
    assert (back.projection - expected).norm() < 1e-10


def test_recover_zero_module():
    spec = matrix_algebra(2)
    z = ProjectiveModule(ModuleMap.zero(spec, 1, 1))
    space = l2_of_module(z, normalized_trace(spec))
    assert space.dim == 0
    back = recover_module(space)
    assert back.projection.norm() < 1e-12


def test_recover_rejects_non_invariant_subspace():
    spec = matrix_algebra(2)
    tau = normalized_trace(spec)
    space = l2_free(spec, 1, tau)
    # a one-dimensional subspace of l2(M2) is never right-invariant
    q = np.zeros((4, 1), dtype=complex)
    q[0, 0] = 1.0
    bad = type(space)(module=space.module, tau=tau, frames=(q,))
    with pytest.raises(StructureError):
        recover_module(bad)


def test_recovery_functorial_on_maps():
    rng = _rng(10)
    spec = group_algebra("Z/4")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 2, tau)
    f = ModuleMap.random(spec, 2, 2, rng)
    g = ModuleMap.random(spec, 2, 2, rng)
    mf = extend_map(f, space)
    mg = extend_map(g, space)
    lhs = module_map_from_commutant(mf @ mg, space)
    rhs = module_map_from_commutant(mf, space) @ module_map_from_commutant(mg, space)
    assert (lhs - rhs).norm() < 1e-12


def test_extraction_rejects_non_equivariant():
    spec = matrix_algebra(2)
    space = l2_free(spec, 1, normalized_trace(spec))
    bad = np.diag([1.0, 0.0, 0.0, 0.0]).astype(complex)  # rank too small for G (x) 1
    with pytest.raises(StructureError):
        module_map_from_commutant(bad, space)


# ---------------------------------------------------------------------------
# extended trace
# ---------------------------------------------------------------------------

def test_extended_trace_identity_dimension():
    spec = matrix_algebra(2)
    tau = normalized_trace(spec)
    space = l2_free(spec, 1, tau)
    val = extended_trace_value(tau, np.eye(2 * space.dim), space, hilbert_dim=2)
    assert val == pytest.approx(2.0)
    assert gns_dimension(space, tau) == pytest.approx(1.0)


def test_extended_trace_product_formula():
    rng = _rng(11)
    for spec in (matrix_algebra(2), group_algebra("Z/3"), matrix_algebra(2, 1)):
        tau = normalized_trace(spec)
        space = l2_free(spec, 1, tau)
        b = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        x = AlgebraElement.random(spec, rng)
        lift = extend_map(ModuleMap.from_entries([[x]]), space)
        val = extended_trace_value(tau, np.kron(b, lift), space, hilbert_dim=3)
        expected = np.trace(b) * apply_trace(tau, x)
        assert abs(val - expected) < 1e-10
        plain = extended_trace_value(tau, np.kron(b, np.eye(space.dim)), space, hilbert_dim=3)
        assert abs(plain - np.trace(b) * apply_trace(tau, AlgebraElement.one(spec))) < 1e-10


def test_extended_trace_basis_independence():
    rng = _rng(12)
    spec = matrix_algebra(2, 1)
    tau = normalized_trace(spec)
    space = l2_free(spec, 2, tau)
    f = ModuleMap.random(spec, 2, 2, rng)
    a = np.kron(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)),
                extend_map(f, space))
    base = extended_trace_value(tau, a, space, hilbert_dim=2)
    for _ in range(5):
        z = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        v, _ = np.linalg.qr(z)
        rot = np.kron(v, np.eye(space.dim))
        moved = extended_trace_value(tau, rot @ a @ rot.conj().T, space, hilbert_dim=2)
        assert abs(base - moved) < 1e-10


def test_extended_trace_property_on_pairs():
    rng = _rng(13)
    spec = group_algebra("Z/3")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 1, tau)
    f = extend_map(ModuleMap.random(spec, 1, 1, rng), space)
    g = extend_map(ModuleMap.random(spec, 1, 1, rng), space)
    a = np.kron(rng.standard_normal((2, 2)), f)
    b = np.kron(rng.standard_normal((2, 2)), g)
    lhs = extended_trace_value(tau, a @ b, space, hilbert_dim=2)
    rhs = extended_trace_value(tau, b @ a, space, hilbert_dim=2)
    assert abs(lhs - rhs) < 1e-10


def test_extended_trace_rejects_non_equivariant():
    spec = matrix_algebra(2)
    tau = normalized_trace(spec)
    space = l2_free(spec, 1, tau)
    bad = np.diag([1.0, 0.0, 0.0, 0.0]).astype(complex)
    with pytest.raises(StructureError):
        extended_trace_value(tau, bad, space)


def test_extended_trace_center_valued():
    spec = matrix_algebra(2, 1)
    tau = normalized_trace(spec)
    tc = center_valued_trace(spec)
    space = l2_free(spec, 1, tau)
    v = extended_trace_value(tc, np.eye(space.dim), space, check=False)
    assert np.allclose(v, [1.0, 1.0])


def test_extended_trace_delocalized_matches_coefficients():
    rng = _rng(14)
    spec = group_algebra("Z/4")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 1, tau)
    x = AlgebraElement.random(spec, rng)
    lift = extend_map(ModuleMap.from_entries([[x]]), space)
    for g in range(4):
        tg = delocalized_trace(spec, g)
        val = extended_trace_value(tg, lift, space)
        assert abs(val - x.coeffs[g]) < 1e-10


def test_extended_trace_of_projection_matches_dense():
    rng = _rng(15)
    spec = matrix_algebra(2, 1)
    tau = normalized_trace(spec)
    space = l2_free(spec, 2, tau)
    # right-invariant subspace: range of an extended projection
    module = _projection_from_hermitian(spec, 2, rng)
    e = extend_map(module.projection, space)
    w, v = np.linalg.eigh((e + e.conj().T) / 2)
    cols = v[:, w > 0.5]
    lhs = extended_trace_of_projection(tau, cols, space)
    rhs = extended_trace_value(tau, cols @ cols.conj().T, space)
    assert abs(lhs - rhs) < 1e-10


def test_extended_trace_of_projection_delocalized_matches_dense():
    rng = _rng(16)
    spec = group_algebra("Z/3")
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 2, tau)
    module = _projection_from_hermitian(spec, 2, rng)
    e = extend_map(module.projection, space)
    w, v = np.linalg.eigh((e + e.conj().T) / 2)
    cols = v[:, w > 0.5]
    for g in range(3):
        tg = delocalized_trace(spec, g)
        lhs = extended_trace_of_projection(tg, cols, space)
        rhs = extended_trace_value(tg, cols @ cols.conj().T, space)
        assert abs(lhs - rhs) < 1e-10


def test_regular_block_completion_roundtrip():
    # nonabelian group algebras run through the coefficient realization
    import itertools

    from ncindex.algebra import FiniteGroup

    perms = [(0, 1, 2)] + [p for p in itertools.permutations(range(3)) if p != (0, 1, 2)]
    index = {p: i for i, p in enumerate(perms)}
    table = tuple(tuple(index[tuple(p[q[x]] for x in range(3))] for q in perms) for p in perms)
    spec = group_algebra(FiniteGroup(label="S3", table=table))
    tau = canonical_group_trace(spec)
    space = l2_free(spec, 1, tau)
    assert space.dim == 6
    rng = _rng(18)
    x = AlgebraElement.random(spec, rng)
    lift = extend_map(ModuleMap.from_entries([[x]]), space)
    back = module_map_from_commutant(lift, space)
    assert (back.entry(0, 0) - x).norm() < 1e-10
    t1 = delocalized_trace(spec, 1)
    val = extended_trace_value(t1, lift, space)
    expected = sum(x.coeffs[g] for g in spec.group.conjugacy_class(1))
    assert abs(val - expected) < 1e-10
    assert (recover_module(space).projection - ModuleMap.identity(spec, 1)).norm() < 1e-10


def test_dim_t_invariant_under_isomorphism():
    # conjugating a right-invariant subspace by an equivariant invertible
    # keeps its trace dimension
    rng = _rng(17)
    spec = matrix_algebra(2)
    tau = normalized_trace(spec)
    space = l2_free(spec, 2, tau)
    module = _projection_from_hermitian(spec, 2, rng)
    e = extend_map(module.projection, space)
    base = extended_trace_value(tau, e, space, check=False)
    for _ in range(10):
        g = ModuleMap.identity(spec, 2) + 0.4 * ModuleMap.random(spec, 2, 2, rng)
        ge = extend_map(g, space)
        moved = ge @ e @ np.linalg.inv(ge)
        # same subspace dimension: spectral projection of the conjugate
        w, v = np.linalg.eig(moved)
        keep = v[:, np.abs(w - 1.0) < 0.5]
        q, _ = np.linalg.qr(keep)
        val = extended_trace_value(tau, q @ q.conj().T, space)
        assert abs(val - base) < 1e-8
