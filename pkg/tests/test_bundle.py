"""Bundle presentations, curvature, retraction, tensor and pullback."""

import itertools

import numpy as np
import pytest

from ncindex._errors import RetractionUndefinedError, StructureError
from ncindex.algebra import (AlgebraElement, FiniteGroup, group_algebra,
                             matrix_algebra, normalized_trace)
from ncindex.bundle import (BundleSpec, ModuleForm, Monodromy, automorphy_bundle,
                            bianchi_residual, complement, connection_apply,
                            curvature, direct_sum, end_twists, flat_bundle,
                            gns_connection_fields, gns_fiber, gns_twist,
                            holonomies, line_bundle, pairing, projection_bundle,
                            projection_overlap, projection_residual,
                            pullback_bundle, random_connection,
                            random_endomorphism_field, random_projection_field,
                            random_section, retract_projection, skew_residual,
                            tensor_with_vector_bundle, trivialized_bundle)
from ncindex.bundle import _dress, _undress
from ncindex.forms import Grid, MatrixForm, pullback_form
from ncindex.gns import extend_map
from ncindex.hilbert_module import (ModuleMap, ProjectiveModule, class_of,
                                    dim_tau)
from ncindex._linalg import random_unitary


def _grid(n=16):
    return Grid("T2", n)


def _rng(seed):
    return np.random.default_rng(seed)


def _s3():
    perms = [(0, 1, 2)] + [p for p in itertools.permutations(range(3)) if p != (0, 1, 2)]
    index = {p: i for i, p in enumerate(perms)}
    table = tuple(tuple(index[tuple(p[q[x]] for x in range(3))] for q in perms)
                  for p in perms)
    return FiniteGroup(label="S3", table=table)


def _translation_monodromy(spec, g=1):
    u = ModuleMap.from_entries([[AlgebraElement.delta(spec, g)]])
    return Monodromy(u, ModuleMap.identity(spec, 1))


def _unitary_monodromy(spec, rng):
    blocks = [np.kron(random_unitary(rng, 1), np.eye(n)).astype(complex)
              for n in spec.blocks]
    u = ModuleMap.from_flat_blocks(spec, 1, 1, blocks)
    return Monodromy(u, ModuleMap.identity(spec, 1))


def _corner_projection(spec=None):
    spec = spec if spec is not None else matrix_algebra(2)
    p = ModuleMap.from_flat_blocks(spec, 2, 2, [np.diag([1.0, 1, 0, 0]).astype(complex)])
    return ProjectiveModule(p)


# ---------------------------------------------------------------------------
# monodromy and bundle validation
# ---------------------------------------------------------------------------

def test_monodromy_rejects_non_unitary_and_non_commuting():
    spec = matrix_algebra(2)
    bad = ModuleMap.from_flat_blocks(spec, 1, 1, [np.diag([1.0, 2.0]).astype(complex)])
    with pytest.raises(StructureError):
        Monodromy(bad, ModuleMap.identity(spec, 1))
    u = ModuleMap.from_flat_blocks(spec, 1, 1, [np.diag([1.0, -1.0]).astype(complex)])
    w = ModuleMap.from_flat_blocks(spec, 1, 1,
                                   [np.array([[0, 1], [1, 0]], dtype=complex)])
    with pytest.raises(StructureError):
        Monodromy(u, w)


def test_bundle_validation_raises():
    g = _grid()
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    with pytest.raises(StructureError):
        BundleSpec("automorphy", g, ProjectiveModule.free(spec, 1))
    corner = _corner_projection()
    with pytest.raises(StructureError):  # non-free automorphy fiber
        BundleSpec("automorphy", g, corner,
                   monodromy=Monodromy.identity(corner.spec, 2))
    dev = random_connection(flat_bundle(g, mono), _rng(0))
    with pytest.raises(StructureError):  # twist belongs to a different monodromy
        automorphy_bundle(g, Monodromy.identity(spec, 1), 0, dev)
    with pytest.raises(StructureError):  # circle bundles cannot carry a slope
        automorphy_bundle(Grid("S1", 16), Monodromy(mono.u, None), 1)


def test_trivialized_reduction_enforced():
    g = _grid()
    corner = _corner_projection()
    spec = corner.spec
    raw = ModuleForm.zero(spec, g, 1, 2, 2)
    fields = tuple(np.broadcast_to(np.eye(4), (g.n, g.n, 4, 4)).astype(complex)
                   for _ in range(2))
    full = ModuleForm(spec, 2, 2, (MatrixForm(g, 1, fields),))
    trivialized_bundle(corner, g, raw)
    with pytest.raises(StructureError):
        trivialized_bundle(corner, g, full)


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

def test_zero_connection_zero_curvature():
    g = _grid()
    b = trivialized_bundle(ProjectiveModule.free(matrix_algebra(2), 2), g)
    assert curvature(b).sup_norm() == 0.0


def test_line_bundle_curvature_is_constant_chern_form():
    g = _grid()
    for c in (-2, 1, 3):
        om = curvature(line_bundle(g, c))
        assert np.max(np.abs(om.parts[0].fields[0] + 2j * np.pi * c)) < 1e-12


def test_flat_bundle_curvature_vanishes():
    g = _grid()
    for spec, mono in [
        (group_algebra("Z/3"), None),
        (matrix_algebra(2), None),
    ]:
        mono = _unitary_monodromy(spec, _rng(5)) if spec.group is None \
            else _translation_monodromy(spec)
        assert curvature(flat_bundle(g, mono)).sup_norm() <= 1e-12


def test_curvature_skew_for_metric_connections():
    g = _grid()
    rng = _rng(7)
    for spec in (matrix_algebra(1), matrix_algebra(2, 1), group_algebra("Z/4")):
        mono = _unitary_monodromy(spec, rng) if spec.group is None \
            else _translation_monodromy(spec)
        dev = random_connection(flat_bundle(g, mono), rng, scale=0.3)
        b = automorphy_bundle(g, mono, 1, dev)
        om = curvature(b)
        assert skew_residual(om) < 1e-9 * max(1.0, om.sup_norm())
        assert bianchi_residual(b) == 0.0


def test_connection_difference_controls_curvature_difference():
    """Two connections on one bundle differ by an endomorphism 1-form, and
    the curvature difference is the exact algebraic expression in it."""
    g = _grid()
    rng = _rng(11)
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    e1 = random_connection(flat_bundle(g, mono), rng, scale=0.4)
    e2 = random_connection(flat_bundle(g, mono), rng, scale=0.4)
    b1 = automorphy_bundle(g, mono, 1, e1)
    b2 = automorphy_bundle(g, mono, 1, e2)
    diff = e1 - e2
    lhs = curvature(b1) - curvature(b2)
    rhs = diff.d() + e1 @ e1 - e2 @ e2
    assert (lhs - rhs).sup_norm() < 1e-12 * max(1.0, lhs.sup_norm())


# ---------------------------------------------------------------------------
# sections, metric property, nabla^2
# ---------------------------------------------------------------------------

def test_metric_compatibility_of_skew_connections():
    g = _grid()
    rng = _rng(13)
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    dev = random_connection(flat_bundle(g, mono), rng, scale=0.2)
    b = automorphy_bundle(g, mono, 0, dev)
    s1, s2 = random_section(b, rng), random_section(b, rng)
    lhs = pairing(s1, s2).d()
    rhs = pairing(connection_apply(b, s1), s2) + pairing(s1, connection_apply(b, s2))
    scale = max(1.0, s1.sup_norm() * s2.sup_norm())
    assert (lhs - rhs).sup_norm() < 1e-9 * scale


def test_nabla_squared_is_curvature():
    g = _grid()
    rng = _rng(17)
    spec = matrix_algebra(2)
    mono = _unitary_monodromy(spec, rng)
    dev = random_connection(flat_bundle(g, mono), rng, scale=0.3)
    b = automorphy_bundle(g, mono, 0, dev)
    s = random_section(b, rng)
    nns = connection_apply(b, connection_apply(b, s))
    rhs = curvature(b) @ s
    assert (nns - rhs).sup_norm() < 1e-9 * max(1.0, s.sup_norm())


def test_sloped_sections_are_refused_at_field_level():
    g = _grid()
    b = line_bundle(g, 1)
    with pytest.raises(StructureError):
        random_section(b, _rng(0))


# ---------------------------------------------------------------------------
# projection fields: complement, retraction
# ---------------------------------------------------------------------------

def test_complement_is_projection_and_classes_add():
    g = _grid()
    pf = random_projection_field(_corner_projection(), g, _rng(19))
    comp = complement(pf)
    assert projection_residual(comp.eps) < 1e-12
    one = ModuleForm.constant(ModuleMap.identity(pf.spec, 2), g, 0)
    assert (pf.eps + comp.eps - one).sup_norm() < 1e-12
    total = class_of(pf.fiber) + class_of(comp.fiber)
    assert total.ranks == class_of(ProjectiveModule.free(pf.spec, 2)).ranks


def test_direct_sum_grassmann_curvature_is_blockwise():
    g = _grid()
    pf = random_projection_field(_corner_projection(), g, _rng(23))
    comp = complement(pf)
    om_sum = curvature(direct_sum(pf, comp))
    o1, o2 = curvature(pf), curvature(comp)
    blk = np.zeros((g.n, g.n, 8, 8), dtype=complex)
    blk[..., :4, :4] = o1.parts[0].fields[0]
    blk[..., 4:, 4:] = o2.parts[0].fields[0]
    assert np.max(np.abs(om_sum.parts[0].fields[0] - blk)) < 1e-10


def test_retraction_fixes_projections_and_kills_small_fields():
    g = _grid()
    pf = random_projection_field(_corner_projection(), g, _rng(29))
    again = retract_projection(pf.eps)
    assert (again.eps - pf.eps).sup_norm() < 1e-12
    third = 0.3 * ModuleForm.constant(ModuleMap.identity(pf.spec, 2), g, 0)
    low = retract_projection(third)
    assert low.eps.sup_norm() == 0.0


def test_retraction_of_perturbed_projection():
    g = _grid()
    rng = _rng(31)
    pf = random_projection_field(_corner_projection(), g, rng)
    pert = random_endomorphism_field(pf, rng, hermitian=True)
    pert = (0.05 / pert.sup_norm()) * pert
    out = retract_projection(pf.eps + pert, reference=pf.eps)
    assert projection_residual(out.eps) < 1e-12
    assert (out.eps - pf.eps).sup_norm() < 0.2
    assert projection_overlap(out.eps, pf.eps) > 0.5


def test_retraction_forbidden_band():
    g = _grid()
    spec = matrix_algebra(2)
    half = 0.5 * ModuleForm.constant(ModuleMap.identity(spec, 1), g, 0)
    with pytest.raises(RetractionUndefinedError):
        retract_projection(half)
    far = ModuleForm.constant(ModuleMap.identity(spec, 1), g, 0)
    with pytest.raises(StructureError):
        retract_projection(far, delta=0.05,
                           reference=0.8 * ModuleForm.constant(
                               ModuleMap.identity(spec, 1), g, 0))


# ---------------------------------------------------------------------------
# tensor, flat, direct sums
# ---------------------------------------------------------------------------

def test_tensor_with_trivial_line_preserves_curvature():
    g = _grid()
    rng = _rng(37)
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    dev = random_connection(flat_bundle(g, mono), rng, scale=0.3)
    b = automorphy_bundle(g, mono, 1, dev)
    t = tensor_with_vector_bundle(line_bundle(g, 0), b)
    assert t.chern == b.chern and t.rank == b.rank
    assert (curvature(t) - curvature(b)).sup_norm() < 1e-12


def test_tensor_curvature_additivity():
    g = _grid()
    rng = _rng(41)
    e_dev = random_connection(line_bundle(g, 0), rng, scale=0.3)
    e = line_bundle(g, 2, e_dev)
    spec = matrix_algebra(2)
    mono = _unitary_monodromy(spec, rng)
    b_dev = random_connection(flat_bundle(g, mono), rng, scale=0.3)
    b = automorphy_bundle(g, mono, 1, b_dev)
    t = tensor_with_vector_bundle(e, b)
    om_t = curvature(t)
    om_e = curvature(e).parts[0].fields[0]
    om_b = curvature(b).parts[0].fields[0]
    want = om_e * np.broadcast_to(np.eye(2), om_b.shape[-2:]) + om_b
    got = om_t.parts[0].fields[0]
    scale = max(1.0, om_t.sup_norm())
    assert np.max(np.abs(got - want)) < 1e-9 * scale


def test_tensor_of_flats_is_flat():
    g = _grid()
    spec = group_algebra("Z/2")
    t = tensor_with_vector_bundle(line_bundle(g, 0),
                                  flat_bundle(g, _translation_monodromy(spec)))
    assert curvature(t).sup_norm() <= 1e-12


def test_flat_bundle_holonomies_and_identity_case():
    g = _grid()
    spec = group_algebra("Z/4")
    mono = _translation_monodromy(spec)
    b = flat_bundle(g, mono)
    u, v = holonomies(b)
    assert (u - mono.u).norm() == 0.0 and (v - mono.v).norm() == 0.0
    triv = flat_bundle(g, Monodromy.identity(spec, 1))
    assert all(t is None for t in end_twists(spec, triv.monodromy, 1))


def test_direct_sum_requires_matching_chern():
    g = _grid()
    with pytest.raises(StructureError):
        direct_sum(line_bundle(g, 1), line_bundle(g, 0))
    s = direct_sum(line_bundle(g, 1), line_bundle(g, 1))
    assert s.rank == 2 and s.chern == 1


# ---------------------------------------------------------------------------
# pullback
# ---------------------------------------------------------------------------

def test_pullback_multiplies_chern_and_powers_monodromy():
    g = _grid(8)
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    b = automorphy_bundle(g, mono, 2)
    pb = pullback_bundle(b, 3)
    assert pb.chern == 6 and pb.grid.n == 24
    u3 = mono.u @ mono.u @ mono.u
    assert (pb.monodromy.u - u3).norm() < 1e-12


def test_pullback_commutes_with_curvature():
    g = _grid(8)
    rng = _rng(43)
    spec = group_algebra("Z/3")
    mono = _translation_monodromy(spec)
    dev = random_connection(flat_bundle(g, mono), rng, max_mode=2, scale=0.3)
    b = automorphy_bundle(g, mono, 1, dev)
    pb = pullback_bundle(b, 2)
    om = curvature(b)
    om_pull = curvature(pb)
    base_tw = end_twists(spec, mono, 1)
    cover_tw = end_twists(spec, pb.monodromy, 1)
    parts = tuple(_dress(pullback_form(_undress(pt, t0), 2, pb.grid), t1, "conjugation")
                  for pt, t0, t1 in zip(om.parts, base_tw, cover_tw))
    pulled = ModuleForm(spec, 1, 1, parts)
    assert (om_pull - pulled).sup_norm() < 1e-10 * max(1.0, om_pull.sup_norm())


# ---------------------------------------------------------------------------
# GNS bridge
# ---------------------------------------------------------------------------

def test_gns_fields_match_pointwise_extension():
    g = _grid(8)
    rng = _rng(47)
    cases = [matrix_algebra(2, 1), group_algebra("Z/4"), group_algebra(_s3())]
    for spec in cases:
        mono = _unitary_monodromy(spec, rng) if spec.group is None \
            else _translation_monodromy(spec)
        dev = random_connection(flat_bundle(g, mono), rng, scale=0.2)
        b = automorphy_bundle(g, mono, 2, dev)
        space = gns_fiber(b)
        fields = gns_connection_fields(b, space)
        for ix, iy in ((0, 0), (3, 5), (7, 2)):
            vals = b.omega.value_at(ix, iy)
            for c in range(2):
                assert np.max(np.abs(extend_map(vals[c], space)
                                     - fields[c][ix, iy])) < 1e-12


def test_gns_twist_is_unitary_automorphy_pair():
    g = _grid(8)
    spec = group_algebra(_s3())
    mono = _translation_monodromy(spec, 3)
    b = automorphy_bundle(g, mono, 1)
    space = gns_fiber(b)
    tw = gns_twist(b, space)
    assert tw.dim == 6 and tw.slope == (1,) * 6
    eye = np.eye(6)
    assert np.max(np.abs(tw.u0 @ np.conj(tw.u0.T) - eye)) < 1e-12


def test_dim_tau_of_flat_fiber_matches_trace():
    spec = matrix_algebra(2, 1)
    b = flat_bundle(_grid(8), _unitary_monodromy(spec, _rng(53)))
    tau = normalized_trace(spec)
    assert dim_tau(tau, class_of(b.fiber)) == pytest.approx(1.0)
