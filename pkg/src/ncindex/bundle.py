"""Bundles of projective modules over discretized circles and tori.

Three presentations cover the constructions used downstream:

* trivialized: a constant fiber projection p inside a free module, with a
  periodic connection form reduced by p; the reference derivative is the
  plain exterior d.
* automorphy: a free fiber with commuting unitary monodromies U, V and an
  integer Chern parameter c.  Sections obey s(x+1, y) = U s(x, y) and
  s(x, y+1) = exp(-2 pi i c x) V s(x, y).  The canonical reference
  connection is d + 2 pi i c y dx, whose curvature is -2 pi i c dx^dy, and
  the bundle stores only the deviation from it, which is an honest
  endomorphism-valued 1-form.
* projection field: a pointwise projection over a trivial ambient bundle,
  carrying the Grassmann connection eps d eps.

The Chern parameter enters as a scalar slope.  Conjugation by the scalar
slope factor is the identity, so endomorphism fields over an automorphy
bundle are quasi-periodic only through the constant monodromies and their
derivatives stay inside the constant-twist machinery of the forms module.
Sections of a sloped bundle have no field-level derivative here; the
operator assembly differentiates them through per-column gauge logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ncindex._errors import RetractionUndefinedError, StructureError
from ncindex.algebra import AlgebraElement, AlgebraSpec, matrix_algebra, normalized_trace
from ncindex.forms import (Grid, MatrixForm, Twist, exterior_d, fourier_resample,
                           pullback_form, random_band_limited, same_twist, wedge)
from ncindex.gns import GnsSpace, extend_map, l2_of_module
from ncindex.hilbert_module import ModuleMap, ProjectiveModule, direct_sum_maps

MONODROMY_TOL = 1e-12
REDUCTION_TOL = 1e-10
PROJECTION_FIELD_TOL = 1e-10
FORBIDDEN_BAND = (0.4, 0.6)
MAX_RETRACTION_DELTA = 0.1


def _flat_dim(spec: AlgebraSpec, i: int) -> int:
    return spec.group.order if spec.regular_block else spec.blocks[i]


# -- algebra-valued forms -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModuleForm:
    """Differential form whose values are matrices over the algebra.

    One MatrixForm per block of A holds the flat realization of the values,
    so part i carries matrices of shape (rows*d_i, cols*d_i) with d_i the
    flat block dimension.  Endomorphism-like fields over an automorphy
    bundle carry constant conjugation twists by the monodromy blocks (the
    integer slope conjugates trivially and is dropped); section-like fields
    carry left twists.  Constructors are expected to supply values that are
    genuinely matrices over A; only shapes and twist metadata are checked
    here.
    """

    spec: AlgebraSpec
    rows: int
    cols: int
    parts: tuple

    def __post_init__(self):
        if len(self.parts) != self.spec.k:
            raise StructureError("one component form per algebra block required")
        g, deg, action = self.parts[0].grid, self.parts[0].degree, self.parts[0].action
        for i, part in enumerate(self.parts):
            if part.grid != g or part.degree != deg or part.action != action:
                raise StructureError("parts disagree on grid, degree or action")
            d = _flat_dim(self.spec, i)
            if part.value_shape != (self.rows * d, self.cols * d):
                raise StructureError(
                    f"part {i} shaped {part.value_shape} does not realize a "
                    f"{self.rows}x{self.cols} matrix over the algebra")

    # -- construction ----------------------------------------------------------

    @classmethod
    def zero(cls, spec: AlgebraSpec, grid: Grid, degree: int, rows: int, cols: int,
             twists=None, action: str = "conjugation") -> "ModuleForm":
        twists = twists if twists is not None else (None,) * spec.k
        parts = tuple(
            MatrixForm.zero(grid, degree, (rows * _flat_dim(spec, i), cols * _flat_dim(spec, i)),
                            twist=twists[i],
                            action=action if twists[i] is not None else "left")
            for i in range(spec.k))
        return cls(spec, rows, cols, parts)

    @classmethod
    def constant(cls, phi: ModuleMap, grid: Grid, degree: int = 0,
                 twists=None, action: str = "conjugation") -> "ModuleForm":
        """Constant form with the same ModuleMap in every component."""
        twists = twists if twists is not None else (None,) * phi.spec.k
        names = MatrixForm.zero(grid, degree).component_names
        parts = tuple(
            MatrixForm.constant(grid, degree, [phi.blocks[i]] * len(names),
                                twist=twists[i],
                                action=action if twists[i] is not None else "left")
            for i in range(phi.spec.k))
        return cls(phi.spec, phi.rows, phi.cols, parts)

    # -- bookkeeping ------------------------------------------------------------

    @property
    def grid(self) -> Grid:
        return self.parts[0].grid

    @property
    def degree(self) -> int:
        return self.parts[0].degree

    @property
    def action(self) -> str:
        return self.parts[0].action

    @property
    def twists(self) -> tuple:
        return tuple(part.twist for part in self.parts)

    def value_at(self, *idx: int) -> tuple:
        """Per-component ModuleMap values at one grid point."""
        out = []
        for c in range(len(self.parts[0].fields)):
            blocks = [np.asarray(part.fields[c][idx]) for part in self.parts]
            out.append(ModuleMap.from_flat_blocks(self.spec, self.rows, self.cols, blocks))
        return tuple(out)

    def sup_norm(self) -> float:
        return max(part.sup_norm() for part in self.parts)

    # -- arithmetic --------------------------------------------------------------

    def _like(self, parts, rows=None, cols=None) -> "ModuleForm":
        return ModuleForm(self.spec, rows if rows is not None else self.rows,
                          cols if cols is not None else self.cols, tuple(parts))

    def __add__(self, other: "ModuleForm") -> "ModuleForm":
        self._check_peer(other)
        return self._like(a + b for a, b in zip(self.parts, other.parts))

    def __sub__(self, other: "ModuleForm") -> "ModuleForm":
        self._check_peer(other)
        return self._like(a - b for a, b in zip(self.parts, other.parts))

    def __rmul__(self, z: complex) -> "ModuleForm":
        return self._like(z * part for part in self.parts)

    def __neg__(self) -> "ModuleForm":
        return self._like(-1.0 * part for part in self.parts)

    def d(self) -> "ModuleForm":
        return self._like(exterior_d(part) for part in self.parts)

    def wedge(self, other: "ModuleForm") -> "ModuleForm":
        """Blockwise wedge; composes the matrix values pointwise."""
        if self.spec != other.spec or self.cols != other.rows:
            raise StructureError("module forms are not composable")
        return self._like((wedge(a, b) for a, b in zip(self.parts, other.parts)),
                          rows=self.rows, cols=other.cols)

    def __matmul__(self, other: "ModuleForm") -> "ModuleForm":
        return self.wedge(other)

    def adjoint(self) -> "ModuleForm":
        """Componentwise pointwise adjoint; conjugation twists carry over."""
        if self.action == "left" and any(t is not None for t in self.twists):
            raise StructureError("adjoint of a left-twisted section field is not a section field")
        parts = tuple(
            MatrixForm(part.grid, part.degree,
                       tuple(np.conj(np.swapaxes(f, -1, -2)) for f in part.fields),
                       twist=part.twist, action=part.action)
            for part in self.parts)
        return ModuleForm(self.spec, self.cols, self.rows, parts)

    def _check_peer(self, other: "ModuleForm") -> None:
        if self.spec != other.spec or self.rows != other.rows or self.cols != other.cols:
            raise StructureError("module forms have different shapes")
        for a, b in zip(self.parts, other.parts):
            if not same_twist(a.twist, b.twist):
                raise StructureError("module forms carry different twists")


def skew_residual(e: ModuleForm) -> float:
    return (e + e.adjoint()).sup_norm()


def projection_residual(e: ModuleForm) -> float:
    """sup over grid points of max(|e^2 - e|, |e* - e|)."""
    if e.degree != 0 or e.rows != e.cols:
        raise StructureError("projection fields are square degree-0 forms")
    worst = 0.0
    for part in e.parts:
        f = part.fields[0]
        worst = max(worst,
                    float(np.max(np.linalg.norm(f @ f - f, ord=2, axis=(-2, -1)))),
                    float(np.max(np.linalg.norm(np.conj(np.swapaxes(f, -1, -2)) - f,
                                                ord=2, axis=(-2, -1)))))
    return worst


# -- monodromy and bundle specifications -----------------------------------------

@dataclass(frozen=True, eq=False)
class Monodromy:
    """Commuting unitaries in End_A(A^n), one per torus generator (v is None
    over the circle)."""

    u: ModuleMap
    v: ModuleMap | None = None

    def __post_init__(self):
        mats = [self.u] + ([self.v] if self.v is not None else [])
        for m in mats:
            if m.rows != m.cols:
                raise StructureError("monodromies must be endomorphisms")
            if (m.adjoint() @ m - ModuleMap.identity(m.spec, m.rows)).norm() > MONODROMY_TOL:
                raise StructureError("monodromies must be unitary")
        if self.v is not None:
            if self.v.spec != self.u.spec or self.v.rows != self.u.rows:
                raise StructureError("monodromies live on different modules")
            scale = max(1.0, self.u.norm() * self.v.norm())
            if (self.u @ self.v - self.v @ self.u).norm() > MONODROMY_TOL * scale:
                raise StructureError("monodromies must commute")

    @property
    def spec(self) -> AlgebraSpec:
        return self.u.spec

    @property
    def rank(self) -> int:
        return self.u.rows

    @classmethod
    def identity(cls, spec: AlgebraSpec, n: int = 1, circle: bool = False) -> "Monodromy":
        one = ModuleMap.identity(spec, n)
        return cls(one, None if circle else one)


def _is_identity(phi: ModuleMap) -> bool:
    return (phi - ModuleMap.identity(phi.spec, phi.rows)).norm() <= 1e-12


def end_twists(spec: AlgebraSpec, monodromy: Monodromy | None, rank: int) -> tuple:
    """Conjugation twists of endomorphism fields, one per block.

    The Chern slope conjugates trivially, so the twists are flat; bundles
    without monodromy (or with identity monodromy) get untwisted fields.
    """
    if monodromy is None or (_is_identity(monodromy.u) and
                             (monodromy.v is None or _is_identity(monodromy.v))):
        return (None,) * spec.k
    out = []
    for i in range(spec.k):
        d = rank * _flat_dim(spec, i)
        out.append(Twist(monodromy.u.blocks[i], monodromy.v.blocks[i], (0,) * d))
    return tuple(out)


def section_twists(b: "BundleSpec") -> tuple:
    """Left-action twists of section fields, slope included (one per block)."""
    if b.monodromy is None:
        return (None,) * b.spec.k
    out = []
    for i in range(b.spec.k):
        d = b.rank * _flat_dim(b.spec, i)
        out.append(Twist(b.monodromy.u.blocks[i], b.monodromy.v.blocks[i], (b.chern,) * d))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class BundleSpec:
    """One bundle in one of the three presentations.

    omega is the full reduced connection form for the trivialized
    presentation and the deviation from the canonical reference for the
    automorphy presentation; the projection presentation stores the
    pointwise projection eps instead and uses the Grassmann connection.
    """

    presentation: str
    grid: Grid
    fiber: ProjectiveModule
    monodromy: Monodromy | None = None
    chern: int = 0
    omega: ModuleForm | None = None
    eps: ModuleForm | None = None

    def __post_init__(self):
        if self.presentation not in ("trivialized", "automorphy", "projection"):
            raise StructureError(f"unknown presentation {self.presentation!r}")
        if self.presentation == "projection":
            if self.eps is None or self.monodromy is not None or self.chern:
                raise StructureError("projection bundles carry only the projection field")
            if self.eps.grid != self.grid:
                raise StructureError("projection field lives on a different grid")
            res = projection_residual(self.eps)
            if res > PROJECTION_FIELD_TOL:
                raise StructureError(f"field is not projection valued (residual {res:.2e})")
            return
        if self.eps is not None:
            raise StructureError("projection fields belong to the projection presentation")
        if self.presentation == "trivialized":
            if self.monodromy is not None or self.chern:
                raise StructureError("trivialized bundles have no automorphy data")
        else:
            if self.monodromy is None:
                raise StructureError("automorphy bundles need a monodromy")
            if self.monodromy.spec != self.spec or self.monodromy.rank != self.rank:
                raise StructureError("monodromy does not act on the fiber")
            if not _is_identity(self.fiber.projection):
                raise StructureError("automorphy presentation expects a free fiber")
            if self.grid.manifold == "S1":
                if self.chern or self.monodromy.v is not None:
                    raise StructureError("circle bundles are flat with a single monodromy")
            elif self.monodromy.v is None:
                raise StructureError("torus bundles need both monodromies")
        if self.omega is not None:
            if self.omega.grid != self.grid or self.omega.degree != 1:
                raise StructureError("connection form must be a degree-1 form on the bundle grid")
            if self.omega.spec != self.spec or self.omega.rows != self.rank \
                    or self.omega.cols != self.rank:
                raise StructureError("connection form does not act on the fiber")
            want = end_twists(self.spec, self.monodromy, self.rank)
            for part, tw in zip(self.omega.parts, want):
                if not same_twist(part.twist, tw):
                    raise StructureError("connection form twist disagrees with the automorphy")
            p = self.fiber.projection
            reduced = ModuleForm.constant(p, self.grid, 0, twists=self.omega.twists)
            residual = (reduced @ self.omega @ reduced - self.omega).sup_norm()
            if residual > REDUCTION_TOL * max(1.0, self.omega.sup_norm()):
                raise StructureError(f"connection form is not reduced by the fiber "
                                     f"projection (residual {residual:.2e})")

    @property
    def spec(self) -> AlgebraSpec:
        return self.fiber.spec

    @property
    def rank(self) -> int:
        return self.fiber.ambient_rank


def trivialized_bundle(fiber: ProjectiveModule, grid: Grid,
                       omega: ModuleForm | None = None) -> BundleSpec:
    return BundleSpec("trivialized", grid, fiber, omega=omega)


def automorphy_bundle(grid: Grid, monodromy: Monodromy, chern: int = 0,
                      deviation: ModuleForm | None = None) -> BundleSpec:
    fiber = ProjectiveModule.free(monodromy.spec, monodromy.rank)
    return BundleSpec("automorphy", grid, fiber, monodromy=monodromy,
                      chern=int(chern), omega=deviation)


def projection_bundle(eps: ModuleForm) -> BundleSpec:
    basepoint = eps.value_at(*(0,) * eps.grid.dim)[0]
    fiber = ProjectiveModule(basepoint)
    return BundleSpec("projection", eps.grid, fiber, eps=eps)


def flat_bundle(grid: Grid, monodromy: Monodromy) -> BundleSpec:
    """Automorphy bundle with zero deviation and zero Chern parameter."""
    return automorphy_bundle(grid, monodromy)


def line_bundle(grid: Grid, chern: int,
                deviation: ModuleForm | None = None) -> BundleSpec:
    """The standard Chern-c line bundle over the scalars."""
    spec = matrix_algebra(1)
    return automorphy_bundle(grid, Monodromy.identity(spec, 1), chern, deviation)


def holonomies(b: BundleSpec) -> tuple:
    """Loop transports of a flat automorphy bundle around the two circles.

    With zero deviation the covariant-constant sections are the gauge
    dressings of constants, so the transports are the automorphy constants
    themselves.
    """
    if b.presentation != "automorphy" or b.chern or b.omega is not None:
        raise StructureError("holonomies are defined for flat automorphy bundles")
    return b.monodromy.u, b.monodromy.v


# -- curvature --------------------------------------------------------------------

def _identity_form(b: BundleSpec, degree: int, twists) -> ModuleForm:
    return ModuleForm.constant(b.fiber.projection, b.grid, degree, twists=twists)


def curvature(b: BundleSpec) -> ModuleForm:
    """Degree-2 endomorphism form of the bundle's connection.

    Trivialized/automorphy: Omega = Omega_ref + d omega + omega ^ omega,
    with Omega_ref = -2 pi i c times the identity (zero when c = 0); the
    slope commutes with everything, so the reference bracket drops out.
    Projection presentation: the Grassmann curvature eps deps ^ deps eps.
    """
    if b.grid.manifold != "T2":
        raise StructureError("curvature 2-forms live on the torus")
    if b.presentation == "projection":
        de = b.eps.d()
        return b.eps @ (de @ de) @ b.eps
    twists = end_twists(b.spec, b.monodromy, b.rank)
    base = (-2j * np.pi * b.chern) * _identity_form(b, 2, twists)
    if b.omega is None:
        return base
    return base + b.omega.d() + b.omega @ b.omega


def bianchi_residual(b: BundleSpec) -> float:
    """sup norm of d Omega - (Omega ^ omega - omega ^ Omega).

    On a surface both terms are 3-forms and vanish identically; the residual
    is kept for interface parity and returns exactly zero after the shapes
    are validated.
    """
    curvature(b)
    return 0.0


def complement(b: BundleSpec) -> BundleSpec:
    """Orthogonal complement of a projection bundle inside its free ambient."""
    if b.presentation != "projection":
        raise StructureError("complements are taken in the projection presentation")
    one = ModuleForm.constant(ModuleMap.identity(b.spec, b.rank), b.grid, 0)
    return projection_bundle(one - b.eps)


# -- retraction --------------------------------------------------------------------

def retract_projection(f: ModuleForm, delta: float = MAX_RETRACTION_DELTA,
                       reference: ModuleForm | None = None) -> BundleSpec:
    """Pointwise spectral cut of a near-projection field above 1/2.

    The self-adjoint part of f must keep its spectrum outside the open band
    FORBIDDEN_BAND at every grid point; otherwise the cut is ill-conditioned
    and RetractionUndefinedError reports the worst eigenvalue.  When a
    reference projection field is supplied, sup |f - reference| <= delta is
    verified first (delta capped at 0.1, the margin under which the image
    bundles are isomorphic).
    """
    if f.degree != 0 or f.rows != f.cols:
        raise StructureError("retract square degree-0 fields")
    if reference is not None:
        if delta > MAX_RETRACTION_DELTA + 1e-15:
            raise StructureError("isomorphism margin requires delta <= 0.1")
        gap = (f - reference).sup_norm()
        if gap > delta:
            raise StructureError(f"field strays {gap:.3g} from the reference, beyond {delta}")
    lo, hi = FORBIDDEN_BAND
    parts = []
    for part in f.parts:
        h = part.fields[0]
        h = 0.5 * (h + np.conj(np.swapaxes(h, -1, -2)))
        w, q = np.linalg.eigh(h)
        inside = (w > lo) & (w < hi)
        if np.any(inside):
            worst = float(w[inside].flat[np.argmin(np.abs(w[inside] - 0.5))])
            raise RetractionUndefinedError(
                f"eigenvalue {worst:.6g} lies in the forbidden band {FORBIDDEN_BAND}")
        keep = (w > 0.5).astype(complex)
        proj = np.einsum("...ab,...b,...cb->...ac", q, keep, np.conj(q))
        parts.append(MatrixForm(part.grid, 0, (proj,)))
    return projection_bundle(ModuleForm(f.spec, f.rows, f.cols, tuple(parts)))


def projection_overlap(a: ModuleForm, b: ModuleForm) -> float:
    """Smallest singular value of a(x)b(x) as a map im b -> im a, minimized
    over grid points and blocks.

    A positive value certifies that the image bundles are pointwise
    isomorphic; for projections with sup |a - b| < 1 it stays above
    sqrt(1 - sup|a - b|^2).  Points where b has rank zero contribute
    nothing.
    """
    worst = np.inf
    for pa, pb in zip(a.parts, b.parts):
        fa, fb = pa.fields[0], pb.fields[0]
        s = np.linalg.svd(fa @ fb, compute_uv=False)
        ranks = np.rint(np.real(np.trace(fb, axis1=-2, axis2=-1))).astype(int)
        for row, r in zip(s.reshape(-1, s.shape[-1]), ranks.reshape(-1)):
            if r > 0:
                worst = min(worst, float(row[r - 1]))
    return float(worst) if np.isfinite(worst) else 1.0


# -- tensor, sums, flat pullbacks ---------------------------------------------------

def _kron_fields(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise Kronecker product of two matrix fields on the same grid."""
    out = np.einsum("...ab,...cd->...acbd", a, b)
    sh = out.shape
    return out.reshape(sh[:-4] + (sh[-4] * sh[-3], sh[-2] * sh[-1]))


def _scalar_form_parts(e: ModuleForm) -> MatrixForm:
    if e.spec.blocks != (1,) or e.spec.group is not None:
        raise StructureError("expected a bundle over the scalars")
    return e.parts[0]


def tensor_with_vector_bundle(e: BundleSpec, b: BundleSpec) -> BundleSpec:
    """E tensor b for a finite-dimensional bundle E over the scalars.

    Monodromies and connection forms combine as kron(e, 1) + kron(1, b); the
    Chern parameters add.  Both inputs must be free-fibered (trivialized
    inputs are treated as automorphy bundles with identity monodromy).
    """
    if e.grid != b.grid:
        raise StructureError("tensor factors live on different grids")
    if e.presentation == "projection" or b.presentation == "projection":
        raise StructureError("tensor with the projection presentation is not supported")
    if not _is_identity(e.fiber.projection) or not _is_identity(b.fiber.projection):
        raise StructureError("tensor factors must have free fibers")
    if e.spec.blocks != (1,) or e.spec.group is not None:
        raise StructureError("the vector factor must live over the scalars")
    m, n = e.fiber.ambient_rank, b.fiber.ambient_rank
    ue = e.monodromy.u.blocks[0] if e.monodromy is not None else np.eye(m)
    ve = e.monodromy.v.blocks[0] if e.monodromy is not None else np.eye(m)
    ub = b.monodromy if b.monodromy is not None else Monodromy.identity(b.spec, n)
    u = ModuleMap.from_flat_blocks(b.spec, m * n, m * n,
                                   [np.kron(ue, blk) for blk in ub.u.blocks])
    v = ModuleMap.from_flat_blocks(b.spec, m * n, m * n,
                                   [np.kron(ve, blk) for blk in ub.v.blocks])
    mono = Monodromy(u, v)
    chern = e.chern + b.chern
    twists = end_twists(b.spec, mono, m * n)
    omega = None
    if e.omega is not None or b.omega is not None:
        parts = []
        for i in range(b.spec.k):
            d = n * _flat_dim(b.spec, i)
            fields = []
            for c in range(2):
                total = np.zeros((b.grid.n,) * 2 + (m * d, m * d), dtype=complex)
                if e.omega is not None:
                    total += _kron_fields(_scalar_form_parts(e.omega).fields[c],
                                          np.broadcast_to(np.eye(d), (d, d)))
                if b.omega is not None:
                    total += _kron_fields(np.broadcast_to(np.eye(m), (m, m)),
                                          b.omega.parts[i].fields[c])
                fields.append(total)
            parts.append(MatrixForm(b.grid, 1, tuple(fields), twist=twists[i],
                                    action="conjugation" if twists[i] is not None else "left"))
        omega = ModuleForm(b.spec, m * n, m * n, tuple(parts))
    return automorphy_bundle(b.grid, mono, chern, omega)


def direct_sum(b1: BundleSpec, b2: BundleSpec) -> BundleSpec:
    """Diagonal direct sum; automorphy summands must share the Chern slope.

    Mixed slopes would make the reference connection a genuine matrix slope,
    which the scalar-slope design excludes; sum such bundles at the level of
    their Chern forms instead.
    """
    if b1.presentation != b2.presentation or b1.grid != b2.grid or b1.spec != b2.spec:
        raise StructureError("direct sums need matching presentations, grids and algebras")
    if b1.presentation == "projection":
        parts = tuple(_blockdiag_part(p1, p2, None)
                      for p1, p2 in zip(b1.eps.parts, b2.eps.parts))
        return projection_bundle(ModuleForm(b1.spec, b1.rank + b2.rank,
                                            b1.rank + b2.rank, parts))
    if b1.chern != b2.chern:
        raise StructureError("direct sums require equal Chern parameters")
    mono = None
    if b1.presentation == "automorphy":
        mono = Monodromy(direct_sum_maps(b1.monodromy.u, b2.monodromy.u),
                         direct_sum_maps(b1.monodromy.v, b2.monodromy.v))
    rank = b1.rank + b2.rank
    twists = end_twists(b1.spec, mono, rank)
    omega = None
    if b1.omega is not None or b2.omega is not None:
        o1 = b1.omega if b1.omega is not None else \
            ModuleForm.zero(b1.spec, b1.grid, 1, b1.rank, b1.rank,
                            twists=end_twists(b1.spec, b1.monodromy, b1.rank))
        o2 = b2.omega if b2.omega is not None else \
            ModuleForm.zero(b2.spec, b2.grid, 1, b2.rank, b2.rank,
                            twists=end_twists(b2.spec, b2.monodromy, b2.rank))
        parts = tuple(_blockdiag_part(p1, p2, tw)
                      for p1, p2, tw in zip(o1.parts, o2.parts, twists))
        omega = ModuleForm(b1.spec, rank, rank, parts)
    if b1.presentation == "automorphy":
        return automorphy_bundle(b1.grid, mono, b1.chern, omega)
    return trivialized_bundle(ProjectiveModule(direct_sum_maps(
        b1.fiber.projection, b2.fiber.projection)), b1.grid, omega)


def _blockdiag_part(p1: MatrixForm, p2: MatrixForm, twist) -> MatrixForm:
    fields = []
    for f1, f2 in zip(p1.fields, p2.fields):
        d1, d2 = f1.shape[-1], f2.shape[-1]
        out = np.zeros(f1.shape[:-2] + (d1 + d2, d1 + d2), dtype=complex)
        out[..., :d1, :d1] = f1
        out[..., d1:, d1:] = f2
        fields.append(out)
    return MatrixForm(p1.grid, p1.degree, tuple(fields), twist=twist, action=p1.action)


def pullback_bundle(b: BundleSpec, k: int, cover_grid: Grid | None = None) -> BundleSpec:
    """Pullback along the degree-k cover (x, y) -> (k x mod 1, y).

    The x-monodromy is raised to the k-th power and the Chern parameter
    multiplies by k; twisted deviation fields are undressed to periodic
    data, pulled back spectrally, and redressed in the cover gauge.
    """
    cg = cover_grid if cover_grid is not None else Grid("T2", k * b.grid.n)
    if b.presentation == "projection":
        parts = tuple(pullback_form(p, k, cg) for p in b.eps.parts)
        return projection_bundle(ModuleForm(b.spec, b.rank, b.rank, parts))
    if b.presentation == "trivialized":
        omega = None
        if b.omega is not None:
            omega = ModuleForm(b.spec, b.rank, b.rank,
                               tuple(pullback_form(p, k, cg) for p in b.omega.parts))
        return trivialized_bundle(b.fiber, cg, omega)
    uk = ModuleMap.identity(b.spec, b.rank)
    for _ in range(k):
        uk = uk @ b.monodromy.u
    mono = Monodromy(uk, b.monodromy.v)
    chern = k * b.chern
    omega = None
    if b.omega is not None:
        base_tw = end_twists(b.spec, b.monodromy, b.rank)
        cover_tw = end_twists(b.spec, mono, b.rank)
        parts = []
        for part, tw0, tw1 in zip(b.omega.parts, base_tw, cover_tw):
            flat = _undress(part, tw0)
            pulled = pullback_form(flat, k, cg)
            parts.append(_dress(pulled, tw1, "conjugation"))
        omega = ModuleForm(b.spec, b.rank, b.rank, tuple(parts))
    return automorphy_bundle(cg, mono, chern, omega)


def resample_bundle(b: BundleSpec, factor: int) -> BundleSpec:
    """The same bundle on a factor-times-finer grid.

    Deviation fields are interpolated trigonometrically through the gauge
    that makes them periodic, which is exact for the band-limited fields the
    random constructors produce.  Projection presentations are excluded: a
    resampled projection field needs a retraction to become one again.
    """
    if b.presentation == "projection":
        raise StructureError("resample the reduction data, then retract")
    fine = Grid(b.grid.manifold, b.grid.n * factor)
    if b.omega is None:
        omega = None
    else:
        twists = b.omega.twists
        parts = []
        for part, tw in zip(b.omega.parts, twists):
            flat = _undress(part, tw)
            parts.append(_dress(fourier_resample(flat, factor), tw, "conjugation"))
        omega = ModuleForm(b.spec, b.rank, b.rank, tuple(parts))
    if b.presentation == "trivialized":
        return trivialized_bundle(b.fiber, fine, omega)
    return automorphy_bundle(fine, b.monodromy, b.chern, omega)


# -- gauge dressing ------------------------------------------------------------------

def _gauge_grid(twist: Twist, grid: Grid) -> np.ndarray:
    """Stack U^x V^y over the grid, shape (n, n, d, d)."""
    gu = np.stack([twist.u_power(j / grid.n) for j in range(grid.n)])
    gv = np.stack([twist.v_power(j / grid.n) for j in range(grid.n)])
    return np.einsum("xab,ybc->xyac", gu, gv)


def _dress(part: MatrixForm, twist: Twist | None, action: str) -> MatrixForm:
    """Turn a periodic field into the quasi-periodic field it gauges."""
    if twist is None:
        return MatrixForm(part.grid, part.degree, part.fields)
    g = _gauge_grid(twist, part.grid)
    ginv = np.conj(np.swapaxes(g, -1, -2))
    fields = []
    for f in part.fields:
        out = g @ f
        if action == "conjugation":
            out = out @ ginv
        fields.append(out)
    return MatrixForm(part.grid, part.degree, tuple(fields), twist=twist, action=action)


def _undress(part: MatrixForm, twist: Twist | None) -> MatrixForm:
    """Inverse of _dress; the result is an honest periodic field."""
    if twist is None:
        return MatrixForm(part.grid, part.degree, part.fields)
    g = _gauge_grid(twist, part.grid)
    ginv = np.conj(np.swapaxes(g, -1, -2))
    fields = []
    for f in part.fields:
        out = ginv @ f
        if part.action == "conjugation":
            out = out @ g
        fields.append(out)
    return MatrixForm(part.grid, part.degree, tuple(fields))


def _random_periodic_block(spec: AlgebraSpec, i: int, grid: Grid, rows: int, cols: int,
                           rng: np.random.Generator, max_mode: int, scale: float) -> np.ndarray:
    """Band-limited random field of (rows x cols) matrices over block i."""
    if not spec.regular_block:
        d = spec.blocks[i]
        return random_band_limited(grid, (rows * d, cols * d), rng,
                                   max_mode=max_mode, scale=scale)
    o = spec.group.order
    lam = np.stack([AlgebraElement.delta(spec, g).blocks[0] for g in range(o)])
    coeffs = random_band_limited(grid, (rows, cols, o), rng, max_mode=max_mode, scale=scale)
    entries = np.einsum("...rcg,gab->...racb", coeffs, lam)
    sh = entries.shape
    return entries.reshape(sh[:-4] + (sh[-4] * sh[-3], sh[-2] * sh[-1]))


def random_connection(b: BundleSpec, rng: np.random.Generator,
                      max_mode: int = 3, scale: float = 0.5,
                      skew: bool = True) -> ModuleForm:
    """Random valid deviation (or trivialized connection form) for b.

    Random periodic block fields are reduced by the fiber projection,
    optionally skew-adjointified, and gauge-dressed into the automorphy's
    conjugation twist, which makes them honest endomorphism-valued
    quasi-periodic 1-forms.
    """
    if b.presentation == "projection":
        raise StructureError("projection bundles carry the Grassmann connection only")
    twists = end_twists(b.spec, b.monodromy, b.rank)
    p = b.fiber.projection
    parts = []
    for i in range(b.spec.k):
        fields = []
        for _ in range(b.grid.dim):
            f = _random_periodic_block(b.spec, i, b.grid, b.rank, b.rank, rng, max_mode, scale)
            if skew:
                f = 0.5 * (f - np.conj(np.swapaxes(f, -1, -2)))
            f = p.blocks[i] @ f @ p.blocks[i]
            fields.append(f)
        flat = MatrixForm(b.grid, 1, tuple(fields))
        parts.append(_dress(flat, twists[i], "conjugation"))
    return ModuleForm(b.spec, b.rank, b.rank, tuple(parts))


def random_endomorphism_field(b: BundleSpec, rng: np.random.Generator,
                              max_mode: int = 3, scale: float = 1.0,
                              hermitian: bool = False) -> ModuleForm:
    """Random degree-0 endomorphism field compatible with b's automorphy."""
    twists = end_twists(b.spec, b.monodromy, b.rank)
    p = b.fiber.projection
    parts = []
    for i in range(b.spec.k):
        f = _random_periodic_block(b.spec, i, b.grid, b.rank, b.rank, rng, max_mode, scale)
        if hermitian:
            f = 0.5 * (f + np.conj(np.swapaxes(f, -1, -2)))
        f = p.blocks[i] @ f @ p.blocks[i]
        parts.append(_dress(MatrixForm(b.grid, 0, (f,)), twists[i], "conjugation"))
    return ModuleForm(b.spec, b.rank, b.rank, tuple(parts))


def unitary_dressing_field(spec: AlgebraSpec, grid: Grid, rank: int,
                           rng: np.random.Generator, max_mode: int = 2,
                           scale: float = 0.6) -> ModuleForm:
    """Pointwise unitary field W = exp(i h) with h a random hermitian field.

    h is normalized so its largest pointwise eigenvalue is `scale`; large
    generators would push spectral content of exp(i h) past the grid's band
    and spoil every derivative taken later.
    """
    parts = []
    for i in range(spec.k):
        h = _random_periodic_block(spec, i, grid, rank, rank, rng, max_mode, 1.0)
        h = 0.5 * (h + np.conj(np.swapaxes(h, -1, -2)))
        w, q = np.linalg.eigh(h)
        peak = float(np.max(np.abs(w)))
        if peak > 0:
            w = (scale / peak) * w
        u = np.einsum("...ab,...b,...cb->...ac", q, np.exp(1j * w), np.conj(q))
        parts.append(MatrixForm(grid, 0, (u,)))
    return ModuleForm(spec, rank, rank, tuple(parts))


def random_projection_field(module: ProjectiveModule, grid: Grid,
                            rng: np.random.Generator, max_mode: int = 2,
                            scale: float = 0.6) -> BundleSpec:
    """Smooth projection field obtained by dressing a constant projection
    with a pointwise unitary, so every fiber is exactly a projection."""
    w = unitary_dressing_field(module.spec, grid, module.ambient_rank, rng,
                               max_mode=max_mode, scale=scale)
    const = ModuleForm.constant(module.projection, grid, 0)
    return projection_bundle(w @ const @ w.adjoint())


# -- sections and the field-level connection ------------------------------------------

def random_section(b: BundleSpec, rng: np.random.Generator,
                   max_mode: int = 3, scale: float = 1.0) -> ModuleForm:
    """Random section field of a slope-zero bundle (left-twisted column)."""
    if b.chern:
        raise StructureError("sloped sections have no global gauge dressing; "
                             "use the assembled operator")
    twists = section_twists(b)
    p = b.fiber.projection
    parts = []
    for i in range(b.spec.k):
        f = _random_periodic_block(b.spec, i, b.grid, b.rank, 1, rng, max_mode, scale)
        f = p.blocks[i] @ f
        parts.append(_dress(MatrixForm(b.grid, 0, (f,)), twists[i], "left"))
    return ModuleForm(b.spec, b.rank, 1, tuple(parts))


def connection_apply(b: BundleSpec, s: ModuleForm) -> ModuleForm:
    """Covariant derivative of a section-like form of a slope-zero bundle.

    nabla s = d s + omega ^ s in the stored gauge; the constant-twist
    derivative of the forms module is the honest derivative here.  Sloped
    bundles are served by the operator assembly instead.
    """
    if b.presentation == "projection":
        de = s.d()
        eps = b.eps
        return eps @ de
    if b.chern:
        raise StructureError("sloped sections are differentiated by the operator assembly")
    out = s.d()
    if b.omega is not None:
        out = out + b.omega @ s
    return out


def pairing(s1: ModuleForm, s2: ModuleForm) -> ModuleForm:
    """A-valued inner product field <s1, s2> = s1* s2, conjugate-linear in
    the first slot; the twists cancel and the result is periodic."""
    if s1.spec != s2.spec or s1.rows != s2.rows:
        raise StructureError("sections live in different modules")
    if 1 in (s1.degree, s2.degree) and s1.degree + s2.degree > 1:
        raise StructureError("pair at most one degree-1 slot")
    parts = []
    for a, c in zip(s1.parts, s2.parts):
        star = tuple(np.conj(np.swapaxes(f, -1, -2)) for f in a.fields)
        if s1.degree == 0 and s2.degree == 0:
            fields = (star[0] @ c.fields[0],)
            deg = 0
        elif s1.degree == 0:
            fields = tuple(star[0] @ f for f in c.fields)
            deg = s2.degree
        else:
            fields = tuple(f @ c.fields[0] for f in star)
            deg = s1.degree
        parts.append(MatrixForm(a.grid, deg, fields))
    return ModuleForm(s1.spec, s1.cols, s2.cols, tuple(parts))


# -- the GNS bridge --------------------------------------------------------------------

def gns_fiber(b: BundleSpec, tau=None) -> GnsSpace:
    """GNS realization of the fiber under a faithful scalar trace."""
    tau = tau if tau is not None else normalized_trace(b.spec)
    return l2_of_module(b.fiber, tau)


def gns_twist(b: BundleSpec, space: GnsSpace) -> Twist:
    """Complex automorphy twist acting on the GNS fiber."""
    if b.presentation != "automorphy":
        raise StructureError("only automorphy bundles twist the GNS fiber")
    u = extend_map(b.monodromy.u, space)
    v = extend_map(b.monodromy.v, space) if b.monodromy.v is not None else None
    if v is None:
        raise StructureError("torus operators need both monodromies")
    return Twist(u, v, (b.chern,) * space.dim)


def gns_form_fields(e: ModuleForm, space: GnsSpace) -> tuple:
    """Pointwise GNS extension of a module-map valued form.

    Returns one complex field per form component, shaped (..., dim, dim);
    equals extend_map applied at every grid point.
    """
    spec = e.spec
    ncomp = len(e.parts[0].fields)
    shape = e.parts[0].fields[0].shape[:-2]
    out = [np.zeros(shape + (space.dim, space.dim), dtype=complex) for _ in range(ncomp)]
    for i, part in enumerate(e.parts):
        q = space.frames[i]
        lo = space.offsets[i]
        hi = lo + q.shape[1]
        for c in range(ncomp):
            f = part.fields[c]
            if not spec.regular_block:
                ni = spec.blocks[i]
                lifted = np.einsum("...ab,ce->...acbe", f,
                                   np.eye(ni)).reshape(f.shape[:-2]
                                                       + (f.shape[-2] * ni, f.shape[-1] * ni))
            else:
                lifted = f
            out[c][..., lo:hi, lo:hi] = np.einsum("pa,...pq,qb->...ab",
                                                  np.conj(q), lifted, q)
    return tuple(out)


def gns_connection_fields(b: BundleSpec, space: GnsSpace) -> tuple | None:
    """GNS extension of the bundle's deviation 1-form (None when absent)."""
    if b.omega is None:
        return None
    return gns_form_fields(b.omega, space)
