"""Finite cyclic covers of the torus and indices over the deck group.

A k-fold cover along x unrolls the torus into the cylinder [0, k) x [0, 1),
sampled on a kN x N lattice whose spacing matches the base grid in both
directions, so the covering map is a pure relabeling of sample points.  The
deck group acts by x-shifts of N samples; a fundamental domain is the base
grid's own copy at deck index zero.  Lifting an operator, extracting its
kernel, and summing projection entries over that domain gives the index of
the cover against a trace on the deck group: the diagonal for the canonical
trace, deck-translated diagonals for the delocalized ones.

The section dictionary identifies scalar cover sections with base sections
valued in the group algebra of the deck group, carrying the lifted operator
to the base operator twisted by the flat translation bundle.  Two
conventions make that identification hold at machine precision.  The lifted
x-derivative is the lift of the base discretization: each cover mode is
differentiated with the frequency of its representative inside the gauge
window of the deck character it transforms under, so restriction to
deck-invariant sections reproduces the base derivative slot for slot.  And
the y-seam gauge is evaluated at the fractional part of the unrolled
coordinate, which keeps it deck-periodic exactly rather than up to a jump
at the copy boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._errors import DegenerateSpectrumError, StructureError
from .algebra import (AlgebraElement, FiniteGroup, TraceFunctional,
                      canonical_group_trace, cyclic_group, group_algebra)
from .bundle import (BundleSpec, Monodromy, automorphy_bundle,
                     gns_connection_fields, gns_fiber, gns_twist)
from .forms import Grid
from .gns import GnsSpace
from .hilbert_module import ModuleMap
from .spectral import (EDGE_MASS_ARTIFACT, EDGE_MASS_RESOLVED,
                       GAP_RATIO_FLOOR, KERNEL_TOL_FACTOR, SECTION_DIM_CAP,
                       KernelData, TwistedOperator, _operator_derivative)

DECK_COMMUTATION_TOL = 1e-12
DICTIONARY_TOL = 1e-12
CONJUGATION_TOL = 1e-10


@dataclass(frozen=True)
class CoverSpec:
    """A k-fold cover of the torus unrolled along x, with a marked deck group.

    deck_powers[g] is the number of base periods element g translates by.
    The assignment must be an isomorphism onto Z/k addition, which is what
    makes the deck action free and transitive on the fibers of the
    relabeling map; groups without a single generator have no such
    realization on a rectangular sample lattice.
    """

    base_grid: Grid
    group: FiniteGroup
    deck_powers: tuple[int, ...]

    def __post_init__(self):
        if self.base_grid.manifold != "T2":
            raise StructureError("covers are built over the torus")
        k = self.group.order
        if len(self.deck_powers) != k:
            raise StructureError("one deck power per group element")
        if sorted(self.deck_powers) != list(range(k)):
            raise StructureError("deck powers must enumerate 0..k-1 once each")
        if self.deck_powers[0] != 0:
            raise StructureError("the identity must act trivially")
        p = self.deck_powers
        for g in range(k):
            for h in range(k):
                if p[self.group.multiply(g, h)] != (p[g] + p[h]) % k:
                    raise StructureError(
                        "deck powers must be a group isomorphism onto Z/k")

    @property
    def fold(self) -> int:
        return self.group.order

    @property
    def nx(self) -> int:
        """Sample count along the unrolled direction."""
        return self.fold * self.base_grid.n

    @property
    def points(self) -> int:
        return self.nx * self.base_grid.n

    @property
    def group_spec(self):
        return group_algebra(self.group)

    def element_of_power(self, power: int):
        return self.deck_powers.index(power % self.fold)

    def deck_permutation(self, power: int) -> np.ndarray:
        """Flat section-index map of translation by `power` base periods,
        (T s)[p] = s[perm[p]]."""
        n = self.base_grid.n
        rows = ((np.arange(self.nx) + power * n) % self.nx) * n
        return (rows[:, None] + np.arange(n)[None, :]).reshape(-1)


def cyclic_cover(base_grid: Grid, k: int) -> CoverSpec:
    """The standard k-fold cover along x with deck group Z/k."""
    if k < 1:
        raise StructureError("the covering degree must be positive")
    return CoverSpec(base_grid, cyclic_group(k), tuple(range(k)))


def cover_from_deck(base_grid: Grid, group: FiniteGroup,
                    x_image: int, y_image: int = 0) -> CoverSpec:
    """Cover defined by the images of the two torus generators in a group.

    Only quotients that a rectangular sample lattice realizes are accepted:
    the y generator must map to the identity and the x generator must reach
    every element, so the deck group acts by x-translations alone.
    """
    if y_image != 0:
        raise StructureError(
            "only covers unrolled along x are realized; the y generator "
            "must map to the identity")
    # walk the cyclic subgroup generated by the x image
    powers: list[int | None] = [None] * group.order
    g = 0
    for p in range(group.order):
        if powers[g] is not None:
            raise StructureError(
                "the x generator image does not generate the group")
        powers[g] = p
        g = group.multiply(g, x_image)
    if g != 0 or any(q is None for q in powers):
        raise StructureError(
            "the x generator image does not generate the group")
    return CoverSpec(base_grid, group, tuple(powers))


@dataclass(frozen=True)
class CoverOperator:
    """Dense operator on scalar cover sections, unrolled index major."""

    cover: CoverSpec
    base: TwistedOperator
    matrix: np.ndarray

    def __post_init__(self):
        pts = self.cover.points
        if self.matrix.shape != (pts, pts):
            raise StructureError(
                f"matrix shape {self.matrix.shape} does not fit "
                f"{self.cover.fold}-fold cover sections of size {pts}")
        n = self.cover.base_grid.n
        t = self.matrix.reshape(self.cover.nx, n, self.cover.nx, n)
        resid = float(np.max(np.abs(np.roll(t, -n, axis=0)
                                    - np.roll(t, n, axis=2))))
        scale = max(1.0, float(np.max(np.abs(self.matrix))))
        if resid > DECK_COMMUTATION_TOL * scale:
            raise StructureError(
                f"operator does not commute with the deck action: "
                f"residual {resid:.3g}")

    @property
    def dim(self) -> int:
        return self.cover.points


def _lift_frequencies(fold: int, n: int) -> np.ndarray:
    """Frequency assigned to each cover mode by the lifted discretization.

    A cover mode with index congruent to r modulo the fold transforms under
    the deck generator with phase r/fold; the lift differentiates it with
    the frequency of its representative in the gauge window of that
    character, the integer window [-n/2, n/2) shifted by the principal
    phase.  Fold one recovers the plain spectral comb.
    """
    out = np.empty(fold * n)
    slots = np.fft.fftfreq(fold * n, d=1.0 / (fold * n)).astype(int)
    for slot, mt in enumerate(slots):
        r = mt % fold
        theta, carry = (r / fold, 0) if 2 * r <= fold else (r / fold - 1.0, 1)
        m = (mt - r) // fold + carry
        out[slot] = (m + n // 2) % n - n // 2 + theta
    return out


def lift_operator(base: TwistedOperator, cover: CoverSpec) -> CoverOperator:
    """Lift an assembled scalar operator to the cover.

    The lift commutes with the deck action and restricts to the base
    operator on deck-invariant sections; the trivial cover returns the base
    operator itself.  Bundles whose x-monodromy is not the identity have no
    deck action to lift along, and non-scalar fibers would need a cover of
    the algebra as well, so both are refused.
    """
    if cover.base_grid != base.grid:
        raise StructureError("cover and operator live on different base grids")
    if base.space.dim != 1:
        raise StructureError("only scalar section spaces lift to the cover")
    if cover.points > SECTION_DIM_CAP:
        raise StructureError(
            f"cover section dimension {cover.points} exceeds the dense cap "
            f"{SECTION_DIM_CAP}")
    b = base.bundle
    twist = gns_twist(b, base.space) if b.presentation == "automorphy" else None
    if twist is not None and abs(twist.u0[0, 0] - 1.0) > 1e-12:
        raise StructureError(
            "deck translations only close up over an x-periodic bundle; "
            "the x-monodromy must be the identity")

    n, fold, nx = base.grid.n, cover.fold, cover.nx
    freqs = _lift_frequencies(fold, n)
    dx = np.fft.ifft(2j * np.pi * freqs[:, None]
                     * np.fft.fft(np.eye(nx), axis=0), axis=0)
    m = 0.5 * np.einsum("JK,lm->JlKm", dx, np.eye(n, dtype=complex))

    deriv = _operator_derivative(n)
    y = base.grid.coords
    for big in range(nx):
        if twist is None:
            block = deriv
        else:
            seam = twist.log_v_at((big % n) / n)[0, 0]
            g = np.exp(y * seam)
            block = deriv * np.outer(g, 1.0 / g) + seam * np.eye(n)
        m[big, :, big, :] += 0.5j * block
    mm = m.reshape(cover.points, cover.points)

    extra = np.zeros(n * n, dtype=complex)
    if b.chern:
        extra += 0.5 * 2j * np.pi * b.chern * np.tile(y, n)
    eta = gns_connection_fields(b, base.space)
    if eta is not None:
        extra += 0.5 * (eta[0] + 1j * eta[1])[:, :, 0, 0].reshape(-1)
    if extra.any():
        idx = np.arange(cover.points)
        mm[idx, idx] += np.tile(extra, fold)
    return CoverOperator(cover, base, mm)


def _lifted_edge_mass(op: CoverOperator, columns: np.ndarray) -> np.ndarray:
    """Fraction of squared mass at the band edge of the lifted comb.

    The cover carries no x-gauge, so no undressing is needed; the band and
    the buffer below the fold are those of the base windows the lifted
    frequencies were drawn from.
    """
    n, nx = op.cover.base_grid.n, op.cover.nx
    if columns.shape[1] == 0:
        return np.zeros(0)
    vhat = np.fft.fft(columns.reshape(nx, n, -1), axis=0)
    freqs = _lift_frequencies(op.cover.fold, n)
    buffer = max(2, abs(int(op.base.bundle.chern)) + 1)
    edge = np.abs(freqs) >= n / 2 - buffer
    total = np.sum(np.abs(vhat) ** 2, axis=(0, 1))
    hot = np.sum(np.abs(vhat[edge]) ** 2, axis=(0, 1))
    return hot / np.maximum(total, np.finfo(float).tiny)


def _split_resolved(op: CoverOperator,
                    columns: np.ndarray) -> tuple[np.ndarray, int]:
    mu = _lifted_edge_mass(op, columns)
    ambiguous = (mu > EDGE_MASS_RESOLVED) & (mu < EDGE_MASS_ARTIFACT)
    if ambiguous.any():
        worst = float(mu[ambiguous].max())
        raise DegenerateSpectrumError(
            f"cover null vector neither resolved nor a clean wrap artifact "
            f"(edge mass {worst:.3g})",
            gap_ratio=EDGE_MASS_ARTIFACT / worst,
            below=worst, above=EDGE_MASS_ARTIFACT)
    keep = mu <= EDGE_MASS_RESOLVED
    return np.ascontiguousarray(columns[:, keep]), int(np.count_nonzero(~keep))


def cover_kernel_data(op: CoverOperator, tol: float | None = None) -> KernelData:
    """Kernel and cokernel frames of the lifted operator.

    Same contract as the base extraction: a spectral gap of at least
    GAP_RATIO_FLOOR around the cut is required, and wrap-around states of
    the finite band are dropped from the frames and counted separately.
    """
    u, s, vh = np.linalg.svd(op.matrix)
    sigma_max = float(s[0]) if s.size else 0.0
    if tol is None:
        tol = KERNEL_TOL_FACTOR * sigma_max
    below = s <= tol
    hi = float(s[below].max()) if below.any() else 0.0
    lo = float(s[~below].min()) if (~below).any() else np.inf
    ratio = lo / hi if hi > 0 else lo / max(tol, np.finfo(float).tiny)
    if ratio < GAP_RATIO_FLOOR:
        raise DegenerateSpectrumError("no usable spectral gap at the kernel cut",
                                      gap_ratio=ratio, below=hi, above=lo)
    kernel, kernel_art = _split_resolved(
        op, np.ascontiguousarray(np.conj(vh[below].T)))
    cokernel, cokernel_art = _split_resolved(
        op, np.ascontiguousarray(u[:, below]))
    return KernelData(kernel, cokernel, float(ratio), sigma_max, float(tol),
                      kernel_art, cokernel_art)


def l2_index(op: CoverOperator, t: TraceFunctional,
             data: KernelData | None = None) -> complex:
    """Index of the lifted operator against a trace on the deck group.

    Kernel minus cokernel projection entries are summed over one fundamental
    domain: the diagonal for the canonical trace, the rows paired with their
    deck translates for a delocalized trace, one term per element of the
    conjugacy class.  Scalar traces other than the canonical one have no
    such sum and are refused.
    """
    cover = op.cover
    if t.spec.group != cover.group:
        raise StructureError("trace does not live on the deck group algebra")
    if t.kind == "scalar":
        reference = canonical_group_trace(t.spec)
        if not np.allclose(t.weights, reference.weights, atol=1e-12):
            raise StructureError(
                "cover sums exist for the canonical trace, not arbitrary weights")
        powers: tuple[int, ...] = (0,)
    elif t.kind == "delocalized":
        powers = tuple(cover.deck_powers[g] for g in t.class_of_g)
    else:
        raise StructureError("cover sums need a scalar or delocalized trace")
    kd = data if data is not None else cover_kernel_data(op)
    diff = kd.kernel_projection() - kd.cokernel_projection()
    domain = np.arange(cover.base_grid.n ** 2)
    shift = cover.base_grid.n ** 2
    return complex(sum(diff[domain, domain + p * shift].sum() for p in powers))


def _liftable_scalar_bundle(b: BundleSpec) -> complex:
    """Validate that a bundle descends deck data, returning its y-phase."""
    if b.presentation == "projection":
        raise StructureError("retract to trivialized or automorphy data first")
    if b.presentation == "trivialized":
        if b.omega is not None:
            raise StructureError(
                "deviations are not carried to the flat-coefficient bundle")
        return 1.0
    if b.rank != 1 or b.spec.dim != 1:
        raise StructureError("only scalar line data twists by the deck algebra")
    if (b.monodromy.u - ModuleMap.identity(b.spec, 1)).norm() > 1e-12:
        raise StructureError(
            "deck translations only close up over an x-periodic bundle")
    if b.omega is not None:
        raise StructureError(
            "deviations are not carried to the flat-coefficient bundle")
    return complex(b.monodromy.v.blocks[0][0, 0])


def twisted_base_bundle(cover: CoverSpec, base_bundle: BundleSpec) -> BundleSpec:
    """The base bundle with coefficients in the flat deck-algebra bundle.

    The x-monodromy becomes translation by the deck generator in the group
    algebra; the y-monodromy phase and the slope carry over unchanged.
    """
    phase = _liftable_scalar_bundle(base_bundle)
    spec = cover.group_spec
    gen = cover.element_of_power(1)
    u = ModuleMap.from_entries([[AlgebraElement.delta(spec, gen)]])
    v = ModuleMap.from_flat_blocks(
        spec, 1, 1, [np.array([[phase]])] * spec.k)
    return automorphy_bundle(cover.base_grid, Monodromy(u, v),
                             base_bundle.chern)


@dataclass(frozen=True)
class DictionaryUnitary:
    """Unitary identification of cover sections with twisted base sections.

    Relabels the unrolled coordinate into (deck copy, base point) pairs and
    rotates the copy index into the character basis of the group-algebra
    fiber, the gauge the twisted operator is assembled in.  The trivial
    cover gets the identity.
    """

    cover: CoverSpec
    bundle: BundleSpec
    space: GnsSpace
    matrix: np.ndarray

    def __post_init__(self):
        pts = self.cover.points
        if self.matrix.shape != (pts, pts):
            raise StructureError("dictionary must match the section spaces")
        gram = np.conj(self.matrix.T) @ self.matrix
        if np.max(np.abs(gram - np.eye(pts))) > DICTIONARY_TOL:
            raise StructureError("dictionary is not unitary")

    def to_twisted(self, section: np.ndarray) -> np.ndarray:
        return self.matrix @ section

    def to_cover(self, section: np.ndarray) -> np.ndarray:
        return np.conj(self.matrix.T) @ section


def dictionary(cover: CoverSpec, base_bundle: BundleSpec) -> DictionaryUnitary:
    """Build the section dictionary for a liftable scalar bundle.

    The matrix depends only on the cover and the character gauge of the
    group-algebra fiber; the bundle fixes which pair of operators it
    conjugates into each other.
    """
    twisted = twisted_base_bundle(cover, base_bundle)
    space = gns_fiber(twisted)
    fold, n = cover.fold, cover.base_grid.n
    if space.dim != fold:
        raise StructureError(
            "deck algebra fiber did not split into characters")
    chi = np.diag(gns_twist(twisted, space).u0)
    weights = np.conj(chi[:, None] ** np.arange(fold)[None, :]) / np.sqrt(fold)
    u = np.zeros((n, n, fold, cover.nx, n), dtype=complex)
    ix = np.arange(n)[:, None]
    iy = np.arange(n)[None, :]
    for gamma in range(fold):
        for j in range(fold):
            u[ix, iy, j, gamma * n + ix, iy] = weights[j, gamma]
    mat = u.reshape(cover.points, cover.points)
    return DictionaryUnitary(cover, twisted, space, mat)
