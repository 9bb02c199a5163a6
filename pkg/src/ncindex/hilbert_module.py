"""Finitely generated projective modules over a block algebra.

A vector in A^n is stored blockwise as a tall matrix (n*n_i x n_i), one per
matrix block of A.  An adjointable map A^n -> A^m is a matrix over A and is
stored as its flat realization (m*n_i x n*n_i).  Because every block algebra
here is its own bicommutant, spectral projections and square roots computed
on the flat realization stay inside M_n(A); no separate membership bookkeeping
is required.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ncindex._errors import DegenerateSpectrumError, StructureError
from ncindex._linalg import dagger, spectral_norm
from ncindex.algebra import AlgebraElement, AlgebraSpec, TraceFunctional

KERNEL_TOL_FACTOR = 1e-8
GAP_RATIO_FLOOR = 10.0
PROJECTION_TOL = 1e-8
RANK_ROUND_TOL = 1e-6


def _check_owner(a, b) -> None:
    if a.spec != b.spec:
        raise StructureError("operands live over different algebras")


@dataclass(frozen=True, eq=False)
class ModuleVector:
    """Element of the free right module A^n, blockwise tall matrices."""

    spec: AlgebraSpec
    n: int
    blocks: tuple

    @classmethod
    def from_entries(cls, entries: Sequence[AlgebraElement]) -> "ModuleVector":
        if not entries:
            raise StructureError("a module vector needs at least one entry")
        spec = entries[0].spec
        for a in entries:
            if a.spec != spec:
                raise StructureError("mixed algebras in one vector")
        blocks = tuple(
            np.ascontiguousarray(np.vstack([a.blocks[i] for a in entries]))
            for i in range(spec.k)
        )
        return cls(spec=spec, n=len(entries), blocks=blocks)

    @classmethod
    def random(cls, spec: AlgebraSpec, n: int, rng: np.random.Generator) -> "ModuleVector":
        return cls.from_entries([AlgebraElement.random(spec, rng) for _ in range(n)])

    def entries(self) -> tuple:
        out = []
        for j in range(self.n):
            parts = [self.blocks[i][j * ni:(j + 1) * ni, :] for i, ni in enumerate(self.spec.blocks)]
            out.append(AlgebraElement.from_blocks(self.spec, parts))
        return tuple(out)

    def __add__(self, other: "ModuleVector") -> "ModuleVector":
        _check_owner(self, other)
        if self.n != other.n:
            raise StructureError("vector lengths differ")
        return ModuleVector(self.spec, self.n,
                            tuple(x + y for x, y in zip(self.blocks, other.blocks)))

    def __sub__(self, other: "ModuleVector") -> "ModuleVector":
        return self + (-1.0) * other

    def __rmul__(self, z: complex) -> "ModuleVector":
        return ModuleVector(self.spec, self.n, tuple(z * b for b in self.blocks))

    def __mul__(self, a: AlgebraElement) -> "ModuleVector":
        """Right action of the algebra, entrywise x_j a."""
        _check_owner(self, a)
        return ModuleVector(self.spec, self.n,
                            tuple(x @ b for x, b in zip(self.blocks, a.blocks)))

    def norm(self) -> float:
        return float(np.sqrt(max(inner_product(self, self).norm(), 0.0)))


def inner_product(x: ModuleVector, y: ModuleVector) -> AlgebraElement:
    """A-valued pairing sum_j x_j* y_j, conjugate linear in the first slot."""
    _check_owner(x, y)
    if x.n != y.n:
        raise StructureError("vector lengths differ")
    return AlgebraElement.from_blocks(
        x.spec, [dagger(a) @ b for a, b in zip(x.blocks, y.blocks)])


@dataclass(frozen=True, eq=False)
class ModuleMap:
    """Adjointable map A^cols -> A^rows given by left multiplication."""

    spec: AlgebraSpec
    rows: int
    cols: int
    blocks: tuple

    def __post_init__(self):
        for i, ni in enumerate(self.spec.blocks):
            if self.blocks[i].shape != (self.rows * ni, self.cols * ni):
                raise StructureError(
                    f"block {i} has shape {self.blocks[i].shape}, "
                    f"expected {(self.rows * ni, self.cols * ni)}")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_flat_blocks(cls, spec: AlgebraSpec, rows: int, cols: int,
                         blocks: Sequence[np.ndarray]) -> "ModuleMap":
        frozen = tuple(np.ascontiguousarray(np.asarray(b, dtype=complex)) for b in blocks)
        return cls(spec=spec, rows=rows, cols=cols, blocks=frozen)

    @classmethod
    def from_entries(cls, grid: Sequence[Sequence[AlgebraElement]]) -> "ModuleMap":
        rows = len(grid)
        cols = len(grid[0])
        spec = grid[0][0].spec
        blocks = []
        for i in range(spec.k):
            blocks.append(np.block([[grid[r][c].blocks[i] for c in range(cols)]
                                    for r in range(rows)]))
        return cls.from_flat_blocks(spec, rows, cols, blocks)

    @classmethod
    def identity(cls, spec: AlgebraSpec, n: int) -> "ModuleMap":
        return cls.from_flat_blocks(
            spec, n, n, [np.eye(n * ni, dtype=complex) for ni in spec.blocks])

    @classmethod
    def zero(cls, spec: AlgebraSpec, rows: int, cols: int) -> "ModuleMap":
        return cls.from_flat_blocks(
            spec, rows, cols,
            [np.zeros((rows * ni, cols * ni), dtype=complex) for ni in spec.blocks])

    @classmethod
    def random(cls, spec: AlgebraSpec, rows: int, cols: int,
               rng: np.random.Generator) -> "ModuleMap":
        # assembled from algebra entries so regular-representation blocks stay
        # inside the algebra rather than filling the ambient matrix space
        grid = [[AlgebraElement.random(spec, rng) for _ in range(cols)]
                for _ in range(rows)]
        return cls.from_entries(grid)

    @classmethod
    def diagonal(cls, entries: Sequence[AlgebraElement]) -> "ModuleMap":
        n = len(entries)
        spec = entries[0].spec
        zero = AlgebraElement.zero(spec)
        grid = [[entries[r] if r == c else zero for c in range(n)] for r in range(n)]
        return cls.from_entries(grid)

    # -- algebra of maps ----------------------------------------------------

    def __add__(self, other: "ModuleMap") -> "ModuleMap":
        _check_owner(self, other)
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise StructureError("map shapes differ")
        return ModuleMap.from_flat_blocks(
            self.spec, self.rows, self.cols,
            [a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other: "ModuleMap") -> "ModuleMap":
        return self + (-1.0) * other

    def __neg__(self) -> "ModuleMap":
        return (-1.0) * self

    def __rmul__(self, z: complex) -> "ModuleMap":
        return ModuleMap.from_flat_blocks(
            self.spec, self.rows, self.cols, [z * b for b in self.blocks])

    def __matmul__(self, other: "ModuleMap") -> "ModuleMap":
        _check_owner(self, other)
        if self.cols != other.rows:
            raise StructureError(
                f"cannot compose a map on A^{other.rows} after a map from A^{other.cols}")
        return ModuleMap.from_flat_blocks(
            self.spec, self.rows, other.cols,
            [a @ b for a, b in zip(self.blocks, other.blocks)])

    def __call__(self, x: ModuleVector) -> ModuleVector:
        _check_owner(self, x)
        if x.n != self.cols:
            raise StructureError("vector length does not match map domain")
        return ModuleVector(self.spec, self.rows,
                            tuple(a @ b for a, b in zip(self.blocks, x.blocks)))

    def adjoint(self) -> "ModuleMap":
        return ModuleMap.from_flat_blocks(
            self.spec, self.cols, self.rows, [dagger(b) for b in self.blocks])

    # -- norms ---------------------------------------------------------------

    def norm(self) -> float:
        """Operator norm, the largest block spectral norm."""
        return max(spectral_norm(b) for b in self.blocks)

    def module_norm(self) -> float:
        """Hilbert-module norm: l2 combination of the column vector norms.

        |phi|^2 = sum_c ||phi e_c||^2 dominates the operator norm and is at
        most sqrt(cols) times it.
        """
        total = 0.0
        for c in range(self.cols):
            col = 0.0
            for i, ni in enumerate(self.spec.blocks):
                sub = self.blocks[i][:, c * ni:(c + 1) * ni]
                col = max(col, spectral_norm(sub))
            total += col * col
        return float(np.sqrt(total))

    def is_projection(self, tol: float = PROJECTION_TOL) -> bool:
        if self.rows != self.cols:
            return False
        sq = self @ self
        return ((sq - self).norm() < tol and (self - self.adjoint()).norm() < tol)

    def entry(self, r: int, c: int) -> AlgebraElement:
        parts = [self.blocks[i][r * ni:(r + 1) * ni, c * ni:(c + 1) * ni]
                 for i, ni in enumerate(self.spec.blocks)]
        return AlgebraElement.from_blocks(self.spec, parts)


def module_norms(phi: ModuleMap) -> tuple:
    """The pair (operator norm, Hilbert-module norm)."""
    return phi.norm(), phi.module_norm()


def direct_sum_maps(a: ModuleMap, b: ModuleMap) -> ModuleMap:
    _check_owner(a, b)
    blocks = []
    for i in range(a.spec.k):
        x, y = a.blocks[i], b.blocks[i]
        flat = np.zeros((x.shape[0] + y.shape[0], x.shape[1] + y.shape[1]), dtype=complex)
        flat[:x.shape[0], :x.shape[1]] = x
        flat[x.shape[0]:, x.shape[1]:] = y
        blocks.append(flat)
    return ModuleMap.from_flat_blocks(a.spec, a.rows + b.rows, a.cols + b.cols, blocks)


@dataclass(frozen=True, eq=False)
class ProjectiveModule:
    """The module pA^n cut out of a free module by a projection p."""

    projection: ModuleMap

    def __post_init__(self):
        if not self.projection.is_projection():
            raise StructureError("defining endomorphism is not a projection")

    @classmethod
    def free(cls, spec: AlgebraSpec, n: int) -> "ProjectiveModule":
        return cls(ModuleMap.identity(spec, n))

    @property
    def spec(self) -> AlgebraSpec:
        return self.projection.spec

    @property
    def ambient_rank(self) -> int:
        return self.projection.rows

    def direct_sum(self, other: "ProjectiveModule") -> "ProjectiveModule":
        return ProjectiveModule(direct_sum_maps(self.projection, other.projection))

    def contains_map(self, phi: ModuleMap, tol: float = PROJECTION_TOL) -> bool:
        """Whether phi is an endomorphism of pA^n, i.e. p phi p = phi."""
        p = self.projection
        return (p @ phi @ p - phi).norm() <= tol * max(1.0, phi.norm())


@dataclass(frozen=True)
class K0Class:
    """Formal difference of projective modules, recorded as block ranks."""

    spec: AlgebraSpec
    ranks: tuple

    def __add__(self, other: "K0Class") -> "K0Class":
        _check_owner(self, other)
        return K0Class(self.spec, tuple(a + b for a, b in zip(self.ranks, other.ranks)))

    def __sub__(self, other: "K0Class") -> "K0Class":
        _check_owner(self, other)
        return K0Class(self.spec, tuple(a - b for a, b in zip(self.ranks, other.ranks)))

    def __neg__(self) -> "K0Class":
        return K0Class(self.spec, tuple(-a for a in self.ranks))


def class_of(module) -> K0Class:
    """K-theory class of a projective module from its block ranks.

    Ranks are read off as flat traces of the projection, which must sit
    within RANK_ROUND_TOL of an integer.
    """
    p = module.projection if isinstance(module, ProjectiveModule) else module
    if not p.is_projection():
        raise StructureError("rank extraction needs a projection")
    ranks = []
    for b in p.blocks:
        t = complex(np.trace(b))
        r = int(round(t.real))
        if abs(t - r) > RANK_ROUND_TOL:
            raise StructureError(f"projection trace {t} is not close to an integer")
        ranks.append(r)
    return K0Class(p.spec, tuple(ranks))


def dim_tau(tau: TraceFunctional, cls: K0Class):
    """Trace-dimension of a K-theory class.

    Scalar traces give sum_i w_i rank_i; the center valued trace gives the
    tuple rank_i / n_i.
    """
    if tau.spec != cls.spec:
        raise StructureError("trace and class live over different algebras")
    if tau.kind == "scalar":
        return float(np.dot(np.asarray(tau.weights), np.asarray(cls.ranks, dtype=float)))
    if tau.kind == "center":
        return np.asarray([r / ni for r, ni in zip(cls.ranks, tau.spec.blocks)], dtype=float)
    raise StructureError("block ranks determine scalar and center values only")


def ev_endomorphism(phi: ModuleMap, module: ProjectiveModule | None = None) -> tuple:
    """Blockwise flat traces of an endomorphism, the evaluation map.

    When the carrying projective module is supplied the endomorphism is first
    checked to be compressed by its projection.
    """
    if phi.rows != phi.cols:
        raise StructureError("evaluation is defined for endomorphisms only")
    if module is not None:
        if module.spec != phi.spec or module.ambient_rank != phi.rows:
            raise StructureError("endomorphism does not act on the given module")
        if not module.contains_map(phi, tol=1e-10):
            raise StructureError("endomorphism is not compressed by the module projection")
    return tuple(complex(np.trace(b)) for b in phi.blocks)


def polar_decomposition(phi: ModuleMap):
    """Return (u, pos) with phi = u pos, pos = (phi* phi)^(1/2).

    u is a partial isometry with the same initial support as pos.
    """
    u_blocks = []
    pos_blocks = []
    for f in phi.blocks:
        w, v = np.linalg.eigh(dagger(f) @ f)
        w = np.clip(w, 0.0, None)
        root = np.sqrt(w)
        pos_blocks.append(v @ np.diag(root) @ dagger(v))
        cutoff = max(root.max(initial=0.0), 0.0) * 1e-13
        inv = np.where(root > cutoff, 1.0 / np.where(root > cutoff, root, 1.0), 0.0)
        u_blocks.append(f @ v @ np.diag(inv) @ dagger(v))
    u = ModuleMap.from_flat_blocks(phi.spec, phi.rows, phi.cols, u_blocks)
    pos = ModuleMap.from_flat_blocks(phi.spec, phi.cols, phi.cols, pos_blocks)
    return u, pos


def _split_spectrum(w: np.ndarray, tol: float):
    below = w[w <= tol]
    above = w[w > tol]
    hi = float(below.max()) if below.size else 0.0
    lo = float(above.min()) if above.size else np.inf
    return below, above, hi, lo


def kernel_projection(phi: ModuleMap, tol: float | None = None,
                      within: ProjectiveModule | None = None) -> ProjectiveModule:
    """Spectral projection of phi* phi onto its near-kernel.

    The threshold defaults to KERNEL_TOL_FACTOR * ||phi||^2.  A spectral gap
    of at least GAP_RATIO_FLOOR between the kept and discarded eigenvalues is
    required; otherwise the split is not trustworthy and
    DegenerateSpectrumError is raised.  With `within`, the kernel is taken
    inside the submodule pA^n (phi must satisfy phi p = phi).
    """
    if tol is None:
        tol = KERNEL_TOL_FACTOR * phi.norm() ** 2
    if within is not None:
        if (phi @ within.projection - phi).norm() > 1e-8 * max(1.0, phi.norm()):
            raise StructureError("map is not supported on the given submodule")
    blocks = []
    for f in phi.blocks:
        g = dagger(f) @ f
        w, v = np.linalg.eigh(g)
        w = np.clip(w, 0.0, None)
        below, above, hi, lo = _split_spectrum(w, tol)
        if below.size and above.size and hi > 0.0 and lo / hi < GAP_RATIO_FLOOR:
            raise DegenerateSpectrumError(
                "no clean spectral gap at the kernel threshold",
                gap_ratio=lo / hi, below=hi, above=lo)
        keep = v[:, w <= tol]
        blocks.append(keep @ dagger(keep))
    p = ModuleMap.from_flat_blocks(phi.spec, phi.cols, phi.cols, blocks)
    if within is not None:
        # phi* phi commutes with the module projection, so the product of the
        # two projections is again a projection: the kernel inside pA^n
        p = p @ within.projection
    return ProjectiveModule(p)


def cokernel_projection(phi: ModuleMap, tol: float | None = None,
                        within: ProjectiveModule | None = None) -> ProjectiveModule:
    if tol is None:
        tol = KERNEL_TOL_FACTOR * phi.norm() ** 2
    return kernel_projection(phi.adjoint(), tol=tol, within=within)


def fredholm_index(phi: ModuleMap, domain: ProjectiveModule | None = None,
                   codomain: ProjectiveModule | None = None,
                   tol: float | None = None) -> K0Class:
    """Index class [ker phi] - [ker phi*] of a module map with spectral gaps."""
    ker = kernel_projection(phi, tol=tol, within=domain)
    coker = cokernel_projection(phi, tol=tol, within=codomain)
    return class_of(ker) - class_of(coker)
