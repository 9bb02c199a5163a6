"""Finite dimensional C*-algebras, their elements, traces and spectral calculus.

An algebra A = M_{n1}(C) + ... + M_{nk}(C) is fixed by an AlgebraSpec and elements
store one dense complex matrix per block. Group algebras CG keep a coefficient
vector on the group in sync with a block realization: abelian groups with
character data are diagonalized into 1x1 blocks, any other finite group is carried
through its left regular representation as a single block. Operations then reduce
to blockwise dense linear algebra, with convolution semantics recovered from the
regular representation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._errors import StructureError
from ._linalg import dagger, schur_function, spectral_norm

NORMALITY_TOL = 1e-10


# ---------------------------------------------------------------------------
# finite groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteGroup:
    """A finite group given by its multiplication table.

    table[i][j] is the index of g_i * g_j and index 0 is the identity.
    Abelian groups built by the constructors below carry a character table;
    characters[r][i] is the value of the r-th character at g_i.
    """

    label: str
    table: tuple[tuple[int, ...], ...]
    characters: tuple[tuple[complex, ...], ...] | None = None

    def __post_init__(self):
        n = len(self.table)
        if n < 1 or any(len(row) != n for row in self.table):
            raise StructureError("multiplication table must be square")
        if any(self.table[0][j] != j or self.table[j][0] != j for j in range(n)):
            raise StructureError("index 0 must be the identity")

    @property
    def order(self) -> int:
        return len(self.table)

    def multiply(self, i: int, j: int) -> int:
        return self.table[i][j]

    def inverse(self, i: int) -> int:
        for j in range(self.order):
            if self.table[i][j] == 0:
                return j
        raise StructureError(f"element {i} has no inverse; table is not a group")

    @property
    def is_abelian(self) -> bool:
        n = self.order
        return all(self.table[i][j] == self.table[j][i] for i in range(n) for j in range(n))

    def conjugacy_class(self, g: int) -> tuple[int, ...]:
        if not 0 <= g < self.order:
            raise StructureError(f"element index {g} outside group of order {self.order}")
        cls = {self.table[self.table[h][g]][self.inverse(h)] for h in range(self.order)}
        return tuple(sorted(cls))

    def left_regular(self, g: int) -> np.ndarray:
        """Permutation matrix of left translation by g on the group basis."""
        m = np.zeros((self.order, self.order))
        for h in range(self.order):
            m[self.table[g][h], h] = 1.0
        return m

    def right_regular(self, g: int) -> np.ndarray:
        """Permutation matrix of right translation, delta_h -> delta_{h g}."""
        m = np.zeros((self.order, self.order))
        for h in range(self.order):
            m[self.table[h][g], h] = 1.0
        return m


def cyclic_group(k: int) -> FiniteGroup:
    if k < 1:
        raise StructureError("cyclic group order must be positive")
    table = tuple(tuple((i + j) % k for j in range(k)) for i in range(k))
    omega = np.exp(2j * np.pi / k)
    chars = tuple(tuple(complex(omega ** (r * i)) for i in range(k)) for r in range(k))
    return FiniteGroup(label=f"Z/{k}", table=table, characters=chars)


def direct_product(a: FiniteGroup, b: FiniteGroup) -> FiniteGroup:
    """Direct product; keeps character data when both factors have it."""
    na, nb = a.order, b.order
    pairs = list(itertools.product(range(na), range(nb)))
    index = {p: i for i, p in enumerate(pairs)}
    table = tuple(
        tuple(index[(a.table[i][k], b.table[j][l])] for (k, l) in pairs)
        for (i, j) in pairs
    )
    chars = None
    if a.characters is not None and b.characters is not None:
        chars = tuple(
            tuple(ca[i] * cb[j] for (i, j) in pairs)
            for ca in a.characters for cb in b.characters
        )
    return FiniteGroup(label=f"{a.label}x{b.label}", table=table, characters=chars)


def group_from_label(label: str) -> FiniteGroup:
    """Parse labels like "Z/3" or "Z/2xZ/2" into a group."""
    factors = []
    for part in label.replace(" ", "").split("x"):
        if not part.startswith("Z/"):
            raise StructureError(f"unsupported group label {label!r}; expected Z/k factors")
        try:
            k = int(part[2:])
        except ValueError as exc:
            raise StructureError(f"bad cyclic order in group label {label!r}") from exc
        factors.append(cyclic_group(k))
    g = factors[0]
    for h in factors[1:]:
        g = direct_product(g, h)
    return g


# ---------------------------------------------------------------------------
# algebra specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlgebraSpec:
    """Shape of a finite dimensional C*-algebra: ordered matrix block sizes,
    plus the group when the algebra is a group algebra.

    For a group algebra the block data is derived: abelian groups with
    characters get |G| one-dimensional blocks, anything else a single block of
    size |G| realized by the left regular representation (`regular_block`).
    """

    blocks: tuple[int, ...]
    group: FiniteGroup | None = None
    regular_block: bool = False

    def __post_init__(self):
        if len(self.blocks) < 1 or any(n < 1 for n in self.blocks):
            raise StructureError("block sizes must be positive integers")
        if self.group is not None:
            order = self.group.order
            if self.regular_block:
                if self.blocks != (order,):
                    raise StructureError("regular block realization must have one block of size |G|")
            else:
                if self.blocks != (1,) * order:
                    raise StructureError("character realization must have |G| one-dimensional blocks")

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def dim(self) -> int:
        return int(sum(n * n for n in self.blocks))

    @property
    def is_group_algebra(self) -> bool:
        return self.group is not None

    @property
    def has_matrix_blocks(self) -> bool:
        """True when the blocks are genuine direct summands of the algebra.

        False only for the regular-representation fallback, where the single
        block is a subalgebra of M_{|G|} rather than all of it; center-valued
        traces and per-block rank vectors are unavailable there.
        """
        return not self.regular_block

    def describe(self) -> str:
        if self.group is not None:
            return f"C[{self.group.label}]"
        return " + ".join(f"M{n}" for n in self.blocks)


def matrix_algebra(*blocks: int) -> AlgebraSpec:
    return AlgebraSpec(blocks=tuple(int(n) for n in blocks))


def group_algebra(group: FiniteGroup | str) -> AlgebraSpec:
    if isinstance(group, str):
        group = group_from_label(group)
    if group.is_abelian and group.characters is not None:
        return AlgebraSpec(blocks=(1,) * group.order, group=group)
    return AlgebraSpec(blocks=(group.order,), group=group, regular_block=True)


def spec_from_config(cfg: dict) -> AlgebraSpec:
    """Parse the serialized form: {"blocks": [2, 1]} or {"group": "Z/3"}."""
    if "group" in cfg:
        return group_algebra(cfg["group"])
    if "blocks" in cfg:
        return matrix_algebra(*cfg["blocks"])
    raise StructureError("algebra config needs a 'blocks' or 'group' entry")


# ---------------------------------------------------------------------------
# elements
# ---------------------------------------------------------------------------

def _check_same_owner(a: "AlgebraElement", b: "AlgebraElement") -> None:
    if a.spec != b.spec:
        raise StructureError("elements belong to different algebras")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=complex)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class AlgebraElement:
    """One matrix per block; group algebra elements carry coefficients too."""

    spec: AlgebraSpec
    blocks: tuple[np.ndarray, ...]
    coeffs: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(self.blocks) != self.spec.k:
            raise StructureError("block count does not match the algebra")
        for n, b in zip(self.spec.blocks, self.blocks):
            if b.shape != (n, n):
                raise StructureError(f"block shape {b.shape} does not match size {n}")

    # construction -----------------------------------------------------------

    @staticmethod
    def from_blocks(spec: AlgebraSpec, blocks: Sequence[np.ndarray]) -> "AlgebraElement":
        blocks = tuple(_freeze(b) for b in blocks)
        coeffs = _coeffs_from_blocks(spec, blocks) if spec.is_group_algebra else None
        return AlgebraElement(spec, blocks, coeffs)

    @staticmethod
    def from_coeffs(spec: AlgebraSpec, coeffs: Iterable[complex]) -> "AlgebraElement":
        if spec.group is None:
            raise StructureError("coefficient construction needs a group algebra")
        c = np.asarray(list(coeffs), dtype=complex)
        if c.shape != (spec.group.order,):
            raise StructureError("coefficient vector length must equal the group order")
        return AlgebraElement(spec, _blocks_from_coeffs(spec, c), _freeze(c))

    @staticmethod
    def zero(spec: AlgebraSpec) -> "AlgebraElement":
        return AlgebraElement.from_blocks(spec, [np.zeros((n, n)) for n in spec.blocks])

    @staticmethod
    def one(spec: AlgebraSpec) -> "AlgebraElement":
        return AlgebraElement.from_blocks(spec, [np.eye(n) for n in spec.blocks])

    @staticmethod
    def delta(spec: AlgebraSpec, g: int) -> "AlgebraElement":
        """Group algebra basis element delta_g."""
        if spec.group is None:
            raise StructureError("delta elements need a group algebra")
        c = np.zeros(spec.group.order, dtype=complex)
        c[g] = 1.0
        return AlgebraElement.from_coeffs(spec, c)

    @staticmethod
    def random(spec: AlgebraSpec, rng: np.random.Generator, scale: float = 1.0) -> "AlgebraElement":
        if spec.is_group_algebra:
            g = spec.group
            c = scale * (rng.standard_normal(g.order) + 1j * rng.standard_normal(g.order))
            return AlgebraElement.from_coeffs(spec, c)
        blocks = [scale * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
                  for n in spec.blocks]
        return AlgebraElement.from_blocks(spec, blocks)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other: "AlgebraElement") -> "AlgebraElement":
        _check_same_owner(self, other)
        return AlgebraElement.from_blocks(self.spec, [a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other: "AlgebraElement") -> "AlgebraElement":
        _check_same_owner(self, other)
        return AlgebraElement.from_blocks(self.spec, [a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, other):
        if isinstance(other, AlgebraElement):
            _check_same_owner(self, other)
            return AlgebraElement.from_blocks(self.spec, [a @ b for a, b in zip(self.blocks, other.blocks)])
        return AlgebraElement.from_blocks(self.spec, [complex(other) * b for b in self.blocks])

    def __rmul__(self, scalar) -> "AlgebraElement":
        return self * scalar

    def __neg__(self) -> "AlgebraElement":
        return self * (-1.0)

    def adjoint(self) -> "AlgebraElement":
        return AlgebraElement.from_blocks(self.spec, [dagger(b) for b in self.blocks])

    def norm(self) -> float:
        return max(spectral_norm(b) for b in self.blocks)

    def is_zero(self, tol: float = 0.0) -> bool:
        return self.norm() <= tol


def _blocks_from_coeffs(spec: AlgebraSpec, c: np.ndarray) -> tuple[np.ndarray, ...]:
    g = spec.group
    if spec.regular_block:
        m = sum(c[i] * g.left_regular(i) for i in range(g.order))
        return (_freeze(m),)
    chars = np.asarray(g.characters, dtype=complex)
    values = chars @ c
    return tuple(_freeze(np.array([[v]])) for v in values)


def _coeffs_from_blocks(spec: AlgebraSpec, blocks: tuple[np.ndarray, ...]) -> np.ndarray:
    g = spec.group
    if spec.regular_block:
        return _freeze(blocks[0][:, 0].copy())
    chars = np.asarray(g.characters, dtype=complex)
    values = np.array([b[0, 0] for b in blocks])
    return _freeze(chars.conj().T @ values / g.order)


# functional aliases for the operator names -----------------------------------

def mul(a: AlgebraElement, b: AlgebraElement) -> AlgebraElement:
    return a * b


def adjoint(a: AlgebraElement) -> AlgebraElement:
    return a.adjoint()


def norm(a: AlgebraElement) -> float:
    return a.norm()


def spectral_calculus(a: AlgebraElement, f: Callable[[complex], complex]) -> AlgebraElement:
    """Apply a scalar function to a normal element through its Schur form.

    Normality is required up to an absolute tolerance on ||a a* - a* a||. For
    group algebra elements the result stays inside the group algebra: it is a
    limit of polynomials in a and a*, and the block construction keeps the
    coefficient vector in sync.
    """
    defect = (a * a.adjoint() - a.adjoint() * a).norm()
    if defect > NORMALITY_TOL:
        raise StructureError(f"element is not normal: ||aa* - a*a|| = {defect:.3g}")
    return AlgebraElement.from_blocks(a.spec, [schur_function(b, f) for b in a.blocks])


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceFunctional:
    """A trace on the algebra.

    kind "scalar": tau(a) = sum_i weights[i] * Tr(a_i) with nonnegative weights.
    kind "center": the tuple of normalized block traces (Tr(a_i) / n_i)_i.
    kind "delocalized": f -> sum over the conjugacy class of g of f(gamma),
    available on group algebras only.
    """

    spec: AlgebraSpec
    kind: str
    weights: tuple[float, ...] | None = None
    class_of_g: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind == "scalar":
            if self.weights is None or len(self.weights) != self.spec.k:
                raise StructureError("scalar trace needs one weight per block")
            if any(w < 0 for w in self.weights):
                raise StructureError("scalar trace weights must be nonnegative")
        elif self.kind == "center":
            if not self.spec.has_matrix_blocks:
                raise StructureError("center-valued trace needs genuine matrix blocks")
        elif self.kind == "delocalized":
            if self.spec.group is None or self.class_of_g is None:
                raise StructureError("delocalized trace needs a group algebra and a class")
        else:
            raise StructureError(f"unknown trace kind {self.kind!r}")

    @property
    def is_positive(self) -> bool:
        if self.kind == "scalar":
            return all(w >= 0 for w in self.weights)
        if self.kind == "center":
            return True
        return self.class_of_g == (0,)

    @property
    def is_faithful(self) -> bool:
        if self.kind == "scalar":
            return all(w > 0 for w in self.weights)
        if self.kind == "center":
            return True
        return False

    @property
    def is_normalized(self) -> bool:
        if self.kind == "scalar":
            return abs(sum(w * n for w, n in zip(self.weights, self.spec.blocks)) - 1.0) < 1e-12
        if self.kind == "center":
            return True
        return self.class_of_g == (0,)

    def __call__(self, a: AlgebraElement):
        return apply_trace(self, a)


def scalar_trace(spec: AlgebraSpec, weights: Sequence[float]) -> TraceFunctional:
    return TraceFunctional(spec, "scalar", weights=tuple(float(w) for w in weights))


def normalized_trace(spec: AlgebraSpec) -> TraceFunctional:
    """The Plancherel-weighted scalar trace, tau(1) = 1 and faithful.

    Weights n_i / sum n_j^2 reduce to the canonical trace f -> f(e) on group
    algebras in either realization.
    """
    total = float(spec.dim)
    return scalar_trace(spec, [n / total for n in spec.blocks])


def center_valued_trace(spec: AlgebraSpec) -> TraceFunctional:
    return TraceFunctional(spec, "center")


def canonical_group_trace(spec: AlgebraSpec) -> TraceFunctional:
    """f -> f(e), positive, faithful and normalized."""
    if spec.group is None:
        raise StructureError("canonical group trace needs a group algebra")
    return normalized_trace(spec)


def delocalized_trace(spec: AlgebraSpec, g: int) -> TraceFunctional:
    """f -> sum of f over the conjugacy class of g."""
    if spec.group is None:
        raise StructureError("delocalized trace needs a group algebra")
    if not 0 <= g < spec.group.order:
        raise StructureError(f"element index {g} outside group of order {spec.group.order}")
    return TraceFunctional(spec, "delocalized", class_of_g=spec.group.conjugacy_class(g))


def apply_trace(tau: TraceFunctional, a: AlgebraElement):
    """Evaluate a trace; scalar and delocalized kinds return a complex number,
    the center-valued kind a length-k vector of normalized block traces."""
    if tau.spec != a.spec:
        raise StructureError("trace and element belong to different algebras")
    if tau.kind == "scalar":
        return complex(sum(w * np.trace(b) for w, b in zip(tau.weights, a.blocks)))
    if tau.kind == "center":
        return np.array([np.trace(b) / n for b, n in zip(a.blocks, a.spec.blocks)])
    return complex(sum(a.coeffs[g] for g in tau.class_of_g))


def trace_on_evaluation(tau: TraceFunctional, block_traces: np.ndarray):
    """Apply a trace to an element of A/[A, A] given as unnormalized block
    traces (the output of the endomorphism evaluation map)."""
    bt = np.asarray(block_traces, dtype=complex)
    if bt.shape != (tau.spec.k,):
        raise StructureError("expected one unnormalized block trace per block")
    if tau.kind == "scalar":
        return complex(np.dot(tau.weights, bt))
    if tau.kind == "center":
        return bt / np.asarray(tau.spec.blocks, dtype=float)
    raise StructureError("delocalized traces need full elements, not block traces")
