"""Trace-valued Chern character of bundles and the topological index.

The character of a bundle with curvature O and trace tau is the even form

    ch_tau = sum_j  tau(ev(O^j)) (i / 2pi)^j / j!

where ev is the evaluation map sending an endomorphism of the module to the
algebra (blockwise partial trace over the module index).  On a surface the
series terminates at j = 1 because O^2 is a 4-form, identically zero, so only
the degree-0 term tau(ev(1)) and the degree-2 term tau(ev(O)) i/(2pi) are
stored.  The normalization (i/2pi)^j / j! makes the constant-curvature line
bundle with parameter c integrate to exactly c.

Coefficient fields are scalar for the scalar and delocalized trace kinds and
carry one component per matrix block for the center-valued kind.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._errors import StructureError
from .algebra import (AlgebraElement, AlgebraSpec, TraceFunctional, apply_trace,
                      normalized_trace)
from .bundle import BundleSpec, _flat_dim, curvature
from .forms import Grid, MatrixForm, exterior_d

DEGREE0_CONSTANCY_TOL = 1e-10


def _base_shape(grid: Grid) -> tuple[int, ...]:
    return (grid.n,) if grid.manifold == "S1" else (grid.n, grid.n)


@dataclass(frozen=True)
class ChernForm:
    """Even-degree coefficient fields of a trace-valued Chern character.

    `degrees` maps 0 (and 2 on the torus) to coefficient arrays over the
    grid: shape (n, n) for scalar-valued traces, (n, n, k) for the
    center-valued trace with k blocks.  `source` records which bundle and
    trace produced the values.
    """

    grid: Grid
    spec: AlgebraSpec
    kind: str
    degrees: Mapping[int, np.ndarray]
    trace: TraceFunctional
    source: str

    def __post_init__(self):
        base = _base_shape(self.grid)
        for deg, field in self.degrees.items():
            if deg not in (0, 2):
                raise StructureError(f"unsupported character degree {deg}")
            want = base + ((self.spec.k,) if self.kind == "center" else ())
            if field.shape != want:
                raise StructureError(
                    f"degree-{deg} coefficient field has shape {field.shape}, "
                    f"expected {want}")

    def degree(self, j: int) -> np.ndarray:
        if j not in self.degrees:
            raise StructureError(f"no degree-{j} part stored")
        return self.degrees[j]

    def _peer(self, other: "ChernForm"):
        if self.grid != other.grid or self.spec != other.spec \
                or self.kind != other.kind \
                or set(self.degrees) != set(other.degrees):
            raise StructureError("characters live on different data")

    def __add__(self, other: "ChernForm") -> "ChernForm":
        self._peer(other)
        out = {d: self.degrees[d] + other.degrees[d] for d in self.degrees}
        return ChernForm(self.grid, self.spec, self.kind, out, self.trace,
                         f"({self.source}) + ({other.source})")

    def __sub__(self, other: "ChernForm") -> "ChernForm":
        self._peer(other)
        out = {d: self.degrees[d] - other.degrees[d] for d in self.degrees}
        return ChernForm(self.grid, self.spec, self.kind, out, self.trace,
                         f"({self.source}) - ({other.source})")

    def sup_norm(self) -> float:
        return max(float(np.max(np.abs(f))) for f in self.degrees.values())

    def export_csv(self, path) -> None:
        axes = ("x",) if self.grid.manifold == "S1" else ("x", "y")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["degree", *axes, "block", "re", "im"])
            for deg, field in sorted(self.degrees.items()):
                flat = field if self.kind == "center" else field[..., None]
                for idx in np.ndindex(flat.shape[:len(axes)]):
                    for blk in range(flat.shape[-1]):
                        v = flat[idx + (blk,)]
                        w.writerow([deg, *idx, blk, repr(float(v.real)),
                                    repr(float(v.imag))])


def _ev_blocks(spec: AlgebraSpec, rows: int, parts) -> list[np.ndarray]:
    """Partial trace over the module index of endomorphism-valued fields.

    Each input array has shape (*grid, rows*d_i, rows*d_i); the output block
    has shape (*grid, d_i, d_i) and represents the algebra-valued evaluation
    of the endomorphism at every grid point.
    """
    out = []
    for i, field in enumerate(parts):
        d = _flat_dim(spec, i)
        shaped = field.reshape(field.shape[:-2] + (rows, d, rows, d))
        out.append(np.einsum("...rarb->...ab", shaped))
    return out


def _trace_field(tau: TraceFunctional, blocks: list[np.ndarray]) -> np.ndarray:
    spec = tau.spec
    if tau.kind == "scalar":
        return sum(w * np.einsum("...aa->...", b)
                   for w, b in zip(tau.weights, blocks))
    if tau.kind == "center":
        cols = [np.einsum("...aa->...", b) / n
                for b, n in zip(blocks, spec.blocks)]
        return np.stack(cols, axis=-1)
    # delocalized traces need group coefficients, recovered pointwise
    base = blocks[0].shape[:-2]
    out = np.zeros(base, dtype=complex)
    for idx in np.ndindex(base):
        a = AlgebraElement.from_blocks(spec, [b[idx] for b in blocks])
        out[idx] = apply_trace(tau, a)
    return out


def _identity_parts(b: BundleSpec) -> list[np.ndarray]:
    base = _base_shape(b.grid)
    if b.presentation == "projection":
        return [p.fields[0] for p in b.eps.parts]
    out = []
    for i in range(b.spec.k):
        d = _flat_dim(b.spec, i)
        eye = np.eye(b.rank * d, dtype=complex)
        out.append(np.broadcast_to(eye, base + eye.shape))
    return out


def ch_tau(b: BundleSpec, tau: TraceFunctional) -> ChernForm:
    """Chern character of a bundle with respect to a trace.

    The degree-2j coefficient is tau(ev(O^j)) (i/2pi)^j / j!; on a surface
    only j = 0, 1 survive, and on the circle only j = 0.  The degree-0 part
    is the pointwise trace-dimension of the fiber.
    """
    if tau.spec != b.spec:
        raise StructureError("trace and bundle use different algebras")
    if not tau.is_positive:
        raise StructureError("the character is defined for positive traces")
    rows = b.eps.rows if b.presentation == "projection" else b.rank
    degrees = {0: _trace_field(tau, _ev_blocks(b.spec, rows, _identity_parts(b)))}
    if b.grid.manifold == "T2":
        om = curvature(b)
        parts = [p.fields[0] for p in om.parts]
        ev = _ev_blocks(b.spec, om.rows, parts)
        degrees[2] = _trace_field(tau, ev) * (1j / (2.0 * np.pi))
    src = f"{b.presentation} bundle, rank {b.rank}, parameter {b.chern}"
    return ChernForm(b.grid, b.spec, tau.kind, degrees, tau, src)


def _scalar_components(c: ChernForm, degree: int):
    field = c.degrees[degree]
    if c.kind == "center":
        return [field[..., i] for i in range(field.shape[-1])]
    return [field]


def closedness_residual(c: ChernForm) -> float:
    """Sup-norm of the exterior derivative of every stored part.

    Top-degree parts are closed by dimension and contribute nothing; the
    degree-0 part is differentiated spectrally, so a constant field returns a
    residual at rounding level.
    """
    worst = 0.0
    for comp in _scalar_components(c, 0):
        form = MatrixForm(c.grid, 0, (comp[..., None, None],))
        worst = max(worst, exterior_d(form).sup_norm())
    return worst


def integrated(c: ChernForm, degree: int = 2):
    """Integral of a coefficient field over the manifold (unit volume)."""
    field = c.degrees[degree]
    axes = tuple(range(1 if c.grid.manifold == "S1" else 2))
    return field.mean(axis=axes)


def _same_underlying(b1: BundleSpec, b2: BundleSpec) -> None:
    if b1.spec != b2.spec or b1.grid != b2.grid \
            or b1.presentation != b2.presentation or b1.rank != b2.rank:
        raise StructureError("bundles differ in more than the connection")
    if b1.presentation == "automorphy":
        if b1.chern != b2.chern:
            raise StructureError("bundles carry different parameters")
        gap = max((b1.monodromy.u - b2.monodromy.u).norm(),
                  (b1.monodromy.v - b2.monodromy.v).norm())
        if gap > 1e-12:
            raise StructureError("bundles carry different monodromies")
    if b1.presentation == "projection":
        if (b1.eps - b2.eps).sup_norm() > 1e-12:
            raise StructureError("bundles carry different projection fields")


def connection_independence_gap(b1: BundleSpec, b2: BundleSpec,
                                tau: TraceFunctional | None = None) -> float:
    """|integral ch(b1) - integral ch(b2)| for two connections on one bundle."""
    _same_underlying(b1, b2)
    tau = tau if tau is not None else normalized_trace(b1.spec)
    v1 = integrated(ch_tau(b1, tau))
    v2 = integrated(ch_tau(b2, tau))
    return float(np.max(np.abs(np.asarray(v1) - np.asarray(v2))))


def topological_index(b: BundleSpec, tau: TraceFunctional | None = None,
                      operator_kind: str = "dolbeault"):
    """Integral of the degree-2 character part over the torus.

    For the Dolbeault operator on the flat square torus the remaining
    characteristic factors of the index formula are identically 1, so the
    pairing reduces to this integral.  Scalar traces give a complex number
    (real up to rounding for skew curvature), the center-valued trace one
    value per block.
    """
    if operator_kind != "dolbeault":
        raise StructureError(f"unsupported operator kind {operator_kind!r}")
    if b.grid.manifold != "T2":
        raise StructureError("the topological index pairs against the torus class")
    tau = tau if tau is not None else normalized_trace(b.spec)
    val = integrated(ch_tau(b, tau))
    return val if tau.kind == "center" else complex(val)
