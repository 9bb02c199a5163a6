"""Discretized twisted Dolbeault operators and the trace-valued index.

Sections live on the grid with values in the GNS fiber of the bundle, flat
layout (ix, iy, fiber) with the fiber fastest.  The operator is

    D = (1/2) (nabla_x + i nabla_y),
    nabla_x = d_x + 2 pi i c y + eta_x,     nabla_y = d_y + eta_y,

where c is the bundle's parameter and eta the connection deviation.  The
derivative along each axis is the spectral derivative conjugated into the
quasi-periodic gauge: a section with seam factor u along x is u^x times a
periodic field, so d_x = G (d_periodic) G^{-1} + log u with G the diagonal
stack of u^x over the grid.  The seam factor along y at fixed x is
exp(-2 pi i c x) v, handled the same way column by column.  Both are exact on
sections whose gauged representatives are band-limited.

Kernel and cokernel come from one dense singular value decomposition.  A
square matrix always has as many left null vectors as right ones, so the
continuum index cannot appear as a raw count: for parameter c > 0 the c
extra left null vectors are wrap-around states.  The section space only
carries x-frequencies in a band of width n, the y-seam shifts frequencies by
c, and the adjoint's candidate solutions, which in the continuum grow along
that frequency chain and are discarded as non-normalizable, close up around
the finite band instead.  Such states are not spectrally resolved: they put
order-one mass on the band edge, while genuine solutions put an
exponentially small tail there.  Kernel extraction therefore classifies
every null vector by its edge-band mass and drops the wrap artifacts, with
guard rails that refuse ambiguous vectors.  The trace-valued index is the
extended trace of the kernel projection minus that of the cokernel
projection, both built from the resolved vectors only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._errors import DegenerateSpectrumError, StructureError
from .algebra import AlgebraSpec, TraceFunctional, normalized_trace
from .bundle import BundleSpec, gns_connection_fields, gns_fiber, gns_twist, resample_bundle
from .chern import topological_index
from .forms import Grid, Twist, derivative_matrix
from .gns import (GnsSpace, algebra_generators, extended_trace_of_projection,
                  l2_free, module_map_from_commutant)
from .hilbert_module import K0Class, class_of, dim_tau

SECTION_DIM_CAP = 6000
KERNEL_TOL_FACTOR = 1e-6
GAP_RATIO_FLOOR = 10.0
EQUIVARIANCE_TOL = 1e-10
PROJECTION_EQUIVARIANCE_TOL = 1e-9

# A null vector is kept only when its x-frequency mass near the band edge is
# below the first threshold, and recognized as a wrap-around artifact only
# above the second.  Anything in between means the grid cannot tell the two
# apart, which is reported rather than guessed at.  Resolved states shed
# edge mass spectrally fast under refinement; wrap states keep order-one
# mass there at every resolution.
EDGE_MASS_RESOLVED = 5e-2
EDGE_MASS_ARTIFACT = 5e-1


@dataclass(frozen=True)
class TwistedOperator:
    """Dense matrix of a Dolbeault operator on quasi-periodic grid sections."""

    grid: Grid
    bundle: BundleSpec
    space: GnsSpace
    matrix: np.ndarray

    def __post_init__(self):
        n, d = self.grid.n, self.space.dim
        if self.matrix.shape != (n * n * d, n * n * d):
            raise StructureError("operator matrix does not match the section space")
        res = self.equivariance_residual()
        if res > EQUIVARIANCE_TOL * (1.0 + float(np.max(np.abs(self.matrix)))):
            raise StructureError(
                f"operator fails right-action equivariance: residual {res:.3g}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def copies(self) -> int:
        return self.grid.n * self.grid.n

    def equivariance_residual(self) -> float:
        """Sup-norm of the commutators with the fiberwise right action."""
        d = self.space.dim
        view = self.matrix.reshape(self.copies, d, self.copies, d)
        worst = 0.0
        for a in algebra_generators(self.space.spec):
            r = self.space.right_action_matrix(a)
            comm = np.einsum("PaQc,cb->PaQb", view, r) \
                - np.einsum("ac,PcQb->PaQb", r, view)
            worst = max(worst, float(np.max(np.abs(comm))))
        return worst

    def apply_right(self, columns: np.ndarray, r: np.ndarray) -> np.ndarray:
        """(1 tensor r) applied to a stack of section-space columns."""
        d = self.space.dim
        shaped = columns.reshape(self.copies, d, -1)
        return np.einsum("ab,pbk->pak", r, shaped).reshape(columns.shape)


def _operator_derivative(n: int) -> np.ndarray:
    """Spectral d/dx with the Nyquist slot kept at frequency -n/2.

    The calculus modules zero that slot, which is right for derivatives of
    band-limited data but hands an assembled operator a fake kernel spanned
    by pure Nyquist modes; keeping the negative branch leaves the operator
    exact on resolved sections and injective on the unresolved remainder.
    """
    modes = 2j * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    return np.fft.ifft(modes[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0)


def _axis_derivative(grid: Grid, powers: np.ndarray | None,
                     log_seam: np.ndarray | None, d: int) -> np.ndarray:
    """Gauged spectral derivative along one axis, axes (i, a, j, b).

    powers[j] is the seam factor raised to the j-th grid coordinate; None
    means the axis is honestly periodic.
    """
    deriv = _operator_derivative(grid.n)
    if powers is None:
        out = np.einsum("ij,ab->iajb", deriv, np.eye(d, dtype=complex))
        if log_seam is not None:
            out += np.einsum("ij,ab->iajb", np.eye(grid.n), log_seam)
        return out
    inv = np.conj(np.swapaxes(powers, -1, -2))
    out = np.einsum("ij,iac,jcb->iajb", deriv, powers, inv)
    out += np.einsum("ij,ab->iajb", np.eye(grid.n), log_seam)
    return out


def assemble_dolbeault(b: BundleSpec, grid: Grid | None = None) -> TwistedOperator:
    """The twisted Dolbeault operator of a bundle as a dense matrix.

    An explicit grid finer than the bundle's own resamples the bundle first,
    so refinement studies reuse one set of data.
    """
    if b.grid.manifold != "T2":
        raise StructureError("the operator lives on the torus")
    if b.presentation == "projection":
        raise StructureError("assemble operators from trivialized or automorphy data")
    if grid is not None and grid != b.grid:
        if grid.manifold != "T2" or grid.n % b.grid.n:
            raise StructureError("target grid must refine the bundle grid")
        b = resample_bundle(b, grid.n // b.grid.n)
    grid = b.grid
    space = gns_fiber(b)
    n, d = grid.n, space.dim
    if n * n * d > SECTION_DIM_CAP:
        raise StructureError(
            f"section space dimension {n * n * d} exceeds the dense cap {SECTION_DIM_CAP}")

    twist = gns_twist(b, space) if b.presentation == "automorphy" else None
    coords = grid.coords

    m = np.zeros((n, n, d, n, n, d), dtype=complex)
    s = m.strides
    # writable diagonal views; einsum diagonals are read-only
    x_slots = as_strided(m, shape=(n, n, d, n, d),
                         strides=(s[0], s[1] + s[4], s[2], s[3], s[5]))
    y_slots = as_strided(m, shape=(n, n, d, n, d),
                         strides=(s[0] + s[3], s[1], s[2], s[4], s[5]))
    diag = as_strided(m, shape=(n, n, d, d),
                      strides=(s[0] + s[3], s[1] + s[4], s[2], s[5]))

    # x-derivative: delta_{y,v} T_x[x, a, u, b]
    if twist is None:
        tx = _axis_derivative(grid, None, None, d)
    else:
        ux = np.stack([twist.u_power(x) for x in coords])
        tx = _axis_derivative(grid, ux, twist.log_u, d)
    x_slots += 0.5 * tx[:, None, :, :, :]

    # y-derivative: delta_{x,u} T_y(x)[y, a, v, b]
    if twist is None:
        y_slots += 0.5j * _axis_derivative(grid, None, None, d)[None, :, :, :, :]
    else:
        for ix, x in enumerate(coords):
            vy = np.stack([twist.v_power(y, x) for y in coords])
            y_slots[ix] += 0.5j * _axis_derivative(grid, vy, twist.log_v_at(x), d)

    # multiplication part: the sloped reference connection plus the deviation
    if b.chern:
        phase = 0.5 * 2j * np.pi * b.chern * coords
        diag += np.einsum("y,ab->yab", phase, np.eye(d, dtype=complex))[None]
    eta = gns_connection_fields(b, space)
    if eta is not None:
        diag += 0.5 * (eta[0] + 1j * eta[1])

    return TwistedOperator(grid, b, space, m.reshape(n * n * d, n * n * d))


@dataclass(frozen=True)
class KernelData:
    """Resolved singular-vector frames of the near-kernel on both sides.

    Artifact counts record how many null vectors per side were wrap-around
    states of the finite frequency band rather than resolved solutions.
    """

    kernel: np.ndarray
    cokernel: np.ndarray
    gap_ratio: float
    sigma_max: float
    tol: float
    kernel_artifacts: int = 0
    cokernel_artifacts: int = 0

    @property
    def kernel_dim(self) -> int:
        return self.kernel.shape[1]

    @property
    def cokernel_dim(self) -> int:
        return self.cokernel.shape[1]

    def kernel_projection(self) -> np.ndarray:
        return self.kernel @ np.conj(self.kernel.T)

    def cokernel_projection(self) -> np.ndarray:
        return self.cokernel @ np.conj(self.cokernel.T)


def _edge_mass(op: TwistedOperator, columns: np.ndarray) -> np.ndarray:
    """Fraction of each column's squared mass at the x-frequency band edge.

    Columns are undressed through the bundle's x-gauge first, so the
    frequencies measured are those of the periodic representatives.  Smooth
    sections decay exponentially toward the edge; wrap-around states of a
    sloped bundle straddle it by construction, because they only close up by
    running around the finite band.
    """
    n, d = op.grid.n, op.space.dim
    k = columns.shape[1]
    if k == 0:
        return np.zeros(0)
    v = columns.reshape(n, n, d, k)
    if op.bundle.presentation == "automorphy":
        twist = gns_twist(op.bundle, op.space)
        ux = np.stack([twist.u_power(x) for x in op.grid.coords])
        undress = np.conj(np.swapaxes(ux, -1, -2))
        v = np.einsum("xab,xybk->xyak", undress, v)
    vhat = np.fft.fft(v, axis=0)
    freqs = np.fft.fftfreq(n, d=1.0 / n)
    # wrap states smear over a slope-width strip below the fold point
    buffer = max(2, abs(int(op.bundle.chern)) + 1)
    edge = np.abs(freqs) >= n / 2 - buffer
    total = np.sum(np.abs(vhat) ** 2, axis=(0, 1, 2))
    hot = np.sum(np.abs(vhat[edge]) ** 2, axis=(0, 1, 2))
    return hot / np.maximum(total, np.finfo(float).tiny)


def _drop_wrap_artifacts(op: TwistedOperator,
                         columns: np.ndarray) -> tuple[np.ndarray, int]:
    """Split null vectors into resolved states and wrap-around artifacts.

    Vectors whose edge mass falls between the two thresholds are neither,
    which means the grid cannot separate solutions from band effects; that
    is reported with the measured mass in place of a spectral gap.
    """
    mu = _edge_mass(op, columns)
    ambiguous = (mu > EDGE_MASS_RESOLVED) & (mu < EDGE_MASS_ARTIFACT)
    if ambiguous.any():
        worst = float(mu[ambiguous].max())
        raise DegenerateSpectrumError(
            f"null vector neither resolved nor a clean wrap artifact "
            f"(edge mass {worst:.3g})",
            gap_ratio=EDGE_MASS_ARTIFACT / worst,
            below=worst, above=EDGE_MASS_ARTIFACT)
    keep = mu <= EDGE_MASS_RESOLVED
    kept = np.ascontiguousarray(columns[:, keep])
    return kept, int(np.count_nonzero(~keep))


def _frame_equivariance(op: TwistedOperator, columns: np.ndarray) -> float:
    if columns.shape[1] == 0:
        return 0.0
    worst = 0.0
    for a in algebra_generators(op.space.spec):
        r = op.space.right_action_matrix(a)
        moved = op.apply_right(columns, r)
        resid = moved - columns @ (np.conj(columns.T) @ moved)
        worst = max(worst, float(np.max(np.abs(resid))))
    return worst


def kernel_data(op: TwistedOperator, tol: float | None = None) -> KernelData:
    """Kernel and cokernel frames from one dense singular value decomposition.

    Requires a spectral gap of at least GAP_RATIO_FLOOR around the threshold;
    without it no index is emitted.  Null vectors that are wrap-around states
    of the finite frequency band are dropped from the frames and counted
    separately.
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
    kernel, kernel_art = _drop_wrap_artifacts(
        op, np.ascontiguousarray(np.conj(vh[below].T)))
    cokernel, cokernel_art = _drop_wrap_artifacts(
        op, np.ascontiguousarray(u[:, below]))
    kd = KernelData(kernel, cokernel, float(ratio), sigma_max, float(tol),
                    kernel_art, cokernel_art)
    for frame in (kernel, cokernel):
        res = _frame_equivariance(op, frame)
        if res > PROJECTION_EQUIVARIANCE_TOL:
            raise StructureError(
                f"kernel projection fails equivariance: residual {res:.3g}")
    return kd


def analytic_index(op: TwistedOperator, t: TraceFunctional,
                   tol: float | None = None, data: KernelData | None = None):
    """Extended trace of the kernel projection minus the cokernel's.

    Scalar and delocalized traces return a complex number, the center-valued
    trace one value per block.
    """
    kd = data if data is not None else kernel_data(op, tol)
    plus = extended_trace_of_projection(t, kd.kernel, op.space,
                                        hilbert_dim=op.copies)
    minus = extended_trace_of_projection(t, kd.cokernel, op.space,
                                         hilbert_dim=op.copies)
    return plus - minus


def _free_layout(op: TwistedOperator) -> tuple[GnsSpace, np.ndarray]:
    """Index map from the block-major free-module layout to section layout.

    The section space orders coordinates grid-point major with the fiber's
    own block layout inside; the completion of the free module A^(copies * r)
    orders them block major with copies inside.  Both are the same set of
    coordinates when the fiber is free.
    """
    space = op.space
    spec = space.spec
    if any(q.shape[0] != q.shape[1] for q in space.frames):
        raise StructureError("the K-theory route needs a free fiber")
    r = space.n
    copies = op.copies
    big = l2_free(spec, copies * r, space.tau)
    fiber_offsets = space.offsets
    block_sizes = [space.block_dims[i] // r for i in range(len(space.frames))]
    section_of_free = np.empty(big.dim, dtype=np.intp)
    pos = 0
    for i, w in enumerate(block_sizes):
        for copy in range(copies * r):
            g, c = divmod(copy, r)
            start = g * space.dim + fiber_offsets[i] + c * w
            section_of_free[pos:pos + w] = np.arange(start, start + w)
            pos += w
    return big, section_of_free


def k_theory_index(op: TwistedOperator,
                   data: KernelData | None = None) -> K0Class:
    """Blockwise index class [ker] - [coker] of the operator over A.

    The resolved frames span invariant submodules of the free completion,
    so each one has a well-defined class; the raw matrix nullity does not,
    since it pairs every resolved state with a wrap artifact.
    """
    kd = data if data is not None else kernel_data(op)
    big, order = _free_layout(op)

    def frame_class(frame: np.ndarray) -> K0Class:
        p = frame @ np.conj(frame.T)
        phi = module_map_from_commutant(p[np.ix_(order, order)], big)
        return class_of(phi)

    return frame_class(kd.kernel) - frame_class(kd.cokernel)


def _json_value(v):
    if isinstance(v, (np.ndarray, list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, complex) or isinstance(v, np.complexfloating):
        return [float(v.real), float(v.imag)]
    if isinstance(v, (np.floating, np.integer)):
        return float(v)
    return v


@dataclass(frozen=True)
class IndexReport:
    """Everything one index verification produced, JSON-serializable."""

    analytic_index: object
    topological_index: object
    kernel_dim_t: object
    cokernel_dim_t: object
    gap_ratio: float
    grid_n: int
    tolerances: Mapping[str, float]
    discrepancy: float

    def to_dict(self) -> dict:
        return {
            "analytic_index": _json_value(self.analytic_index),
            "topological_index": _json_value(self.topological_index),
            "kernel_dim_t": _json_value(self.kernel_dim_t),
            "cokernel_dim_t": _json_value(self.cokernel_dim_t),
            "gap_ratio": float(self.gap_ratio),
            "grid_n": int(self.grid_n),
            "tolerances": {k: float(v) for k, v in self.tolerances.items()},
            "discrepancy": float(self.discrepancy),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def index_report(b: BundleSpec, t: TraceFunctional | None = None,
                 tol: float | None = None) -> IndexReport:
    """Assemble, extract the kernel, and compare both sides of the pairing."""
    t = t if t is not None else normalized_trace(b.spec)
    op = assemble_dolbeault(b)
    kd = kernel_data(op, tol)
    plus = extended_trace_of_projection(t, kd.kernel, op.space,
                                        hilbert_dim=op.copies)
    minus = extended_trace_of_projection(t, kd.cokernel, op.space,
                                         hilbert_dim=op.copies)
    analytic = plus - minus
    topological = topological_index(b, t)
    disc = float(np.max(np.abs(np.asarray(analytic) - np.asarray(topological))))
    return IndexReport(
        analytic_index=analytic,
        topological_index=topological,
        kernel_dim_t=plus,
        cokernel_dim_t=minus,
        gap_ratio=kd.gap_ratio,
        grid_n=b.grid.n,
        tolerances={"kernel_tol": kd.tol, "gap_ratio_floor": GAP_RATIO_FLOOR},
        discrepancy=disc,
    )
