"""Completion of projective modules to finite-dimensional A-Hilbert spaces.

l2(A^n) is realized blockwise: for a genuine matrix block of size n_i the
coordinate space is the vec'd tall matrix space C^(n*n_i*n_i), scaled by
sqrt(w_i) so the trace inner product tau(<v,w>) becomes the standard one.
Left multiplication by a matrix F over A lifts to F_i (x) 1 and the right
action of a to 1 (x) a_i^T.  Group algebras realized through one regular
block use the coefficient space C^(n*|G|) instead, where the flat matrices
of a module map already act directly.

Everything commuting with the right action is left multiplication by a
matrix over A; the extraction of that matrix is what recovers modules from
their completions and lets traces extend to equivariant operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ncindex._errors import StructureError
from ncindex._linalg import dagger, nullspace, spectral_norm
from ncindex.algebra import AlgebraElement, AlgebraSpec, TraceFunctional, apply_trace
from ncindex.hilbert_module import ModuleMap, ProjectiveModule

EQUIVARIANCE_TOL = 1e-8
COMMUTANT_RTOL = 1e-9


def algebra_generators(spec: AlgebraSpec) -> list:
    """A linear spanning set of the algebra: deltas or embedded matrix units."""
    out = []
    if spec.is_group_algebra:
        return [AlgebraElement.delta(spec, g) for g in range(spec.group.order)]
    for i, ni in enumerate(spec.blocks):
        for a in range(ni):
            for b in range(ni):
                blocks = [np.zeros((m, m), dtype=complex) for m in spec.blocks]
                blocks[i][a, b] = 1.0
                out.append(AlgebraElement.from_blocks(spec, blocks))
    return out


def _ambient_dims(spec: AlgebraSpec, n: int) -> tuple:
    if spec.regular_block:
        return (n * spec.group.order,)
    return tuple(n * ni * ni for ni in spec.blocks)


def _lift_left(spec: AlgebraSpec, phi: ModuleMap, i: int) -> np.ndarray:
    """Left multiplication by phi on the block-i coordinate space."""
    if spec.regular_block:
        return phi.blocks[0]
    return np.kron(phi.blocks[i], np.eye(spec.blocks[i]))


def _right_matrix(spec: AlgebraSpec, n: int, a: AlgebraElement, i: int) -> np.ndarray:
    if spec.regular_block:
        g = spec.group
        rho = sum(a.coeffs[j] * g.right_regular(j) for j in range(g.order))
        return np.kron(np.eye(n), rho)
    ni = spec.blocks[i]
    return np.kron(np.eye(n * ni), a.blocks[i].T)


@dataclass(frozen=True, eq=False)
class GnsSpace:
    """Completion of pA^n under a faithful scalar trace.

    frames[i] is an isometry whose columns are an orthonormal basis of the
    block-i coordinate subspace cut out by p; dim is the total column count.
    """

    module: ProjectiveModule
    tau: TraceFunctional
    frames: tuple

    @property
    def spec(self) -> AlgebraSpec:
        return self.module.spec

    @property
    def n(self) -> int:
        return self.module.ambient_rank

    @property
    def block_dims(self) -> tuple:
        return tuple(f.shape[1] for f in self.frames)

    @property
    def offsets(self) -> tuple:
        out, acc = [], 0
        for d in self.block_dims:
            out.append(acc)
            acc += d
        return tuple(out)

    @property
    def dim(self) -> int:
        return sum(self.block_dims)

    def gram(self) -> np.ndarray:
        """Pairwise trace inner products of the chosen basis."""
        blocks = [dagger(f) @ f for f in self.frames]
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for o, g in zip(self.offsets, blocks):
            out[o:o + g.shape[0], o:o + g.shape[1]] = g
        return out

    def right_action_matrix(self, a: AlgebraElement) -> np.ndarray:
        if a.spec != self.spec:
            raise StructureError("element lives over a different algebra")
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for i, (o, q) in enumerate(zip(self.offsets, self.frames)):
            r = _right_matrix(self.spec, self.n, a, i)
            out[o:o + q.shape[1], o:o + q.shape[1]] = dagger(q) @ r @ q
        return out

    def right_action_matrices(self) -> list:
        return [self.right_action_matrix(a) for a in algebra_generators(self.spec)]


def l2_of_module(module: ProjectiveModule, tau: TraceFunctional) -> GnsSpace:
    """The A-Hilbert space completion of pA^n.

    The complex dimension comes out as sum_i rank_i(p) * n_i, and the
    orthogonal projection onto the completion inside l2(A^n) is left
    multiplication by p itself.
    """
    if tau.spec != module.spec:
        raise StructureError("trace lives over a different algebra")
    if tau.kind != "scalar" or not tau.is_faithful:
        raise StructureError("completion needs a faithful scalar trace")
    spec = module.spec
    frames = []
    for i in range(len(_ambient_dims(spec, module.ambient_rank))):
        lift = _lift_left(spec, module.projection, i)
        w, v = np.linalg.eigh((lift + dagger(lift)) / 2.0)
        frames.append(np.ascontiguousarray(v[:, w > 0.5]))
    return GnsSpace(module=module, tau=tau, frames=tuple(frames))


def l2_free(spec: AlgebraSpec, n: int, tau: TraceFunctional) -> GnsSpace:
    space = l2_of_module(ProjectiveModule.free(spec, n), tau)
    # a free module needs no basis rotation; keep ambient coordinates
    frames = tuple(np.eye(d, dtype=complex) for d in _ambient_dims(spec, n))
    return GnsSpace(module=space.module, tau=tau, frames=frames)


def extend_map(phi: ModuleMap, domain: GnsSpace, codomain: GnsSpace | None = None) -> np.ndarray:
    """Matrix of the bounded extension l2(domain) -> l2(codomain)."""
    codomain = codomain if codomain is not None else domain
    if phi.spec != domain.spec or domain.spec != codomain.spec:
        raise StructureError("map and spaces must share one algebra")
    if phi.cols != domain.n or phi.rows != codomain.n:
        raise StructureError("map shape does not match the ambient ranks")
    out = np.zeros((codomain.dim, domain.dim), dtype=complex)
    for i, (od, oc) in enumerate(zip(domain.offsets, codomain.offsets)):
        qd, qc = domain.frames[i], codomain.frames[i]
        lift = _lift_left(phi.spec, phi, i)
        out[oc:oc + qc.shape[1], od:od + qd.shape[1]] = dagger(qc) @ lift @ qd
    return out


def twist_space(space: GnsSpace, u: ModuleMap) -> GnsSpace:
    """Rotate the embedded subspace by a unitary matrix over A."""
    if u.rows != space.n or u.cols != space.n or u.spec != space.spec:
        raise StructureError("twisting unitary must act on the ambient module")
    if (u.adjoint() @ u - ModuleMap.identity(u.spec, u.cols)).norm() > 1e-10:
        raise StructureError("twisting needs a unitary")
    frames = tuple(_lift_left(space.spec, u, i) @ q for i, q in enumerate(space.frames))
    return GnsSpace(module=space.module, tau=space.tau, frames=frames)


def commutant(mats, dim: int | None = None, rtol: float = COMMUTANT_RTOL) -> list:
    """Frobenius-orthonormal basis of everything commuting with the inputs.

    Solves the stacked system [X, a_j] = 0 by null-space extraction.
    """
    mats = [np.asarray(m, dtype=complex) for m in mats]
    if dim is None:
        if not mats:
            raise StructureError("need matrices or an explicit dimension")
        dim = mats[0].shape[0]
    if not mats:
        return [e.reshape(dim, dim) for e in np.eye(dim * dim, dtype=complex)]
    eye = np.eye(dim)
    rows = [np.kron(eye, m.T) - np.kron(m, eye) for m in mats]
    basis = nullspace(np.vstack(rows), rtol=rtol)
    return [basis[:, j].reshape(dim, dim) for j in range(basis.shape[1])]


# -- reading matrices over A off equivariant operators -----------------------

def _diagonal_part(a: np.ndarray, space: GnsSpace, hilbert_dim: int, i: int) -> np.ndarray:
    d = space.dim
    o = space.offsets[i]
    di = space.block_dims[i]
    view = a.reshape(hilbert_dim, d, hilbert_dim, d)[:, o:o + di, :, o:o + di]
    return view.reshape(hilbert_dim * di, hilbert_dim * di)


def _check_equivariance(a: np.ndarray, space: GnsSpace, hilbert_dim: int) -> None:
    scale = spectral_norm(a) + 1.0
    for gen in algebra_generators(space.spec):
        r = np.kron(np.eye(hilbert_dim), space.right_action_matrix(gen))
        if spectral_norm(a @ r - r @ a) > EQUIVARIANCE_TOL * scale:
            raise StructureError("operator does not commute with the right action")


def _extract_matrix(parts: list, spec: AlgebraSpec, rows: int, cols: int):
    """Read the matrix over A behind blockwise ambient operators.

    Returns (phi, residual) where the residual measures how far the inputs
    are from honest left multiplications; for a regular block this includes
    membership of every entry in the translated group algebra.
    """
    if spec.regular_block:
        order = spec.group.order
        m = parts[0].reshape(rows, order, cols, order)
        grid = [[AlgebraElement.from_coeffs(spec, np.ascontiguousarray(m[r, :, c, 0]))
                 for c in range(cols)] for r in range(rows)]
        phi = ModuleMap.from_entries(grid)
        return phi, spectral_norm(parts[0] - phi.blocks[0])
    blocks = []
    for i, ni in enumerate(spec.blocks):
        t = parts[i].reshape(rows * ni, ni, cols * ni, ni)
        blocks.append(np.einsum("rbcb->rc", t) / ni)
    phi = ModuleMap.from_flat_blocks(spec, rows, cols, blocks)
    residual = max(spectral_norm(parts[i] - _lift_left(spec, phi, i))
                   for i in range(spec.k))
    return phi, residual


def module_map_from_commutant(a: np.ndarray, domain: GnsSpace,
                              codomain: GnsSpace | None = None,
                              tol: float = EQUIVARIANCE_TOL) -> ModuleMap:
    """Extract the matrix over A behind an equivariant operator.

    Both spaces must be completions of free modules so that the ambient
    coordinates are available; the residual against the re-lifted matrix is
    the equivariance certificate.
    """
    codomain = codomain if codomain is not None else domain
    spec = domain.spec
    for s in (domain, codomain):
        if any(q.shape[0] != q.shape[1] for q in s.frames):
            raise StructureError("extraction needs completions of free modules")
    parts = []
    for i in range(len(domain.frames)):
        od, dd = domain.offsets[i], domain.block_dims[i]
        oc, dc = codomain.offsets[i], codomain.block_dims[i]
        parts.append(a[oc:oc + dc, od:od + dd])
    phi, residual = _extract_matrix(parts, spec, codomain.n, domain.n)
    if residual > tol * (spectral_norm(a) + 1.0):
        raise StructureError("operator is not left multiplication by a matrix over A")
    return phi


def recover_module(space: GnsSpace) -> ProjectiveModule:
    """Rebuild the defining projection from the embedded subspace alone."""
    parts = [q @ dagger(q) for q in space.frames]
    phi, residual = _extract_matrix(parts, space.spec, space.n, space.n)
    if residual > EQUIVARIANCE_TOL:
        raise StructureError("subspace is not invariant under the right action")
    return ProjectiveModule(phi)


# -- the extended trace -------------------------------------------------------

def _delocalized_of_blocks(t: TraceFunctional, spec: AlgebraSpec, parts: list) -> complex:
    y = AlgebraElement.from_blocks(spec, parts)
    return apply_trace(t, y)


def extended_trace_value(t: TraceFunctional, a: np.ndarray, space: GnsSpace,
                         hilbert_dim: int = 1, check: bool = True):
    """Trace of an equivariant operator on C^hilbert_dim (x) l2(pA^n).

    The auxiliary factor is the slow (kron-leading) index.  Scalar traces
    give sum_i (w_i / n_i) Tr(a_ii); the center valued trace the tuple
    Tr(a_ii) / n_i^2; a delocalized trace reconstructs the algebra element
    behind each diagonal copy of l2(A) and sums its class values.
    """
    a = np.asarray(a, dtype=complex)
    if a.shape != (hilbert_dim * space.dim,) * 2:
        raise StructureError("operator shape does not match the space")
    if check:
        _check_equivariance(a, space, hilbert_dim)
    spec = space.spec
    if t.spec != spec:
        raise StructureError("trace lives over a different algebra")
    parts = [_diagonal_part(a, space, hilbert_dim, i) for i in range(len(space.frames))]
    if t.kind == "scalar":
        if spec.regular_block:
            return complex(t.weights[0] * np.trace(parts[0]))
        return complex(sum(w / ni * np.trace(p)
                           for w, ni, p in zip(t.weights, spec.blocks, parts)))
    if t.kind == "center":
        return np.asarray([complex(np.trace(p)) / (ni * ni)
                           for ni, p in zip(spec.blocks, parts)])
    # delocalized: lift to ambient coordinates and read off algebra elements
    total = 0.0 + 0.0j
    lifted = []
    for i, q in enumerate(space.frames):
        big = np.kron(np.eye(hilbert_dim), q)
        lifted.append(big @ parts[i] @ dagger(big))
    copies = hilbert_dim * space.n
    if spec.regular_block:
        order = spec.group.order
        m = lifted[0].reshape(copies, order, copies, order)
        for j in range(copies):
            total += apply_trace(t, AlgebraElement.from_coeffs(spec, m[j, :, j, 0]))
        return complex(total)
    for j in range(copies):
        parts_j = []
        for i, ni in enumerate(spec.blocks):
            m = lifted[i].reshape(copies, ni, ni, copies, ni, ni)
            parts_j.append(np.einsum("abcb->ac", m[j, :, :, j, :, :]) / ni)
        total += _delocalized_of_blocks(t, spec, parts_j)
    return complex(total)


def extended_trace_of_projection(t: TraceFunctional, columns: np.ndarray,
                                 space: GnsSpace, hilbert_dim: int = 1):
    """Extended trace of V V* given only the isometry columns V.

    Avoids forming the projection; row masses per block carry all the
    information for scalar and center traces, and the per-copy Gram blocks
    suffice for delocalized ones.
    """
    v = np.asarray(columns, dtype=complex)
    if v.ndim != 2 or v.shape[0] != hilbert_dim * space.dim:
        raise StructureError("column frame does not match the space")
    spec = space.spec
    d = space.dim
    view = v.reshape(hilbert_dim, d, -1)
    if t.kind == "scalar":
        total = 0.0
        for i, o in enumerate(space.offsets):
            mass = float(np.sum(np.abs(view[:, o:o + space.block_dims[i], :]) ** 2))
            if spec.regular_block:
                total += t.weights[0] * mass
            else:
                total += t.weights[i] / spec.blocks[i] * mass
        return complex(total)
    if t.kind == "center":
        out = []
        for i, o in enumerate(space.offsets):
            mass = float(np.sum(np.abs(view[:, o:o + space.block_dims[i], :]) ** 2))
            out.append(mass / (spec.blocks[i] ** 2))
        return np.asarray(out, dtype=complex)
    # delocalized
    total = 0.0 + 0.0j
    copies = hilbert_dim * space.n
    for i, q in enumerate(space.frames):
        o = space.offsets[i]
        w = np.kron(np.eye(hilbert_dim), q) @ \
            v.reshape(hilbert_dim, d, -1)[:, o:o + space.block_dims[i], :].reshape(
                hilbert_dim * space.block_dims[i], -1)
        if spec.regular_block:
            order = spec.group.order
            wr = w.reshape(copies, order, -1)
            for j in range(copies):
                coeffs = wr[j] @ np.conj(wr[j][0, :])
                total += apply_trace(t, AlgebraElement.from_coeffs(spec, coeffs))
        else:
            ni = spec.blocks[i]
            wr = w.reshape(copies, ni, ni, -1)
            # block-i component of the element behind copy j
            for j in range(copies):
                g = np.einsum("abk,cbk->ac", wr[j], np.conj(wr[j])) / ni
                zero = [np.zeros((m, m), dtype=complex) for m in spec.blocks]
                zero[i] = g
                total += apply_trace(t, AlgebraElement.from_blocks(spec, zero))
    return complex(total)


def gns_dimension(space: GnsSpace, t: TraceFunctional | None = None):
    """dim_t of the completion; the plain complex dimension when t is None."""
    if t is None:
        return space.dim
    return extended_trace_value(t, np.eye(space.dim, dtype=complex), space,
                                hilbert_dim=1, check=False)
