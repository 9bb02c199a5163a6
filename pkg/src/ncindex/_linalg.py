"""Small dense linear algebra helpers used throughout the package."""

from __future__ import annotations

import numpy as np
import scipy.linalg


def spectral_norm(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(m))


def dagger(m: np.ndarray) -> np.ndarray:
    return m.conj().T


def is_close(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    return spectral_norm(np.asarray(a) - np.asarray(b)) <= tol


def eig_projection(h: np.ndarray, keep) -> np.ndarray:
    """Spectral projection of a hermitian matrix onto eigenvalues selected by
    the predicate `keep` (vectorized on the eigenvalue array)."""
    w, v = np.linalg.eigh(h)
    mask = keep(w)
    vk = v[:, mask]
    return vk @ dagger(vk)


def schur_function(m: np.ndarray, f) -> np.ndarray:
    """Apply a scalar function to a (near-)normal matrix through its Schur form."""
    if m.shape == (1, 1):
        return np.array([[complex(f(m[0, 0]))]])
    t, z = scipy.linalg.schur(np.asarray(m, dtype=complex), output="complex")
    fd = np.array([complex(f(x)) for x in np.diag(t)])
    return z @ np.diag(fd) @ dagger(z)


def nullspace(m: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (columns) of the right null space, threshold relative
    to the largest singular value."""
    if m.size == 0:
        return np.eye(m.shape[1], dtype=complex)
    u, s, vh = np.linalg.svd(m)
    if s.size == 0:
        return dagger(vh)
    cut = s[0] * rtol
    rank = int(np.sum(s > cut))
    return dagger(vh)[:, rank:]


def simultaneous_diagonalization(mats: list[np.ndarray], tol: float = 1e-10) -> np.ndarray:
    """Unitary Q diagonalizing every matrix in a commuting normal family.

    Diagonalizes the first matrix, clusters its eigenvalues, then refines each
    cluster with the remaining matrices.
    """
    n = mats[0].shape[0]
    finished: list[np.ndarray] = []
    pending = [(np.eye(n, dtype=complex), list(mats))]
    while pending:
        basis, rest = pending.pop()
        if not rest or basis.shape[1] == 1:
            finished.append(basis)
            continue
        m = dagger(basis) @ rest[0] @ basis
        t, z = scipy.linalg.schur(np.asarray(m, dtype=complex), output="complex")
        vals = np.diag(t)
        order = np.lexsort((np.round(vals.imag, 8), np.round(vals.real, 8)))
        z = z[:, order]
        vals = vals[order]
        refined = basis @ z
        start = 0
        for i in range(1, len(vals) + 1):
            if i == len(vals) or abs(vals[i] - vals[start]) > tol:
                pending.append((refined[:, start:i], rest[1:]))
                start = i
    return np.hstack(finished)


def commuting_logs(unitaries: list[np.ndarray], tol: float = 1e-10) -> list[np.ndarray]:
    """Principal logarithms of a commuting family of unitaries, computed in a
    joint eigenbasis so the results commute exactly."""
    q = simultaneous_diagonalization(unitaries, tol=tol)
    logs = []
    for u in unitaries:
        d = np.diag(dagger(q) @ u @ q)
        logs.append(q @ np.diag(np.log(d.astype(complex))) @ dagger(q))
    return logs


def random_unitary(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_complex(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
