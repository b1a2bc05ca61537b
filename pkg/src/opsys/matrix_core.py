"""Dense complex matrix primitives shared by every other module.

All routines work on ``complex128`` numpy arrays and never mutate their
inputs.
"""
import logging

import numpy as np

from .exceptions import DimensionError, NumericalError

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12


def as_matrix(m):
    """Return ``m`` as a finite 2-d complex128 array (copy-free when possible)."""
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix has non-finite entries")
    return a


def is_hermitian(h, tol=HERMITIAN_TOL):
    h = np.asarray(h)
    return h.ndim == 2 and h.shape[0] == h.shape[1] and np.max(np.abs(h - h.conj().T), initial=0.0) <= tol


def as_hermitian(h, tol=HERMITIAN_TOL):
    """Validate a Hermitian matrix.

    Inputs off by more than ``tol`` are symmetrized once and flagged through
    the log rather than rejected. Returns ``(H, symmetrized)``.
    """
    a = as_matrix(h)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"Hermitian matrix must be square, got {a.shape}")
    dev = np.max(np.abs(a - a.conj().T), initial=0.0)
    sym = (a + a.conj().T) / 2
    if dev > tol:
        logger.warning("input not Hermitian (deviation %.3g); symmetrized", dev)
        return sym, True
    return sym, False


def adjoint(m):
    return np.asarray(m).conj().T


def herm_eig(h):
    """Eigen-decomposition of a Hermitian matrix.

    Returns ascending eigenvalues and a unitary matrix of eigenvectors with
    ``h = V diag(w) V^H``.
    """
    a, _ = as_hermitian(h)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Hermitian eigensolver failed: {exc}") from exc
    return w, v


def eigvalsh(h):
    a = np.asarray(h)
    return np.linalg.eigvalsh((a + a.conj().T) / 2)


def min_eig(h):
    return float(eigvalsh(h)[0])


def operator_norm(m):
    """Largest singular value."""
    a = np.asarray(m, dtype=complex)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def trace_norm(m):
    a = np.asarray(m, dtype=complex)
    if a.size == 0:
        return 0.0
    return float(np.sum(np.linalg.svd(a, compute_uv=False)))


def kron(a, b):
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def partial_trace(m, dims, side="second"):
    """Partial trace of a matrix on ``C^n (x) C^k``.

    ``side="second"`` traces out the ``k`` factor and returns an ``n x n``
    matrix, ``side="first"`` traces out the ``n`` factor.
    """
    n, k = dims
    a = as_matrix(m)
    if a.shape != (n * k, n * k):
        raise DimensionError(f"matrix of shape {a.shape} does not match dims {dims}")
    t = a.reshape(n, k, n, k)
    if side == "second":
        return np.einsum("iaja->ij", t)
    if side == "first":
        return np.einsum("aiaj->ij", t)
    raise ValueError(f"side must be 'first' or 'second', got {side!r}")


def direct_sum(blocks):
    blocks = [as_matrix(b) for b in blocks]
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols), dtype=complex)
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def jordan_split(h):
    """Split a Hermitian matrix into orthogonal positive and negative parts.

    Returns ``(H+, H-)`` with ``H = H+ - H-`` and ``H+ H- = 0``.
    """
    w, v = herm_eig(h)
    pos = (v * np.clip(w, 0, None)) @ v.conj().T
    neg = (v * np.clip(-w, 0, None)) @ v.conj().T
    return (pos + pos.conj().T) / 2, (neg + neg.conj().T) / 2


def psd_projection(h):
    """Nearest PSD matrix in Frobenius norm."""
    return jordan_split(h)[0]


def polar_unitary(m):
    """Unitary (or partial isometry) factor of the polar decomposition."""
    u, _, vh = np.linalg.svd(np.asarray(m, dtype=complex))
    return u @ vh


def matrix_units(n):
    """Array ``E`` of shape (n, n, n, n) with ``E[i, j]`` the matrix unit e_ij."""
    e = np.zeros((n, n, n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            e[i, j, i, j] = 1.0
    return e


def random_unitary(n, rng):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_hermitian(n, rng, scale=1.0):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (z + z.conj().T) / 2


def random_complex(shape, rng):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
