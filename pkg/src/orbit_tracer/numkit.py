"""Small dense linear algebra used throughout the package.

Everything here works on matrices of dimension at most 8 or so, so the
routines favour directness over asymptotic efficiency.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "LinAlgError",
    "solve_lyapunov",
    "eig_sym",
    "eig_general",
    "hurwitz_check",
    "solve_complex",
]

HURWITZ_MARGIN = 1e-12


class LinAlgError(ValueError):
    """Raised when a kernel routine receives input it cannot handle."""


def _as_matrix(M, name="matrix") -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise LinAlgError(f"{name} must be two-dimensional")
    if not np.all(np.isfinite(M)):
        raise LinAlgError(f"{name} has non-finite entries")
    return M


def _as_square(M, name="matrix") -> np.ndarray:
    M = _as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise LinAlgError(f"{name} must be square, got shape {M.shape}")
    return M


def eig_general(M) -> np.ndarray:
    """Eigenvalues of a real square matrix, as a complex array.

    Conjugate pairs are returned adjacent, positive imaginary part first.
    """
    M = _as_square(M)
    try:
        lam = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise LinAlgError(f"eigenvalue iteration did not converge for\n{M}") from exc
    lam = np.asarray(lam, dtype=complex)
    # enforce exact conjugate symmetry for real input
    out = []
    used = np.zeros(lam.size, dtype=bool)
    order = np.lexsort((-lam.imag, lam.real))
    for i in order:
        if used[i]:
            continue
        used[i] = True
        z = lam[i]
        if abs(z.imag) <= 1e-14 * max(1.0, abs(z)):
            out.append(complex(z.real, 0.0))
            continue
        # find the partner closest to the conjugate
        cand = [j for j in range(lam.size) if not used[j]]
        j = min(cand, key=lambda j: abs(lam[j] - np.conj(z)))
        used[j] = True
        re = 0.5 * (z.real + lam[j].real)
        im = 0.5 * (abs(z.imag) + abs(lam[j].imag))
        out.extend([complex(re, im), complex(re, -im)])
    return np.array(out, dtype=complex)


def eig_sym(M, *, vectors=False, tol=1e-12):
    """Eigenvalues (ascending) of a symmetric matrix.

    Parameters
    ----------
    M : array_like
        Symmetric matrix; asymmetry above ``tol`` (relative to the largest
        entry) is rejected.
    vectors : bool
        Also return the orthonormal eigenvectors as columns.
    """
    M = _as_square(M)
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > tol * scale:
        raise LinAlgError("eig_sym: matrix is not symmetric")
    M = 0.5 * (M + M.T)
    if vectors:
        return np.linalg.eigh(M)
    return np.linalg.eigvalsh(M)


def hurwitz_check(A) -> bool:
    """True iff every eigenvalue of ``A`` has real part below ``-1e-12``."""
    lam = eig_general(A)
    return bool(np.max(lam.real) < -HURWITZ_MARGIN)


def solve_lyapunov(A, S) -> np.ndarray:
    """Solve ``P A + A^T P = -S`` for the symmetric positive definite ``P``.

    The equation is vectorised into an ``n^2 x n^2`` linear system; at the
    dimensions used here that is both exact enough and cheap.
    """
    A = _as_square(A, "A")
    S = _as_square(S, "S")
    n = A.shape[0]
    if S.shape != (n, n):
        raise LinAlgError("lyapunov: S and A dimensions differ")
    if np.max(np.abs(S - S.T)) > 1e-12 * max(1.0, np.max(np.abs(S))):
        raise LinAlgError("lyapunov: S not symmetric")
    if eig_sym(S)[0] <= 0.0:
        raise LinAlgError("lyapunov: S not positive definite")
    if not hurwitz_check(A):
        raise LinAlgError("lyapunov: A not Hurwitz")

    eye = np.eye(n)
    # row-major vec: vec(PA) = (I kron A^T) vec(P), vec(A^T P) = (A^T kron I) vec(P)
    K = np.kron(eye, A.T) + np.kron(A.T, eye)
    try:
        p = np.linalg.solve(K, -S.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise LinAlgError("lyapunov: singular Kronecker system") from exc
    P = p.reshape(n, n)
    return 0.5 * (P + P.T)


def solve_complex(M, rhs, *, harmonic=None) -> np.ndarray:
    """Solve the complex system ``M x = rhs`` by partial-pivoting elimination.

    ``harmonic`` only labels the error raised for a singular matrix.
    """
    M = np.array(M, dtype=complex, ndmin=2)
    x = np.array(rhs, dtype=complex).reshape(-1)
    n = M.shape[0]
    if M.shape != (n, n) or x.size != n:
        raise LinAlgError("solve_complex: dimension mismatch")
    scale = np.max(np.abs(M)) if M.size else 0.0
    thresh = 1e-12 * scale
    label = "?" if harmonic is None else harmonic
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        if abs(M[piv, col]) <= thresh:
            raise LinAlgError(f"resolvent: singular at harmonic {label}")
        if piv != col:
            M[[col, piv]] = M[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        f = M[col + 1 :, col] / M[col, col]
        M[col + 1 :, col:] -= np.outer(f, M[col, col:])
        x[col + 1 :] -= f * x[col]
    for row in range(n - 1, -1, -1):
        x[row] = (x[row] - M[row, row + 1 :] @ x[row + 1 :]) / M[row, row]
    return x
