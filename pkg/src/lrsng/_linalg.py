"""Small dense linear-algebra helpers shared by the solver modules."""

import numpy as np

PD_TOL = 1e-12
PSD_TOL = 1e-10


def asymmetry(X):
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return 0.0
    return float(np.max(np.abs(X - X.T)))


def sym(X):
    return 0.5 * (X + X.T)


def ldl_pivots(X):
    """Pivots of a symmetric LDL^T factorization with diagonal pivoting.

    Elimination stops once the largest remaining diagonal entry is at most
    PD_TOL; the eigenvalues of the trailing block are then reported as its
    pivots, so an indefinite tail still shows up as a negative pivot.
    """
    S = np.array(X, dtype=float)
    S = sym(S)
    pivots = []
    while S.shape[0]:
        i = int(np.argmax(np.diag(S)))
        d = S[i, i]
        if d <= PD_TOL:
            pivots.extend(np.linalg.eigvalsh(S).tolist())
            break
        pivots.append(d)
        col = np.delete(S[:, i], i)
        S = np.delete(np.delete(S, i, axis=0), i, axis=1)
        S = S - np.outer(col, col) / d
    return np.array(pivots)


def is_pd(X, tol=PD_TOL):
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return True
    return bool(np.all(ldl_pivots(X) > tol))


def is_psd(X, tol=PSD_TOL):
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return True
    return bool(np.all(ldl_pivots(X) >= -tol))


def apply(M, X):
    """Return ``X @ M.T`` over the last axis of ``X``.

    Accumulates column by column with elementwise operations so each output
    entry is computed identically no matter how many rows are batched
    together; Monte Carlo results must not depend on the chunking.
    """
    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    out = np.zeros(X.shape[:-1] + (M.shape[0],))
    for j in range(M.shape[1]):
        out += X[..., j:j + 1] * M[:, j]
    return out


def sqrt_factor(Sigma):
    """L with L L^T = Sigma for a symmetric PSD matrix (eigen factor, singular ok)."""
    lam, V = np.linalg.eigh(sym(np.asarray(Sigma, dtype=float)))
    return V * np.sqrt(np.clip(lam, 0.0, None))
