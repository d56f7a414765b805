"""Small linear-algebra helpers shared by the estimators."""

import numpy as np


def sign_normalize(B, tol=1e-12):
    """Flip columns so the first nonzero entry of each is positive.

    Entries with magnitude below ``tol`` times the column's max are treated
    as zero when looking for the first nonzero entry.
    """
    B = np.array(B, dtype=float, copy=True)
    one_d = B.ndim == 1
    if one_d:
        B = B[:, None]
    for j in range(B.shape[1]):
        col = B[:, j]
        scale = np.abs(col).max()
        if scale == 0:
            continue
        nz = np.flatnonzero(np.abs(col) > tol * scale)
        if col[nz[0]] < 0:
            B[:, j] = -col
    return B[:, 0] if one_d else B


def qr_retract(M):
    """Thin QR with a positive diagonal in R; returns the orthonormal factor."""
    Q, R = np.linalg.qr(M)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def to_theta(B):
    """Orthonormalize the columns of ``B`` and apply the sign convention."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        v = B / np.linalg.norm(B)
        return sign_normalize(v)
    return sign_normalize(qr_retract(B))
