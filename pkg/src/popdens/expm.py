"""Matrix exponential by scaling and squaring with diagonal Pade approximants.

Degrees 3 to 13 use the standard backward-error norm thresholds. The
routine works on a stack of matrices ``(..., n, n)`` and picks the degree
and the number of squarings per matrix, so a batch of blocks with very
different norms is handled in one call.
"""

from __future__ import annotations

import numpy as np

_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1, 7: 9.504178996162932e-1,
          9: 2.097847961257068e0, 13: 5.371920351148152e0}

_COEF = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
         33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0),
}


def _pade(X: np.ndarray, m: int) -> np.ndarray:
    n = X.shape[-1]
    b = _COEF[m]
    ident = np.broadcast_to(np.eye(n), X.shape)
    X2 = X @ X
    if m == 13:
        X4 = X2 @ X2
        X6 = X4 @ X2
        U = X @ (X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2)
                 + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * ident)
        V = (X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2)
             + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * ident)
    else:
        U = b[1] * ident
        V = b[0] * ident
        P = ident
        for k in range(1, m // 2 + 1):
            P = P @ X2
            U = U + b[2 * k + 1] * P
            V = V + b[2 * k] * P
        U = X @ U
    return np.linalg.solve(V - U, V + U)


def matrix_exponential(A) -> np.ndarray:
    """``exp(A)`` for a square matrix or a stack of square matrices.

    Raises
    ------
    FloatingPointError
        If ``A`` has non-finite entries.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("matrix exponential of non-finite entries")
    n = A.shape[-1]
    X = A.reshape(-1, n, n)
    out = np.empty_like(X)
    norms = np.abs(X).sum(axis=-2).max(axis=-1)
    todo = np.ones(len(X), dtype=bool)
    for m in (3, 5, 7, 9):
        sel = todo & (norms <= _THETA[m])
        if sel.any():
            out[sel] = _pade(X[sel], m)
            todo &= ~sel
    if todo.any():
        idx = np.flatnonzero(todo)
        s = np.maximum(0, np.ceil(np.log2(norms[idx] / _THETA[13]))).astype(int)
        F = _pade(X[idx] / (2.0 ** s)[:, None, None], 13)
        for k in range(int(s.max(initial=0))):
            sq = s > k
            F[sq] = F[sq] @ F[sq]
        out[idx] = F
    return out.reshape(A.shape)


def expm_sensitivity(A, dA, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Exponential and its directional derivative via the block-triangular identity.

    Exponentiates ``[[A, dA], [0, A]] * tau`` once; the lower-right block is
    ``exp(A tau)`` and the upper-right block is ``Psi(tau)``, the solution
    of ``Psi' = A Psi + dA exp(A t)``, ``Psi(0) = 0``, i.e. the derivative of
    ``exp(A tau)`` along ``dA``. Works on stacks.

    Returns
    -------
    (expA, Psi)
    """
    A = np.asarray(A, dtype=float)
    dA = np.asarray(dA, dtype=float)
    A, dA = np.broadcast_arrays(A, dA)
    n = A.shape[-1]
    big = np.zeros(A.shape[:-2] + (2 * n, 2 * n))
    big[..., :n, :n] = A
    big[..., :n, n:] = dA
    big[..., n:, n:] = A
    E = matrix_exponential(big * tau)
    return E[..., n:, n:], E[..., :n, n:]
