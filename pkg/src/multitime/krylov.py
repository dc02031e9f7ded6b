"""Lanczos approximation of ``exp(-i tau H) v`` for Hermitian ``H``.

Each substep builds an orthonormal Krylov basis (full reorthogonalization),
exponentiates the small tridiagonal matrix through its eigendecomposition,
and picks the largest step whose a-posteriori error estimate
``beta * h_{m+1,m} * |[exp(-i h T)]_{m,0}|`` fits the local budget
``tol * |h| / |tau|``.  Shrinking the step reuses the same basis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class KrylovConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved error estimate {residual:.3e})")
        self.residual = residual


@dataclass
class KrylovInfo:
    substeps: int = 0
    matvecs: int = 0
    error_estimate: float = 0.0


def lanczos(matvec, v0: np.ndarray, m: int):
    """Return ``(V, alpha, beta, k)``; ``V[:k]`` spans the Krylov space, ``beta[k-1]`` couples to the next vector."""
    n = v0.size
    V = np.empty((m + 1, n), dtype=complex)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    V[0] = v0
    for j in range(m):
        w = matvec(V[j])
        alpha[j] = np.vdot(V[j], w).real
        w = w - alpha[j] * V[j]
        if j > 0:
            w = w - beta[j - 1] * V[j - 1]
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            w = w - V[: j + 1].T @ (V[: j + 1].conj() @ w)
        b = np.linalg.norm(w)
        beta[j] = b
        if b < 1e-14 * max(1.0, abs(alpha[j])):
            return V, alpha, beta, j + 1
        if j + 1 <= m:
            V[j + 1] = w / b
    return V, alpha, beta, m


def expm_krylov(
    matvec,
    v: np.ndarray,
    tau: float,
    krylov_dim: int = 30,
    tol: float = 1e-10,
    max_step: float | None = None,
    max_substeps: int = 100000,
    info: KrylovInfo | None = None,
) -> np.ndarray:
    """``exp(-i tau H) v`` with ``H`` given by ``matvec`` on flat vectors.

    ``tol`` bounds the accumulated error relative to ``|v|``.  Negative
    ``tau`` evolves backwards.
    """
    if krylov_dim < 2:
        raise ValueError("krylov_dim must be at least 2")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    info = info if info is not None else KrylovInfo()
    w = np.array(v, dtype=complex, copy=True).ravel()
    total = abs(tau)
    if total == 0:
        return w.reshape(np.shape(v))
    sgn = 1.0 if tau > 0 else -1.0
    beta0 = np.linalg.norm(w)
    if beta0 == 0:
        return w.reshape(np.shape(v))
    done = 0.0
    h_next = total if max_step is None else min(total, max_step)
    while total - done > 1e-15 * total:
        if info.substeps >= max_substeps:
            raise KrylovConvergenceError("substep budget exhausted", info.error_estimate)
        beta = np.linalg.norm(w)
        V, alpha, offd, k = lanczos(matvec, w / beta, krylov_dim)
        info.matvecs += k
        T = np.diag(alpha[:k]) + np.diag(offd[: k - 1], 1) + np.diag(offd[: k - 1], -1)
        evals, evecs = np.linalg.eigh(T)
        coupling = offd[k - 1] if k == krylov_dim else 0.0
        first = evecs[0].conj()

        def propagate(h):
            return evecs @ (np.exp(-1j * sgn * h * evals) * first)

        h = min(h_next, total - done)
        if max_step is not None:
            h = min(h, max_step)
        while True:
            y = propagate(h)
            err = beta * coupling * abs(y[-1])
            budget = tol * beta0 * h / total
            if err <= budget or coupling == 0:
                break
            h *= max(0.1, 0.8 * (budget / err) ** (1.0 / max(k - 1, 1)))
            if h < 1e-13 * total:
                raise KrylovConvergenceError("step size collapsed", err)
        w = beta * (V[:k].T @ y)
        done += h
        info.substeps += 1
        info.error_estimate += err
        # let the step grow again when the estimate leaves headroom
        grow = 2.0 if err == 0 else min(2.0, 0.8 * (budget / err) ** (1.0 / max(k - 1, 1)))
        h_next = h * max(grow, 1.0)
    return w.reshape(np.shape(v))
