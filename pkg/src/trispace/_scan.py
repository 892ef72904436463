"""Compiled selective-scan kernels (forward and adjoint) over a diagonal state matrix.

Layouts: ``u, delta`` are ``(N, L, D)``; ``B, C`` are ``(N, L, S)``; ``A`` is
``(S,)`` shared by every channel; ``mask`` is ``(N, L)``.  Masked steps keep
the state and emit their input unchanged.

``variant`` selects the input discretization coefficient multiplying ``B``:
0 = zero-order hold ``expm1(dt*a)/a``, 1 = literal double-``dt`` form
``dt**2 * expm1(dt*a)/a``, 2 = Euler ``dt``.
"""

import warnings

import numpy as np
from numba import njit, prange

# an outdated system TBB only means numba falls back to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB version")

ZOH, EXTRA_DELTA, EULER = 0, 1, 2
VARIANTS = {"zoh": ZOH, "extra_delta": EXTRA_DELTA, "euler": EULER}


@njit(inline="always")
def _coef(dt, inv_a, em1, variant):
    if variant == ZOH:
        return em1 * inv_a
    if variant == EXTRA_DELTA:
        return dt * dt * em1 * inv_a
    return dt


@njit(inline="always")
def _dcoef(dt, inv_a, em1, variant):
    if variant == ZOH:
        return em1 + 1.0
    if variant == EXTRA_DELTA:
        return 2.0 * dt * em1 * inv_a + dt * dt * (em1 + 1.0)
    return 1.0


@njit(inline="always")
def _fill_em1(dt, A, ladder, buf):
    # buf[s] = expm1(dt * A[s]); with A[s] = (s + 1) * A[0] one expm1 suffices:
    # q**(s+1) - 1 = q * (q**s - 1) + (q - 1)
    if ladder:
        e1 = np.expm1(dt * A[0])
        q = e1 + 1.0
        acc = e1
        for s in range(buf.shape[0]):
            buf[s] = acc
            acc = acc * q + e1
    else:
        for s in range(buf.shape[0]):
            buf[s] = np.expm1(dt * A[s])


def is_ladder(A) -> bool:
    A = np.asarray(A, dtype=np.float64)
    return bool(np.array_equal(A, A[0] * np.arange(1, len(A) + 1)))


@njit(parallel=True, cache=True, fastmath=True)
def scan_forward(u, delta, B, C, A, mask, variant, ladder):
    N, L, D = u.shape
    S = A.shape[0]
    inv_A = 1.0 / A
    y = np.empty_like(u)
    for n in prange(N):
        h = np.zeros((D, S), dtype=u.dtype)
        buf = np.empty(S, dtype=u.dtype)
        for t in range(L):
            if not mask[n, t]:
                for d in range(D):
                    y[n, t, d] = u[n, t, d]
                continue
            for d in range(D):
                dt = delta[n, t, d]
                x = u[n, t, d]
                _fill_em1(dt, A, ladder, buf)
                acc = 0.0
                for s in range(S):
                    em1 = buf[s]
                    h[d, s] = (em1 + 1.0) * h[d, s] + _coef(dt, inv_A[s], em1, variant) * B[n, t, s] * x
                    acc += C[n, t, s] * h[d, s]
                y[n, t, d] = acc
    return y


@njit(parallel=True, cache=True, fastmath=True)
def scan_backward(u, delta, B, C, A, mask, gy, variant, ladder):
    N, L, D = u.shape
    S = A.shape[0]
    inv_A = 1.0 / A
    du = np.zeros_like(u)
    ddelta = np.zeros_like(u)
    dB = np.zeros_like(B)
    dC = np.zeros_like(C)
    for n in prange(N):
        # per channel: recompute states (H[t + 1] = state after step t), then run the adjoint
        H = np.zeros((L + 1, S), dtype=u.dtype)
        E = np.empty((L, S), dtype=u.dtype)
        gh = np.empty(S, dtype=u.dtype)
        for d in range(D):
            for t in range(L):
                if not mask[n, t]:
                    for s in range(S):
                        H[t + 1, s] = H[t, s]
                    continue
                dt = delta[n, t, d]
                x = u[n, t, d]
                _fill_em1(dt, A, ladder, E[t])
                for s in range(S):
                    em1 = E[t, s]
                    H[t + 1, s] = (em1 + 1.0) * H[t, s] + _coef(dt, inv_A[s], em1, variant) * B[n, t, s] * x
            gh[:] = 0.0
            for t in range(L - 1, -1, -1):
                g = gy[n, t, d]
                if not mask[n, t]:
                    du[n, t, d] = g
                    continue
                dt = delta[n, t, d]
                x = u[n, t, d]
                dx = 0.0
                ddt = 0.0
                for s in range(S):
                    em1 = E[t, s]
                    coef = _coef(dt, inv_A[s], em1, variant)
                    ghs = gh[s] + g * C[n, t, s]
                    dC[n, t, s] += g * H[t + 1, s]
                    bs = B[n, t, s]
                    dx += ghs * coef * bs
                    dB[n, t, s] += ghs * coef * x
                    ddt += ghs * (A[s] * (em1 + 1.0) * H[t, s] + _dcoef(dt, inv_A[s], em1, variant) * bs * x)
                    gh[s] = ghs * (em1 + 1.0)
                du[n, t, d] = dx
                ddelta[n, t, d] = ddt
    return du, ddelta, dB, dC
