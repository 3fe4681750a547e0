"""Time-scan kernels for LIF and leaky-integrator layers.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
that loops over time with batch-vectorized operations.  The numba path is used
when numba imports and ``TEMPO_SNN_NUMBA`` is not set to ``0``.  Both paths
compute the same arithmetic in the same order per element, so results agree
bit-for-bit in double precision.

Array layout is ``(batch, time, neurons)`` everywhere.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_wants_numba():
    flag = os.environ.get("TEMPO_SNN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


# ---------------------------------------------------------------------------
# numpy reference path


def lif_forward_np(current, alpha, u_th, beta, relaxed):
    B, T, N = current.shape
    u = np.empty_like(current)
    s = np.empty_like(current)
    u_prev = np.zeros((B, N), dtype=current.dtype)
    s_prev = np.zeros((B, N), dtype=current.dtype)
    gain = 1.0 - alpha
    for t in range(T):
        u_t = alpha * u_prev + gain * current[:, t] - u_th * s_prev
        if relaxed:
            s_t = np.clip((u_t - u_th + beta) / (2.0 * beta), 0.0, 1.0)
        else:
            s_t = (u_t >= u_th).astype(current.dtype)
        u[:, t] = u_t
        s[:, t] = s_t
        u_prev = u_t
        s_prev = s_t
    return u, s


def lif_backward_np(grad_s, current, u, alpha, u_th, beta, reset_grad):
    B, T, N = u.shape
    grad_c = np.empty_like(u)
    partial = np.zeros((B, N), dtype=np.float64)
    gu_next = np.zeros((B, N), dtype=u.dtype)
    gain = 1.0 - alpha
    height = 1.0 / (2.0 * beta) if beta > 0 else 0.0
    for t in range(T - 1, -1, -1):
        gs = grad_s[:, t]
        if reset_grad:
            gs = gs - u_th * gu_next
        box = (np.abs(u[:, t] - u_th) < beta) * height
        gu = gs * box + alpha * gu_next
        grad_c[:, t] = gain * gu
        if t > 0:
            u_prev = u[:, t - 1]
        else:
            u_prev = np.zeros((B, N), dtype=u.dtype)
        partial += gu * (u_prev - current[:, t])
        gu_next = gu
    return grad_c, partial


def leaky_forward_np(current, alpha):
    B, T, N = current.shape
    out = np.empty_like(current)
    o = np.zeros((B, N), dtype=current.dtype)
    gain = 1.0 - alpha
    for t in range(T):
        o = alpha * o + gain * current[:, t]
        out[:, t] = o
    return out


def leaky_backward_np(grad_out, alpha):
    B, T, N = grad_out.shape
    grad_c = np.empty_like(grad_out)
    go = np.zeros((B, N), dtype=grad_out.dtype)
    gain = 1.0 - alpha
    for t in range(T - 1, -1, -1):
        go = grad_out[:, t] + alpha * go
        grad_c[:, t] = gain * go
    return grad_c


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def lif_forward_nb(current, alpha, u_th, beta, relaxed):
        B, T, N = current.shape
        u = np.empty_like(current)
        s = np.empty_like(current)
        for b in range(B):
            for n in range(N):
                a = alpha[n]
                g = 1.0 - a
                u_prev = 0.0
                s_prev = 0.0
                for t in range(T):
                    u_t = a * u_prev + g * current[b, t, n] - u_th * s_prev
                    if relaxed:
                        s_t = (u_t - u_th + beta) / (2.0 * beta)
                        if s_t < 0.0:
                            s_t = 0.0
                        elif s_t > 1.0:
                            s_t = 1.0
                    else:
                        s_t = 1.0 if u_t >= u_th else 0.0
                    u[b, t, n] = u_t
                    s[b, t, n] = s_t
                    u_prev = u_t
                    s_prev = s_t
        return u, s

    @numba.njit(cache=True)
    def lif_backward_nb(grad_s, current, u, alpha, u_th, beta, reset_grad):
        B, T, N = u.shape
        grad_c = np.empty_like(u)
        # per-batch partial sums, reduced in fixed batch order below
        partial = np.zeros((B, N), dtype=np.float64)
        height = 1.0 / (2.0 * beta) if beta > 0 else 0.0
        for b in range(B):
            for n in range(N):
                a = alpha[n]
                g = 1.0 - a
                gu_next = 0.0
                acc = 0.0
                for t in range(T - 1, -1, -1):
                    gs = grad_s[b, t, n]
                    if reset_grad:
                        gs = gs - u_th * gu_next
                    box = height if abs(u[b, t, n] - u_th) < beta else 0.0
                    gu = gs * box + a * gu_next
                    grad_c[b, t, n] = g * gu
                    u_prev = u[b, t - 1, n] if t > 0 else 0.0
                    acc += gu * (u_prev - current[b, t, n])
                    gu_next = gu
                partial[b, n] = acc
        return grad_c, partial

    @numba.njit(cache=True)
    def leaky_forward_nb(current, alpha):
        B, T, N = current.shape
        out = np.empty_like(current)
        for b in range(B):
            for n in range(N):
                a = alpha[n]
                g = 1.0 - a
                o = 0.0
                for t in range(T):
                    o = a * o + g * current[b, t, n]
                    out[b, t, n] = o
        return out

    @numba.njit(cache=True)
    def leaky_backward_nb(grad_out, alpha):
        B, T, N = grad_out.shape
        grad_c = np.empty_like(grad_out)
        for b in range(B):
            for n in range(N):
                a = alpha[n]
                g = 1.0 - a
                go = 0.0
                for t in range(T - 1, -1, -1):
                    go = grad_out[b, t, n] + a * go
                    grad_c[b, t, n] = g * go
        return grad_c


# ---------------------------------------------------------------------------
# dispatch


def _pick(use_numba):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return use_numba


def lif_forward(current, alpha, u_th, beta, relaxed=False, use_numba=None):
    """Scan the LIF recurrence over time; returns ``(u, s)``."""
    current = np.ascontiguousarray(current)
    alpha = np.ascontiguousarray(alpha, dtype=current.dtype)
    if _pick(use_numba):
        return lif_forward_nb(current, alpha, u_th, beta, relaxed)
    return lif_forward_np(current, alpha, u_th, beta, relaxed)


def lif_backward(grad_s, current, u, alpha, u_th, beta, reset_grad=True,
                 use_numba=None):
    """Reverse scan of the LIF recurrence; returns ``(grad_current, grad_alpha)``."""
    grad_s = np.ascontiguousarray(grad_s, dtype=u.dtype)
    alpha = np.ascontiguousarray(alpha, dtype=u.dtype)
    if _pick(use_numba):
        grad_c, partial = lif_backward_nb(grad_s, np.ascontiguousarray(current),
                                          np.ascontiguousarray(u), alpha,
                                          u_th, beta, reset_grad)
    else:
        grad_c, partial = lif_backward_np(grad_s, current, u, alpha, u_th, beta,
                                          reset_grad)
    # fixed batch order keeps the reduction independent of the backend
    grad_alpha = np.zeros(u.shape[2], dtype=np.float64)
    for b in range(partial.shape[0]):
        grad_alpha += partial[b]
    return grad_c, grad_alpha


def leaky_forward(current, alpha, use_numba=None):
    current = np.ascontiguousarray(current)
    alpha = np.ascontiguousarray(alpha, dtype=current.dtype)
    if _pick(use_numba):
        return leaky_forward_nb(current, alpha)
    return leaky_forward_np(current, alpha)


def leaky_backward(grad_out, alpha, use_numba=None):
    grad_out = np.ascontiguousarray(grad_out)
    alpha = np.ascontiguousarray(alpha, dtype=grad_out.dtype)
    if _pick(use_numba):
        return leaky_backward_nb(grad_out, alpha)
    return leaky_backward_np(grad_out, alpha)
