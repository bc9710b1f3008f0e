"""Hot recurrence kernels: numba-jitted with a pure-numpy fallback.

The GRU is the only part of the models that cannot be vectorised over
time, so only its sequential loops live here, in two byte-compatible
flavours. Everything batched (input projections, weight-gradient gemms)
stays in plain numpy at the call site.

Backend selection, via the ``MTSN_NUMBA`` environment variable read at
import time:

* unset/empty -- use numba when importable, else fall back silently;
* ``0``/``false``/``off``/``no`` -- force the pure-numpy path;
* ``1``/``true``/``on``/``yes`` -- require numba, fail loudly if missing.

``backend()`` reports which flavour is active. Both flavours share one
calling convention:

``forward_core(A, Ur, Uz, Un, cn, h0)``
    ``A`` is the precomputed input projection ``xs @ W.T + b`` laid out
    ``(T, 3H)`` as ``[reset | update | candidate]`` blocks. Returns
    ``(hs, R, Z, N, U)``: hidden states and the per-step gate/candidate
    caches the backward pass needs (``U`` holds ``Un @ h_prev + cn``).

``backward_core(gout, hs, R, Z, N, U, h0, UrT, UzT, UnT)``
    ``gout`` is the loss gradient at each hidden state, the ``*T``
    matrices are pre-transposed contiguous copies of the recurrent
    weights. Returns ``(dA, dUrows, dh0)`` where ``dA`` is the gradient
    at the input projection and ``dUrows[t]`` is the gradient at
    ``Un @ h_prev + cn`` for step ``t``; the caller turns both into
    weight gradients with two gemms.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import MtsnError

# ---------------------------------------------------------------------------
# pure-numpy flavour


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _forward_numpy(A, Ur, Uz, Un, cn, h0):
    T = A.shape[0]
    H = h0.shape[0]
    hs = np.empty((T, H), dtype=A.dtype)
    R = np.empty((T, H), dtype=A.dtype)
    Z = np.empty((T, H), dtype=A.dtype)
    N = np.empty((T, H), dtype=A.dtype)
    U = np.empty((T, H), dtype=A.dtype)
    h = h0
    for t in range(T):
        u = Un @ h + cn
        r = _sigmoid(A[t, :H] + Ur @ h)
        z = _sigmoid(A[t, H:2 * H] + Uz @ h)
        n = np.tanh(A[t, 2 * H:] + r * u)
        h = n - z * n + z * h
        R[t] = r
        Z[t] = z
        N[t] = n
        U[t] = u
        hs[t] = h
    return hs, R, Z, N, U


def _backward_numpy(gout, hs, R, Z, N, U, h0, UrT, UzT, UnT):
    T, H = gout.shape
    dA = np.empty((T, 3 * H), dtype=gout.dtype)
    dUrows = np.empty((T, H), dtype=gout.dtype)
    dh = np.zeros(H, dtype=gout.dtype)
    for t in range(T - 1, -1, -1):
        g = gout[t] + dh
        h_prev = hs[t - 1] if t > 0 else h0
        r = R[t]
        z = Z[t]
        n = N[t]
        u = U[t]
        gm = g - g * z
        da_n = gm - gm * n * n
        gz = g * (h_prev - n) * z
        da_z = gz - gz * z
        dr = da_n * u * r
        da_r = dr - dr * r
        du = da_n * r
        dh = g * z + UrT @ da_r + UzT @ da_z + UnT @ du
        dA[t, :H] = da_r
        dA[t, H:2 * H] = da_z
        dA[t, 2 * H:] = da_n
        dUrows[t] = du
    return dA, dUrows, dh


# ---------------------------------------------------------------------------
# numba flavour (same math, explicit loops where it helps the compiler)


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def sig_inplace(x, out):
        for i in range(x.shape[0]):
            v = x[i]
            if v >= 0.0:
                out[i] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out[i] = e / (1.0 + e)

    @njit(cache=True)
    def forward(A, Ur, Uz, Un, cn, h0):
        T = A.shape[0]
        H = h0.shape[0]
        hs = np.empty((T, H), dtype=A.dtype)
        R = np.empty((T, H), dtype=A.dtype)
        Z = np.empty((T, H), dtype=A.dtype)
        N = np.empty((T, H), dtype=A.dtype)
        U = np.empty((T, H), dtype=A.dtype)
        h = h0.copy()
        for t in range(T):
            u = np.dot(Un, h) + cn
            ar = A[t, :H] + np.dot(Ur, h)
            az = A[t, H:2 * H] + np.dot(Uz, h)
            r = np.empty(H, dtype=A.dtype)
            z = np.empty(H, dtype=A.dtype)
            sig_inplace(ar, r)
            sig_inplace(az, z)
            n = np.tanh(A[t, 2 * H:] + r * u)
            h = n - z * n + z * h
            R[t] = r
            Z[t] = z
            N[t] = n
            U[t] = u
            hs[t] = h
        return hs, R, Z, N, U

    @njit(cache=True)
    def backward(gout, hs, R, Z, N, U, h0, UrT, UzT, UnT):
        T = gout.shape[0]
        H = gout.shape[1]
        dA = np.empty((T, 3 * H), dtype=gout.dtype)
        dUrows = np.empty((T, H), dtype=gout.dtype)
        dh = np.zeros(H, dtype=gout.dtype)
        for t in range(T - 1, -1, -1):
            g = gout[t] + dh
            if t > 0:
                h_prev = hs[t - 1]
            else:
                h_prev = h0
            r = R[t]
            z = Z[t]
            n = N[t]
            u = U[t]
            gm = g - g * z
            da_n = gm - gm * n * n
            gz = g * (h_prev - n) * z
            da_z = gz - gz * z
            dr = da_n * u * r
            da_r = dr - dr * r
            du = da_n * r
            dh = g * z + np.dot(UrT, da_r) + np.dot(UzT, da_z) + np.dot(UnT, du)
            dA[t, :H] = da_r
            dA[t, H:2 * H] = da_z
            dA[t, 2 * H:] = da_n
            dUrows[t] = du
        return dA, dUrows, dh

    return forward, backward


# ---------------------------------------------------------------------------
# selection

_TRUTHY = ("1", "true", "on", "yes")
_FALSY = ("0", "false", "off", "no")


def _select():
    flag = os.environ.get("MTSN_NUMBA", "").strip().lower()
    if flag in _FALSY:
        return "numpy", _forward_numpy, _backward_numpy
    try:
        fwd, bwd = _build_numba()
        return "numba", fwd, bwd
    except ImportError:
        if flag in _TRUTHY:
            raise MtsnError(
                "MTSN_NUMBA requested the numba backend but numba is not importable")
        return "numpy", _forward_numpy, _backward_numpy


_BACKEND, forward_core, backward_core = _select()


def backend() -> str:
    """Name of the active kernel flavour: ``"numba"`` or ``"numpy"``."""
    return _BACKEND


def numpy_cores():
    """The pure-numpy twins, regardless of the active backend."""
    return _forward_numpy, _backward_numpy


def warmup(dtype=np.float64) -> None:
    """Trigger JIT compilation on a toy problem so timed runs stay honest."""
    H, T, d3 = 4, 3, 12
    rng = np.random.default_rng(0)
    A = rng.standard_normal((T, d3)).astype(dtype)
    Ur, Uz, Un = (np.ascontiguousarray(rng.standard_normal((H, H)), dtype=dtype)
                  for _ in range(3))
    cn = np.zeros(H, dtype=dtype)
    h0 = np.zeros(H, dtype=dtype)
    hs, R, Z, N, U = forward_core(A, Ur, Uz, Un, cn, h0)
    gout = np.ones_like(hs)
    backward_core(gout, hs, R, Z, N, U, h0,
                  np.ascontiguousarray(Ur.T), np.ascontiguousarray(Uz.T),
                  np.ascontiguousarray(Un.T))
