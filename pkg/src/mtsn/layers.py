"""Parametric building blocks: linear maps and a gated recurrent unit.

The GRU uses the reset-gate-inside-candidate formulation:

    r  = sigmoid(W_r x + U_r h + b_r)
    z  = sigmoid(W_z x + U_z h + b_z)
    n  = tanh(W_n x + b_n + r * (U_n h + c_n))
    h' = (1 - z) * n + z * h

``gru_step`` builds one step out of primitive tensor ops, which makes it
independently differentiable and easy to verify. ``gru_sequence`` is the
production path: it precomputes the input projection for all steps with
one gemm, runs the recurrence through the compiled kernels, and registers
a single fused tape entry whose hand-derived backward is checked against
the step-by-step composite in the tests.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from . import kernels
from . import tensor as tt
from .errors import ContractError, DimensionError, EmptySequenceError
from .tensor import Tensor


def init_param(rng: np.random.Generator, fan_in: int, shape: tuple, dtype=np.float64) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    if fan_in < 1:
        raise ContractError(f"init_param: fan_in must be positive, got {fan_in}")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LinearLayer:
    """y = W x + b, applied row-wise to sequences."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64, name: str = "linear"):
        if in_dim < 1 or out_dim < 1:
            raise ContractError(f"{name}: dimensions must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.w = Tensor(init_param(rng, in_dim, (out_dim, in_dim), dtype),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(((f"{self.name}.w", self.w), (f"{self.name}.b", self.b)))

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """Apply the layer to a vector (in,) or to each row of (T, in)."""
    return tt.affine(x, layer.w, layer.b)


class GRULayer:
    """Single-direction GRU with separately named gate parameters."""

    def __init__(self, in_dim: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float64, name: str = "gru"):
        if in_dim < 1 or hidden_size < 1:
            raise ContractError(
                f"{name}: dimensions must be positive, got {in_dim}->{hidden_size}")
        self.in_dim = in_dim
        self.hidden_size = hidden_size
        self.name = name
        self.dtype = np.dtype(dtype)

        def wmat():
            return init_param(rng, in_dim, (hidden_size, in_dim), dtype)

        def umat():
            return init_param(rng, hidden_size, (hidden_size, hidden_size), dtype)

        def bias():
            return np.zeros(hidden_size, dtype=dtype)

        self.w_r = Tensor(wmat(), requires_grad=True, name=f"{name}.w_r")
        self.w_z = Tensor(wmat(), requires_grad=True, name=f"{name}.w_z")
        self.w_n = Tensor(wmat(), requires_grad=True, name=f"{name}.w_n")
        self.u_r = Tensor(umat(), requires_grad=True, name=f"{name}.u_r")
        self.u_z = Tensor(umat(), requires_grad=True, name=f"{name}.u_z")
        self.u_n = Tensor(umat(), requires_grad=True, name=f"{name}.u_n")
        self.b_r = Tensor(bias(), requires_grad=True, name=f"{name}.b_r")
        self.b_z = Tensor(bias(), requires_grad=True, name=f"{name}.b_z")
        self.b_n = Tensor(bias(), requires_grad=True, name=f"{name}.b_n")
        self.c_n = Tensor(bias(), requires_grad=True, name=f"{name}.c_n")

    def params(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for field in ("w_r", "w_z", "w_n", "u_r", "u_z", "u_n",
                      "b_r", "b_z", "b_n", "c_n"):
            out[f"{self.name}.{field}"] = getattr(self, field)
        return out

    def forward(self, xs: Tensor, h0: Optional[Tensor] = None) -> Tensor:
        return gru_sequence(self, xs, h0)


def gru_step(layer: GRULayer, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One recurrence step composed from primitive ops (reference path)."""
    if x_t.data.ndim != 1 or x_t.shape[0] != layer.in_dim:
        raise DimensionError(
            f"gru_step: input shape {x_t.shape} does not match in_dim {layer.in_dim}")
    if h_prev.data.ndim != 1 or h_prev.shape[0] != layer.hidden_size:
        raise DimensionError(
            f"gru_step: state shape {h_prev.shape} does not match hidden size "
            f"{layer.hidden_size}")
    r = tt.sigmoid(tt.add(tt.affine(x_t, layer.w_r, layer.b_r),
                          tt.matmul(layer.u_r, h_prev)))
    z = tt.sigmoid(tt.add(tt.affine(x_t, layer.w_z, layer.b_z),
                          tt.matmul(layer.u_z, h_prev)))
    u = tt.add(tt.matmul(layer.u_n, h_prev), layer.c_n)
    n = tt.tanh(tt.add(tt.affine(x_t, layer.w_n, layer.b_n), tt.mul(r, u)))
    one = Tensor(np.ones(1, dtype=layer.dtype))
    return tt.add(tt.mul(tt.sub(one, z), n), tt.mul(z, h_prev))


def gru_sequence(layer: GRULayer, xs: Tensor, h0: Optional[Tensor] = None) -> Tensor:
    """All hidden states for a (T, in) sequence; h0 defaults to zeros.

    Registers one fused tape entry. The forward precomputes the input
    projection for every step in a single gemm and hands only the
    sequential part to the compiled recurrence kernel; the backward turns
    the kernel's per-step gate gradients into weight gradients with two
    more gemms.
    """
    if xs.data.ndim != 2:
        raise DimensionError(f"gru_sequence expects (T, in), got {xs.shape}")
    T = xs.shape[0]
    if T < 1:
        raise EmptySequenceError("gru_sequence: empty sequence")
    if xs.shape[1] != layer.in_dim:
        raise DimensionError(
            f"gru_sequence: input width {xs.shape[1]} does not match in_dim {layer.in_dim}")
    H = layer.hidden_size
    if h0 is not None and (h0.data.ndim != 1 or h0.shape[0] != H):
        raise DimensionError(f"gru_sequence: h0 shape {h0.shape} does not match H={H}")

    dtype = layer.dtype
    h0_data = np.zeros(H, dtype=dtype) if h0 is None else h0.data.astype(dtype, copy=False)

    W = np.concatenate((layer.w_r.data, layer.w_z.data, layer.w_n.data), axis=0)
    bcat = np.concatenate((layer.b_r.data, layer.b_z.data, layer.b_n.data))
    xs_data = xs.data.astype(dtype, copy=False)
    A = np.ascontiguousarray(xs_data @ W.T + bcat)

    u_r = np.ascontiguousarray(layer.u_r.data)
    u_z = np.ascontiguousarray(layer.u_z.data)
    u_n = np.ascontiguousarray(layer.u_n.data)
    hs, R, Z, N, U = kernels.forward_core(A, u_r, u_z, u_n, layer.c_n.data, h0_data)

    inputs = (xs, layer.w_r, layer.w_z, layer.w_n, layer.u_r, layer.u_z,
              layer.u_n, layer.b_r, layer.b_z, layer.b_n, layer.c_n)
    if h0 is not None:
        inputs = inputs + (h0,)

    def bwd(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dA, dUrows, dh0 = kernels.backward_core(
            g, hs, R, Z, N, U, h0_data,
            np.ascontiguousarray(u_r.T), np.ascontiguousarray(u_z.T),
            np.ascontiguousarray(u_n.T))
        h_prev = np.vstack((h0_data[None, :], hs[:-1]))
        if xs.requires_grad:
            dx = (dA @ W).astype(xs.dtype, copy=False)
        else:
            dx = None
        dW = dA.T @ xs_data
        db = dA.sum(axis=0)
        dU_r = dA[:, :H].T @ h_prev
        dU_z = dA[:, H:2 * H].T @ h_prev
        dU_n = dUrows.T @ h_prev
        dc_n = dUrows.sum(axis=0)
        grads = (dx, dW[:H], dW[H:2 * H], dW[2 * H:], dU_r, dU_z, dU_n,
                 db[:H], db[H:2 * H], db[2 * H:], dc_n)
        if h0 is not None:
            grads = grads + (dh0,)
        return grads

    return tt.custom_op("gru_sequence", inputs, hs, bwd)
