"""Selective state-space scan: input-dependent discretisation and a linear-time recurrence.

For each channel ``d`` and state index ``n``::

    h[t] = exp(delta[t, d] * A[d, n]) * h[t-1] + delta[t, d] * B[t, n] * x[t, d]
    y[t, d] = sum_n C[t, n] * h[t, d, n] + D_skip[d] * x[t, d]

``scan_sequential`` runs the loop with ordinary tensor ops and serves as the
reference; ``scan_associative`` evaluates the same recurrence through the
associative pair composition in chunks, with a hand-written backward, one
cache-sized block of steps at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class SSMParams(Module):
    A_log: Tensor    # D x N
    W_delta: Tensor  # D x D
    b_delta: Tensor  # D
    W_B: Tensor      # D x N
    W_C: Tensor      # D x N
    D_skip: Tensor   # D

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def init(cls, channels: int, state_dim: int = 16, rng: np.random.Generator | None = None,
             delta_init: float = 0.01) -> "SSMParams":
        rng = np.random.default_rng(0) if rng is None else rng
        a = np.tile(np.linspace(1.0, state_dim, state_dim), (channels, 1))
        scale = 1.0 / math.sqrt(channels)
        return cls(
            A_log=param(np.log(a)),
            W_delta=param(rng.uniform(-scale, scale, size=(channels, channels)) * 0.1),
            b_delta=param(np.full(channels, math.log(math.expm1(delta_init)))),
            W_B=param(rng.uniform(-scale, scale, size=(channels, state_dim))),
            W_C=param(rng.uniform(-scale, scale, size=(channels, state_dim))),
            D_skip=param(np.ones(channels)),
        )


def discretize(delta: Tensor, A: Tensor, B: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for the state matrix, Euler step for the input matrix.

    Shapes: delta L x D, A D x N, B L x N -> (A_bar, B_bar) both L x D x N.
    """
    delta, A, B = T._wrap(delta), T._wrap(A), T._wrap(B)
    if np.any(delta.data <= 0):
        raise ContractError("discretize: delta must be strictly positive")
    L, D = delta.shape
    if A.shape[0] != D or B.shape[0] != L or B.shape[1] != A.shape[1]:
        raise ShapeError(f"discretize: delta {delta.shape}, A {A.shape}, B {B.shape} disagree")
    N = A.shape[1]
    d3 = T.reshape(delta, (L, D, 1))
    a_bar = T.exp(d3 * T.reshape(A, (1, D, N)))
    b_bar = d3 * T.reshape(B, (L, 1, N))
    return a_bar, b_bar


def project(params: SSMParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Input-dependent delta, B, C and the (negative) state matrix A."""
    x = T._wrap(x)
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise ShapeError(f"scan input {x.shape} does not match {params.channels} channels")
    delta = T.softplus(x @ params.W_delta + params.b_delta)
    B = x @ params.W_B
    C = x @ params.W_C
    A = -T.exp(params.A_log)
    return delta, A, B, C


def recurrence_sequential(a_bar: Tensor, b_bar: Tensor, x: Tensor, C: Tensor, D_skip: Tensor) -> Tensor:
    L, D, N = a_bar.shape
    h = None
    ys = []
    for t in range(L):
        u = b_bar[t] * T.reshape(x[t], (D, 1))
        h = u if h is None else a_bar[t] * h + u
        y = (h * T.reshape(C[t], (1, N))).sum(axis=1) + D_skip * x[t]
        ys.append(T.reshape(y, (1, D)))
    return T.concat(0, ys)


def scan_sequential(params: SSMParams, x: Tensor) -> Tensor:
    delta, A, B, C = project(params, x)
    a_bar, b_bar = discretize(delta, A, B)
    return recurrence_sequential(a_bar, b_bar, T._wrap(x), C, params.D_skip)


# associative scan -----------------------------------------------------


def _chunk_size(L: int) -> int:
    return max(1, int(math.isqrt(L)))


def linear_scan_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All prefixes of h[t] = a[t] h[t-1] + b[t] along axis 0, h[-1] = 0.

    Elements compose as (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2). The sequence
    is cut into ~sqrt(L) chunks; prefixes inside every chunk are formed in
    lock-step, chunk carries are combined left to right, and the carries are
    folded back into each chunk.
    """
    L = a.shape[0]
    c = _chunk_size(L)
    n_chunks = -(-L // c)
    pad = n_chunks * c - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:], dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + b.shape[1:], dtype=b.dtype)])
    a = a.reshape((n_chunks, c) + a.shape[1:])
    b = b.reshape((n_chunks, c) + b.shape[1:])
    pa = np.empty_like(a)
    pb = np.empty_like(b)
    pa[:, 0] = a[:, 0]
    pb[:, 0] = b[:, 0]
    for i in range(1, c):
        pa[:, i] = pa[:, i - 1] * a[:, i]
        pb[:, i] = a[:, i] * pb[:, i - 1] + b[:, i]
    carry = np.zeros((n_chunks,) + b.shape[2:], dtype=b.dtype)
    for k in range(1, n_chunks):
        carry[k] = pa[k - 1, -1] * carry[k - 1] + pb[k - 1, -1]
    h = pb + pa * carry[:, None]
    return h.reshape((n_chunks * c,) + h.shape[2:])[:L]


def linear_recurrence(a: Tensor, b: Tensor, h0: Tensor | None = None) -> Tensor:
    """Differentiable wrapper around :func:`linear_scan_numpy`, optionally from state ``h0``.

    The adjoint obeys the reversed recurrence lam[t] = g[t] + a[t+1] lam[t+1],
    which is evaluated with the same chunked scan.
    """
    a, b = T._wrap(a), T._wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"linear_recurrence: {a.shape} vs {b.shape}")
    if h0 is None:
        h_init = np.zeros_like(a.data[:1])
        parents = (a, b)
    else:
        h0 = T._wrap(h0)
        if h0.shape != a.shape[1:]:
            raise ShapeError(f"linear_recurrence: initial state {h0.shape} vs steps {a.shape}")
        h_init = h0.data[None]
        parents = (a, b, h0)
    bd = b.data
    if h0 is not None:
        bd = bd.copy()
        bd[0] += a.data[0] * h0.data
    h = linear_scan_numpy(a.data, bd)

    def backward(g):
        a_next = np.concatenate([a.data[1:], np.zeros_like(a.data[:1])])
        lam = linear_scan_numpy(a_next[::-1], g[::-1])[::-1]
        h_prev = np.concatenate([h_init, h[:-1]])
        grads = (lam * h_prev, lam)
        return grads if h0 is None else grads + (a.data[0] * lam[0],)

    return T.custom_op(h, parents, backward)


def recurrence_associative(a_bar: Tensor, b_bar: Tensor, x: Tensor, C: Tensor, D_skip: Tensor) -> Tensor:
    return _recurrence_block(a_bar, b_bar, x, C, D_skip, None)[0]


def _recurrence_block(a_bar, b_bar, x, C, D_skip, h0):
    L, D, N = a_bar.shape
    u = b_bar * T.reshape(x, (L, D, 1))
    h = linear_recurrence(a_bar, u, h0)
    return (h * T.reshape(C, (L, 1, N))).sum(axis=2) + D_skip * x, h[-1]


# blocks of this many steps keep the L x D x N intermediates cache-resident, so
# the cost stays linear in L instead of degrading once they spill out of L2
BLOCK = 1024


def scan_associative(params: SSMParams, x: Tensor, block: int = BLOCK) -> Tensor:
    x = T._wrap(x)
    if block < 1:
        raise ContractError("scan_associative: block must be positive")
    if x.shape[0] <= block:
        delta, A, B, C = project(params, x)
        a_bar, b_bar = discretize(delta, A, B)
        return recurrence_associative(a_bar, b_bar, x, C, params.D_skip)
    ys, h = [], None
    for start in range(0, x.shape[0], block):
        xb = x[start:start + block]
        delta, A, B, C = project(params, xb)
        a_bar, b_bar = discretize(delta, A, B)
        y, h = _recurrence_block(a_bar, b_bar, xb, C, params.D_skip, h)
        ys.append(y)
    return T.concat(0, ys)


def ssm_block(params: SSMParams, fmap: Tensor, method: str = "associative") -> Tensor:
    """Bidirectional scan over the row-major flattening of a C x H x W map."""
    scan = scan_associative if method == "associative" else scan_sequential
    fmap = T._wrap(fmap)
    if fmap.ndim != 3:
        raise ShapeError(f"ssm_block expects C x H x W, got {fmap.shape}")
    c, h, w = fmap.shape
    seq = T.transpose(T.reshape(fmap, (c, h * w)), (1, 0))
    rev = np.arange(h * w)[::-1].copy()
    fwd = scan(params, seq)
    bwd = T.take_rows(scan(params, T.take_rows(seq, rev)), rev)
    out = (fwd + bwd) * 0.5
    return T.reshape(T.transpose(out, (1, 0)), (c, h, w))
