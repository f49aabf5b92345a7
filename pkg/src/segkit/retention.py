"""Retention kernels: decay masks, position rotation, and the attention forms.

Sequences are ``[..., N, d_model]`` tensors.  Multi-head projections are
stored stacked as ``[heads, d_model, d_k]`` so every head runs in one
batched matmul; outputs concatenate heads along the channel axis.

Axis bookkeeping for the decomposed 2D form (row-major tokens, t = y*W + x):

    tokens [.., H*W, C]  --reshape-->  [.., H, W, C]      rows: attend along x
    rows   [.., H, W, C] --swap H/W--> [.., W, H, C]      columns: attend along y
    result [.., W, H, C] --swap back-> [.., H, W, C] --> [.., H*W, C]
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_KINDS = ("causal", "bidirectional", "manhattan2d", "axial_h", "axial_w")


@dataclass(frozen=True)
class DecayMask:
    matrix: np.ndarray
    kind: str
    gamma: float

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        self.matrix.setflags(write=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"decay gamma must lie in (0, 1], got {gamma}")
    return gamma


def _check_len(n: int, what: str = "N") -> int:
    if int(n) < 1:
        raise ValueError(f"{what} must be >= 1, got {n}")
    return int(n)


@functools.lru_cache(maxsize=64)
def _powers(gamma: float, kmax: int) -> np.ndarray:
    # exact rational powers rounded once; numpy's vectorized pow can be 1 ulp off
    g, acc, out = Fraction(gamma), Fraction(1), []
    for _ in range(kmax + 1):
        out.append(float(acc))
        acc *= g
    arr = np.array(out)
    arr.setflags(write=False)
    return arr


def decay_powers(gamma: float, kmax: int) -> np.ndarray:
    """Correctly rounded ``gamma**k`` for ``k = 0..kmax``."""
    return _powers(float(gamma), max(int(kmax), 0))


def build_causal_decay(gamma: float, n: int) -> DecayMask:
    gamma, n = _check_gamma(gamma), _check_len(n)
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    m = np.where(diff >= 0, decay_powers(gamma, n - 1)[np.maximum(diff, 0)], 0.0)
    return DecayMask(m, "causal", gamma)


def build_bidirectional_decay(gamma: float, n: int) -> DecayMask:
    gamma, n = _check_gamma(gamma), _check_len(n)
    idx = np.arange(n)
    m = decay_powers(gamma, n - 1)[np.abs(idx[:, None] - idx[None, :])]
    return DecayMask(m, "bidirectional", gamma)


def grid_coords(h: int, w: int):
    """(y, x) integer coordinates of row-major tokens on an h x w grid."""
    t = np.arange(h * w)
    return t // w, t % w


def build_2d_decay(gamma: float, h: int, w: int) -> DecayMask:
    gamma = _check_gamma(gamma)
    h, w = _check_len(h, "H"), _check_len(w, "W")
    y, x = grid_coords(h, w)
    dist = np.abs(x[:, None] - x[None, :]) + np.abs(y[:, None] - y[None, :])
    return DecayMask(decay_powers(gamma, h + w - 2)[dist], "manhattan2d", gamma)


def build_axial_decays(gamma: float, h: int, w: int):
    """(D^H, D^W): bidirectional decays over row index and column index."""
    dh = build_bidirectional_decay(gamma, h)
    dw = build_bidirectional_decay(gamma, w)
    return DecayMask(dh.matrix.copy(), "axial_h", dh.gamma), DecayMask(dw.matrix.copy(), "axial_w", dw.gamma)


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------

def default_theta(d_k: int, base: float = 10000.0) -> np.ndarray:
    """Geometrically spaced angles, one per channel pair."""
    if d_k % 2:
        raise ShapeError(f"d_k must be even for pairwise rotation, got {d_k}")
    half = d_k // 2
    return 1.0 / base ** (np.arange(half, dtype=np.float64) / max(half, 1))


@functools.lru_cache(maxsize=256)
def _rotation_cached(positions: tuple, theta: tuple, direction: int, dtype: str):
    cos, sin = rotation_tables(np.asarray(positions), np.asarray(theta), direction, np.dtype(dtype))
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


@functools.lru_cache(maxsize=256)
def _phase_cached(positions: tuple, theta: tuple, direction: int, dtype: str):
    # unit complex per (position, pair): cos + i sin
    cos, sin = _rotation_cached(positions, theta, direction, dtype)
    ctype = np.result_type(np.dtype(dtype), np.complex64)
    phase = (cos[:, 0::2] + 1j * sin[:, 0::2]).astype(ctype)
    phase.setflags(write=False)
    return phase


def _rotate_pairs(a: np.ndarray, phase: np.ndarray) -> np.ndarray:
    # channel pairs (2j, 2j+1) read as one complex number each
    real = np.result_type(a.dtype, phase.real.dtype)
    a = np.ascontiguousarray(a, dtype=real)
    z = a.view(np.result_type(real, np.complex64)) * phase
    return z.view(real)


def rotation_tables(positions: np.ndarray, theta: np.ndarray, direction: int, dtype):
    """cos/sin tables of shape [len(positions), d_k] (each angle repeated per pair)."""
    ang = direction * np.outer(positions.astype(np.float64), theta)
    ang = np.repeat(ang, 2, axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rotation(x: Tensor, theta: Optional[np.ndarray], direction: int = 1, positions=None) -> Tensor:
    """Rotate channel pairs (2j, 2j+1) of ``x[..., N, d_k]`` by ``direction * n * theta_j``.

    ``positions`` overrides the default position index 0..N-1.
    ``theta=None`` is the no-rotation mode.
    """
    d_k = x.shape[-1]
    if d_k % 2:
        raise ShapeError(f"rotation needs an even channel count, got {d_k}")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    if theta is None:
        return x
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (d_k // 2,):
        raise ShapeError(f"expected {d_k // 2} rotation angles, got {theta.shape}")
    n = x.shape[-2]
    pos = tuple(range(n)) if positions is None else tuple(int(p) for p in positions)
    if len(pos) != n:
        raise ShapeError(f"{len(pos)} positions given for {n} tokens")
    phase = _phase_cached(pos, tuple(theta.tolist()), direction, x.dtype.str)
    out = _rotate_pairs(x.data, phase)

    def bw(g):
        return (_rotate_pairs(g, phase.conj()),)

    return T._make(out, (x,), bw, "rotate")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def default_gammas(heads: int) -> np.ndarray:
    """Per-head decay 1 - 2^(-5-h)."""
    return 1.0 - 2.0 ** (-5.0 - np.arange(heads, dtype=np.float64))


@dataclass
class RetentionParams:
    """Stacked per-head projections plus decay and rotation settings.

    ``wq``, ``wk``, ``wv`` are ``[heads, d_model, d_k]``; ``gamma`` has one
    entry per head; ``theta`` holds ``d_k / 2`` angles or is ``None`` to turn
    rotation off.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    gamma: np.ndarray
    theta: Optional[np.ndarray]
    scale_softmax: bool = True

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        shapes = {self.wq.shape, self.wk.shape}
        if len(shapes) != 1 or self.wq.ndim != 3:
            raise ShapeError(f"wq/wk must share a [heads, d_model, d_k] shape, got {self.wq.shape}, {self.wk.shape}")
        if self.wv.shape[:2] != self.wq.shape[:2]:
            raise ShapeError(f"wv {self.wv.shape} disagrees with wq {self.wq.shape}")
        if self.d_k % 2:
            raise ShapeError(f"d_k must be even, got {self.d_k}")
        if self.gamma.shape != (self.heads,):
            raise ShapeError(f"need {self.heads} gamma values, got {self.gamma.shape}")
        if np.any(self.gamma <= 0) or np.any(self.gamma > 1):
            raise ValueError(f"gamma values must lie in (0, 1], got {self.gamma}")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=np.float64)
            if self.theta.shape != (self.d_k // 2,):
                raise ShapeError(f"need d_k/2 = {self.d_k // 2} angles, got {self.theta.shape}")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    @property
    def d_v(self) -> int:
        return self.wv.shape[2]

    @classmethod
    def random(
        cls,
        d_model: int,
        d_k: int,
        heads: int = 1,
        gamma=None,
        rotate: bool = True,
        rng=None,
        dtype="f64",
        std: Optional[float] = None,
        requires_grad: bool = False,
    ) -> "RetentionParams":
        rng = np.random.default_rng(rng)
        dt = T.resolve_dtype(dtype)
        std = 1.0 / math.sqrt(d_model) if std is None else std

        def w():
            return Tensor(rng.normal(0.0, std, (heads, d_model, d_k)).astype(dt), requires_grad=requires_grad)

        return cls(
            w(),
            w(),
            w(),
            default_gammas(heads) if gamma is None else np.broadcast_to(np.asarray(gamma, float), (heads,)).copy(),
            default_theta(d_k) if rotate else None,
        )

    @classmethod
    def identity(cls, d: int, gamma: float = 1.0, rotate: bool = False, dtype="f64") -> "RetentionParams":
        eye = np.eye(d, dtype=T.resolve_dtype(dtype))[None]
        return cls(Tensor(eye), Tensor(eye), Tensor(eye), np.array([gamma]), default_theta(d) if rotate else None)


def _project(x: Tensor, w: Tensor) -> Tensor:
    # [.., N, d_model] -> [.., heads, N, d_k]
    lead = x.shape[:-2]
    xe = T.reshape(x, lead + (1,) + x.shape[-2:])
    return T.matmul(xe, w)


def _merge_heads(o: Tensor) -> Tensor:
    # [.., heads, N, d_v] -> [.., N, heads*d_v]
    nd = o.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    ot = T.transpose(o, axes)
    return T.reshape(ot, ot.shape[:-2] + (ot.shape[-2] * ot.shape[-1],))


def _rotated_qkv(x: Tensor, params: RetentionParams, positions=None):
    q = _project(x, params.wq)
    k = _project(x, params.wk)
    v = _project(x, params.wv)
    # Real dot products of pair-rotated vectors give Re(q e^{in theta} conj(k e^{im theta}));
    # the conjugate is carried by the inner product, so both sides rotate forward.
    q = apply_rotation(q, params.theta, +1, positions)
    k = apply_rotation(k, params.theta, +1, positions)
    return q, k, v


_BUILDERS = {
    "causal": lambda g, n: build_causal_decay(g, n[0]),
    "bidirectional": lambda g, n: build_bidirectional_decay(g, n[0]),
    "manhattan2d": lambda g, n: build_2d_decay(g, n[0], n[1]),
}


@functools.lru_cache(maxsize=128)
def _decay_stack(kind: str, gammas: tuple, dims: tuple, dtype: str) -> np.ndarray:
    arr = np.stack([_BUILDERS[kind](g, dims).matrix for g in gammas]).astype(np.dtype(dtype))
    arr.setflags(write=False)
    return arr


def _mask_tensor(params: RetentionParams, kind: str, dims: tuple, dtype) -> Tensor:
    """Per-head decay masks stacked as [heads, L, L] (cached; read-only)."""
    return Tensor._wrap(_decay_stack(kind, tuple(params.gamma.tolist()), dims, np.dtype(dtype).str))


def _check_tokens(x: Tensor, params: RetentionParams) -> int:
    if x.ndim < 2 or x.shape[-1] != params.d_model:
        raise ShapeError(f"expected [..., N, {params.d_model}] input, got {x.shape}")
    return x.shape[-2]


# ---------------------------------------------------------------------------
# 1D retention: three paradigms
# ---------------------------------------------------------------------------

def retention_parallel(x: Tensor, params: RetentionParams, mask=None) -> Tensor:
    """(Q K^T ⊙ D) V per head.

    ``mask`` may be a single :class:`DecayMask` (shared by all heads), a
    list with one mask per head, or ``None`` for per-head causal masks.
    """
    n = _check_tokens(x, params)
    if mask is None:
        d = _mask_tensor(params, "causal", (n,), x.dtype)
    else:
        masks = mask if isinstance(mask, (list, tuple)) else [mask]
        for m in masks:
            if m.size != n:
                raise ShapeError(f"decay mask is {m.size}x{m.size} but the sequence has {n} tokens")
        d = Tensor._wrap(np.stack([m.matrix for m in masks]).astype(x.dtype))
    q, k, v = _rotated_qkv(x, params)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * d
    return _merge_heads(T.matmul(scores, v))


def _head_column(params: RetentionParams, values, dtype) -> Tensor:
    return Tensor._wrap(np.asarray(values, dtype=dtype).reshape(params.heads, 1, 1))


def retention_recurrent(x: Tensor, params: RetentionParams, return_state: bool = False):
    """Token-by-token recurrence ``S_n = gamma S_{n-1} + K_n^T V_n``, ``o_n = Q_n S_n``."""
    n = _check_tokens(x, params)
    q, k, v = _rotated_qkv(x, params)
    gam = _head_column(params, params.gamma, x.dtype)
    state = None
    outs = []
    for i in range(n):
        qi = q[..., i : i + 1, :]
        ki = k[..., i : i + 1, :]
        vi = v[..., i : i + 1, :]
        kv = T.matmul(ki.swapaxes(-1, -2), vi)
        state = kv if state is None else state * gam + kv
        outs.append(T.matmul(qi, state))
    o = T.concat(outs, axis=-2)
    out = _merge_heads(o)
    return (out, state) if return_state else out


def retention_chunkwise(x: Tensor, params: RetentionParams, chunk: int) -> Tensor:
    """Parallel retention inside chunks with a recurrent state carried between them."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    n = _check_tokens(x, params)
    q, k, v = _rotated_qkv(x, params)
    g = params.gamma
    dt = x.dtype
    state = None
    outs = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        b = stop - start
        qc, kc, vc = q[..., start:stop, :], k[..., start:stop, :], v[..., start:stop, :]
        inner_mask = _mask_tensor(params, "causal", (b,), dt)
        inner = T.matmul(T.matmul(qc, kc.swapaxes(-1, -2)) * inner_mask, vc)
        if state is not None:
            # query i of the chunk sees the carried state decayed by gamma^(i+1)
            qdecay = g[:, None] ** (np.arange(b)[None, :] + 1.0)
            inner = inner + T.matmul(qc * Tensor._wrap(qdecay[:, :, None].astype(dt)), state)
        outs.append(inner)
        # fold this chunk's keys/values into the state
        kdecay = g[:, None] ** (b - 1.0 - np.arange(b)[None, :])
        kv = T.matmul((kc * Tensor._wrap(kdecay[:, :, None].astype(dt))).swapaxes(-1, -2), vc)
        state = kv if state is None else state * _head_column(params, g**b, dt) + kv
    return _merge_heads(T.concat(outs, axis=-2))


def bi_retention(x: Tensor, params: RetentionParams) -> Tensor:
    n = _check_tokens(x, params)
    masks = [build_bidirectional_decay(gm, n) for gm in params.gamma]
    return retention_parallel(x, params, masks)


# ---------------------------------------------------------------------------
# 2D attention with Manhattan decay
# ---------------------------------------------------------------------------

def _scores(q: Tensor, k: Tensor, params: RetentionParams, softmax: bool) -> Tensor:
    s = T.matmul(q, k.swapaxes(-1, -2))
    if params.scale_softmax:
        s = s * (1.0 / math.sqrt(params.d_k))
    return T.softmax(s, axis=-1) if softmax else s


def _check_grid(x: Tensor, params: RetentionParams, h: int, w: int) -> None:
    n = _check_tokens(x, params)
    if n != h * w:
        raise ShapeError(f"token count {n} does not match a {h}x{w} grid")


def masa_full(x: Tensor, params: RetentionParams, h: int, w: int, softmax: bool = True) -> Tensor:
    """Full 2D attention: ``(Softmax(Q K^T / sqrt(d_k)) ⊙ D^2d) V`` per head.

    Rotation uses the Manhattan position ``x + y`` so it reduces to the
    per-axis rotation of :func:`resa_decomposed` on single-row or
    single-column grids.
    """
    _check_grid(x, params, h, w)
    q, k, v = (_project(x, wt) for wt in (params.wq, params.wk, params.wv))
    return _merge_heads(masa_attend(q, k, v, params, h, w, softmax))


def masa_attend(q: Tensor, k: Tensor, v: Tensor, params: RetentionParams, h: int, w: int, softmax: bool = True) -> Tensor:
    """Attention core of :func:`masa_full` on projected ``[.., heads, H*W, c]`` inputs."""
    yy, xx = grid_coords(h, w)
    pos = yy + xx
    q = apply_rotation(q, params.theta, +1, positions=pos)
    k = apply_rotation(k, params.theta, +1, positions=pos)
    d = _mask_tensor(params, "manhattan2d", (h, w), q.dtype)
    attn = _scores(q, k, params, softmax) * d
    return T.matmul(attn, v)


def resa_decomposed(x: Tensor, params: RetentionParams, h: int, w: int, softmax: bool = True) -> Tensor:
    """Axis-decomposed 2D attention: width-wise pass, then height-wise pass.

    ``Attn_W`` attends within each image row using ``D^W``; the result is
    exchanged H<->W so ``Attn_H`` attends within each column using ``D^H``;
    the final exchange restores row-major token order.
    """
    _check_grid(x, params, h, w)
    q, k, v = (_project(x, wt) for wt in (params.wq, params.wk, params.wv))
    return _merge_heads(resa_attend(q, k, v, params, h, w, softmax))


def resa_attend(q: Tensor, k: Tensor, v: Tensor, params: RetentionParams, h: int, w: int, softmax: bool = True) -> Tensor:
    """Attention core of :func:`resa_decomposed` on projected ``[.., heads, H*W, c]`` inputs."""
    lead = q.shape[:-3]
    nl = len(lead)
    heads, dk, dv = q.shape[-3], q.shape[-1], v.shape[-1]
    # [.., heads, H, W, c]: rows of the image
    q_w = T.reshape(q, lead + (heads, h, w, dk))
    k_w = T.reshape(k, lead + (heads, h, w, dk))
    v_w = T.reshape(v, lead + (heads, h, w, dv))
    # [.., heads, W, H, c]: columns of the image
    swap = tuple(range(nl + 1)) + (nl + 2, nl + 1, nl + 3)
    q_h = T.transpose(q_w, swap)
    k_h = T.transpose(k_w, swap)

    # per-axis rotation indexed by the coordinate along the attended axis
    q_w = apply_rotation(q_w, params.theta, +1)
    k_w = apply_rotation(k_w, params.theta, +1)
    q_h = apply_rotation(q_h, params.theta, +1)
    k_h = apply_rotation(k_h, params.theta, +1)

    # [heads, 1, L, L] broadcasts over the other spatial axis
    dh_t = T.reshape(_mask_tensor(params, "bidirectional", (h,), q.dtype), (heads, 1, h, h))
    dw_t = T.reshape(_mask_tensor(params, "bidirectional", (w,), q.dtype), (heads, 1, w, w))

    attn_w = _scores(q_w, k_w, params, softmax) * dw_t  # [.., heads, H, W, W]
    rows = T.matmul(attn_w, v_w)  # [.., heads, H, W, dv]
    cols = T.transpose(rows, swap)  # [.., heads, W, H, dv]
    attn_h = _scores(q_h, k_h, params, softmax) * dh_t  # [.., heads, W, H, H]
    out = T.matmul(attn_h, cols)  # [.., heads, W, H, dv]
    out = T.transpose(out, swap)  # [.., heads, H, W, dv]
    return T.reshape(out, lead + (heads, h * w, dv))
