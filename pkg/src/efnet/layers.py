"""Model building blocks: scaled attention, multi-head wrappers, GRU cells,
the capsule projection, and the relative-position embedding table.

Parameter containers are plain dataclasses holding trainable Tensors; each
has a seeded ``create`` factory. Functions take inputs first and parameters
after, and everything runs on the autodiff primitives from ``tensor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tx
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor

REGION_COUNT = 49


class ConfigError(ValueError):
    """A configuration value is inconsistent (head counts, widths, ...)."""


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class MHAParams:
    """Per-head projection triples; output width is head_count * d_head."""

    wq: list
    wk: list
    wv: list

    def __post_init__(self):
        if not (len(self.wq) == len(self.wk) == len(self.wv)) or not self.wq:
            raise ConfigError("need one (wq, wk, wv) triple per head")
        d_head = self.wq[0].shape[1]
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape[1] != d_head:
                raise ConfigError("all heads must share one d_head")

    @property
    def head_count(self) -> int:
        return len(self.wq)

    @property
    def d_head(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def create(cls, rng, head_count: int, d_q: int, d_kv: int, d_model: int, dtype=DEFAULT_DTYPE):
        if head_count < 1:
            raise ConfigError(f"head count must be >= 1, got {head_count}")
        if d_model % head_count != 0:
            raise ConfigError(
                f"model width {d_model} is not divisible by head count {head_count}"
            )
        d_head = d_model // head_count
        return cls(
            wq=[glorot(rng, d_q, d_head, dtype) for _ in range(head_count)],
            wk=[glorot(rng, d_kv, d_head, dtype) for _ in range(head_count)],
            wv=[glorot(rng, d_kv, d_head, dtype) for _ in range(head_count)],
        )


@dataclass
class GRUParams:
    """Gate weights for one recurrence direction (update z, reset r, candidate)."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    @classmethod
    def create(cls, rng, d_in: int, d_hidden: int, dtype=DEFAULT_DTYPE):
        def w():
            return glorot(rng, d_in, d_hidden, dtype)

        def u():
            return glorot(rng, d_hidden, d_hidden, dtype)

        return cls(
            wz=w(), uz=u(), bz=zeros_param(d_hidden, dtype),
            wr=w(), ur=u(), br=zeros_param(d_hidden, dtype),
            wh=w(), uh=u(), bh=zeros_param(d_hidden, dtype),
        )


@dataclass
class CapsuleParams:
    w: Tensor
    b: Tensor | None = None

    @classmethod
    def create(cls, rng, d_in: int, d_cap: int, dtype=DEFAULT_DTYPE):
        return cls(w=glorot(rng, d_in, d_cap, dtype), b=zeros_param(d_cap, dtype))


@dataclass
class PositionTable:
    """Rows indexed by clipped relative distance; physical row = distance + clip."""

    rows: Tensor
    clip: int

    @classmethod
    def create(cls, rng, clip: int, d_p: int, dtype=DEFAULT_DTYPE):
        if clip < 1:
            raise ConfigError(f"position clip must be >= 1, got {clip}")
        table = rng.uniform(-0.05, 0.05, size=(2 * clip + 1, d_p)).astype(dtype)
        return cls(rows=Tensor(table, requires_grad=True), clip=clip)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v with optional key mask (True = attend)."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be rank 2")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    scores = tx.scale(tx.matmul(q, tx.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    weights = tx.softmax(scores, axis=-1, mask=mask)
    out = tx.matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head(q: Tensor, k: Tensor, v: Tensor, params: MHAParams, mask=None, return_weights: bool = False):
    """Heads attend in parallel subspaces; outputs concatenate, no extra
    projection afterwards. Projections run as one stacked matmul per role."""
    dh = params.d_head
    q_all = tx.matmul(q, tx.concat(params.wq, axis=-1))
    k_all = tx.matmul(k, tx.concat(params.wk, axis=-1))
    v_all = tx.matmul(v, tx.concat(params.wv, axis=-1))
    outs = []
    weights = []
    for i in range(params.head_count):
        lo, hi = i * dh, (i + 1) * dh
        out_i, w_i = scaled_dot_attention(
            tx.slice_cols(q_all, lo, hi),
            tx.slice_cols(k_all, lo, hi),
            tx.slice_cols(v_all, lo, hi),
            mask=mask,
            return_weights=True,
        )
        outs.append(out_i)
        weights.append(w_i)
    out = tx.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
    return (out, weights) if return_weights else out


def mhsa(x: Tensor, params: MHAParams, mask=None, return_weights: bool = False):
    """Self-attention: queries, keys, and values are all the same sequence."""
    return multi_head(x, x, x, params, mask=mask, return_weights=return_weights)


def _gru_row(x_row: Tensor, h_row: Tensor, p: GRUParams) -> Tensor:
    z = tx.sigmoid(tx.add(tx.add(tx.matmul(x_row, p.wz), tx.matmul(h_row, p.uz)), p.bz))
    r = tx.sigmoid(tx.add(tx.add(tx.matmul(x_row, p.wr), tx.matmul(h_row, p.ur)), p.br))
    cand = tx.tanh(
        tx.add(tx.add(tx.matmul(x_row, p.wh), tx.matmul(tx.mul(r, h_row), p.uh)), p.bh)
    )
    # (1 - z) * h_prev + z * cand, written to reuse h_row once
    return tx.add(h_row, tx.mul(z, tx.sub(cand, h_row)))


def gru_cell(x: Tensor, h_prev: Tensor, params: GRUParams) -> Tensor:
    if x.data.ndim != 1 or h_prev.data.ndim != 1:
        raise ShapeError("gru_cell expects rank-1 input and state")
    x_row = tx.reshape(x, (1, x.shape[0]))
    h_row = tx.reshape(h_prev, (1, h_prev.shape[0]))
    return tx.reshape(_gru_row(x_row, h_row, params), (h_prev.shape[0],))


def bigru_encode(target_embeds: Tensor, aspect_embed: Tensor, fwd: GRUParams, bwd: GRUParams) -> Tensor:
    """Run both directions over the target tokens, each step reading the
    token embedding concatenated with the (fixed) aspect vector, and
    concatenate the two hidden states per position."""
    if target_embeds.data.ndim != 2 or target_embeds.shape[0] < 1:
        raise ShapeError(f"target embeddings must be [m x d] with m >= 1, got {target_embeds.shape}")
    if aspect_embed.data.ndim != 1:
        raise ShapeError(f"aspect embedding must be rank 1, got {aspect_embed.shape}")
    m = target_embeds.shape[0]
    aspect_row = tx.reshape(aspect_embed, (1, aspect_embed.shape[0]))
    xs = [tx.concat([tx.take_row(target_embeds, j), aspect_row], axis=-1) for j in range(m)]

    d_h = fwd.uz.shape[0]
    dtype = fwd.wz.data.dtype
    h = Tensor(np.zeros((1, d_h), dtype=dtype))
    fwd_states = []
    for j in range(m):
        h = _gru_row(xs[j], h, fwd)
        fwd_states.append(h)

    h = Tensor(np.zeros((1, bwd.uz.shape[0]), dtype=dtype))
    bwd_states: list = [None] * m
    for j in reversed(range(m)):
        h = _gru_row(xs[j], h, bwd)
        bwd_states[j] = h

    rows = [tx.concat([fwd_states[j], bwd_states[j]], axis=-1) for j in range(m)]
    return tx.concat(rows, axis=0) if m > 1 else rows[0]


def capsule_layer(regions: Tensor, params: CapsuleParams) -> Tensor:
    """Project each region row and squash it to a norm in [0, 1)."""
    d_in = params.w.shape[0]
    if regions.data.ndim != 2 or regions.shape != (REGION_COUNT, d_in):
        raise ShapeError(
            f"capsule input must be [{REGION_COUNT} x {d_in}], got {regions.shape}"
        )
    s = tx.matmul(regions, params.w)
    if params.b is not None:
        s = tx.add(s, params.b)
    return tx.squash_rows(s)


def position_embeddings(span: tuple[int, int], n: int, table: PositionTable) -> Tensor:
    """Embed each token's signed distance to the target span (0 inside it)."""
    start, end = span
    if not 0 <= start < end <= n:
        raise ShapeError(f"span [{start}, {end}) invalid for sentence length {n}")
    idx = np.arange(n)
    dist = np.where(idx < start, idx - start, np.where(idx >= end, idx - (end - 1), 0))
    dist = np.clip(dist, -table.clip, table.clip)
    return tx.embedding_lookup(table.rows, dist + table.clip)
