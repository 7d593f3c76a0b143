"""Sparse windowed attention with a global context token, rulebook-executed.

Local attention pairs come from tessellating the dense index grid into
W_side x W_side blocks (optionally half-shifted); global pairs connect every
patch token with every context token in both directions. Scores carry a
learnable relative-position bias indexed by the 2-D offset between query
and key. Local and global sides use separate softmaxes and their outputs
are summed; a token with no pairs on one side contributes zero from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, RulebookMismatch
from .sparse import DenseIndexGrid, SparseMap, index_cells

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class WindowSet:
    """Disjoint groups of 0-based token indices, one per occupied block."""

    windows: tuple
    shift: str


def generate_windows(grid: DenseIndexGrid, w_side: int, shift: str = "none") -> WindowSet:
    """Tessellate the index grid into W_side x W_side blocks, dropping empties.

    For the half-shifted partition the grid is first padded with W_side/2
    zero rows/columns at the top-left; both variants then zero-pad the
    bottom/right up to a block multiple.
    """
    if w_side < 1:
        raise ValueError("w_side must be >= 1")
    if shift not in ("none", "half"):
        raise ValueError(f"unknown shift mode {shift!r}")
    if shift == "half" and w_side % 2:
        raise ValueError("half shift requires an even w_side")
    cells = grid.cells
    if shift == "half":
        p = w_side // 2
        cells = np.pad(cells, ((p, 0), (p, 0)))
    h, w = cells.shape
    pad_h = (-h) % w_side
    pad_w = (-w) % w_side
    if pad_h or pad_w:
        cells = np.pad(cells, ((0, pad_h), (0, pad_w)))
    nby = cells.shape[0] // w_side
    nbx = cells.shape[1] // w_side
    blocks = cells.reshape(nby, w_side, nbx, w_side).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(-1, w_side * w_side)
    windows = []
    for row in blocks:
        ids = row[row > 0]
        if len(ids):
            windows.append(np.sort(ids - 1))
    return WindowSet(tuple(windows), shift)


@dataclass(frozen=True)
class AttnRulebook:
    """Window-grouped local pairs and patch<->context global pairs.

    Pair arrays are sorted by (query, key); row_ptr arrays give each row's
    contiguous segment, and the *_by_key permutations re-sort pairs by key
    for deterministic scatter in the backward pass.
    """

    n_tokens: int
    num_ctx: int
    local_q: np.ndarray
    local_k: np.ndarray
    global_q: np.ndarray
    global_k: np.ndarray
    local_row_ptr: np.ndarray
    global_row_ptr: np.ndarray
    local_by_key: np.ndarray
    local_key_row_ptr: np.ndarray
    global_by_key: np.ndarray
    global_key_row_ptr: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.n_tokens + self.num_ctx


def _row_ptr(idx: np.ndarray, n_rows: int) -> np.ndarray:
    counts = np.bincount(idx, minlength=n_rows) if len(idx) else np.zeros(n_rows, np.int64)
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr


def build_attention_rulebook(smap: SparseMap, w_side: int, shift: str = "none",
                             num_ctx: int | None = None) -> AttnRulebook:
    """Local pairs from window membership (self-pairs included) plus global pairs.

    When the grid bounding box holds fewer than w_side^2 cells, local
    attention degenerates to full attention over all tokens (compact-space
    branch). num_ctx defaults to the map's own context row count.
    """
    if num_ctx is None:
        num_ctx = smap.num_ctx
    return rulebook_from_coords(smap.coords, w_side, shift, num_ctx)


def rulebook_from_coords(coords: np.ndarray, w_side: int, shift: str,
                         num_ctx: int) -> AttnRulebook:
    n = len(coords)
    if n < 1:
        raise ValueError("attention rulebooks need at least one token")
    cells = index_cells(coords)
    gh, gw = cells.shape
    if gh * gw < w_side * w_side:
        ids = np.arange(n, dtype=np.int64)
        lq = np.repeat(ids, n)
        lk = np.tile(ids, n)
    else:
        wins = generate_windows(DenseIndexGrid(cells), w_side, shift).windows
        qs, ks = [], []
        for ids in wins:
            m = len(ids)
            qs.append(np.repeat(ids, m))
            ks.append(np.tile(ids, m))
        lq = np.concatenate(qs) if qs else np.empty(0, np.int64)
        lk = np.concatenate(ks) if ks else np.empty(0, np.int64)
        order = np.lexsort((lk, lq))
        lq, lk = lq[order], lk[order]
    patch = np.arange(n, dtype=np.int64)
    ctx_ids = n + np.arange(num_ctx, dtype=np.int64)
    # Sorted by (q, k): patch queries first, then context-token queries.
    gq = np.concatenate([np.repeat(patch, num_ctx), np.repeat(ctx_ids, n)])
    gk = np.concatenate([np.tile(ctx_ids, n), np.tile(patch, num_ctx)])
    n_rows = n + num_ctx
    l_by_key = np.lexsort((lq, lk)) if len(lq) else np.empty(0, np.int64)
    g_by_key = np.lexsort((gq, gk)) if len(gq) else np.empty(0, np.int64)
    return AttnRulebook(
        n_tokens=n, num_ctx=num_ctx,
        local_q=lq, local_k=lk, global_q=gq, global_k=gk,
        local_row_ptr=_row_ptr(lq, n_rows),
        global_row_ptr=_row_ptr(gq, n_rows),
        local_by_key=l_by_key,
        local_key_row_ptr=_row_ptr(lk[l_by_key] if len(lk) else lk, n_rows),
        global_by_key=g_by_key,
        global_key_row_ptr=_row_ptr(gk[g_by_key] if len(gk) else gk, n_rows),
    )


# ---------------------------------------------------------------------------
# Segment primitives over pair arrays sorted by row. reduceat handles the
# contiguous segments; empty rows are patched to the identity element.
# ---------------------------------------------------------------------------

def segment_sum(values: np.ndarray, row_ptr: np.ndarray) -> np.ndarray:
    n_rows = len(row_ptr) - 1
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    starts = row_ptr[:-1]
    nonempty = row_ptr[1:] > starts
    out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def _segment_softmax(scores: np.ndarray, row_ptr: np.ndarray) -> np.ndarray:
    if scores.shape[0] == 0:
        return scores
    starts = row_ptr[:-1]
    counts = np.diff(row_ptr)
    nonempty = counts > 0
    row_max = np.maximum.reduceat(scores, starts[nonempty], axis=0)
    z = np.exp(scores - np.repeat(row_max, counts[nonempty], axis=0))
    row_sum = np.add.reduceat(z, starts[nonempty], axis=0)
    return z / np.repeat(row_sum, counts[nonempty], axis=0)


def _segment_spread(row_values: np.ndarray, row_ptr: np.ndarray) -> np.ndarray:
    """Repeat per-row values out to per-pair rows."""
    return np.repeat(row_values, np.diff(row_ptr), axis=0)


@dataclass(frozen=True)
class RpbTable:
    """(2*W_side-1, 2*W_side-1, num_heads) bias, indexed by (dx+W-1, dy+W-1).

    Offsets outside the table (possible only through the compact-space full
    attention branch) clamp to the edge.
    """

    bias: np.ndarray

    @property
    def w_side(self) -> int:
        return (self.bias.shape[0] + 1) // 2

    def indices(self, delta: np.ndarray):
        hi = self.bias.shape[0] - 1
        ix = np.clip(delta[:, 0] + self.w_side - 1, 0, hi)
        iy = np.clip(delta[:, 1] + self.w_side - 1, 0, hi)
        return ix, iy


@dataclass
class AttnParams:
    """One attention sub-block: Q/K/V/output projections plus the RPB table."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    rpb: RpbTable
    num_heads: int
    use_rpb: bool = True


@dataclass
class AttnSaved:
    """Forward intermediates reused by attention_backward.

    Pair-gathered projections (q[qi], k[ki], v[ki] per side) are kept so the
    backward pass repeats no gathers.
    """

    h_in: np.ndarray
    local_gathered: tuple
    global_gathered: tuple
    w_local: np.ndarray
    w_global: np.ndarray
    merged: np.ndarray
    rpb_ix: np.ndarray | None
    rpb_iy: np.ndarray | None


@dataclass
class AttnGrads:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    rpb: np.ndarray


def attention_apply(h_all: np.ndarray, coords: np.ndarray, rb: AttnRulebook,
                    params: AttnParams):
    """Multi-head rulebook attention; returns (output, saved state).

    h_all is (N + num_ctx, d) with context rows appended after patch rows.
    Per head: local scores q.k/sqrt(d_head) + RPB over local pairs, softmax
    per query segment; global scores without bias over global pairs; the two
    weighted value sums are added, heads concatenated, output projected.
    """
    rows, d = h_all.shape
    if rows != rb.n_rows:
        raise RulebookMismatch(f"rulebook rows {rb.n_rows} vs input rows {rows}")
    if len(coords) != rb.n_tokens:
        raise RulebookMismatch("coords do not match the rulebook token count")
    heads = params.num_heads
    if d % heads:
        raise DimensionMismatch(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    dtype = h_all.dtype
    q = (h_all @ params.wq.T.astype(dtype, copy=False) + params.bq).reshape(rows, heads, dh)
    k = (h_all @ params.wk.T.astype(dtype, copy=False) + params.bk).reshape(rows, heads, dh)
    v = (h_all @ params.wv.T.astype(dtype, copy=False) + params.bv).reshape(rows, heads, dh)
    scale = dtype.type(1.0) / np.sqrt(dtype.type(dh))

    q_l, k_l, v_l = q[rb.local_q], k[rb.local_k], v[rb.local_k]
    e_loc = (q_l * k_l).sum(axis=2) * scale  # (P, heads)
    rpb_ix = rpb_iy = None
    if params.use_rpb and len(rb.local_q):
        delta = coords[rb.local_q] - coords[rb.local_k]
        rpb_ix, rpb_iy = params.rpb.indices(delta)
        e_loc = e_loc + params.rpb.bias[rpb_ix, rpb_iy].astype(dtype, copy=False)
    w_loc = _segment_softmax(e_loc, rb.local_row_ptr)
    h_loc = segment_sum(w_loc[:, :, None] * v_l, rb.local_row_ptr)

    q_g, k_g, v_g = q[rb.global_q], k[rb.global_k], v[rb.global_k]
    e_glo = (q_g * k_g).sum(axis=2) * scale
    w_glo = _segment_softmax(e_glo, rb.global_row_ptr)
    h_glo = segment_sum(w_glo[:, :, None] * v_g, rb.global_row_ptr)

    merged = (h_loc + h_glo).reshape(rows, d)
    out = merged @ params.wo.T.astype(dtype, copy=False) + params.bo
    saved = AttnSaved(h_all, (q_l, k_l, v_l), (q_g, k_g, v_g),
                      w_loc, w_glo, merged, rpb_ix, rpb_iy)
    return out, saved


def attention_forward(h_all: np.ndarray, coords: np.ndarray, rb: AttnRulebook,
                      params: AttnParams) -> np.ndarray:
    out, _ = attention_apply(h_all, coords, rb, params)
    return out


def _pair_side_backward(g_merged, gathered, weights, qi, ki, row_ptr,
                        by_key, key_row_ptr, scale, g_q, g_k, g_v):
    """Backward through one softmax-attention side (local or global).

    `gathered` holds the forward's (q[qi], k[ki], v[ki]); returns the
    per-pair score gradients and accumulates into g_q/g_k/g_v.
    """
    if len(qi) == 0:
        return np.zeros((0, g_merged.shape[1]), dtype=g_merged.dtype)
    q_p, k_p, v_p = gathered
    g_out_pairs = g_merged[qi]                        # (P, heads, dh)
    g_w = (g_out_pairs * v_p).sum(axis=2)             # (P, heads)
    # v gradient: scatter w * g_out by key, in key-sorted order.
    g_out_pairs *= weights[:, :, None]
    g_v += segment_sum(g_out_pairs[by_key], key_row_ptr)
    # softmax backward: g_e = w * (g_w - sum_row(w * g_w))
    row_dot = segment_sum(weights * g_w, row_ptr)
    g_e = weights * (g_w - _segment_spread(row_dot, row_ptr))
    g_es = (g_e * scale)[:, :, None]
    g_q += segment_sum(g_es * k_p, row_ptr)
    g_k += segment_sum((g_es * q_p)[by_key], key_row_ptr)
    return g_e


def attention_backward(grad_out: np.ndarray, saved: AttnSaved, rb: AttnRulebook,
                       params: AttnParams):
    """Exact gradients through projections, softmaxes, and the RPB gather."""
    rows, d = saved.h_in.shape
    if grad_out.shape != (rows, d):
        raise DimensionMismatch(f"grad_out shape {grad_out.shape}")
    heads = params.num_heads
    dh = d // heads
    dtype = grad_out.dtype
    scale = dtype.type(1.0) / np.sqrt(dtype.type(dh))

    g_bo = grad_out.sum(axis=0)
    g_wo = grad_out.T @ saved.merged
    g_merged = (grad_out @ params.wo.astype(dtype, copy=False)).reshape(rows, heads, dh)

    g_q = np.zeros((rows, heads, dh), dtype=dtype)
    g_k = np.zeros((rows, heads, dh), dtype=dtype)
    g_v = np.zeros((rows, heads, dh), dtype=dtype)
    g_e_loc = _pair_side_backward(
        g_merged, saved.local_gathered, saved.w_local,
        rb.local_q, rb.local_k, rb.local_row_ptr,
        rb.local_by_key, rb.local_key_row_ptr, scale, g_q, g_k, g_v)
    _pair_side_backward(
        g_merged, saved.global_gathered, saved.w_global,
        rb.global_q, rb.global_k, rb.global_row_ptr,
        rb.global_by_key, rb.global_key_row_ptr, scale, g_q, g_k, g_v)

    g_rpb = np.zeros_like(params.rpb.bias)
    if params.use_rpb and saved.rpb_ix is not None:
        np.add.at(g_rpb, (saved.rpb_ix, saved.rpb_iy), g_e_loc)

    g_qf = g_q.reshape(rows, d)
    g_kf = g_k.reshape(rows, d)
    g_vf = g_v.reshape(rows, d)
    grad_h = (g_qf @ params.wq.astype(dtype, copy=False)
              + g_kf @ params.wk.astype(dtype, copy=False)
              + g_vf @ params.wv.astype(dtype, copy=False))
    grads = AttnGrads(
        wq=g_qf.T @ saved.h_in, bq=g_qf.sum(axis=0),
        wk=g_kf.T @ saved.h_in, bk=g_kf.sum(axis=0),
        wv=g_vf.T @ saved.h_in, bv=g_vf.sum(axis=0),
        wo=g_wo, bo=g_bo, rpb=g_rpb,
    )
    return grad_h, grads


# ---------------------------------------------------------------------------
# CAR block: pre-norm residual transformer sub-blocks over [patches; context]
# ---------------------------------------------------------------------------

@dataclass
class CarParams:
    """One transformer sub-block: pre-norm attention then pre-norm FFN."""

    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    attn: AttnParams
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class CarPair:
    """A regular + shifted sub-block pair forming one CAR refinement step."""

    regular: CarParams
    shifted: CarParams


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, xhat, inv


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _sub_block(h: np.ndarray, coords: np.ndarray, rb: AttnRulebook, p: CarParams):
    normed, _, _ = layer_norm(h, p.norm1_scale, p.norm1_shift)
    h = h + attention_forward(normed, coords, rb, p.attn)
    normed, _, _ = layer_norm(h, p.norm2_scale, p.norm2_shift)
    hidden = gelu(normed @ p.ffn_w1.T + p.ffn_b1)
    return h + hidden @ p.ffn_w2.T + p.ffn_b2


def car_block_forward(smap: SparseMap, pair: CarPair, w_side: int,
                      shift_pattern: tuple[str, str] = ("none", "half")) -> SparseMap:
    """Apply a (regular, shifted) attention sub-block pair as pre-norm residuals.

    w_side = 0 disables the block entirely (identity), which realizes the
    no-refinement ablation. Coordinates are unchanged.
    """
    if w_side == 0:
        return smap
    h = np.concatenate([smap.features, smap.context], axis=0)
    for shift, p in zip(shift_pattern, (pair.regular, pair.shifted)):
        rb = build_attention_rulebook(smap, w_side, shift)
        h = _sub_block(h, smap.coords, rb, p)
    return smap.with_features(h[: smap.n], h[smap.n :])
