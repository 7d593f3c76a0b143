"""Independent brute-force references for the fast sparse paths.

Everything here recomputes index arithmetic from scratch (no helpers shared
with the engine modules), so a shared bug cannot self-validate. These are
correctness oracles, not production paths; they may be thousands of times
slower than the rulebook engines.
"""

from __future__ import annotations

import numpy as np

from .errors import NonPositiveOutputSize, TooLarge

# A DenseTensor is a plain (H, W, d) array with zero fill at inactive sites.
DenseTensor = np.ndarray

_BRUTE_FORCE_LIMIT = 500


def embed_dense(smap, extra: int = 0) -> DenseTensor:
    """Scatter a SparseMap into a zero-filled (H+extra, W+extra, d) array.

    `extra` pads the bottom/right so a valid convolution's output bounds
    cover every sparse output site (pass (K-1)*D for kernel K, dilation D).
    """
    h = int(smap.coords[:, 1].max()) + 1 + extra
    w = int(smap.coords[:, 0].max()) + 1 + extra
    dense = np.zeros((h, w, smap.dim), dtype=smap.features.dtype)
    dense[smap.coords[:, 1], smap.coords[:, 0]] = smap.features
    return dense


def dense_conv_oracle(dense_in: DenseTensor, kernel: int, stride: int,
                      dilation: int, weights, bias) -> DenseTensor:
    """Textbook valid-padding strided dilated convolution via explicit loops.

    weights: (K*K, d_out, d_in) in row-major offset order ((kx, ky) with ky
    outer); bias: (d_out,). Output size floor((H-(K-1)*D-1)/S)+1 per axis.
    """
    h, w, _ = dense_in.shape
    out_h = (h - (kernel - 1) * dilation - 1) // stride + 1
    out_w = (w - (kernel - 1) * dilation - 1) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise NonPositiveOutputSize(f"output size {out_h}x{out_w}")
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    d_out = weights.shape[1]
    out = np.zeros((out_h, out_w, d_out), dtype=dense_in.dtype)
    for oy in range(out_h):
        for ox in range(out_w):
            acc = bias.astype(dense_in.dtype).copy()
            for ky in range(kernel):
                for kx in range(kernel):
                    iy = oy * stride + ky * dilation
                    ix = ox * stride + kx * dilation
                    acc = acc + weights[ky * kernel + kx] @ dense_in[iy, ix]
            out[oy, ox] = acc
    return out


def dense_attention_oracle(h_all: np.ndarray, coords: np.ndarray,
                           mask_local: np.ndarray, mask_global: np.ndarray,
                           params) -> np.ndarray:
    """Full-matrix masked multi-head attention reference.

    h_all is (N+num_ctx, d) with context rows appended after patch rows.
    Scores are -inf outside the masks; the relative-position bias is added
    at unmasked local patch-patch entries; local and global use separate
    row softmaxes and their outputs are summed. A row with no admissible
    keys on one side contributes zero from that side.
    """
    rows = h_all.shape[0]
    n = len(coords)
    heads = params.num_heads
    d = h_all.shape[1]
    dh = d // heads
    q = (h_all @ params.wq.T + params.bq).reshape(rows, heads, dh)
    k = (h_all @ params.wk.T + params.bk).reshape(rows, heads, dh)
    v = (h_all @ params.wv.T + params.bv).reshape(rows, heads, dh)
    scale = 1.0 / np.sqrt(dh)

    bias_table = params.rpb.bias  # (2W-1, 2W-1, heads)
    side = (bias_table.shape[0] + 1) // 2
    bias_full = np.zeros((rows, rows, heads), dtype=h_all.dtype)
    if params.use_rpb and n:
        dx = coords[:, 0][:, None] - coords[:, 0][None, :]
        dy = coords[:, 1][:, None] - coords[:, 1][None, :]
        ix = np.clip(dx + side - 1, 0, 2 * side - 2)
        iy = np.clip(dy + side - 1, 0, 2 * side - 2)
        bias_full[:n, :n] = bias_table[ix, iy]

    merged = np.zeros((rows, heads, dh), dtype=h_all.dtype)
    for hd in range(heads):
        scores = (q[:, hd] @ k[:, hd].T) * scale
        merged[:, hd] = _masked_softmax_matmul(
            scores + bias_full[:, :, hd], mask_local, v[:, hd]
        )
        merged[:, hd] += _masked_softmax_matmul(scores, mask_global, v[:, hd])
    return merged.reshape(rows, d) @ params.wo.T + params.bo


def _masked_softmax_matmul(scores, mask, values):
    s = np.where(mask, scores, -np.inf)
    row_has = mask.any(axis=1)
    out = np.zeros_like(values)
    if row_has.any():
        sub = s[row_has]
        sub = sub - sub.max(axis=1, keepdims=True)
        e = np.where(mask[row_has], np.exp(sub), 0.0)
        w = e / e.sum(axis=1, keepdims=True)
        out[row_has] = w @ values
    return out


def pair_masks(n_rows: int, local_pairs, global_pairs):
    """Boolean (n_rows, n_rows) masks from explicit (q, k) pair arrays."""
    ml = np.zeros((n_rows, n_rows), dtype=bool)
    mg = np.zeros((n_rows, n_rows), dtype=bool)
    lq, lk = local_pairs
    gq, gk = global_pairs
    ml[lq, lk] = True
    mg[gq, gk] = True
    return ml, mg


def brute_force_conv_rulebook(coords, kernel: int, stride: int, dilation: int):
    """Exhaustive O(N_in * N_out * K^2) rulebook enumeration.

    Returns (out_coords, pairs) where out_coords is the sorted deduplicated
    output set and pairs[offset_index] is a sorted list of (i_in, i_out)
    tuples, offsets in row-major (ky outer, kx inner) order.
    """
    pts = [(int(x), int(y)) for x, y in np.asarray(coords).reshape(-1, 2)]
    if len(pts) > _BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{len(pts)} coords exceeds the brute-force guard")
    offsets = [(kx, ky) for ky in range(kernel) for kx in range(kernel)]
    candidates = set()
    for (x, y) in pts:
        for (kx, ky) in offsets:
            ox, oy = x - kx * dilation, y - ky * dilation
            if ox < 0 or oy < 0 or ox % stride or oy % stride:
                continue
            candidates.add((ox // stride, oy // stride))
    out = sorted(candidates, key=lambda c: (c[1], c[0]))
    pairs = []
    for (kx, ky) in offsets:
        plist = []
        for i_out, (ox, oy) in enumerate(out):
            for i_in, (x, y) in enumerate(pts):
                if x == stride * ox + kx * dilation and y == stride * oy + ky * dilation:
                    plist.append((i_in, i_out))
        plist.sort(key=lambda p: (p[1], p[0]))
        pairs.append(plist)
    return np.array(out, dtype=np.int64).reshape(-1, 2), pairs


def brute_force_attn_rulebook(coords, w_side: int, shift: str, num_ctx: int):
    """Exhaustive O(N^2) attention pair enumeration.

    Window membership is decided directly from coordinates: block id
    floor((p + off) / w_side) per axis, off = w_side/2 for the half-shifted
    partition. When the bounding box is smaller than w_side^2 cells the
    local set is full attention over all tokens. Global pairs connect every
    patch token with every context token, both directions.
    """
    pts = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    n = len(pts)
    if n > _BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{n} coords exceeds the brute-force guard")
    h = int(pts[:, 1].max()) + 1
    w = int(pts[:, 0].max()) + 1
    local = []
    if h * w < w_side * w_side:
        local = [(i, j) for i in range(n) for j in range(n)]
    else:
        off = w_side // 2 if shift == "half" else 0
        bx = (pts[:, 0] + off) // w_side
        by = (pts[:, 1] + off) // w_side
        for i in range(n):
            for j in range(n):
                if bx[i] == bx[j] and by[i] == by[j]:
                    local.append((i, j))
    local.sort()
    glob = []
    for i in range(n):
        for b in range(num_ctx):
            glob.append((i, n + b))
    for b in range(num_ctx):
        for i in range(n):
            glob.append((n + b, i))
    glob.sort()
    return local, glob
