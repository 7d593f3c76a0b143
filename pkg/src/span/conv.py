"""Sparse-convolution rulebooks and their execution.

A rulebook lists, per kernel offset, the (input index, output index) atomic
operations that a convolution performs on active sites only. The anchor
convention is p_in = S * p_out + k * D with k in {0..K-1}^2; candidate
outputs with a negative component are discarded (valid padding at the
origin). Pair lists are sorted by (i_out, i_in) so accumulation order, and
therefore floating-point results, are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, RulebookMismatch
from .sparse import SparseMap, as_coord_array, coord_keys, keys_to_coords


@dataclass(frozen=True)
class ConvSpec:
    """Square-kernel convolution geometry: kernel K, stride S, dilation D."""

    kernel: int
    stride: int = 1
    dilation: int = 1
    in_dim: int = 0
    out_dim: int = 0
    kind: str = "forward"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"kernel/stride/dilation must be >= 1 in {self}")
        if self.kind not in ("forward", "transposed"):
            raise ValueError(f"unknown conv kind {self.kind!r}")


def kernel_offsets(kernel: int) -> np.ndarray:
    """All K^2 offsets (kx, ky) in row-major order (ky outer, kx inner)."""
    ky, kx = np.divmod(np.arange(kernel * kernel), kernel)
    return np.stack([kx, ky], axis=1).astype(np.int64)


@dataclass(frozen=True)
class ConvRulebook:
    """Per-offset (i_in, i_out) pair lists plus the output coordinate set."""

    kernel: int
    stride: int
    dilation: int
    out_coords: np.ndarray
    pairs: tuple  # K^2 tuples of (in_idx, out_idx) int64 arrays
    n_in: int
    n_out: int
    kind: str = "forward"

    def pair_count(self) -> int:
        return sum(len(ii) for ii, _ in self.pairs)


@dataclass
class ConvParams:
    """weights: (K^2, d_out, d_in) in row-major offset order; bias: (d_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def d_in(self) -> int:
        return self.weights.shape[2]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]


def compute_output_coords(coords_in, spec: ConvSpec) -> np.ndarray:
    """Deduplicated, row-major-sorted output coordinate set.

    out = { p : exists input c and offset k with c = S*p + k*D, p >= 0 }.
    """
    if spec.kind != "forward":
        raise ValueError("output coordinates are generated for forward specs only")
    carr = as_coord_array(coords_in)
    if len(carr) == 0:
        return carr
    offs = kernel_offsets(spec.kernel)
    cand = carr[None, :, :] - offs[:, None, :] * spec.dilation  # (K^2, N, 2)
    ok = (cand % spec.stride == 0).all(axis=2) & (cand >= 0).all(axis=2)
    outs = cand[ok] // spec.stride
    if len(outs) == 0:
        return outs.reshape(0, 2)
    return keys_to_coords(np.unique(coord_keys(outs)))


def build_conv_rulebook(coords_in, spec: ConvSpec) -> ConvRulebook:
    """Pair lists for every kernel offset, via sorted-key lookup.

    Each (i_out, offset) names exactly one candidate input coordinate, so
    pair lists come out sorted by i_out with no duplicates.
    """
    if spec.kind != "forward":
        raise ValueError("rulebooks are built from forward specs; transpose instead")
    carr = as_coord_array(coords_in)
    out_coords = compute_output_coords(carr, spec)
    n_in, n_out = len(carr), len(out_coords)
    in_keys = coord_keys(carr) if n_in else np.empty(0, dtype=np.int64)
    order = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[order]
    offs = kernel_offsets(spec.kernel)
    pairs = []
    for k in offs:
        if n_out == 0:
            pairs.append((np.empty(0, np.int64), np.empty(0, np.int64)))
            continue
        want = out_coords * spec.stride + k * spec.dilation
        wkeys = coord_keys(want)
        pos = np.searchsorted(sorted_keys, wkeys)
        pos_c = np.minimum(pos, n_in - 1)
        hit = (pos < n_in) & (sorted_keys[pos_c] == wkeys)
        i_out = np.nonzero(hit)[0].astype(np.int64)
        i_in = order[pos[hit]].astype(np.int64)
        pairs.append((i_in, i_out))
    return ConvRulebook(spec.kernel, spec.stride, spec.dilation,
                        out_coords, tuple(pairs), n_in, n_out)


def transpose_rulebook(rb: ConvRulebook, original_in_coords) -> ConvRulebook:
    """Swap input/output roles; the result's out_coords are the original inputs.

    Guarantees exact coordinate restoration for decoder skip connections.
    """
    carr = as_coord_array(original_in_coords)
    if len(carr) != rb.n_in:
        raise RulebookMismatch(
            f"rulebook has {rb.n_in} inputs, got {len(carr)} original coords"
        )
    flipped = []
    for i_in, i_out in rb.pairs:
        order = np.lexsort((i_out, i_in))  # sort by new (i_out, i_in)
        flipped.append((i_out[order], i_in[order]))
    kind = "transposed" if rb.kind == "forward" else "forward"
    return ConvRulebook(rb.kernel, rb.stride, rb.dilation, carr,
                        tuple(flipped), rb.n_out, rb.n_in, kind=kind)


@dataclass
class SacSaved:
    """Forward state needed by sac_backward."""

    features: np.ndarray
    context: np.ndarray
    projected_context: bool


def sac_apply(features: np.ndarray, context: np.ndarray, rb: ConvRulebook,
              params: ConvParams):
    """Execute a rulebook: gather, per-offset matmul, scatter-accumulate.

    Bias is added exactly once per output site. Context-token rule: when the
    feature width changes, context maps through the mean of all kernel
    weights plus bias; otherwise it passes through unchanged.
    """
    if features.shape[0] != rb.n_in:
        raise RulebookMismatch(f"rulebook n_in {rb.n_in} vs {features.shape[0]} rows")
    if features.shape[1] != params.d_in:
        raise DimensionMismatch(f"feature dim {features.shape[1]} vs weights d_in {params.d_in}")
    if context.shape[1] != params.d_in:
        raise DimensionMismatch("context width differs from feature width")
    dtype = features.dtype
    out = np.zeros((rb.n_out, params.d_out), dtype=dtype)
    for w_k, (i_in, i_out) in zip(params.weights, rb.pairs):
        if len(i_in):
            # i_out values are unique within one offset list, so fancy
            # indexed += cannot collide.
            out[i_out] += features[i_in] @ w_k.T.astype(dtype, copy=False)
    out += params.bias.astype(dtype, copy=False)
    projected = params.d_in != params.d_out
    if projected:
        w_mean = params.weights.mean(axis=0)
        ctx_out = context @ w_mean.T.astype(dtype, copy=False) + params.bias.astype(dtype, copy=False)
    else:
        ctx_out = context
    saved = SacSaved(features, context, projected)
    return out, ctx_out, saved


def sac_forward(smap: SparseMap, rb: ConvRulebook, params: ConvParams) -> SparseMap:
    """Rulebook-executed sparse convolution on a SparseMap."""
    feats, ctx, _ = sac_apply(smap.features, smap.context, rb, params)
    return SparseMap(rb.out_coords, feats, ctx)


def sac_backward(grad_out: np.ndarray, grad_ctx_out: np.ndarray, saved: SacSaved,
                 rb: ConvRulebook, params: ConvParams):
    """Gradients of sac_apply: inputs, per-offset weights, bias.

    grad_in[i_in] sums W(k)^T grad_out[i_out] over pairs; grad_W(k) sums
    grad_out[i_out] h[i_in]^T; grad_b sums grad_out rows (the context rule's
    linearity adds its mean-weight terms when the width changed).
    """
    if grad_out.shape != (rb.n_out, params.d_out):
        raise DimensionMismatch(f"grad_out shape {grad_out.shape}")
    dtype = grad_out.dtype
    grad_in = np.zeros_like(saved.features)
    grad_w = np.zeros_like(params.weights, dtype=dtype)
    for k, (w_k, (i_in, i_out)) in enumerate(zip(params.weights, rb.pairs)):
        if len(i_in):
            g = grad_out[i_out]
            grad_in[i_in] += g @ w_k.astype(dtype, copy=False)
            grad_w[k] = g.T @ saved.features[i_in]
    grad_b = grad_out.sum(axis=0)
    if saved.projected_context:
        ksq = len(params.weights)
        w_mean = params.weights.mean(axis=0)
        grad_ctx_in = grad_ctx_out @ w_mean.astype(dtype, copy=False)
        grad_w += (grad_ctx_out.T @ saved.context)[None, :, :] / ksq
        grad_b = grad_b + grad_ctx_out.sum(axis=0)
    else:
        grad_ctx_in = grad_ctx_out
    return grad_in, grad_ctx_in, grad_w, grad_b
