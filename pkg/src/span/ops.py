"""Taped wrappers around the compute engines.

Each function runs its forward math immediately and, when given a tape,
records one explicit backward closure. Passing tape=None gives a plain
inference path with zero bookkeeping. Parameters are addressed by store
name so backward can route gradients without a graph.
"""

from __future__ import annotations

import numpy as np

from . import attention as att
from . import conv
from .autodiff import ParamStore, Var


def _rec(tape, fn):
    if tape is not None:
        tape.record(fn)


def linear(tape, store: ParamStore, x: Var, w: str, b: str | None = None) -> Var:
    wm = store[w]
    y = x.data @ wm.T.astype(x.data.dtype, copy=False)
    if b is not None:
        y = y + store[b]
    out = Var(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        store.accumulate(w, g.T @ x.data)
        if b is not None:
            store.accumulate(b, g.sum(axis=0))
        x.add_grad(g @ wm.astype(g.dtype, copy=False))

    _rec(tape, bwd)
    return out


def layer_norm(tape, store: ParamStore, x: Var, scale: str, shift: str,
               eps: float = 1e-5) -> Var:
    sc = store[scale]
    y, xhat, inv = att.layer_norm(x.data, sc, store[shift], eps)
    out = Var(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        store.accumulate(scale, (g * xhat).sum(axis=0))
        store.accumulate(shift, g.sum(axis=0))
        gs = g * sc
        d = x.data.shape[1]
        gx = inv * (gs - gs.mean(axis=1, keepdims=True)
                    - xhat * (gs * xhat).sum(axis=1, keepdims=True) / d)
        x.add_grad(gx)

    _rec(tape, bwd)
    return out


def gelu(tape, x: Var) -> Var:
    out = Var(att.gelu(x.data))

    def bwd():
        if out.grad is not None:
            x.add_grad(out.grad * att.gelu_grad(x.data))

    _rec(tape, bwd)
    return out


def add(tape, a: Var, b: Var) -> Var:
    out = Var(a.data + b.data)

    def bwd():
        if out.grad is not None:
            a.add_grad(out.grad)
            b.add_grad(out.grad)

    _rec(tape, bwd)
    return out


def concat_cols(tape, a: Var, b: Var) -> Var:
    out = Var(np.concatenate([a.data, b.data], axis=1))
    da = a.data.shape[1]

    def bwd():
        if out.grad is not None:
            a.add_grad(out.grad[:, :da])
            b.add_grad(out.grad[:, da:])

    _rec(tape, bwd)
    return out


def stack_rows(tape, top: Var, bottom: Var) -> Var:
    """[patch rows; context rows] concatenation with a splitting backward."""
    out = Var(np.concatenate([top.data, bottom.data], axis=0))
    nt = top.data.shape[0]

    def bwd():
        if out.grad is not None:
            top.add_grad(out.grad[:nt])
            bottom.add_grad(out.grad[nt:])

    _rec(tape, bwd)
    return out


def split_rows(tape, x: Var, n_top: int) -> tuple[Var, Var]:
    top = Var(x.data[:n_top])
    bottom = Var(x.data[n_top:])

    def bwd():
        gt = top.grad if top.grad is not None else np.zeros_like(top.data)
        gb = bottom.grad if bottom.grad is not None else np.zeros_like(bottom.data)
        x.add_grad(np.concatenate([gt, gb], axis=0))

    _rec(tape, bwd)
    return top, bottom


def pad_cols(tape, x: Var, width: int) -> Var:
    """Zero-pad columns on the right up to `width`."""
    n, d = x.data.shape
    if d == width:
        return x
    y = np.zeros((n, width), dtype=x.data.dtype)
    y[:, :d] = x.data
    out = Var(y)

    def bwd():
        if out.grad is not None:
            x.add_grad(out.grad[:, :d])

    _rec(tape, bwd)
    return out


def sum_rows(tape, x: Var, keepdims: bool = False) -> Var:
    out = Var(x.data.sum(axis=0, keepdims=keepdims))

    def bwd():
        if out.grad is not None:
            x.add_grad(np.broadcast_to(out.grad.reshape(1, -1), x.data.shape))

    _rec(tape, bwd)
    return out


def mean_rows(tape, x: Var, keepdims: bool = False) -> Var:
    out = Var(x.data.mean(axis=0, keepdims=keepdims))
    n = x.data.shape[0]

    def bwd():
        if out.grad is not None:
            x.add_grad(np.broadcast_to(out.grad.reshape(1, -1) / n, x.data.shape))

    _rec(tape, bwd)
    return out


def add_all(tape, items: list[Var]) -> Var:
    out = Var(sum(v.data for v in items))

    def bwd():
        if out.grad is not None:
            for v in items:
                v.add_grad(out.grad)

    _rec(tape, bwd)
    return out


def param_var(tape, store: ParamStore, name: str) -> Var:
    """Expose a stored parameter as a leaf Var (e.g. the context token)."""
    out = Var(store[name])

    def bwd():
        if out.grad is not None:
            store.accumulate(name, out.grad)

    _rec(tape, bwd)
    return out


def sac(tape, store: ParamStore, feats: Var, ctx: Var, rb: conv.ConvRulebook,
        w: str, b: str) -> tuple[Var, Var]:
    params = conv.ConvParams(store[w], store[b])
    out_f, out_c, saved = conv.sac_apply(feats.data, ctx.data, rb, params)
    fv, cv = Var(out_f), Var(out_c)

    def bwd():
        gf = fv.grad if fv.grad is not None else np.zeros_like(out_f)
        gc = cv.grad if cv.grad is not None else np.zeros_like(out_c)
        g_in, g_ctx, g_w, g_b = conv.sac_backward(gf, gc, saved, rb, params)
        store.accumulate(w, g_w)
        store.accumulate(b, g_b)
        feats.add_grad(g_in)
        ctx.add_grad(g_ctx)

    _rec(tape, bwd)
    return fv, cv


_ATTN_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def attn_params_from_store(store: ParamStore, prefix: str, num_heads: int,
                           use_rpb: bool) -> att.AttnParams:
    vals = {f: store[f"{prefix}.{f}"] for f in _ATTN_FIELDS}
    return att.AttnParams(rpb=att.RpbTable(store[f"{prefix}.rpb"]),
                          num_heads=num_heads, use_rpb=use_rpb, **vals)


def attention(tape, store: ParamStore, h: Var, coords, rb: att.AttnRulebook,
              prefix: str, num_heads: int, use_rpb: bool) -> Var:
    params = attn_params_from_store(store, prefix, num_heads, use_rpb)
    out_data, saved = att.attention_apply(h.data, coords, rb, params)
    out = Var(out_data)

    def bwd():
        g = out.grad
        if g is None:
            return
        grad_h, grads = att.attention_backward(g, saved, rb, params)
        for f in _ATTN_FIELDS:
            store.accumulate(f"{prefix}.{f}", getattr(grads, f))
        if use_rpb:
            store.accumulate(f"{prefix}.rpb", grads.rpb)
        h.add_grad(grad_h)

    _rec(tape, bwd)
    return out


def car_sub_block(tape, store: ParamStore, h: Var, coords, rb: att.AttnRulebook,
                  prefix: str, num_heads: int, use_rpb: bool) -> Var:
    """Pre-norm residual transformer sub-block: attention then feed-forward."""
    normed = layer_norm(tape, store, h, f"{prefix}.norm1.scale", f"{prefix}.norm1.shift")
    h = add(tape, h, attention(tape, store, normed, coords, rb,
                               f"{prefix}.attn", num_heads, use_rpb))
    normed = layer_norm(tape, store, h, f"{prefix}.norm2.scale", f"{prefix}.norm2.shift")
    hidden = gelu(tape, linear(tape, store, normed, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1"))
    return add(tape, h, linear(tape, store, hidden, f"{prefix}.ffn.w2", f"{prefix}.ffn.b2"))
