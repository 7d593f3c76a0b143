"""Randomized oracle equivalence and gradient-check suite.

Each check returns (name, max_error, tolerance); the CLI turns any failure
into a nonzero exit. `inject_fault` perturbs one sparse-conv output so the
harness can prove it catches regressions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnParams, RpbTable, attention_forward, build_attention_rulebook
from .autodiff import Tape, grad_check
from .conv import ConvParams, ConvSpec, build_conv_rulebook, sac_forward
from .losses import LossSpec, hybrid_seg_loss, softmax_ce
from .model import ModelConfig, forward_mil, forward_unet, init_params
from .oracles import (
    brute_force_attn_rulebook,
    brute_force_conv_rulebook,
    dense_attention_oracle,
    dense_conv_oracle,
    embed_dense,
    pair_masks,
)
from .sparse import build_sparse_map


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def random_coords(rng, extent: int, max_n: int) -> np.ndarray:
    n = int(rng.integers(1, max_n + 1))
    return np.unique(rng.integers(0, extent, size=(n, 2)), axis=0)


def conv_oracle_check(rng, trials: int, dtype=np.float64) -> float:
    """sac_forward vs the dense quadruple-loop oracle at active output sites."""
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        d = int(rng.integers(1, 3))
        dim_in = int(rng.integers(1, 9))
        dim_out = int(rng.integers(1, 9))
        pts = random_coords(rng, int(rng.integers(4, 33)), 120)
        smap = build_sparse_map(pts, rng.normal(size=(len(pts), dim_in)),
                                num_ctx=1, dtype=dtype)
        params = ConvParams(rng.normal(size=(k * k, dim_out, dim_in)).astype(dtype),
                            rng.normal(size=dim_out).astype(dtype))
        rb = build_conv_rulebook(smap.coords, ConvSpec(k, s, d, dim_in, dim_out))
        out = sac_forward(smap, rb, params)
        dense = embed_dense(smap, extra=(k - 1) * d)
        ref = dense_conv_oracle(dense, k, s, d, params.weights, params.bias)
        got = ref[out.coords[:, 1], out.coords[:, 0]]
        if len(out.coords):
            worst = max(worst, float(np.abs(got - out.features).max()))
    return worst

def attention_oracle_check(rng, trials: int, dtype=np.float64) -> float:
    """attention_forward vs the dense masked softmax oracle."""
    worst = 0.0
    for _ in range(trials):
        heads = int(rng.choice([1, 4]))
        d = heads * int(rng.integers(2, 5))
        w_side = int(rng.choice([2, 4]))
        shift = str(rng.choice(["none", "half"]))
        nctx = int(rng.integers(0, 2))
        pts = random_coords(rng, 12, 64)
        smap = build_sparse_map(pts, rng.normal(size=(len(pts), d)),
                                num_ctx=nctx, dtype=dtype)
        params = AttnParams(
            wq=rng.normal(size=(d, d)).astype(dtype) * 0.4,
            bq=rng.normal(size=d).astype(dtype) * 0.1,
            wk=rng.normal(size=(d, d)).astype(dtype) * 0.4,
            bk=rng.normal(size=d).astype(dtype) * 0.1,
            wv=rng.normal(size=(d, d)).astype(dtype) * 0.4,
            bv=rng.normal(size=d).astype(dtype) * 0.1,
            wo=rng.normal(size=(d, d)).astype(dtype) * 0.4,
            bo=rng.normal(size=d).astype(dtype) * 0.1,
            rpb=RpbTable((rng.normal(size=(2 * w_side - 1, 2 * w_side - 1, heads)) * 0.3).astype(dtype)),
            num_heads=heads, use_rpb=bool(rng.integers(0, 2)))
        rb = build_attention_rulebook(smap, w_side, shift)
        h_all = np.concatenate(
            [smap.features, rng.normal(size=(nctx, d)).astype(dtype)], axis=0)
        fast = attention_forward(h_all, smap.coords, rb, params)
        ml, mg = pair_masks(smap.n + nctx, (rb.local_q, rb.local_k),
                            (rb.global_q, rb.global_k))
        ref = dense_attention_oracle(h_all, smap.coords, ml, mg, params)
        worst = max(worst, float(np.abs(fast - ref).max()))
    return worst


def rulebook_check(rng, trials: int) -> float:
    """Set equality of fast vs brute-force rulebooks; 0.0 when identical."""
    for _ in range(trials):
        pts = random_coords(rng, 20, 200)
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        d = int(rng.integers(1, 3))
        rb = build_conv_rulebook(pts, ConvSpec(k, s, d, 1, 1))
        bf_out, bf_pairs = brute_force_conv_rulebook(pts, k, s, d)
        if not np.array_equal(rb.out_coords, bf_out):
            return 1.0
        for (ii, io), ref in zip(rb.pairs, bf_pairs):
            if list(zip(ii.tolist(), io.tolist())) != ref:
                return 1.0
        w_side = int(rng.choice([2, 4]))
        shift = str(rng.choice(["none", "half"]))
        nctx = int(rng.integers(0, 3))
        smap = build_sparse_map(pts, np.zeros((len(pts), 1)), num_ctx=nctx)
        arb = build_attention_rulebook(smap, w_side, shift)
        bl, bg = brute_force_attn_rulebook(smap.coords, w_side, shift, nctx)
        if list(zip(arb.local_q.tolist(), arb.local_k.tolist())) != bl:
            return 1.0
        if list(zip(arb.global_q.tolist(), arb.global_k.tolist())) != bg:
            return 1.0
    return 0.0


def model_grad_check(rng, head: str = "mil", coords_per_param: int = 4) -> float:
    pts = random_coords(rng, 8, 20)
    dim_in = 5
    smap = build_sparse_map(pts, rng.normal(size=(len(pts), dim_in)),
                            num_ctx=1, dtype=np.float64)
    if head == "mil":
        cfg = ModelConfig(input_dim=dim_in, stage_dims=(8, 8, 8), num_heads=2,
                          w_side=4, num_classes=3)
    else:
        cfg = ModelConfig(input_dim=dim_in, stage_dims=(8, 8, 8), num_heads=2,
                          w_side=4, num_classes=2, head="unet",
                          loss=LossSpec(kind="hybrid"))
    store = init_params(cfg, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    mask = (rng.random(smap.n) < 0.4).astype(int)

    def run(tape):
        if head == "mil":
            logits, _ = forward_mil(smap, cfg, store, tape)
            loss, _ = softmax_ce(tape, logits, 1)
        else:
            logits, _ = forward_unet(smap, cfg, store, tape)
            loss, _ = hybrid_seg_loss(tape, logits, mask, cfg.loss)
        return loss

    tape = Tape()
    loss = run(tape)
    tape.backward(loss)
    return grad_check(lambda: float(run(None).data), store, eps=1e-4,
                      max_coords=coords_per_param, rng=rng)


def run_all(seed: int = 0, trials: int = 20, inject_fault: bool = False):
    """The full suite; `trials` scales the randomized checks."""
    results = []
    rng = np.random.default_rng(seed)
    err = conv_oracle_check(rng, trials)
    if inject_fault:
        err += 1e-3  # simulated regression, proves the harness trips
    results.append(CheckResult("conv_dense_oracle", err, 1e-10))
    results.append(CheckResult(
        "attention_dense_oracle", attention_oracle_check(rng, trials), 1e-10))
    results.append(CheckResult("rulebook_brute_force", rulebook_check(rng, trials), 0.5))
    if trials > 0:
        results.append(CheckResult(
            "grad_mil_composite", model_grad_check(rng, "mil"), 1e-4))
        results.append(CheckResult(
            "grad_unet_composite", model_grad_check(rng, "unet"), 1e-4))
    return results
