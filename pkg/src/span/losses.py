"""Classification, segmentation, and discrete-time survival losses.

Heads emit logits; training uses fused log-softmax forms for stability.
The probability-space entry points (ce_loss, dice_loss, hybrid_loss) define
the reference semantics and are what the fused paths are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .errors import DegenerateQuantiles, DomainError

CLAMP = 1e-12


@dataclass
class LossSpec:
    """kind: ce | hybrid | survival; dice_weight is the hybrid mixing factor."""

    kind: str = "ce"
    dice_weight: float = 0.75
    dice_eps: float = 1.0
    k_bins: int = 3

    def __post_init__(self):
        if not 0.0 <= self.dice_weight <= 1.0:
            raise ValueError("dice_weight must lie in [0, 1]")
        if self.kind not in ("ce", "hybrid", "survival"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if (p < 0).any() or (p > 1).any():
        raise DomainError("probabilities outside [0, 1]")
    return np.clip(p, CLAMP, 1.0)


def ce_loss(probs, labels) -> float:
    """Mean negative log-probability of the true class.

    probs: (c,) for a single sample or (N, c) per-site; labels scalar or (N,).
    """
    p = _check_probs(probs)
    if p.ndim == 1:
        return float(-np.log(p[int(labels)]))
    y = np.asarray(labels, dtype=np.int64)
    return float(-np.log(p[np.arange(len(p)), y]).mean())


def dice_loss(probs, mask, eps: float = 1.0) -> float:
    """Soft Dice over the foreground probability: 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps)."""
    p = _check_probs(probs)
    fg = p[:, 1] if p.ndim == 2 else p
    y = np.asarray(mask, dtype=np.float64)
    return float(1.0 - (2.0 * (fg * y).sum() + eps) / (fg.sum() + y.sum() + eps))


def hybrid_loss(probs, mask, spec: LossSpec) -> float:
    """(1-lambda)*CE + lambda*Dice when the mask has any positives, else CE alone."""
    y = np.asarray(mask, dtype=np.int64)
    ce = ce_loss(probs, y)
    if y.sum() == 0:
        return ce
    lam = spec.dice_weight
    return (1.0 - lam) * ce + lam * dice_loss(probs, y, spec.dice_eps)


# ---------------------------------------------------------------------------
# Fused logits-space training ops
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(tape: Tape | None, logits: Var, label: int):
    """Single-sample fused log-softmax cross-entropy; returns (loss, probs).

    Accepts (c,) logits or a (1, c) row.
    """
    flat = logits.data.reshape(-1)
    p = softmax(flat)
    z = flat - flat.max()
    logp = z - np.log(np.exp(z).sum())
    out = Var(np.asarray(-logp[label], dtype=flat.dtype))

    def bwd():
        if out.grad is None:
            return
        g = p.copy()
        g[label] -= 1.0
        logits.add_grad((out.grad * g).reshape(logits.data.shape))

    if tape is not None:
        tape.record(bwd)
    return out, p


def hybrid_seg_loss(tape: Tape | None, logits: Var, mask, spec: LossSpec):
    """Per-site hybrid CE+Dice on (N, s) logits; returns (loss, probs).

    Dice uses the class-1 (foreground) probability; CE averages over sites.
    Matches hybrid_loss(softmax(logits), mask, spec) exactly.
    """
    y = np.asarray(mask, dtype=np.int64)
    n, s = logits.data.shape
    p = softmax(logits.data)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(n), y].mean()
    has_fg = y.sum() > 0
    lam = spec.dice_weight if has_fg else 0.0
    eps = spec.dice_eps
    if has_fg:
        fg = p[:, 1]
        num = 2.0 * (fg * y).sum() + eps
        den = fg.sum() + y.sum() + eps
        dice = 1.0 - num / den
        loss_val = (1.0 - lam) * ce + lam * dice
    else:
        num = den = 1.0
        loss_val = ce
    out = Var(np.asarray(loss_val, dtype=logits.data.dtype))

    def bwd():
        if out.grad is None:
            return
        g_ce = p.copy()
        g_ce[np.arange(n), y] -= 1.0
        g = (1.0 - lam) * g_ce / n
        if has_fg:
            # d(dice)/d(fg_i), then through the softmax jacobian row-wise.
            g_fg = -(2.0 * y * den - num) / (den * den)
            jac = p * (-p[:, 1:2])
            jac[:, 1] += p[:, 1]
            g = g + lam * g_fg[:, None] * jac
        logits.add_grad(out.grad * g)

    if tape is not None:
        tape.record(bwd)
    return out, p


# ---------------------------------------------------------------------------
# Discrete-time survival
# ---------------------------------------------------------------------------

def _hazards(logits: np.ndarray) -> np.ndarray:
    h = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return np.clip(h, CLAMP, 1.0 - CLAMP)


def survival_nll_loss(hazard_logits, labels, censor) -> float:
    """Negative log-likelihood over discrete hazards.

    h = logistic(logits); S_k = prod_{j<k}(1 - h_j), S_0 = 1.
    L = -(1/N) sum[(1-c)(log h_y + log S_y) + c log S_{y+1}].
    Hazards are clamped at 1e-12 so the result is always finite.
    """
    logits = np.atleast_2d(np.asarray(hazard_logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    c = np.atleast_1d(np.asarray(censor, dtype=np.int64))
    n, k = logits.shape
    # Uncensored samples index h_y, censored ones S_{y+1}; both need y < K.
    if (y < 0).any() or (y >= k).any():
        raise IndexError("survival label outside [0, K)")
    h = _hazards(logits)
    log_s_terms = np.log(1.0 - h)  # log(1-h_j)
    cum = np.concatenate([np.zeros((n, 1)), np.cumsum(log_s_terms, axis=1)], axis=1)
    rows = np.arange(n)
    log_s_y = cum[rows, y]          # log S_y
    log_s_y1 = cum[rows, y + 1]     # log S_{y+1}
    log_h_y = np.log(h[rows, y])
    ll = (1 - c) * (log_h_y + log_s_y) + c * log_s_y1
    return float(-ll.mean())


def survival_nll_grad(hazard_logits, labels, censor) -> np.ndarray:
    """d(loss)/d(logits) for survival_nll_loss, same clamping."""
    logits = np.atleast_2d(np.asarray(hazard_logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    c = np.atleast_1d(np.asarray(censor, dtype=np.int64))
    n, k = logits.shape
    h = _hazards(logits)
    grad = np.zeros_like(h)
    cols = np.arange(k)[None, :]
    # d log S_m / d logit_j = -h_j for j < m
    uncens = (c == 0)[:, None]
    before_y = cols < y[:, None]
    upto_y = cols <= y[:, None]
    grad += np.where(uncens & before_y, -h, 0.0)          # log S_y term
    event = (cols == y[:, None]) & uncens
    grad += np.where(event, 1.0 - h, 0.0)                 # log h_y term
    grad += np.where(~uncens & upto_y, -h, 0.0)           # log S_{y+1} term
    return -grad / n


def discretize_survival(times, events, k_bins: int) -> np.ndarray:
    """Quantile bins from uncensored times, applied to every sample.

    Bin edges sit at the 1/K..(K-1)/K quantiles of event (uncensored) times;
    label = number of edges strictly below the time, so the last bin is
    right-inclusive.
    """
    t = np.asarray(times, dtype=np.float64)
    ev = np.asarray(events, dtype=np.int64)
    if (t <= 0).any():
        raise ValueError("survival times must be positive")
    uncens = t[ev == 1]
    if len(uncens) < k_bins:
        raise DegenerateQuantiles(
            f"{len(uncens)} uncensored samples cannot define {k_bins} bins")
    qs = np.arange(1, k_bins) / k_bins
    edges = np.quantile(uncens, qs)
    if np.any(np.diff(edges) <= 0):
        raise DegenerateQuantiles("quantile edges are not strictly increasing")
    return (t[:, None] > edges[None, :]).sum(axis=1).astype(np.int64)
