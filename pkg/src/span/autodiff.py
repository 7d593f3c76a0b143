"""Minimal reverse-mode scaffolding: parameter store, tape, checker, Adam.

The op set is small and closed, so instead of a general expression graph
each operation records one explicit backward closure on a tape; backward
replays the closures in exact reverse order of the forward pass. Gradients
accumulate (sum rule) until zero_grad; running backward twice without
zeroing doubles them.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyTape


class Var:
    """A value flowing through a taped forward pass."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = None

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    """Ordered record of executed ops; backward replays it reversed."""

    def __init__(self):
        self._entries = []

    def record(self, backward_fn):
        self._entries.append(backward_fn)

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Var, seed=1.0):
        if not self._entries:
            raise EmptyTape("backward on a tape with no recorded operations")
        loss.add_grad(np.asarray(seed, dtype=loss.data.dtype))
        for fn in reversed(self._entries):
            fn()


def backward(tape: Tape, loss: Var, seed=1.0):
    """Populate gradient buffers for everything reachable from the loss."""
    tape.backward(loss, seed)


class ParamStore:
    """Named parameter tensors with gradient and Adam moment buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def accumulate(self, name: str, grad):
        g = self.grads.get(name)
        if g is None:
            self.grads[name] = np.array(grad, dtype=self.params[name].dtype, copy=True)
        else:
            g += grad

    def grad(self, name: str) -> np.ndarray:
        g = self.grads.get(name)
        if g is None:
            return np.zeros_like(self.params[name])
        return g

    def zero_grad(self):
        self.grads.clear()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k][...] = v

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int | None = None):
    """Bias-corrected adaptive-moment update, in place.

    Parameters with no accumulated gradient are left untouched.
    """
    if t is None:
        store.step += 1
        t = store.step
    else:
        store.step = t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads.get(name)
        if g is None:
            continue
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p)
        v = store._v.get(name)
        if v is None:
            v = store._v[name] = np.zeros_like(p)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(bc2)
        denom += eps
        update = m / denom
        update *= lr / bc1
        p -= update


def grad_check(loss_fn, store: ParamStore, eps: float = 1e-4,
               max_coords: int = 200, rng=None, names=None,
               floor: float = 1e-6) -> float:
    """Max relative error of store.grads against central finite differences.

    loss_fn() must return the scalar loss as a pure function of the current
    store values. Analytic gradients must already be populated (run a taped
    forward + backward first). Checks up to max_coords randomly sampled
    coordinates per parameter; relative error is |a-n| / (|a|+|n|+floor).
    Use a float64 store: at eps=1e-4 single precision drowns the signal.

    The denominator floor masks finite-difference roundoff (~1e-11 at
    eps=1e-4 in double) on structurally zero gradients, e.g. the key
    projection bias, which cancels inside softmax. Genuine backward bugs
    show up at gradient scale, orders of magnitude above it.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name in (names if names is not None else store.names()):
        p = store.params[name]
        analytic = store.grad(name).ravel()
        flat = p.ravel()
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = loss_fn()
            flat[i] = keep - eps
            down = loss_fn()
            flat[i] = keep
            numeric = (up - down) / (2 * eps)
            a = analytic[i]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + floor)
            worst = max(worst, float(rel))
    return worst
