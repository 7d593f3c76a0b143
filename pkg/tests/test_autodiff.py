import numpy as np
import pytest

from span.autodiff import ParamStore, Tape, Var, adam_step, backward, grad_check
from span.errors import EmptyTape
from span import ops
from span.losses import softmax_ce


def quadratic_setup():
    store = ParamStore(np.float64)
    store.add("p", np.array([1.0, -2.0, 3.0]))

    def run(tape):
        p = ops.param_var(tape, store, "p")
        out = Var(np.asarray(0.5 * (p.data**2).sum()))

        def bwd():
            if out.grad is not None:
                p.add_grad(out.grad * p.data)

        if tape is not None:
            tape.record(bwd)
        return out

    return store, run


class TestTape:
    def test_quadratic_gradient_is_p(self):
        store, run = quadratic_setup()
        tape = Tape()
        loss = run(tape)
        backward(tape, loss)
        assert np.allclose(store.grad("p"), store["p"])

    def test_two_uses_accumulate(self):
        store = ParamStore(np.float64)
        store.add("w", np.array([[2.0]]))
        x = Var(np.array([[3.0]]))
        tape = Tape()
        a = ops.linear(tape, store, x, "w")
        b = ops.linear(tape, store, x, "w")
        out = ops.add(tape, a, b)
        loss = ops.sum_rows(tape, out)
        backward(tape, loss)
        # d(2*w*x)/dw = 2x
        assert np.allclose(store.grad("w"), 6.0)

    def test_backward_twice_without_zeroing_doubles(self):
        store, run = quadratic_setup()
        tape = Tape()
        loss = run(tape)
        tape.backward(loss)
        once = store.grad("p").copy()
        tape2 = Tape()
        tape2.backward(run(tape2))
        assert np.allclose(store.grad("p"), 2 * once)

    def test_empty_tape_raises(self):
        with pytest.raises(EmptyTape):
            Tape().backward(Var(np.asarray(1.0)))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        store = ParamStore(np.float64)
        store.add("p", np.array([1.0, 1.0, 1.0]))
        store.accumulate("p", np.array([1e-4, -3.0, 250.0]))
        adam_step(store, lr=0.01)
        # bias-corrected first step moves by ~lr * sign(g)
        assert np.allclose(store["p"], [1.0 - 0.01, 1.0 + 0.01, 1.0 - 0.01],
                           atol=1e-6)

    def test_zero_gradient_no_move(self):
        store = ParamStore(np.float64)
        store.add("p", np.array([5.0]))
        adam_step(store, lr=0.1)
        assert store["p"][0] == 5.0

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            store = ParamStore(np.float64)
            store.add("p", np.array([1.0, 2.0]))
            for t in range(3):
                store.accumulate("p", np.array([0.5, -0.25]))
                adam_step(store, lr=0.05)
                store.zero_grad()
            outs.append(store["p"].copy())
        assert np.array_equal(outs[0], outs[1])


class TestGradCheck:
    def test_linear_layer_nearly_exact(self):
        rng = np.random.default_rng(0)
        store = ParamStore(np.float64)
        store.add("w", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=3))
        x = rng.normal(size=(5, 4))
        g = rng.normal(size=(5, 3))

        def run(tape):
            y = ops.linear(tape, store, Var(x), "w", "b")
            out = Var(np.asarray((y.data * g).sum()))

            def bwd():
                if out.grad is not None:
                    y.add_grad(out.grad * g)

            if tape is not None:
                tape.record(bwd)
            return out

        tape = Tape()
        loss = run(tape)
        tape.backward(loss)
        err = grad_check(lambda: float(run(None).data), store, eps=1e-4)
        assert err < 1e-9

    def test_corrupted_backward_detected(self):
        store = ParamStore(np.float64)
        store.add("p", np.array([0.7, -1.2]))

        def run(tape):
            p = ops.param_var(tape, store, "p")
            out = Var(np.asarray((p.data**3).sum()))

            def bwd():
                if out.grad is not None:
                    # deliberately wrong: factor 2 instead of 3
                    p.add_grad(out.grad * 2 * p.data**2)

            if tape is not None:
                tape.record(bwd)
            return out

        tape = Tape()
        loss = run(tape)
        tape.backward(loss)
        err = grad_check(lambda: float(run(None).data), store, eps=1e-4)
        assert err > 1e-2

    def test_full_chain_under_tolerance(self):
        rng = np.random.default_rng(1)
        store = ParamStore(np.float64)
        store.add("w1", rng.normal(size=(6, 4)) * 0.5)
        store.add("b1", rng.normal(size=6) * 0.1)
        store.add("n.scale", np.ones(6))
        store.add("n.shift", np.zeros(6))
        store.add("w2", rng.normal(size=(3, 6)) * 0.5)
        x = rng.normal(size=(4, 4))

        def run(tape):
            h = ops.linear(tape, store, Var(x), "w1", "b1")
            h = ops.layer_norm(tape, store, h, "n.scale", "n.shift")
            h = ops.gelu(tape, h)
            h = ops.linear(tape, store, h, "w2")
            h = ops.sum_rows(tape, h, keepdims=True)
            loss, _ = softmax_ce(tape, h, 1)
            return loss

        tape = Tape()
        loss = run(tape)
        tape.backward(loss)
        err = grad_check(lambda: float(run(None).data), store, eps=1e-4)
        assert err < 1e-6
