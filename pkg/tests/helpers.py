"""Shared test utilities: the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from nightshift import tensor as T


def numeric_gradient(fn, arrays, wrt: int, proj: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of proj . fn(arrays) w.r.t. arrays[wrt].

    fn takes plain float64 arrays and returns one array. Independent of the
    tape: this is the oracle the analytic backward is checked against.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[wrt])
    it = np.nditer(base[wrt], flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[wrt][idx] += h
        minus[wrt][idx] -= h
        lp = float((fn(plus) * proj).sum())
        lm = float((fn(minus) * proj).sum())
        out[idx] = (lp - lm) / (2 * h)
        it.iternext()
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def directional_gradient_check(build, shapes, seed: int = 0, h: float = 1e-3, tol: float = 1e-3, directions: int = 4) -> float:
    """Compare ⟨tape gradient, d⟩ against a central difference along random d.

    Cheap enough for whole networks, where per-element differences would need
    thousands of forward passes. Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1.0, 1.0, s) for s in shapes]
    with T.use_dtype(np.float64):
        inputs = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = build(inputs)
        proj = rng.uniform(-1.0, 1.0, out.shape)
        T.backward(T.total(T.mul(out, T.Tensor(proj))))
        grads = [inp.grad.copy() for inp in inputs]

        def loss_at(arrs):
            ins = [T.Tensor(a) for a in arrs]
            return float((build(ins).data * proj).sum())

        worst = 0.0
        for _ in range(directions):
            ds = [rng.standard_normal(s) for s in shapes]
            ds = [d / np.linalg.norm(d.ravel()) for d in ds]
            numeric = (
                loss_at([a + h * d for a, d in zip(arrays, ds)])
                - loss_at([a - h * d for a, d in zip(arrays, ds)])
            ) / (2 * h)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, ds))
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, err)
            assert err < tol, f"directional gradient error {err:.3e} >= {tol}"
    return worst


def check_gradients(build, shapes, seed: int = 0, h: float = 1e-3, tol: float = 1e-3) -> float:
    """Compare tape gradients against finite differences in float64.

    build maps a list of Tensors to one output Tensor. Every input is checked.
    Returns the worst relative error seen (asserts it is under tol).
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1.0, 1.0, s) for s in shapes]
    worst = 0.0
    with T.use_dtype(np.float64):
        inputs = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = build(inputs)
        proj = rng.uniform(-1.0, 1.0, out.shape)
        loss = T.total(T.mul(out, T.Tensor(proj)))
        T.backward(loss)

        def fn_factory(k):
            def fn(arrs):
                with T.use_dtype(np.float64):
                    ins = [T.Tensor(a) for a in arrs]
                    return build(ins).data
            return fn

        for k, inp in enumerate(inputs):
            ref = numeric_gradient(fn_factory(k), arrays, k, proj, h=h)
            err = relative_error(inp.grad, ref)
            worst = max(worst, err)
            assert err < tol, f"input {k}: relative gradient error {err:.3e} >= {tol}"
    return worst
