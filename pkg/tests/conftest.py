"""Shared test helpers: finite-difference gradient oracle and friends."""

import numpy as np
import pytest

from rephaze.tensor import Tape, Tensor, backward


def leaf64(arr, requires_grad=True) -> Tensor:
    """A float64 leaf tensor (gradient checks run the whole graph in f64)."""
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def rand64(rng, shape, lo=-1.0, hi=1.0, requires_grad=True) -> Tensor:
    return leaf64(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


def analytic_grads(fn, tensors):
    """Run fn(*tensors) under a tape and return the grad of each leaf."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn(*tensors)
    backward(loss, tape)
    return [t.grad.copy() if t.grad is not None else None for t in tensors]


def fd_gradcheck(fn, tensors, rng, n_samples=10, h=1e-3, rtol=1e-3, atol=1e-6):
    """Compare tape gradients of a scalar function against central differences.

    ``fn`` maps the given float64 leaf tensors to a scalar tensor.  For each
    leaf with ``requires_grad``, up to ``n_samples`` random coordinates are
    perturbed by +-h and the difference quotient is compared to the tape
    gradient with relative tolerance ``rtol``.
    Returns the number of coordinates checked.
    """
    grads = analytic_grads(fn, tensors)
    checked = 0
    for t, grad in zip(tensors, grads):
        if not t.requires_grad:
            continue
        assert grad is not None, "leaf with requires_grad ended up without a gradient"
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = min(n_samples, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(*tensors).item()
            flat[i] = orig - h
            lm = fn(*tensors).item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = gflat[i]
            err = abs(analytic - numeric)
            tol = atol + rtol * max(abs(analytic), abs(numeric))
            assert err <= tol, (
                f"gradient mismatch at flat index {i}: analytic {analytic:.8g}, "
                f"numeric {numeric:.8g}, err {err:.3g} > tol {tol:.3g}"
            )
            checked += 1
    assert checked > 0
    return checked


def conv_naive(x, w, b, stride=1, pad=0):
    """Six-nested-loop convolution oracle (float64, zero padding)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    bs, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((bs, o, out_h, out_w))
    for bi in range(bs):
        for oc in range(o):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = b[oc]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += w[oc, ci, i, j] * xp[bi, ci, oh * stride + i, ow * stride + j]
                    y[bi, oc, oh, ow] = acc
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(42)
