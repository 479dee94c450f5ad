"""Shared test oracles, kept independent of the library's gradient code."""

import numpy as np

from narralign.autodiff import Tape, Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x, element-wise."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def taped_grad(build, *arrays):
    """Run `build(*tensors)` under a tape and return (loss value, grads).

    `build` must return a 1x1 Tensor; grads come back in argument order.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    grads = tape.backward(out)
    return out.item(), [grads.get(t, np.zeros_like(t.data)) for t in tensors]


def check_grad(build, arrays, rtol=1e-4, h=1e-4):
    """Compare taped gradients against finite differences for every input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, grads = taped_grad(build, *arrays)
    for pos, (arr, g) in enumerate(zip(arrays, grads)):
        def scalar_fn(x, pos=pos):
            probe = [a.copy() for a in arrays]
            probe[pos] = x
            val, _ = taped_grad(build, *probe)
            return val

        ref = numeric_grad(scalar_fn, arr.copy(), h=h)
        denom = np.maximum(np.abs(ref), 1.0)
        err = np.max(np.abs(g - ref) / denom)
        assert err < rtol, f"input {pos}: rel err {err:.3e} >= {rtol}"
