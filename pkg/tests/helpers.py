import numpy as np

from osacost.autodiff import Tensor, backward, default_dtype


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f(*arrays)
            a[idx] = orig - h
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def autodiff_grads(build, arrays):
    """Gradients of scalar ``build(*tensors)`` via backward, in float64."""
    with default_dtype(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*ts)
        backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def value(build, arrays):
    with default_dtype(np.float64):
        return float(build(*[Tensor(a) for a in arrays]).data)


def max_rel_err(build, arrays, h=1e-5):
    """max |autodiff - finite difference| / (|autodiff| + 1) over all entries."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ad = autodiff_grads(build, arrays)
    fd = central_diff(lambda *xs: value(build, xs), arrays, h=h)
    return max(float(np.max(np.abs(a - f) / (np.abs(a) + 1))) for a, f in zip(ad, fd))
