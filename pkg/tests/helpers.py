import numpy as np

from dropattention.tensor import Tape, Tensor


def central_diff(f, arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(loss_fn, tensors, step=1e-3):
    """Largest relative error between tape gradients and finite differences over ``tensors``."""
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.grad(loss, *tensors)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        numeric = central_diff(lambda: float(loss_fn().data), t.data, step)
        worst = max(worst, rel_err(g.data, numeric))
    return worst


def param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True, dtype=np.float64)
