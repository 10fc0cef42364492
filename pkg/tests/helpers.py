"""Independent oracles shared by the test modules."""
import numpy as np

from ieslab import models


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of scalar ``f(arrays)`` for each array, entry by entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            hi = f(arrays)
            a[idx] = orig - step
            lo = f(arrays)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def mean_loss_forward_only(x, y):
    """Scalar mean loss as a function of the parameter list, no tape involved."""
    def f(arrays):
        p = models.ModelParams.from_arrays(arrays)
        return float(models.forward_per_sample_loss(p, x, y, record=False).losses.data.mean())
    return f


def random_mlp_problem(rng, d_in=None, hidden=None, classes=None, batch=None, kink_margin=1e-3):
    """Random 2-layer MLP and batch whose hidden pre-activations avoid the ReLU kink."""
    d_in = d_in or int(rng.integers(2, 7))
    hidden = hidden or int(rng.integers(2, 7))
    classes = classes or int(rng.integers(2, 5))
    batch = batch or int(rng.integers(1, 6))
    while True:
        params = models.init(models.MlpSpec((d_in, hidden, classes)), int(rng.integers(1 << 30)))
        params.biases = [rng.normal(0, 0.1, b.shape) for b in params.biases]
        x = rng.normal(size=(batch, d_in))
        y = rng.integers(0, classes, size=batch)
        pre = x @ params.weights[0] + params.biases[0]
        if np.min(np.abs(pre)) > kink_margin:
            return params, x, y
