"""Central finite differences, kept independent of the code under test."""
import numpy as np


def numeric_grad(f, x, h=1e-6):
    """d f / d x for scalar-valued f, perturbing x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def sampled_grad_error(f, x, analytic, n=40, h=1e-6, seed=0):
    """Relative error on ``n`` randomly chosen entries of a large tensor."""
    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    picks = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    num = np.empty(len(picks))
    for j, i in enumerate(picks):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        num[j] = (fp - fm) / (2 * h)
    return rel_error(analytic.reshape(-1)[picks], num)
