"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import backward


def numeric_grad(fn, param, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param.data``."""
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn())
        flat[i] = orig - step
        minus = float(fn())
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return out.reshape(param.data.shape)


def check_gradients(fn, params, step=1e-5, max_entries=None, rng=None, floor=1e-6):
    """Compare tape gradients of ``fn()`` against central differences.

    ``params`` maps names to leaf tensors.  Returns the worst relative error
    ``|a - n| / max(|a|, |n|, floor)`` over the checked entries, and a dict of
    per-parameter worst errors.
    """
    for t in params.values():
        t.grad = None
    backward(fn())
    per = {}
    for name, t in params.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        # param.data may be replaced by an optimizer; work on the live array
        t.data = np.array(t.data, copy=True)
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        numeric = numeric_grad(fn, t, step, idx)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        sel = np.arange(a.size) if idx is None else np.asarray(idx)
        err = np.abs(a[sel] - n[sel]) / np.maximum(np.maximum(np.abs(a[sel]), np.abs(n[sel])), floor)
        per[name] = float(err.max()) if err.size else 0.0
    worst = max(per.values()) if per else 0.0
    return worst, per
