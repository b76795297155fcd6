"""Shared numeric oracles for the test suite."""

import numpy as np

import samb.tensor as T


def finite_diff_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom


def check_grad(build_loss, param: T.Tensor, step: float = 1e-5) -> float:
    """Compare tape gradients of ``param`` with central differences.

    ``build_loss`` must rebuild the whole graph from current parameter data
    and return a scalar Tensor.
    """
    T.clear_tape()
    param.zero_grad()
    loss = build_loss()
    T.backward(loss)
    analytic = param.grad.copy() if param.grad is not None else np.zeros_like(param.data)

    def f(x):
        T.clear_tape()
        return build_loss().item()

    numeric = finite_diff_grad(f, param.data, step)
    T.clear_tape()
    return rel_err(analytic, numeric)


def dense_attention_oracle(x: np.ndarray, w, n_heads: int, mask) -> np.ndarray:
    """Plain-numpy multi-head attention materializing the full score matrix
    with explicit -inf entries.  ``w`` is an AttentionWeights; ``x`` is
    [B, T, d]; ``mask`` is [T, T] or [B, T, T] additive."""
    b, t, d = x.shape
    dh = d // n_heads

    def proj(wm, bm):
        y = x @ wm.data + bm.data
        return y.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = proj(w.wq, w.bq), proj(w.wk, w.bk), proj(w.wv, w.bv)
    out = np.empty((b, n_heads, t, dh))
    for bi in range(b):
        m2 = mask if mask is None or mask.ndim == 2 else mask[bi]
        for h in range(n_heads):
            scores = q[bi, h] @ k[bi, h].T / np.sqrt(dh)
            if m2 is not None:
                scores = scores + m2
            probs = np.zeros_like(scores)
            for r in range(t):
                row = scores[r]
                mx = row.max()
                e = np.where(np.isneginf(row), 0.0, np.exp(row - mx))
                probs[r] = e / e.sum()
            out[bi, h] = probs @ v[bi, h]
    merged = out.transpose(0, 2, 1, 3).reshape(b, t, d)
    return merged @ w.wo.data + w.bo.data
