"""Pure numpy implementations of the numeric hot spots.

These are the reference versions; the compiled module ``_ckernels`` must
agree with them to within floating-point reassociation error.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715
_TOP_P_SLACK = 1e-12


def gelu_forward(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(g, cache):
    x, t = cache
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * d


def layer_norm_forward(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std


def layer_norm_backward(g, y, inv_std):
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return inv_std * (g - gm - y * gym)


def log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def attention_forward(q, k, v):
    t = q.shape[-2]
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs @ v, probs


def attention_backward(g, q, k, v, probs):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dv = np.swapaxes(probs, -1, -2) @ g
    dp = g @ np.swapaxes(v, -1, -2)
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


def attention_decode(q, k_cache, v_cache, length):
    """One query per (row, head) against the first ``length`` cached positions.

    ``q`` is (N, H, dh); caches are (N, H, cap, dh).  Returns (N, H, dh).
    """
    k = k_cache[:, :, :length]
    v = v_cache[:, :, :length]
    scores = np.einsum("nhd,nhtd->nht", q, k) / np.sqrt(q.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("nht,nhtd->nhd", p, v)


def nucleus_sample(probs, uniforms, temperature, top_p):
    """Draw one token per row of ``probs`` using one uniform per row.

    ``temperature == 0`` is argmax with ties to the lowest id.  Otherwise the
    row is tempered, truncated to the smallest descending-probability prefix
    whose mass reaches ``top_p`` (ties ordered by id), renormalized, and
    inverted with the row's uniform.
    """
    probs = np.atleast_2d(probs)
    n, vocab = probs.shape
    out = np.empty(n, dtype=np.int64)
    if temperature == 0.0:
        out[:] = np.argmax(probs, axis=1)
        return out
    for i in range(n):
        p = probs[i]
        if temperature != 1.0:
            with np.errstate(divide="ignore"):
                lp = np.where(p > 0.0, np.log(p) / temperature, -np.inf)
            lp = lp - lp.max()
            p = np.exp(lp)
            p = p / p.sum()
        order = np.argsort(-p, kind="stable")
        sp = p[order]
        cum = np.cumsum(sp)
        keep = int(np.searchsorted(cum, top_p - _TOP_P_SLACK, side="left")) + 1
        keep = min(keep, vocab)
        kept = cum[keep - 1]
        j = min(int(np.searchsorted(cum[:keep], uniforms[i] * kept, side="right")), keep - 1)
        out[i] = order[j]
    return out
