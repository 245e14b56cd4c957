"""Pure numpy implementations of the hot kernels.

These are the reference semantics; the compiled module ``_kernels`` must agree
with them to rounding. All arrays are float64 and C-contiguous on return.
"""

import numpy as np

GELU_K = 1.702


def _expand(q, kv, prompt, N):
    Nq = q.shape[0]
    if Nq != N:
        q = np.tile(q, (N // Nq, 1, 1))
        kv = np.tile(kv, (N // Nq, 1, 1))
    Np = prompt.shape[0]
    if prompt.shape[1] and Np != N:
        prompt = np.repeat(prompt, N // Np, axis=0)
    return q, kv, prompt


def _heads(x, H):
    N, L, d = x.shape
    return x.reshape(N, L, H, d // H).transpose(0, 2, 1, 3)


def prompted_attention_fwd(q, kv, prompt, N, H, scale):
    """Multi-head attention of q over [prompt; k] with values [prompt; v].

    q: (Nq, Lq, d); kv: (Nq, L, 2d) keys then values; prompt: (Np, Lp, d).
    Logical sequence n reads q/kv row n % Nq and prompt row n // (N / Np).
    Returns ctx (N, Lq, d) and probs (N, H, Lq, Lp + L).
    """
    d = q.shape[2]
    q, kv, prompt = _expand(q, kv, prompt, N)
    k, v = kv[..., :d], kv[..., d:]
    if prompt.shape[1]:
        k = np.concatenate([prompt, k], axis=1)
        v = np.concatenate([prompt, v], axis=1)
    qh, kh, vh = _heads(q, H), _heads(k, H), _heads(v, H)
    s = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    s *= scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    ctx = np.matmul(s, vh).transpose(0, 2, 1, 3).reshape(N, -1, d)
    return ctx, s


def prompted_attention_bwd(q, kv, prompt, probs, dctx, H, scale, need_dqkv):
    """Returns (dq, dkv, dprompt); dq and dkv are None unless ``need_dqkv``."""
    N, Lq, d = dctx.shape
    Np, Lp = prompt.shape[:2]
    q, kv, prm = _expand(q, kv, prompt, N)
    k, v = kv[..., :d], kv[..., d:]
    if Lp:
        k = np.concatenate([prm, k], axis=1)
        v = np.concatenate([prm, v], axis=1)
    qh, kh, vh = _heads(q, H), _heads(k, H), _heads(v, H)
    gh = _heads(dctx, H)
    dv = np.matmul(probs.transpose(0, 1, 3, 2), gh)
    dp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    ds *= scale
    dk = np.matmul(ds.transpose(0, 1, 3, 2), qh)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(N, -1, d)

    dk, dv = merge(dk), merge(dv)
    dprompt = np.zeros((Np, Lp, d))
    if Lp:
        dprompt = (dk[:, :Lp] + dv[:, :Lp]).reshape(Np, N // Np, Lp, d).sum(axis=1)
    if not need_dqkv:
        return None, None, dprompt
    dq = merge(np.matmul(ds, kh))
    dkv = np.concatenate([dk[:, Lp:], dv[:, Lp:]], axis=2)
    return dq, dkv, dprompt


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm of a 2-D array. Returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(dy, xhat, rstd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, np.sum(dy * xhat, axis=0), dy.sum(axis=0)


def gelu_fwd(x):
    """QuickGELU, x * sigmoid(1.702 x)."""
    return x / (1.0 + np.exp(-GELU_K * x))


def gelu_bwd(x, dy):
    s = 1.0 / (1.0 + np.exp(-GELU_K * x))
    return dy * s * (1.0 + GELU_K * x * (1.0 - s))
