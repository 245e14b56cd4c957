"""Fixed battery of finite-difference checks over every backward rule.

Each check projects an op's output onto a fixed random cotangent ``W`` so the
scalar loss is ``sum(W * f(theta))`` and the analytic gradient is the op's
backward applied to ``W``. The last check runs the whole two-class prompted
pipeline under the BCE objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import kernels, numerics
from .numerics import Parameter, Rng, finite_diff_check
from .prompting import PromptStore
from .scoring import bce_from_margin, score_backward, score_batch

TOLERANCE = 1e-5

SMALL = enc.EncoderConfig(
    num_layers=3, num_heads=2, embed_dim=8, prompt_len=2, attach_depth=2,
    ff_width=12, text_layers=2, grid=(4, 4, 2), patch_size=2,
)


@dataclass(frozen=True)
class GradResult:
    name: str
    rel_err: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err)) and self.rel_err <= self.tol


def _params(rng: Rng, **shapes) -> list[Parameter]:
    return [Parameter(rng.child(k).normal(s), name=k) for k, s in shapes.items()]


def _projected(fwd, bwd, params, rng):
    """Loss ``sum(W * fwd(*values))`` with analytic gradients ``bwd(values, W)``."""
    vals = [p.value for p in params]
    out = fwd(*vals)
    W = rng.child("cotangent").normal(np.shape(out))
    analytic = [np.asarray(g) for g in bwd(vals, W)]
    return (lambda ps: float(np.sum(W * fwd(*[p.value for p in ps])))), analytic


def _check_matmul(rng):
    ps = _params(rng, a=(3, 4), b=(4, 2))
    return ps, *_projected(numerics.matmul, lambda v, W: numerics.matmul_backward(v[0], v[1], W), ps, rng)


def _check_softmax(rng):
    ps = _params(rng, m=(3, 5))
    tau = 2.0

    def bwd(v, W):
        return [numerics.softmax_rows_backward(numerics.softmax_rows(v[0], tau), W, tau)]

    return ps, *_projected(lambda m: numerics.softmax_rows(m, tau), bwd, ps, rng)


def _check_cosine(rng):
    ps = _params(rng, u=(4, 6), v=(4, 6))

    def bwd(v, W):
        c, nu, nv = numerics.cosine_rows(v[0], v[1])
        return numerics.cosine_rows_backward(v[0], v[1], c, nu, nv, W)

    return ps, *_projected(lambda u, v: numerics.cosine_rows(u, v)[0], bwd, ps, rng)


def _check_layer_norm(rng):
    ps = _params(rng, x=(3, 2, 5), scale=(5,), shift=(5,))

    def bwd(v, W):
        _, cache = numerics.layer_norm_forward(*v)
        return numerics.layer_norm_backward(W, cache)

    return ps, *_projected(numerics.layer_norm, bwd, ps, rng)


def _check_gelu(rng):
    ps = _params(rng, x=(4, 5))
    return ps, *_projected(numerics.gelu, lambda v, W: [numerics.gelu_backward(v[0], W)], ps, rng)


def _check_bce(rng):
    ps = _params(rng, margin=(5, 3))
    labels = rng.child("labels").uniform((5, 3)) < 0.5
    mask = np.ones((5, 3), dtype=bool)
    mask[0, 1] = False
    tau = 3.0
    analytic = [bce_from_margin(ps[0].value, labels, mask, tau)[1]]
    return ps, (lambda p: bce_from_margin(p[0].value, labels, mask, tau)[0]), analytic


def _attention_check(backend_name):
    def build(rng):
        H, d = 2, 6
        ps = _params(rng, q=(2, 3, d), kv=(2, 4, 2 * d), prompt=(2, 2, d))
        scale = 1.0 / np.sqrt(d // H)
        K = kernels.get_backend(backend_name)

        def fwd(q, kv, prm):
            return K.prompted_attention_fwd(q, kv, prm, 4, H, scale)[0]

        def bwd(v, W):
            _, probs = K.prompted_attention_fwd(*v, 4, H, scale)
            dq, dkv, dprm = K.prompted_attention_bwd(*v, probs, W, H, scale, True)
            # four sequences cycle over two q/kv rows
            return dq.reshape(2, 2, 3, d).sum(0), dkv.reshape(2, 2, 4, 2 * d).sum(0), dprm

        return ps, *_projected(fwd, bwd, ps, rng)

    return build


def _encoder(rng):
    return enc.init_frozen_encoder(SMALL, 7)


def _check_msa(rng):
    w = _encoder(rng)
    blk = w.vis_blocks[-1]
    d = SMALL.embed_dim
    ps = _params(rng, a=(2, SMALL.seq_len, d), prompt=(1, SMALL.prompt_len, d))

    def fwd(a, prm):
        return enc.msa_forward(a, blk, SMALL.num_heads, prm, slice(None), 2)[0]

    def bwd(v, W):
        _, tape = enc.msa_forward(v[0], blk, SMALL.num_heads, v[1], slice(None), 2)
        return enc.msa_backward(W, blk, tape)

    return ps, *_projected(fwd, bwd, ps, rng)


def _check_block(rng):
    w = _encoder(rng)
    blk = w.vis_blocks[-1]
    d = SMALL.embed_dim
    ps = _params(rng, x=(2, SMALL.seq_len, d), prompt=(2, SMALL.prompt_len, d))

    def fwd(x, prm):
        return enc.block_forward(x, blk, SMALL.num_heads, prm, slice(None), 4)[0]

    def bwd(v, W):
        _, tape = enc.block_forward(v[0], blk, SMALL.num_heads, v[1], slice(None), 4)
        return enc.block_backward(W, blk, tape)

    return ps, *_projected(fwd, bwd, ps, rng)


def _check_visual_head(rng):
    w = _encoder(rng)
    d = SMALL.embed_dim
    ps = _params(rng, states=(3, SMALL.seq_len, d), prompts=(2, SMALL.prompt_len, d))

    def fwd(st, prm):
        return enc.visual_head_forward(w, st, prm, cross=True)[0]

    def bwd(v, W):
        _, tape = enc.visual_head_forward(w, v[0], v[1], cross=True)
        return enc.visual_head_backward(W, tape)

    return ps, *_projected(fwd, bwd, ps, rng)


def _check_text(rng):
    w = _encoder(rng)
    d = SMALL.embed_dim
    toks = rng.child("tokens").normal((3, d))
    ps = _params(rng, prompts=(3, SMALL.prompt_len, d))

    def bwd(v, W):
        _, tape = enc.text_forward(w, toks, v[0])
        return [enc.text_backward(W, tape)]

    return ps, *_projected(lambda prm: enc.text_forward(w, toks, prm)[0], bwd, ps, rng)


def _check_pipeline(rng):
    """BCE of a two-class prompted forward with respect to all eight prompt tensors."""
    w = _encoder(rng)
    store = PromptStore(SMALL.prompt_len, SMALL.embed_dim, seed=3, init_std=0.5)
    classes = [0, 1]
    store.begin_task(1, classes)
    grids = rng.child("grids").normal((4,) + SMALL.grid)
    states = enc.visual_prefix_batch(w, enc.embed_images(w, grids))
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 1]], dtype=bool)
    mask = np.ones_like(labels)
    params = store.trainable_params()

    def loss(_ps):
        sp, sn, _ = score_batch(w, store, classes, states=states)
        return bce_from_margin(sp - sn, labels, mask)[0]

    for p in params:
        p.zero_grad()
    sp, sn, tape = score_batch(w, store, classes, states=states, need_tape=True)
    _, g = bce_from_margin(sp - sn, labels, mask)
    score_backward(w, g, -g, tape)
    analytic = [p.grad.copy() for p in params]
    return params, loss, analytic


BATTERY = {
    "matmul": _check_matmul,
    "softmax_rows": _check_softmax,
    "cosine": _check_cosine,
    "layer_norm": _check_layer_norm,
    "gelu": _check_gelu,
    "bce": _check_bce,
    "attention[python]": _attention_check("python"),
    "attention[compiled]": _attention_check("compiled"),
    "prompted_msa": _check_msa,
    "block": _check_block,
    "visual_head": _check_visual_head,
    "text_encoder": _check_text,
    "pipeline_2class": _check_pipeline,
}


def run_battery(names=None, tol: float = TOLERANCE, seed: int = 0) -> list[GradResult]:
    """Run the named checks (default: all available) in battery order."""
    out = []
    for name, build in BATTERY.items():
        if names is not None and name not in names:
            continue
        if name == "attention[compiled]" and kernels._compiled is None:
            continue
        params, loss, analytic = build(Rng(seed).child("gradcheck", name))
        out.append(GradResult(name, finite_diff_check(loss, params, analytic=analytic), tol))
    return out
