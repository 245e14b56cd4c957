"""Frozen miniature dual encoders with interlayer prompt attachment.

Both encoders are pre-LN transformers. The visual encoder embeds a feature
grid as patch tokens behind a class-summary token; one prompt tensor is
attached to the self-attention of each of its last ``attach_depth`` layers.
A prompt of length ``Lp`` is split across heads exactly like the projected
keys and values and prepended to them, so every query also attends to the
prompt rows. Outputs are sliced back to the ``L`` backbone positions; since
prompt-row queries are discarded by that slice they are never computed.

The text encoder consumes ``[text_prompt; class_token]`` as input tokens and
pools the final hidden state at the class-token position.

Everything is batched over a leading sequence axis ``N``. Forward functions
return a tape that the matching backward function consumes; gradients are
produced only for prompts and hidden states, never for the frozen weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .numerics import Parameter, Rng, gelu, gelu_backward, layer_norm_backward, layer_norm_forward

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    num_heads: int = 4
    embed_dim: int = 64
    prompt_len: int = 16
    attach_depth: int = 3
    ff_width: int = 128
    text_layers: int = 4
    grid: tuple[int, int, int] = (8, 8, 4)
    patch_size: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_layers < 1 or self.text_layers < 1:
            raise ConfigError("encoders need at least one layer")
        if not 1 <= self.attach_depth <= self.num_layers:
            raise ConfigError(f"attach_depth must lie in [1, {self.num_layers}], got {self.attach_depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")
        rows, cols, ch = self.grid
        if min(rows, cols, ch) < 1 or rows % self.patch_size or cols % self.patch_size:
            raise ConfigError(f"grid {self.grid} not tileable by patch size {self.patch_size}")

    @property
    def num_patches(self) -> int:
        return (self.grid[0] // self.patch_size) * (self.grid[1] // self.patch_size)

    @property
    def seq_len(self) -> int:
        """Visual token count including the class-summary token."""
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.grid[2]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "embed_dim": self.embed_dim,
            "prompt_len": self.prompt_len,
            "attach_depth": self.attach_depth,
            "ff_width": self.ff_width,
            "text_layers": self.text_layers,
            "grid": list(self.grid),
            "patch_size": self.patch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass(eq=False)
class Block:
    """Frozen weights of one transformer layer."""

    ln1_g: Parameter
    ln1_b: Parameter
    w_qkv: Parameter
    b_qkv: Parameter
    w_o: Parameter
    b_o: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    w_1: Parameter
    b_1: Parameter
    w_2: Parameter
    b_2: Parameter

    def parameters(self):
        return [getattr(self, f) for f in self.__dataclass_fields__]


@dataclass(eq=False)
class EncoderWeights:
    config: EncoderConfig
    patch_w: Parameter
    patch_b: Parameter
    cls_token: Parameter
    vis_pos: Parameter
    vis_blocks: list[Block]
    vis_ln_g: Parameter
    vis_ln_b: Parameter
    txt_pos: Parameter
    txt_blocks: list[Block]
    txt_ln_g: Parameter
    txt_ln_b: Parameter
    seed: int = 0

    def parameters(self) -> list[Parameter]:
        out = [self.patch_w, self.patch_b, self.cls_token, self.vis_pos]
        for b in self.vis_blocks:
            out += b.parameters()
        out += [self.vis_ln_g, self.vis_ln_b, self.txt_pos]
        for b in self.txt_blocks:
            out += b.parameters()
        out += [self.txt_ln_g, self.txt_ln_b]
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PrefixCache:
    """Hidden states of one image after the un-prompted lower layers."""

    image_id: int
    states: np.ndarray  # (L, d)


def _frozen(name, value):
    return Parameter(value, name=name, frozen=True)


def _init_block(rng: Rng, prefix: str, d: int, ff: int) -> Block:
    """Gaussian init: projections std 1/sqrt(fan_in), biases 0, LN affine (1, 0)."""
    s_d = 1.0 / np.sqrt(d)
    return Block(
        ln1_g=_frozen(f"{prefix}.ln1_g", np.ones(d)),
        ln1_b=_frozen(f"{prefix}.ln1_b", np.zeros(d)),
        w_qkv=_frozen(f"{prefix}.w_qkv", rng.normal((d, 3 * d), s_d)),
        b_qkv=_frozen(f"{prefix}.b_qkv", np.zeros(3 * d)),
        w_o=_frozen(f"{prefix}.w_o", rng.normal((d, d), s_d)),
        b_o=_frozen(f"{prefix}.b_o", np.zeros(d)),
        ln2_g=_frozen(f"{prefix}.ln2_g", np.ones(d)),
        ln2_b=_frozen(f"{prefix}.ln2_b", np.zeros(d)),
        w_1=_frozen(f"{prefix}.w_1", rng.normal((d, ff), s_d)),
        b_1=_frozen(f"{prefix}.b_1", np.zeros(ff)),
        w_2=_frozen(f"{prefix}.w_2", rng.normal((ff, d), 1.0 / np.sqrt(ff))),
        b_2=_frozen(f"{prefix}.b_2", np.zeros(d)),
    )


def init_frozen_encoder(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Deterministic stand-in for a pre-trained dual encoder.

    Patch projection std 1/sqrt(patch_dim); class-summary token std 1;
    positional tables std 0.5; transformer blocks per :func:`_init_block`.
    """
    config.validate()
    rng = Rng(seed).child("encoder")
    d, ff = config.embed_dim, config.ff_width
    vis = rng.child("visual")
    txt = rng.child("text")
    return EncoderWeights(
        config=config,
        patch_w=_frozen("vis.patch_w", vis.normal((config.patch_dim, d), 1.0 / np.sqrt(config.patch_dim))),
        patch_b=_frozen("vis.patch_b", np.zeros(d)),
        cls_token=_frozen("vis.cls", vis.normal(d, 1.0)),
        vis_pos=_frozen("vis.pos", vis.normal((config.seq_len, d), 0.5)),
        vis_blocks=[_init_block(vis.child("block", i), f"vis.{i}", d, ff) for i in range(config.num_layers)],
        vis_ln_g=_frozen("vis.ln_g", np.ones(d)),
        vis_ln_b=_frozen("vis.ln_b", np.zeros(d)),
        txt_pos=_frozen("txt.pos", txt.normal((config.prompt_len + 1, d), 0.5)),
        txt_blocks=[_init_block(txt.child("block", i), f"txt.{i}", d, ff) for i in range(config.text_layers)],
        txt_ln_g=_frozen("txt.ln_g", np.ones(d)),
        txt_ln_b=_frozen("txt.ln_b", np.zeros(d)),
        seed=seed,
    )


# --- multi-head self-attention with prompt attachment ----------------------


def _as_prompt_rows(prompt, d):
    if prompt is None:
        return np.empty((1, 0, d)), False
    prompt = np.asarray(prompt, dtype=np.float64)
    if prompt.ndim == 2:
        prompt = prompt[None]
    return prompt, prompt.shape[1] > 0


def msa_forward(a, blk: Block, H: int, prompt=None, qsel=slice(None), n_out=None):
    """Self-attention of ``a[:, qsel]`` over ``[prompt; a]``.

    a: (Nq, L, d) normalised hidden states; prompt: (Np, Lp, d), (Lp, d) or
    None. Output sequence n (of ``n_out``, default Nq) reads a[n % Nq] and
    prompt row n // (n_out / Np), so one projected batch can serve several
    prompts. Returns (out (n_out, Lq, d), tape).
    """
    Nq, L, d = a.shape
    N = n_out or Nq
    w, b = blk.w_qkv.value, blk.b_qkv.value
    aq = a[:, qsel]
    Lq = aq.shape[1]
    q = (aq.reshape(-1, d) @ w[:, :d] + b[:d]).reshape(Nq, Lq, d)
    kv = (a.reshape(-1, d) @ w[:, d:] + b[d:]).reshape(Nq, L, 2 * d)
    prm, has_prompt = _as_prompt_rows(prompt, d)
    if has_prompt and N % prm.shape[0]:
        raise ShapeError(f"{N} sequences cannot share {prm.shape[0]} prompts evenly")
    scale = 1.0 / np.sqrt(d // H)
    ctx, probs = kernels.K.prompted_attention_fwd(q, kv, prm, N, H, scale)
    out = (ctx.reshape(-1, d) @ blk.w_o.value + blk.b_o.value).reshape(N, Lq, d)
    tape = (a.shape, qsel, H, q, kv, prm, probs, scale, has_prompt)
    return out, tape


def msa_backward(dout, blk: Block, tape, need_da: bool = True):
    """Returns (da (Nq, L, d) or None, dprompt (Np, Lp, d) or None)."""
    (Nq, L, d), qsel, H, q, kv, prm, probs, scale, has_prompt = tape
    N, Lq, _ = dout.shape
    w = blk.w_qkv.value
    dctx = (dout.reshape(-1, d) @ blk.w_o.value.T).reshape(N, Lq, d)
    dq, dkv, dprompt = kernels.K.prompted_attention_bwd(q, kv, prm, probs, dctx, H, scale, need_da)
    dprompt = dprompt if has_prompt else None
    if not need_da:
        return None, dprompt
    if N != Nq:
        dq = dq.reshape(N // Nq, Nq, Lq, d).sum(axis=0)
        dkv = dkv.reshape(N // Nq, Nq, L, 2 * d).sum(axis=0)
    da = (dkv.reshape(-1, 2 * d) @ w[:, d:].T).reshape(Nq, L, d)
    da[:, qsel] += (dq.reshape(-1, d) @ w[:, :d].T).reshape(Nq, Lq, d)
    return da, dprompt


def prompted_msa(prompt, h, blk: Block, num_heads: int):
    """Single-sequence prompted attention: MSA over [prompt; h], sliced to h's length.

    prompt: (Lp, d) with Lp >= 0; h: (L, d). Returns (L, d).
    """
    prompt = np.asarray(prompt, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = blk.w_o.value.shape[0]
    if h.ndim != 2 or h.shape[1] != d or prompt.ndim != 2 or prompt.shape[1] != d:
        raise ShapeError(f"prompted_msa expects (Lp, {d}) and (L, {d}), got {prompt.shape} and {h.shape}")
    out, _ = msa_forward(h[None], blk, num_heads, prompt)
    return out[0]


# --- transformer block ----------------------------------------------------


def block_forward(x, blk: Block, H: int, prompt=None, qsel=slice(None), n_out=None):
    """Pre-LN block; only rows ``qsel`` of the output are produced.

    With ``n_out`` > len(x) the input rows are reused cyclically (see
    :func:`msa_forward`).
    """
    Nq = x.shape[0]
    a, ln1 = layer_norm_forward(x, blk.ln1_g.value, blk.ln1_b.value, LN_EPS)
    o, msa = msa_forward(a, blk, H, prompt, qsel, n_out)
    N = o.shape[0]
    res = x[:, qsel]
    x1 = (np.tile(res, (N // Nq, 1, 1)) if N != Nq else res) + o
    _, Lq, d = x1.shape
    bn, ln2 = layer_norm_forward(x1, blk.ln2_g.value, blk.ln2_b.value, LN_EPS)
    z = bn.reshape(-1, d) @ blk.w_1.value + blk.b_1.value
    g = gelu(z)
    m = (g @ blk.w_2.value + blk.b_2.value).reshape(N, Lq, d)
    return x1 + m, (x.shape, qsel, ln1, msa, ln2, z)


def block_backward(dx2, blk: Block, tape, need_dx: bool = True):
    """Returns (dx or None, dprompt or None)."""
    x_shape, qsel, ln1, msa, ln2, z = tape
    N, Lq, d = dx2.shape
    dg = dx2.reshape(-1, d) @ blk.w_2.value.T
    dz = gelu_backward(z, dg)
    dbn = (dz @ blk.w_1.value.T).reshape(N, Lq, d)
    dx1 = dx2 + layer_norm_backward(dbn, ln2)[0]
    da, dprompt = msa_backward(dx1, blk, msa, need_dx)
    if not need_dx:
        return None, dprompt
    Nq = x_shape[0]
    dx = layer_norm_backward(da, ln1)[0]
    if N != Nq:
        dx1 = dx1.reshape(N // Nq, Nq, Lq, d).sum(axis=0)
    dx[:, qsel] += dx1
    return dx, dprompt


def run_plain(x, blocks, H):
    for blk in blocks:
        x, _ = block_forward(x, blk, H)
    return x


# --- visual encoder --------------------------------------------------------


def embed_images(weights: EncoderWeights, grids) -> np.ndarray:
    """Feature grids (N, rows, cols, ch) -> token sequences (N, L, d)."""
    cfg = weights.config
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 3:
        grids = grids[None]
    if grids.shape[1:] != tuple(cfg.grid):
        raise ShapeError(f"expected grids of shape {cfg.grid}, got {grids.shape[1:]}")
    N = grids.shape[0]
    r, c, ch = cfg.grid
    p = cfg.patch_size
    patches = grids.reshape(N, r // p, p, c // p, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(N, -1, cfg.patch_dim)
    tok = patches @ weights.patch_w.value + weights.patch_b.value
    cls = np.broadcast_to(weights.cls_token.value, (N, 1, cfg.embed_dim))
    return np.concatenate([cls, tok], axis=1) + weights.vis_pos.value


def visual_prefix_batch(weights: EncoderWeights, tokens) -> np.ndarray:
    """Hidden states after the first ``num_layers - attach_depth`` plain layers."""
    cfg = weights.config
    cut = cfg.num_layers - cfg.attach_depth
    return run_plain(np.asarray(tokens, dtype=np.float64), weights.vis_blocks[:cut], cfg.num_heads)


def visual_prefix(weights: EncoderWeights, image_tokens, image_id: int = 0) -> PrefixCache:
    image_tokens = np.asarray(image_tokens, dtype=np.float64)
    cfg = weights.config
    if image_tokens.shape != (cfg.seq_len, cfg.embed_dim):
        raise ShapeError(f"expected tokens ({cfg.seq_len}, {cfg.embed_dim}), got {image_tokens.shape}")
    return PrefixCache(image_id, visual_prefix_batch(weights, image_tokens[None])[0])


def visual_head_forward(weights: EncoderWeights, states, prompts=None, cross: bool = False):
    """Prompted last layers plus final norm on the class-summary token.

    states: (B, L, d) prefix states. prompts: None, a shared (Lp, d) tensor,
    or (U, Lp, d). With ``cross`` every prompt is run against every state and
    the output is route-major (U * B rows, row u * B + b); otherwise U must
    be 1 or B and prompts pair with states row by row. The same prompt is
    attached at every prompted layer. Returns (features, tape).
    """
    cfg = weights.config
    H = cfg.num_heads
    x = np.asarray(states, dtype=np.float64)
    B = x.shape[0]
    N = B
    if prompts is not None:
        prompts, _ = _as_prompt_rows(prompts, cfg.embed_dim)
        U = prompts.shape[0]
        if prompts.shape[2] != cfg.embed_dim or not (cross or U in (1, B)):
            raise ShapeError(f"prompt shape {prompts.shape} incompatible with states {x.shape}")
        if cross:
            N = U * B
    blocks = weights.vis_blocks[cfg.num_layers - cfg.attach_depth:]
    tapes = []
    for i, blk in enumerate(blocks):
        qsel = slice(0, 1) if i == len(blocks) - 1 else slice(None)
        x, t = block_forward(x, blk, H, prompts, qsel, N)
        tapes.append(t)
    feat, ln = layer_norm_forward(x[:, 0], weights.vis_ln_g.value, weights.vis_ln_b.value, LN_EPS)
    return feat, (blocks, tapes, ln)


def visual_head_backward(dfeat, tape, need_dstates: bool = True):
    """Returns (dstates (B, L, d) or None, dprompts (U, Lp, d) or None).

    Prompt gradients are summed over all attached layers and over every
    sequence sharing a prompt.
    """
    blocks, tapes, ln = tape
    dx0 = layer_norm_backward(dfeat, ln)[0]
    dx = dx0[:, None, :]
    dprompt = None
    for i in range(len(blocks) - 1, -1, -1):
        dx, dp = block_backward(dx, blocks[i], tapes[i], need_dx=need_dstates or i > 0)
        if dp is not None:
            dprompt = dp if dprompt is None else dprompt + dp
    return dx, dprompt


def visual_encode(weights: EncoderWeights, cache: PrefixCache, prompt) -> np.ndarray:
    """Class-summary embedding (d,) of one cached image under one visual prompt."""
    prompt = np.asarray(prompt, dtype=np.float64)
    cfg = weights.config
    if prompt.ndim != 2 or prompt.shape[1] != cfg.embed_dim:
        raise ShapeError(f"visual prompt must be (Lp, {cfg.embed_dim}), got {prompt.shape}")
    feat, _ = visual_head_forward(weights, cache.states[None], prompt if prompt.shape[0] else None)
    return feat[0]


def visual_encode_naive(weights: EncoderWeights, grids, prompts=None) -> np.ndarray:
    """Full visual forward from raw grids with no prefix reuse (reference path)."""
    states = visual_prefix_batch(weights, embed_images(weights, grids))
    return visual_head_forward(weights, states, prompts)[0]


# --- text encoder ----------------------------------------------------------


def text_forward(weights: EncoderWeights, class_tokens, prompts=None):
    """Text features (M, d) for class tokens (M, d) under input prompts (M, Lp, d)."""
    cfg = weights.config
    class_tokens = np.asarray(class_tokens, dtype=np.float64)
    M, d = class_tokens.shape
    if prompts is None or np.shape(prompts)[1] == 0:
        seq = class_tokens[:, None, :]
        has_prompt = False
    else:
        prompts = np.asarray(prompts, dtype=np.float64)
        if prompts.shape[0] != M or prompts.shape[2] != d or prompts.shape[1] > cfg.prompt_len:
            raise ShapeError(f"text prompt shape {prompts.shape} incompatible with {M} tokens of dim {d}")
        seq = np.concatenate([prompts, class_tokens[:, None, :]], axis=1)
        has_prompt = True
    x = seq + weights.txt_pos.value[-seq.shape[1]:]
    H = cfg.num_heads
    tapes = []
    last = len(weights.txt_blocks) - 1
    for i, blk in enumerate(weights.txt_blocks):
        qsel = slice(-1, None) if i == last else slice(None)
        x, t = block_forward(x, blk, H, None, qsel)
        tapes.append(t)
    feat, ln = layer_norm_forward(x[:, -1], weights.txt_ln_g.value, weights.txt_ln_b.value, LN_EPS)
    return feat, (weights.txt_blocks, tapes, ln, has_prompt)


def text_backward(dfeat, tape):
    """Returns dprompts (M, Lp, d) or None."""
    blocks, tapes, ln, has_prompt = tape
    dx = layer_norm_backward(dfeat, ln)[0][:, None, :]
    for blk, t in zip(reversed(blocks), reversed(tapes)):
        dx, _ = block_backward(dx, blk, t)
    return dx[:, :-1] if has_prompt else None


def text_encode(weights: EncoderWeights, class_token, text_prompt) -> np.ndarray:
    class_token = np.asarray(class_token, dtype=np.float64)
    text_prompt = np.asarray(text_prompt, dtype=np.float64)
    d = weights.config.embed_dim
    if class_token.shape != (d,) or text_prompt.ndim != 2 or text_prompt.shape[1] != d:
        raise ShapeError(f"text_encode expects token ({d},) and prompt (Lp, {d})")
    feat, _ = text_forward(weights, class_token[None], text_prompt[None] if text_prompt.shape[0] else None)
    return feat[0]
