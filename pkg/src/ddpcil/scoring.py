"""Similarity pairs, confidence-adjusted binary softmax, the progressive
temperature schedule and the binary cross-entropy objective.

The batched pipeline :func:`score_batch` computes, for every image and class,
the positive and negative similarities

    s+ = cos(text(P_T+, c), visual(P_V+, x)),   s- = cos(text(P_T-, c), visual(P_V-, x))

deduplicating encoder passes: text features are image independent, and a
visual prompt shared by several classes is run once per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc
from .errors import ConfigError, DomainError, ProtocolError, ShapeError
from .numerics import cosine, cosine_rows, cosine_rows_backward, sigmoid
from .prompting import PromptSet, PromptStore

CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class ScorePair:
    s_pos: float
    s_neg: float


@dataclass(frozen=True)
class PcdSchedule:
    tau_max: float
    gamma: float
    base_classes: int
    total_classes: int

    def __post_init__(self):
        if not self.tau_max > 1:
            raise ConfigError(f"tau_max must exceed 1, got {self.tau_max}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.total_classes > self.base_classes >= 1:
            raise ConfigError("need total_classes > base_classes >= 1")


def pcd_tau(schedule: PcdSchedule, seen_classes: int) -> float:
    """Temperature after ``seen_classes`` classes: 1 at the base task, tau_max at the end."""
    base, total = schedule.base_classes, schedule.total_classes
    if not base <= seen_classes <= total:
        raise DomainError(f"seen_classes {seen_classes} outside [{base}, {total}]")
    frac = (seen_classes - base) / (total - base)
    return 1.0 + (schedule.tau_max - 1.0) * frac ** schedule.gamma


def binary_confidence(s_pos, s_neg=None, tau: float = 1.0):
    """exp(s+/tau) / (exp(s+/tau) + exp(s-/tau)), evaluated as sigmoid((s+ - s-)/tau).

    Accepts a :class:`ScorePair` or two scalars/arrays.
    """
    if isinstance(s_pos, ScorePair):
        s_pos, s_neg = s_pos.s_pos, s_pos.s_neg
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    out = sigmoid((np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)) / tau)
    return float(out) if out.ndim == 0 else out


@dataclass
class PredictionMatrix:
    """Positive confidences (images x classes) with labels and a label mask."""

    confidence: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    class_ids: Sequence[int]

    @property
    def negative(self) -> np.ndarray:
        return 1.0 - self.confidence


def bce_loss(preds: PredictionMatrix, allowed_classes=None) -> float:
    """Masked binary cross-entropy, summed over classes and averaged over images.

    Any labeled entry in a column outside ``allowed_classes`` is a protocol
    violation (task-level partial labeling).
    """
    conf = np.asarray(preds.confidence, dtype=np.float64)
    if conf.shape != preds.labels.shape or conf.shape != preds.mask.shape:
        raise ShapeError("confidence, labels and mask must share a shape")
    if allowed_classes is not None:
        allowed = set(int(c) for c in allowed_classes)
        for j, c in enumerate(preds.class_ids):
            if int(c) not in allowed and np.any(preds.mask[:, j]):
                raise ProtocolError(f"class {c} is labeled but not in the current task")
    p = np.clip(conf, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = preds.labels.astype(np.float64)
    terms = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    terms = np.where(preds.mask, terms, 0.0)
    return float(terms.sum() / conf.shape[0])


def bce_from_margin(margin, labels, mask, tau: float = 1.0):
    """BCE and its gradient w.r.t. the margin ``s+ - s-`` (images x classes).

    Returns (loss, dloss/dmargin); the loss is averaged over images.
    """
    n = margin.shape[0]
    p = sigmoid(margin / tau)
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = labels.astype(np.float64)
    terms = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = float(np.where(mask, terms, 0.0).sum() / n)
    inside = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)
    grad = np.where(mask & inside, (p - y) / tau, 0.0) / n
    return loss, grad


# --- batched scoring pipeline ---------------------------------------------


def _routes(store: PromptStore, classes):
    """Per (class, branch) text and visual prompt parameters (None = un-prompted)."""
    out = []
    for c in classes:
        ps: PromptSet | None = store.set_for(c)
        row = []
        for branch in ("pos", "neg"):
            if ps is None:
                row.append((None, None))
            else:
                row.append((getattr(ps, f"text_{branch}"), getattr(ps, f"visual_{branch}")))
        out.append(row)
    return out


def text_features(weights, store: PromptStore, classes, need_tape: bool = False):
    """Text features (C, 2, d) for the positive and negative branch of each class."""
    routes = _routes(store, classes)
    d = weights.config.embed_dim
    feats = np.empty((len(classes), 2, d))
    prompted, plain = [], []
    for i, c in enumerate(classes):
        for b in range(2):
            p = routes[i][b][0]
            (prompted if p is not None else plain).append((i, b, c, p))
    tape = None
    if prompted:
        toks = np.stack([store.token(c) for _, _, c, _ in prompted])
        prm = np.stack([p.value for _, _, _, p in prompted])
        f, t = enc.text_forward(weights, toks, prm)
        for (i, b, _, _), row in zip(prompted, f):
            feats[i, b] = row
        tape = (prompted, t) if need_tape else None
    if plain:
        uniq = sorted({c for _, _, c, _ in plain})
        f, _ = enc.text_forward(weights, np.stack([store.token(c) for c in uniq]))
        lookup = dict(zip(uniq, f))
        for i, b, c, _ in plain:
            feats[i, b] = lookup[c]
    return feats, tape


def visual_features(weights, store: PromptStore, classes, states=None, grids=None, need_tape=False):
    """Visual features (B, C, 2, d).

    Pass prefix ``states`` (B, L, d) for the cached path, or raw ``grids`` to
    run every layer for every prompted sequence (reference path).
    """
    routes = _routes(store, classes)
    uniq: dict[int, object] = {}
    for row in routes:
        for _, vp in row:
            uniq.setdefault(id(vp), vp)
    prompted = [p for p in uniq.values() if p is not None]
    has_plain = any(p is None for p in uniq.values())
    B = (states if states is not None else grids).shape[0]
    d = weights.config.embed_dim
    index = {}
    blocks = []
    tape = None
    if prompted:
        U = len(prompted)
        prm = np.stack([p.value for p in prompted])
        if states is not None:
            f, t = enc.visual_head_forward(weights, states, prm, cross=True)
        else:
            st = enc.visual_prefix_batch(weights, enc.embed_images(weights, np.tile(grids, (U, 1, 1, 1))))
            f, t = enc.visual_head_forward(weights, st, np.repeat(prm, B, axis=0))
        f = f.reshape(U, B, d)
        for u, p in enumerate(prompted):
            index[id(p)] = len(blocks)
            blocks.append(f[u])
        if need_tape:
            tape = (prompted, B, t)
    if has_plain:
        st = states if states is not None else enc.visual_prefix_batch(weights, enc.embed_images(weights, grids))
        f, _ = enc.visual_head_forward(weights, st, None)
        index[id(None)] = len(blocks)
        blocks.append(f)
    allf = np.stack(blocks)  # (R, B, d)
    sel = np.array([[index[id(vp)] for _, vp in row] for row in routes], dtype=np.intp)  # (C, 2)
    return allf[sel].transpose(2, 0, 1, 3), (tape, sel)


def score_batch(weights, store: PromptStore, classes, states=None, grids=None, need_tape=False):
    """Similarity pairs for a batch: returns (s_pos (B, C), s_neg (B, C), tape)."""
    classes = list(classes)
    tfe, ttape = text_features(weights, store, classes, need_tape)
    vfe, (vtape, sel) = visual_features(weights, store, classes, states, grids, need_tape)
    tb = np.broadcast_to(tfe[None], vfe.shape)
    cos, nu, nv = cosine_rows(tb, vfe)
    tape = (tfe, vfe, cos, nu, nv, ttape, vtape, sel) if need_tape else None
    return cos[..., 0], cos[..., 1], tape


def score_backward(weights, ds_pos, ds_neg, tape) -> None:
    """Accumulate prompt gradients given dL/ds+ and dL/ds- (each B x C)."""
    tfe, vfe, cos, nu, nv, ttape, vtape, sel = tape
    g = np.stack([ds_pos, ds_neg], axis=-1)
    dt, dv = cosine_rows_backward(np.broadcast_to(tfe[None], vfe.shape), vfe, cos, nu, nv, g)
    if ttape is not None:
        prompted, t = ttape
        dtf = dt.sum(axis=0)  # (C, 2, d)
        dfeat = np.stack([dtf[i, b] for i, b, _, _ in prompted])
        dprm = enc.text_backward(dfeat, t)
        for (_, _, _, p), gp in zip(prompted, dprm):
            p.accumulate(gp)
    if vtape is not None:
        prompted, B, t = vtape
        U = len(prompted)
        d = vfe.shape[-1]
        dblock = np.zeros((U, B, d))
        C = sel.shape[0]
        for i in range(C):
            for b in range(2):
                r = sel[i, b]
                if r < U:
                    dblock[r] += dv[:, i, b]
        _, dprm = enc.visual_head_backward(dblock.reshape(U * B, d), t, need_dstates=False)
        if dprm.shape[0] != U:
            dprm = dprm.reshape(U, B, *dprm.shape[1:]).sum(axis=1)
        for p, gp in zip(prompted, dprm):
            p.accumulate(gp)


def class_scores(weights, cache: enc.PrefixCache, ps: PromptSet | None, token) -> ScorePair:
    """Score pair of one cached image for one class (single-item reference API)."""
    pairs = []
    for branch in ("pos", "neg"):
        tp = getattr(ps, f"text_{branch}") if ps is not None else None
        vp = getattr(ps, f"visual_{branch}") if ps is not None else None
        t = enc.text_forward(weights, np.asarray(token)[None], None if tp is None else tp.value[None])[0][0]
        v = enc.visual_head_forward(weights, cache.states[None], None if vp is None else vp.value[None])[0][0]
        pairs.append(cosine(t, v))
    return ScorePair(*pairs)
