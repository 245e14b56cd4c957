import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY
from ddpcil import encoder as enc
from ddpcil.errors import ConfigError, DomainError, ProtocolError
from ddpcil.metrics import average_precision
from ddpcil.numerics import finite_diff_check
from ddpcil.prompting import PromptStore
from ddpcil.scoring import (
    PcdSchedule,
    PredictionMatrix,
    ScorePair,
    bce_from_margin,
    bce_loss,
    binary_confidence,
    class_scores,
    pcd_tau,
    score_backward,
    score_batch,
)


def _tau_oracle(tau_max, gamma, base, total, seen):
    mpmath.mp.dps = 50
    frac = mpmath.mpf(seen - base) / (total - base)
    return 1 + (mpmath.mpf(tau_max) - 1) * frac ** mpmath.mpf(gamma)


@pytest.mark.parametrize("tau_max,gamma,base,total,seen,quoted", [
    (7, "0.2", 4, 20, 12, 6.22330),
    (3, "0.7", 5, 80, 40, 2.17307),
])
def test_pcd_tau_high_precision(tau_max, gamma, base, total, seen, quoted):
    got = pcd_tau(PcdSchedule(tau_max, float(gamma), base, total), seen)
    want = _tau_oracle(tau_max, gamma, base, total, seen)
    assert abs(got - float(want)) < 1e-13
    # the quoted COCO-style figure is 3e-5 below the exact 2.1730992
    assert abs(got - quoted) < 5e-5


@pytest.mark.parametrize("tau_max,gamma", [(7.0, 0.2), (3.0, 0.7)])
def test_pcd_tau_endpoints_and_monotone(tau_max, gamma):
    s = PcdSchedule(tau_max, gamma, 4, 20)
    assert pcd_tau(s, 4) == 1.0
    assert pcd_tau(s, 20) == tau_max
    taus = [pcd_tau(s, k) for k in range(4, 21)]
    assert all(a <= b for a, b in zip(taus, taus[1:]))
    assert all(1.0 <= t <= tau_max for t in taus)


def test_pcd_tau_out_of_range():
    with pytest.raises(DomainError):
        pcd_tau(PcdSchedule(7, 0.2, 4, 20), 3)
    with pytest.raises(DomainError):
        pcd_tau(PcdSchedule(7, 0.2, 4, 20), 21)


@pytest.mark.parametrize("args", [(1.0, 0.2, 4, 20), (7, 1.0, 4, 20), (7, 0.0, 4, 20), (7, 0.2, 20, 20), (7, 0.2, 0, 20)])
def test_pcd_schedule_validation(args):
    with pytest.raises(ConfigError):
        PcdSchedule(*args)


def test_binary_confidence_examples():
    assert binary_confidence(ScorePair(0.3, 0.3), tau=5.0) == 0.5
    assert abs(binary_confidence(0.9, -0.9, 1e9) - 0.5) < 1e-9
    mpmath.mp.dps = 40
    want = float(1 / (1 + mpmath.exp(-mpmath.mpf("0.2"))))
    got = binary_confidence(ScorePair(0.6, 0.2), tau=2.0)
    assert abs(got - want) < 1e-15 and round(got, 6) == 0.549834


def test_binary_confidence_domain():
    with pytest.raises(DomainError):
        binary_confidence(0.1, 0.2, 0.0)


@given(arrays(np.float64, 5, elements=st.floats(-1, 1)), arrays(np.float64, 5, elements=st.floats(-1, 1)),
       st.floats(0.01, 100))
def test_confidences_are_complementary(sp, sn, tau):
    pos = binary_confidence(sp, sn, tau)
    neg = binary_confidence(sn, sp, tau)
    assert np.allclose(pos + neg, 1.0, atol=1e-15)


@given(arrays(np.float64, 12, elements=st.integers(-2000, 2000).map(lambda k: k / 1000)),
       st.integers(1, 2**20), st.floats(0.1, 50), st.floats(0.1, 50))
def test_rank_invariance_of_ap_under_temperature(margin, bits, t1, t2):
    labels = np.array([(bits >> i) & 1 for i in range(12)], dtype=bool)
    if not labels.any():
        labels[0] = True
    a = average_precision(binary_confidence(margin, 0 * margin, t1), labels)
    b = average_precision(binary_confidence(margin, 0 * margin, t2), labels)
    assert a == b


def _pm(conf, labels, mask=None, classes=(0,)):
    conf = np.atleast_2d(conf).astype(float)
    labels = np.atleast_2d(labels)
    mask = np.ones_like(labels, dtype=bool) if mask is None else mask
    return PredictionMatrix(conf, labels, mask, list(classes))


def test_bce_examples():
    assert bce_loss(_pm([[1.0]], [[1]])) == pytest.approx(0.0, abs=1e-11)
    assert bce_loss(_pm(np.full((3, 2), 0.5), np.eye(3, 2), classes=(0, 1))) == pytest.approx(2 * math.log(2))
    assert round(bce_loss(_pm([[0.8]], [[1]])), 6) == 0.223144
    assert bce_loss(_pm([[0.8]], [[1]])) == pytest.approx(-math.log(0.8), rel=1e-14)


def test_bce_clamps_instead_of_infinite():
    v = bce_loss(_pm([[0.0]], [[1]]))
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-12))


def test_bce_rejects_out_of_task_labels():
    pm = _pm([[0.4, 0.6]], [[1, 0]], classes=(0, 7))
    with pytest.raises(ProtocolError):
        bce_loss(pm, allowed_classes=[0])
    pm.mask[:, 1] = False
    assert bce_loss(pm, allowed_classes=[0]) == pytest.approx(-math.log(0.4))


@given(arrays(np.float64, (3, 2), elements=st.floats(0, 1)), arrays(np.uint8, (3, 2), elements=st.integers(0, 1)))
def test_bce_nonnegative(conf, y):
    assert bce_loss(_pm(conf, y, classes=(0, 1))) >= 0.0


def test_bce_from_margin_matches_bce_loss():
    r = np.random.default_rng(0)
    margin = r.normal(size=(4, 3))
    y = r.integers(0, 2, size=(4, 3))
    mask = np.ones((4, 3), dtype=bool)
    loss, _ = bce_from_margin(margin, y, mask, tau=2.0)
    assert loss == pytest.approx(bce_loss(_pm(binary_confidence(margin, 0 * margin, 2.0), y, classes=(0, 1, 2))),
                                 rel=1e-13)


# --- the scoring pipeline ---------------------------------------------------


def _store(seed=0, classes=(0, 1), std=0.5, **kw):
    s = PromptStore(TINY.prompt_len, TINY.embed_dim, seed=seed, init_std=std, **kw)
    s.begin_task(1, classes)
    return s


def _states(w, n=3, seed=0):
    grids = np.random.default_rng(seed).normal(size=(n,) + TINY.grid)
    return grids, enc.visual_prefix_batch(w, enc.embed_images(w, grids))


def test_identical_branch_prompts_give_equal_scores(tiny_weights):
    store = _store()
    ps = store.set_for(0)
    ps.text_neg.value[...] = ps.text_pos.value
    ps.visual_neg.value[...] = ps.visual_pos.value
    _, states = _states(tiny_weights)
    cache = enc.PrefixCache(0, states[0])
    pair = class_scores(tiny_weights, cache, ps, store.token(0))
    assert pair.s_pos == pair.s_neg


def test_class_scores_deterministic_and_match_batch(tiny_weights):
    store = _store()
    _, states = _states(tiny_weights)
    sp, sn, _ = score_batch(tiny_weights, store, [0, 1], states=states)
    for i in range(3):
        for j, c in enumerate([0, 1]):
            pair = class_scores(tiny_weights, enc.PrefixCache(i, states[i]), store.set_for(c), store.token(c))
            assert pair == class_scores(tiny_weights, enc.PrefixCache(i, states[i]), store.set_for(c), store.token(c))
            assert abs(pair.s_pos - sp[i, j]) < 1e-12 and abs(pair.s_neg - sn[i, j]) < 1e-12
            assert -1 <= pair.s_pos <= 1 and -1 <= pair.s_neg <= 1


@pytest.mark.parametrize("mode,branch", [("class-specific", "both"), ("task-specific", "pos-only"),
                                         ("global", "neg-only"), ("none", "both")])
def test_cached_and_uncached_scores_agree(tiny_weights, mode, branch):
    store = _store(mode=mode, branch_mode=branch)
    grids, states = _states(tiny_weights, 4)
    a = score_batch(tiny_weights, store, [0, 1], states=states)
    b = score_batch(tiny_weights, store, [0, 1], grids=grids)
    assert np.max(np.abs(a[0] - b[0])) <= 1e-10 and np.max(np.abs(a[1] - b[1])) <= 1e-10


def test_prompt_free_scores_are_tied(tiny_weights):
    store = _store(mode="none")
    _, states = _states(tiny_weights)
    sp, sn, _ = score_batch(tiny_weights, store, [0, 1], states=states)
    assert np.array_equal(sp, sn)


@pytest.mark.parametrize("branch", ["both", "pos-only", "neg-only"])
def test_bce_gradient_two_classes_three_images(tiny_weights, branch):
    store = _store(branch_mode=branch)
    _, states = _states(tiny_weights)
    labels = np.array([[1, 0], [0, 1], [1, 1]], dtype=bool)
    mask = np.ones_like(labels)
    params = store.trainable_params()
    for p in params:
        p.zero_grad()
    sp, sn, tape = score_batch(tiny_weights, store, [0, 1], states=states, need_tape=True)
    _, g = bce_from_margin(sp - sn, labels, mask)
    score_backward(tiny_weights, g, -g, tape)

    def loss(_):
        a, b, _t = score_batch(tiny_weights, store, [0, 1], states=states)
        return bce_from_margin(a - b, labels, mask)[0]

    assert finite_diff_check(loss, params) <= 1e-5
