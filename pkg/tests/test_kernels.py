import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddpcil import _kernels_py, kernels

compiled = pytest.mark.skipif(kernels._compiled is None, reason="extension not built")


def _inputs(seed, Nq=2, reps=3, Np=3, Lq=4, L=5, Lp=2, d=8):
    r = np.random.default_rng(seed)
    N = Nq * reps
    return (r.normal(size=(Nq, Lq, d)), r.normal(size=(Nq, L, 2 * d)), r.normal(size=(Np, Lp, d)),
            N, r.normal(size=(N, Lq, d)))


def test_probabilities_sum_to_one_over_prompt_augmented_keys():
    q, kv, prm, N, _ = _inputs(0)
    _, P = _kernels_py.prompted_attention_fwd(q, kv, prm, N, 2, 0.5)
    assert P.shape == (N, 2, 4, 2 + 5)
    assert np.allclose(P.sum(-1), 1.0, atol=1e-12, rtol=0)


def test_sequence_to_row_mapping():
    """Sequence n reads q/kv row n % Nq and prompt row n // (N / Np)."""
    q, kv, prm, N, _ = _inputs(1)
    ctx, _ = _kernels_py.prompted_attention_fwd(q, kv, prm, N, 2, 0.5)
    for n in range(N):
        one, _ = _kernels_py.prompted_attention_fwd(q[n % 2][None], kv[n % 2][None], prm[n // 2][None], 1, 2, 0.5)
        assert np.allclose(ctx[n], one[0], atol=1e-14)


def test_empty_prompt_is_plain_attention():
    q, kv, _, N, _ = _inputs(2)
    empty = np.empty((1, 0, 8))
    ctx, P = _kernels_py.prompted_attention_fwd(q, kv, empty, 2, 2, 0.5)
    assert P.shape[-1] == 5
    _, _, dprm = _kernels_py.prompted_attention_bwd(q, kv, empty, P, np.ones_like(ctx), 2, 0.5, False)
    assert dprm.shape == (1, 0, 8)


@compiled
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(0, 4), st.sampled_from([1, 2, 4]))
def test_attention_backends_agree(seed, reps, Lp, H):
    q, kv, prm, N, dctx = _inputs(seed, reps=reps, Np=1 if reps == 1 else reps, Lp=Lp)
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    if Lp == 0:
        prm = np.empty((1, 0, 8))
    a_ctx, a_P = py.prompted_attention_fwd(q, kv, prm, N, H, 0.3)
    b_ctx, b_P = cc.prompted_attention_fwd(q, kv, prm, N, H, 0.3)
    assert np.allclose(a_ctx, b_ctx, atol=1e-13, rtol=0)
    assert np.allclose(a_P, b_P, atol=1e-14, rtol=0)
    ga = py.prompted_attention_bwd(q, kv, prm, a_P, dctx, H, 0.3, True)
    gb = cc.prompted_attention_bwd(q, kv, prm, a_P, dctx, H, 0.3, True)
    for x, y in zip(ga, gb):
        assert np.allclose(x, y, atol=1e-12, rtol=0)
    _, _, dp = cc.prompted_attention_bwd(q, kv, prm, a_P, dctx, H, 0.3, False)
    assert np.array_equal(dp, gb[2])


@compiled
def test_layer_norm_backends_agree(rng):
    x = rng.normal(size=(7, 9)) * 4
    g, b = rng.normal(size=9), rng.normal(size=9)
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    for u, v in zip(py.layer_norm_fwd(x, g, b, 1e-5), cc.layer_norm_fwd(x, g, b, 1e-5)):
        assert np.allclose(u, v, atol=1e-13, rtol=0)
    y, xhat, rstd = py.layer_norm_fwd(x, g, b, 1e-5)
    for u, v in zip(py.layer_norm_bwd(x, xhat, rstd, g), cc.layer_norm_bwd(x, xhat, rstd, g)):
        assert np.allclose(u, v, atol=1e-12, rtol=0)


def test_backend_switching_restores():
    before = kernels.BACKEND
    with kernels.backend("python") as K:
        assert K is _kernels_py
        assert kernels.BACKEND == "python"
    assert kernels.BACKEND == before


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_forced_python_backend_via_environment():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "import ddpcil.kernels as k; print(k.BACKEND)"],
                         env={"DDP_KERNELS": "python", "PATH": ""}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
