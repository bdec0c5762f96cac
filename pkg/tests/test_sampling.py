import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from elmlab.errors import ConfigError, ContractError, ShapeError
from elmlab.model import LmConfig, Transformer
from elmlab.sampling import (SCHEDULES, CfgSchedule, SamplerConfig, ar_generate, cfg_combine, cfg_schedule,
                             extend_generate, mlm_generate, read_generation_manifest, sample_categorical,
                             tokens_to_image, top_k_filter, write_generation_manifest)
from elmlab.tokenizer import (TokenizerCheckpoint, TokenizerConfig, init_params, reconstruct, tokenize_images)
from elmlab.vocab import VocabSpec, codes_to_subcodes

SPEC = VocabSpec(8, 2, 4)


def tiny(mode="ar", L=64, seed=0):
    cfg = LmConfig(depth=2, dim=16, heads=2, vocab=SPEC, seq_len=L, num_classes=3, mode=mode)
    return Transformer(cfg, np.random.default_rng(seed), init_std=0.5)


# --- schedules --------------------------------------------------------------

def oracle_schedule(kind, lo, hi, N):
    t = np.linspace(0.0, 1.0, N) if N > 1 else np.zeros(1)
    shape = {"constant": np.ones_like(t), "linear": t, "cos": (1 - np.cos(np.pi * t)) / 2,
             "log": np.log1p((np.e - 1) * t), "square": t ** 2, "r_square": 1 - (1 - t) ** 2}[kind]
    if kind == "constant" or N == 1:
        return np.full(N, hi)
    return lo + (hi - lo) * shape


@pytest.mark.parametrize("kind", SCHEDULES)
@pytest.mark.parametrize("N", [1, 2, 3, 10, 256])
def test_schedule_closed_forms(kind, N):
    got = np.array(cfg_schedule(CfgSchedule(kind, 1.0, 4.0, N)))
    assert len(got) == N
    np.testing.assert_allclose(got, oracle_schedule(kind, 1.0, 4.0, N), rtol=0, atol=1e-12)
    assert got[-1] == 4.0
    if kind != "constant" and N > 1:
        assert got[0] == 1.0
    assert np.all(np.diff(got) >= 0) and got.min() >= 1.0 and got.max() <= 4.0


def test_schedule_examples():
    assert cfg_schedule(CfgSchedule("linear", 1, 3, 3)) == [1.0, 2.0, 3.0]
    sq = cfg_schedule(CfgSchedule("square", 1, 4, 3))[1]
    rsq = cfg_schedule(CfgSchedule("r_square", 1, 4, 3))[1]
    assert math.isclose(sq, 1.75) and math.isclose(rsq, 3.25)


def test_schedule_ordering_interior():
    N = 257
    sq, lin, rsq = (np.array(cfg_schedule(CfgSchedule(k, 1, 4, N))) for k in ("square", "linear", "r_square"))
    inner = slice(1, N - 1)
    assert np.all(sq[inner] < lin[inner]) and np.all(lin[inner] < rsq[inner])


def test_schedule_errors_and_parse():
    with pytest.raises(ContractError):
        cfg_schedule(CfgSchedule("linear", 1, 2, 0))
    with pytest.raises(ConfigError):
        CfgSchedule("linear", 3, 1)
    with pytest.raises(ConfigError):
        CfgSchedule.parse("wiggle:1:2")
    assert CfgSchedule.parse("linear:1:3") == CfgSchedule("linear", 1.0, 3.0)
    assert CfgSchedule.parse("constant:2") == CfgSchedule("constant", 2.0, 2.0)


# --- guidance and filtering -------------------------------------------------

def test_cfg_combine_cases():
    rng = np.random.default_rng(0)
    c, u = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    for s in (0.5, 2.0, 7.5):
        np.testing.assert_array_equal(cfg_combine(c, c, s), c)
    np.testing.assert_allclose(cfg_combine(c, u, 3.0), u + 3 * (c - u))
    with pytest.raises(ShapeError):
        cfg_combine(c, u[:, :8], 2.0)


def test_top_k_examples():
    x = np.array([2.0, 1.0, 1.0, 0.0])
    out = top_k_filter(x, 2)
    assert set(np.flatnonzero(np.isfinite(out))) == {0, 1}
    np.testing.assert_array_equal(top_k_filter(x, 4), x)
    assert np.flatnonzero(np.isfinite(top_k_filter(x, 1))).tolist() == [0]
    for k in (0, 5):
        with pytest.raises(ContractError):
            top_k_filter(x, k)


@given(arrays(np.float64, (3, 9), elements=st.floats(-50, 50)), st.integers(1, 9))
def test_top_k_properties(x, k):
    out = top_k_filter(x, k)
    assert np.all(np.isfinite(out).sum(-1) == k)
    np.testing.assert_array_equal(np.argmax(out, -1), np.argmax(x, -1))
    kept = np.isfinite(out)
    np.testing.assert_array_equal(out[kept], x[kept])


def test_k1_sampling_is_argmax():
    x = np.random.default_rng(1).normal(size=(50, 16))
    u = 1.0 - np.random.default_rng(2).random(50)
    np.testing.assert_array_equal(sample_categorical(top_k_filter(x, 1), u), np.argmax(x, -1))


def test_categorical_frequencies():
    logits = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
    n = 100_000
    u = 1.0 - np.random.default_rng(3).random(n)
    draws = sample_categorical(np.broadcast_to(logits, (n, 4)), u)
    freq = np.bincount(draws, minlength=4) / n
    sigma = np.sqrt(np.array([0.1, 0.2, 0.3, 0.4]) * 0.9 / n)
    assert np.all(np.abs(freq - [0.1, 0.2, 0.3, 0.4]) <= 4 * sigma)


def test_sampler_config_checks():
    with pytest.raises(ContractError):
        SamplerConfig(iters=0)
    with pytest.raises(ConfigError):
        SamplerConfig(top_k=17).check(SPEC)
    with pytest.raises(ConfigError):
        SamplerConfig(tau=-1)


# --- AR generation ----------------------------------------------------------

def test_ar_generate_determinism_and_batch_independence():
    m = tiny()
    cfg = SamplerConfig(cfg=CfgSchedule("linear", 1, 3), seed=7)
    a = ar_generate(m, [1] * 8, cfg)
    b = ar_generate(m, [1] * 8, cfg)
    one = ar_generate(m, [1], cfg)
    assert a.shape == (8, 8, 8, 2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], one[0])
    assert a.min() >= 0 and a.max() < 16
    assert len({g.tobytes() for g in a}) > 1  # distinct streams per sample


def test_ar_generate_rejects_mlm():
    with pytest.raises(ContractError):
        ar_generate(tiny("mlm"), [0], SamplerConfig())


def test_ar_generate_greedy_follows_graph_argmax():
    """k=1 without guidance: every token is the argmax of a full graph forward."""
    m = tiny(L=9)
    grid = ar_generate(m, [2], SamplerConfig(top_k=1), grid=(3, 3))
    seq = grid.reshape(1, 9, 2)
    logits = m.ar_forward(seq[:, :-1], [2])
    for j in range(2):
        np.testing.assert_array_equal(np.argmax(logits[j].data[0], -1), seq[0, :, j])


# --- MaskGIT ----------------------------------------------------------------

def mp_count(t, T, L):
    mpmath.mp.dps = 50
    if t == T:
        return 0
    return int(mpmath.ceil(L * mpmath.cos(mpmath.pi * t / (2 * T))))


@pytest.mark.parametrize("T", [1, 8, 10, 64])
def test_maskgit_trajectory(T):
    m = tiny("mlm")
    trace = []
    grid = mlm_generate(m, [0, 2], SamplerConfig(iters=T, tau=1.0, seed=3), trace=trace)
    assert trace == [mp_count(t, T, 64) for t in range(1, T + 1)]
    assert trace[-1] == 0 and all(a >= b for a, b in zip(trace, trace[1:]))
    assert grid.shape == (2, 8, 8, 2) and grid.max() < 16


def test_maskgit_t8_closed_form():
    trace = []
    mlm_generate(tiny("mlm"), [1], SamplerConfig(iters=8), trace=trace)
    assert trace == [math.ceil(64 * math.cos(math.pi * t / 16) - 1e-9) for t in range(1, 9)]


def test_maskgit_tau0_deterministic():
    m = tiny("mlm")
    cfg = SamplerConfig(iters=10, tau=0.0, seed=5, cfg=CfgSchedule("cos", 1, 2))
    np.testing.assert_array_equal(mlm_generate(m, [0, 1], cfg), mlm_generate(m, [0, 1], cfg))


def test_maskgit_single_round_is_parallel_decode():
    """T=1, k=1: one forward from the all-mask input, argmax everywhere."""
    m = tiny("mlm")
    grid = mlm_generate(m, [1], SamplerConfig(iters=1, top_k=1)).reshape(1, 64, 2)
    logits = m.mlm_forward(np.zeros((1, 64, 2), int), np.ones((1, 64), bool), [1])
    for j in range(2):
        np.testing.assert_array_equal(np.argmax(logits[j].data, -1), grid[0, :, j])


def test_maskgit_iteration_bounds():
    with pytest.raises(ContractError):
        mlm_generate(tiny("mlm", L=9), [0], SamplerConfig(iters=10), grid=(3, 3))
    with pytest.raises(ContractError):
        mlm_generate(tiny("ar"), [0], SamplerConfig())


# --- sliding-window extension ----------------------------------------------

def test_extend_equal_size_matches_ar_generate():
    m = tiny()
    cfg = SamplerConfig(cfg=CfgSchedule("linear", 1, 2), seed=4)
    np.testing.assert_array_equal(extend_generate(m, [0, 1], 8, 8, cfg), ar_generate(m, [0, 1], cfg))


def test_extend_wide_grid_range():
    out = extend_generate(tiny(), [2], 8, 12, SamplerConfig(seed=1))
    assert out.shape == (1, 8, 12, 2) and out.min() >= 0 and out.max() < 16


def test_extend_window_logits_match_brute_force():
    m = tiny()
    L = 64
    seen = {}
    cfg = SamplerConfig(seed=9)
    grid = extend_generate(m, [1], 9, 8, cfg, on_logits=lambda step, lg: seen.__setitem__(step, lg))
    seq = grid.reshape(1, 72, 2)
    step = L + 5
    window = seq[:, step - L + 1:step]
    ref = m.ar_forward(window, [1])
    for j in range(2):
        assert np.max(np.abs(seen[step][j][0] - ref[j].data[0, -1])) < 1e-9


def test_extend_too_small():
    with pytest.raises(ContractError):
        extend_generate(tiny(), [0], 8, 4, SamplerConfig())
    with pytest.raises(ContractError):
        extend_generate(tiny(), [0], 4, 8, SamplerConfig())


# --- decoding tokens to images ---------------------------------------------

@pytest.fixture(scope="module")
def tok_ckpt():
    cfg = TokenizerConfig(hidden=16)
    return TokenizerCheckpoint(cfg, init_params(cfg, np.random.default_rng(0)))


def test_tokens_to_image_matches_reconstruction(tok_ckpt):
    x = np.random.default_rng(0).random((2, 32, 32, 1))
    codes = tokenize_images(x, tok_ckpt).reshape(2, 8, 8)
    grid = codes_to_subcodes(codes, SPEC)
    np.testing.assert_array_equal(tokens_to_image(grid, tok_ckpt, SPEC), reconstruct(x, tok_ckpt))


def test_tokens_to_image_shapes(tok_ckpt):
    zero = np.zeros((8, 8, 2), np.int64)
    a, b = tokens_to_image(zero, tok_ckpt, SPEC), tokens_to_image(zero, tok_ckpt, SPEC)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 32, 1)
    assert tokens_to_image(np.zeros((8, 12, 2), np.int64), tok_ckpt, SPEC).shape == (32, 48, 1)
    with pytest.raises(ShapeError):
        tokens_to_image(np.zeros((8, 8, 3), np.int64), tok_ckpt, SPEC)
    with pytest.raises(ShapeError):
        tokens_to_image(np.zeros((8, 8, 2), np.int64), tok_ckpt, VocabSpec(10, 2, 5))


def test_generation_manifest_roundtrip(tmp_path):
    rows = [(0, 3, 7, "grids/0.elmt"), (1, 4, 7, "grids/1.elmt")]
    write_generation_manifest(tmp_path / "m.csv", rows)
    assert read_generation_manifest(tmp_path / "m.csv") == rows
