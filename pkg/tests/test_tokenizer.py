import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import elmlab.tensor as T
from elmlab.data import CorpusSpec, generate_corpus, stack
from elmlab.errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from elmlab.tensor import Tensor
from elmlab.tokenizer import (TokenDataset, TokenizerCheckpoint, TokenizerConfig, VqCodebook, code_utilization,
                              decode, decoder_forward, detokenize, encode, init_params, nearest_code, patchify,
                              quantize_bernoulli, quantize_sign, reconstruct, tokenize_dataset, train_tokenizer,
                              unpatchify, vq_lookup)
from elmlab.vocab import bits_to_codes


def tiny_checkpoint(kind="bae", seed=0):
    cfg = TokenizerConfig(hidden=16, kind=kind, K=16, seed=seed)
    return TokenizerCheckpoint(cfg, init_params(cfg, np.random.default_rng(seed)),
                               VqCodebook(np.random.default_rng(seed).normal(size=(16, 8))) if kind == "vq" else None)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(num_classes=3, samples_per_class=4, master_seed=5))


@pytest.fixture(scope="module")
def trained(corpus):
    X, _ = stack(corpus)
    return train_tokenizer(X, TokenizerConfig(hidden=16, steps=30, batch=4))


# --- encode / decode -------------------------------------------------------

def test_encode_shape_and_range():
    ck = tiny_checkpoint()
    x = np.random.default_rng(0).random((32, 32, 1))
    z = encode(x, ck)
    assert z.shape == (8, 8, 8)
    assert np.all((z > 0) & (z < 1))
    np.testing.assert_array_equal(encode(x, ck), z)


def test_encode_rejects_indivisible_image():
    with pytest.raises(ShapeError):
        encode(np.zeros((30, 32, 1)), tiny_checkpoint())


def test_patchify_roundtrip_and_raster_layout():
    x = np.arange(2 * 8 * 12 * 3, dtype=float).reshape(2, 8, 12, 3)
    p = patchify(x, 4)
    assert p.shape == (2, 2, 3, 48)
    np.testing.assert_array_equal(p[1, 1, 2].reshape(4, 4, 3), x[1, 4:8, 8:12])
    np.testing.assert_array_equal(unpatchify(p, 4, 3), x)


def test_decode_shape_roundtrip_and_determinism():
    ck = tiny_checkpoint()
    x = np.random.default_rng(1).random((32, 32, 1))
    bits = quantize_sign(encode(x, ck))
    img = decode(bits, ck)
    assert img.shape == x.shape and img.min() >= 0 and img.max() <= 1
    np.testing.assert_array_equal(decode(bits.copy(), ck), img)


def test_decode_any_grid_size():
    ck = tiny_checkpoint()
    assert decode(np.zeros((8, 12, 8), np.uint8), ck).shape == (32, 48, 1)


def test_decode_shape_mismatch():
    with pytest.raises(ShapeError):
        decode(np.zeros((8, 8, 7)), tiny_checkpoint())


# --- quantizers -------------------------------------------------------------

def test_sign_threshold_examples():
    np.testing.assert_array_equal(quantize_sign([0.3, 0.7, 0.5]), [0, 1, 1])
    np.testing.assert_array_equal(quantize_sign(np.full((2, 2, 8), 0.9)), np.ones((2, 2, 8)))


@given(arrays(np.float64, (3, 4), elements=st.floats(1e-6, 1 - 1e-6)))
def test_sign_idempotent_through_embedding(z):
    q = quantize_sign(z)
    np.testing.assert_array_equal(quantize_sign(np.where(q == 1, 0.75, 0.25)), q)


def test_bernoulli_boundaries_and_determinism():
    rng = np.random.default_rng(0)
    assert quantize_bernoulli(np.ones(1000), rng).all()
    assert not quantize_bernoulli(np.zeros(1000), rng).any()
    z = np.random.default_rng(1).random((8, 8, 8))
    np.testing.assert_array_equal(quantize_bernoulli(z, np.random.default_rng(3)),
                                  quantize_bernoulli(z, np.random.default_rng(3)))


def test_bernoulli_half_mean():
    m = quantize_bernoulli(np.full(100_000, 0.5), np.random.default_rng(7)).mean()
    assert 0.49 <= m <= 0.51


def test_bernoulli_unbiased_within_3_sigma():
    z = np.linspace(0.05, 0.95, 19)
    n = 20_000
    draws = np.stack([quantize_bernoulli(z, np.random.default_rng(s)) for s in range(n)])
    sigma = np.sqrt(z * (1 - z) / n)
    assert np.all(np.abs(draws.mean(0) - z) <= 3 * sigma + 1e-12)


def test_vq_nearest_and_tie():
    book = VqCodebook([[0.0, 0.0], [1.0, 1.0]])
    assert vq_lookup(np.array([0.1, 0.1]), book)[0] == 0
    assert vq_lookup(np.array([0.5, 0.5]), book)[0] == 0
    assert vq_lookup(np.array([0.9, 0.6]), book)[0] == 1
    np.testing.assert_array_equal(book.usage, [2, 1])


def test_vq_matches_brute_force():
    rng = np.random.default_rng(0)
    book = VqCodebook(rng.normal(size=(2, 3)))
    z = rng.normal(size=(100, 3))
    idx, q = vq_lookup(z, book)
    for i in range(100):
        d = [float(np.sum((z[i] - c) ** 2)) for c in book.codes]
        assert idx[i] == d.index(min(d))
        np.testing.assert_array_equal(q[i], book.codes[idx[i]])


def test_vq_usage_only_increases():
    rng = np.random.default_rng(1)
    book = VqCodebook(rng.normal(size=(5, 2)))
    before = book.usage.copy()
    vq_lookup(rng.normal(size=(4, 4, 2)), book)
    assert np.all(book.usage >= before) and book.usage.sum() == 16


def test_vq_errors():
    with pytest.raises(ConfigError):
        VqCodebook(np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        vq_lookup(np.zeros((2, 3)), VqCodebook(np.zeros((4, 2))))


def test_nearest_code_chunking_agrees():
    rng = np.random.default_rng(2)
    z, c = rng.normal(size=(37, 4)), rng.normal(size=(9, 4))
    np.testing.assert_array_equal(nearest_code(z, c, chunk=5), nearest_code(z, c))


def test_straight_through_gradient_equals_quantized_gradient():
    """d loss / d latent through the quantizer equals d loss / d quantized input."""
    ck = tiny_checkpoint()
    params = ck.tensors(requires_grad=True)
    rng = np.random.default_rng(4)
    patches = Tensor(rng.random((6, 16)))
    target = rng.random((6, 16))

    from elmlab.tokenizer import encoder_forward
    z = encoder_forward(patches, params, ck.config).retain_grad()
    q = quantize_sign(z.data).astype(float)
    recon = decoder_forward(T.straight_through(z, q), params, ck.config)
    ((recon - target) * (recon - target)).mean().backward()

    q_leaf = Tensor(q, requires_grad=True)
    recon2 = decoder_forward(q_leaf, ck.tensors(requires_grad=True), ck.config)
    ((recon2 - target) * (recon2 - target)).mean().backward()
    np.testing.assert_allclose(z.grad, q_leaf.grad, rtol=0, atol=1e-15)


# --- training ---------------------------------------------------------------

def test_single_image_memorization():
    # noise-free tiles: exact memorization is possible with 16 distinct codes
    x = generate_corpus(CorpusSpec(num_classes=1, samples_per_class=1, kind="grammar"))[0].pixels[None]
    ck = train_tokenizer(x, TokenizerConfig(hidden=64, steps=200, batch=1, lr=3e-3))
    assert np.mean((reconstruct(x, ck) - x) ** 2) < 1e-3


def test_training_log_per_epoch(trained):
    # 12 images, batch 4 -> 3 steps per epoch, 30 steps -> 10 epochs
    assert [e for e, _ in trained.log] == list(range(10))
    assert all(np.isfinite(v) for _, v in trained.log)


def test_training_is_deterministic(corpus):
    X, _ = stack(corpus)
    cfg = TokenizerConfig(hidden=8, steps=5, batch=4)
    a, b = train_tokenizer(X, cfg), train_tokenizer(X, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_divergence_aborts_with_last_good(corpus):
    X, _ = stack(corpus)
    X = X.copy()
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_tokenizer(X, TokenizerConfig(hidden=8, steps=5, batch=len(X)))
    assert isinstance(info.value.last_good, TokenizerCheckpoint)


def test_vq_training_runs_and_counts(corpus):
    X, y = stack(corpus)
    ck = train_tokenizer(X, TokenizerConfig(kind="vq", K=16, hidden=16, steps=10, batch=4))
    ds = tokenize_dataset((X, y), ck)
    assert ds.mode == "vq" and ds.D == 4 and ds.codes.max() < 16
    assert ck.codebook.usage.sum() == ds.codes.size


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        train_tokenizer(np.zeros((0, 32, 32, 1)), TokenizerConfig(steps=1))


# --- tokenization -----------------------------------------------------------

def test_tokenize_raster_order(corpus, trained):
    ds = tokenize_dataset(corpus, trained, mode="sign")
    assert ds.L == 64 and ds.codes.shape == (12, 64)
    bits = quantize_sign(encode(corpus[5].pixels, trained))
    codes = bits_to_codes(bits)
    for r in range(8):
        for c in range(8):
            assert ds.codes[5, r * 8 + c] == codes[r, c]


def test_tokenize_sign_repeatable_and_bernoulli_seeded(corpus, trained):
    a, b = tokenize_dataset(corpus, trained, mode="sign"), tokenize_dataset(corpus, trained, mode="sign")
    np.testing.assert_array_equal(a.codes, b.codes)
    c = tokenize_dataset(corpus, trained, mode="bernoulli", seed=11)
    d = tokenize_dataset(corpus, trained, mode="bernoulli", seed=11)
    np.testing.assert_array_equal(c.codes, d.codes)
    assert c.seed == 11 and c.mode == "bernoulli"


def test_tokenize_rejects_wrong_channel_count(trained):
    with pytest.raises(ShapeError):
        tokenize_dataset((np.zeros((2, 32, 32, 3)), np.zeros(2, int)), trained)


def test_token_dataset_roundtrip(tmp_path, corpus, trained):
    ds = tokenize_dataset(corpus, trained, mode="bernoulli", seed=3, g=2)
    ds.save(tmp_path / "t.elmt")
    back = TokenDataset.load(tmp_path / "t.elmt")
    np.testing.assert_array_equal(back.codes, ds.codes)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert (back.h, back.w, back.D, back.g, back.mode, back.seed, back.num_classes) == (8, 8, 8, 2, "bernoulli", 3, 3)
    raw = (tmp_path / "t.elmt").read_bytes()
    assert raw[:4] == b"ELMT" and len(raw) == 8 + 22 + 12 * 2 * (1 + 64 * 2)


def test_token_dataset_corrupt(tmp_path):
    p = tmp_path / "bad.elmt"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError, match="byte 0"):
        TokenDataset.load(p)
    ds = TokenDataset(np.zeros((2, 4), int), [0, 1], 2, 2, 8)
    ds.save(p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        TokenDataset.load(p)


@pytest.mark.parametrize("kind", ["bae", "vq"])
def test_checkpoint_roundtrip(tmp_path, kind):
    ck = tiny_checkpoint(kind)
    if kind == "vq":
        ck.codebook.usage[:] = np.arange(16)
    ck.save(tmp_path / "c.elmc")
    back = TokenizerCheckpoint.load(tmp_path / "c.elmc")
    assert back.config == ck.config
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32))
    if kind == "vq":
        np.testing.assert_array_equal(back.codebook.codes, ck.codebook.codes.astype(np.float32))
        np.testing.assert_array_equal(back.codebook.usage, np.arange(16))


def test_checkpoint_truncated(tmp_path):
    tiny_checkpoint().save(tmp_path / "c.elmc")
    raw = (tmp_path / "c.elmc").read_bytes()
    (tmp_path / "c.elmc").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        TokenizerCheckpoint.load(tmp_path / "c.elmc")


def test_detokenize_matches_reconstruction(corpus, trained):
    ds = tokenize_dataset(corpus, trained, mode="sign")
    X, _ = stack(corpus)
    np.testing.assert_array_equal(detokenize(ds.codes, 8, 8, trained), reconstruct(X, trained))


def test_vq_decode_indices():
    ck = tiny_checkpoint("vq")
    assert decode(np.zeros((8, 8), np.int64), ck).shape == (32, 32, 1)


# --- utilization ------------------------------------------------------------

def test_utilization_single_token():
    ds = TokenDataset(np.full((3, 64), 17), [0, 0, 0], 8, 8, 8)
    rep = code_utilization(ds)
    assert rep.fraction == 1 / 256 and rep.distinct == 1 and rep.counts[17] == 192


def test_utilization_full():
    ds = TokenDataset(np.arange(256).reshape(4, 64), [0] * 4, 8, 8, 8)
    assert code_utilization(ds).fraction == 1.0


def test_utilization_vq_denominator():
    assert code_utilization(np.array([[0, 1, 1, 3]]), vocab_size=16).fraction == 3 / 16


@settings(max_examples=30)
@given(arrays(np.int64, (5, 16), elements=st.integers(0, 255)))
def test_utilization_conserves_tokens(codes):
    rep = code_utilization(TokenDataset(codes, [0] * 5, 4, 4, 8))
    assert rep.counts.sum() == rep.total == 80
    assert np.all(np.diff(rep.sorted_log_counts) <= 0)


def test_utilization_empty():
    with pytest.raises(ConfigError):
        code_utilization(np.zeros((0, 4), int))
