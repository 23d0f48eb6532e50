import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from limo.encoders import (
    EncoderParams,
    Vocabulary,
    encode_motion,
    encode_text,
    log_softmax,
    mask_tokens,
    mlm_logits,
    softmax,
    tokenize,
)
from limo.errors import DataError, EmptyQueryError, FormatError
from limo.motion_image import ImageStats, MotionImage, patchify

TEXTS = ["A person walks.", "a person runs quickly", "someone walks slowly"]


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(TEXTS)


@pytest.fixture(scope="module")
def params(vocab):
    return EncoderParams.init(len(vocab), seed=3, d=32)


def test_vocabulary_order(vocab):
    assert vocab.tokens[:3] == ("[PAD]", "[MASK]", "[UNK]")
    # most frequent first, ties alphabetical
    assert vocab.tokens[3:6] == ("a", "person", "walks")


def test_tokenize_examples(vocab):
    ids = tokenize("A person walks.", vocab)
    assert [vocab.tokens[i] for i in ids] == ["a", "person", "walks"]
    with pytest.raises(EmptyQueryError):
        tokenize("", vocab)
    a, b = tokenize("Walks, walks", vocab)
    assert a == b
    assert tokenize("jumps", vocab)[0] == vocab.unk_id


def test_vocabulary_json(vocab, tmp_path):
    vocab.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == vocab
    with pytest.raises(FormatError):
        Vocabulary.from_json("[1]")


def test_encode_text_alpha_zero(params):
    p = params.copy()
    p.alpha = 0.0
    ids = np.array([3, 4, 5, 4])
    np.testing.assert_array_equal(encode_text(ids, p), p.table[ids])


def test_encode_text_single_token(params):
    out = encode_text([4], params)
    np.testing.assert_allclose(out[0], params.table[4], rtol=0, atol=1e-15)


def test_encode_text_middle_row(params):
    p = params.copy()
    p.alpha = 0.5
    ids = [3, 4, 5]
    t = p.table
    expected = 0.5 * t[4] + 0.5 * (t[3] + t[4] + t[5]) / 3
    np.testing.assert_allclose(encode_text(ids, p)[1], expected, atol=1e-15)
    # end rows average over the clipped window
    np.testing.assert_allclose(encode_text(ids, p)[0], 0.5 * t[3] + 0.5 * (t[3] + t[4]) / 2, atol=1e-15)


def test_encode_text_errors(params):
    with pytest.raises(EmptyQueryError):
        encode_text([], params)
    with pytest.raises(DataError):
        encode_text([params.vocab_size], params)


def _image(px):
    return MotionImage(pixels=px, valid_frames=224)


def test_encode_motion_zero(params):
    p = params.copy()
    p.patch_b[:] = 0
    p.pos[:] = 0
    np.testing.assert_array_equal(encode_motion(_image(np.zeros((224, 224))), p), np.zeros((196, 32)))


def test_encode_motion_patch_locality(params, rng):
    a = rng.normal(size=(224, 224))
    b = a.copy()
    b[0:16, 112:128] += 1.0  # patch 7
    diff = np.any(encode_motion(_image(a), params) != encode_motion(_image(b), params), axis=1)
    assert np.flatnonzero(diff).tolist() == [7]


def test_encode_motion_matches_oracle(params, rng):
    px = rng.normal(size=(224, 224))
    out = encode_motion(_image(px), params)
    j = 100
    k, w = divmod(j, 14)
    patch = px[16 * k : 16 * k + 16, 16 * w : 16 * w + 16].ravel()
    ref = np.array([sum(params.patch_w[r, c] * patch[c] for c in range(256)) for r in range(32)])
    np.testing.assert_allclose(out[j], ref + params.patch_b + params.pos[j], atol=1e-12)


def test_encode_motion_applies_stats(params, rng):
    px = rng.normal(size=(224, 224))
    p = params.copy()
    p.stats = ImageStats((0.5,) * 3, (2.0,) * 3)
    q = params.copy()
    np.testing.assert_allclose(encode_motion(_image(px), p), encode_motion(_image((px - 0.5) / 2.0), q), atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_encode_motion_linear(a, b, seed):
    p = EncoderParams.init(10, seed=1, d=16)
    rng = np.random.default_rng(seed)
    i1, i2 = rng.normal(size=(2, 224, 224))
    e = lambda x: encode_motion(_image(x), p) - p.patch_b - p.pos  # noqa: E731
    np.testing.assert_allclose(e(a * i1 + b * i2), a * e(i1) + b * e(i2), atol=1e-9)


def test_encoder_determinism(vocab):
    a = EncoderParams.init(len(vocab), seed=11, d=16)
    b = EncoderParams.init(len(vocab), seed=11, d=16)
    assert a.to_bytes() == b.to_bytes()


def test_checkpoint_round_trip(params, tmp_path):
    params.save(tmp_path / "m.liep")
    back = EncoderParams.load(tmp_path / "m.liep")
    assert back.to_bytes() == params.to_bytes()
    assert back.d == 32 and back.vocab_size == params.vocab_size
    raw = (tmp_path / "m.liep").read_bytes()
    with pytest.raises(FormatError):
        EncoderParams.from_bytes(raw[:-4])


def test_mask_examples():
    m = mask_tokens([9], 0.15, seed=0)
    assert m.masked.tolist() == [1] and m.positions.tolist() == [0]
    with pytest.raises(DataError):
        mask_tokens([1, 2], 0.0)
    ids = np.arange(3, 23)
    m1 = mask_tokens(ids, 0.15, seed=5)
    m2 = mask_tokens(ids, 0.15, seed=5)
    assert len(m1.positions) == 3
    assert np.array_equal(m1.positions, m2.positions) and np.array_equal(m1.masked, m2.masked)
    assert np.all(m1.masked[m1.positions] == 1)
    keep = np.setdiff1d(np.arange(20), m1.positions)
    assert np.array_equal(m1.masked[keep], ids[keep])


@given(st.integers(1, 60), st.floats(0.01, 0.99))
def test_mask_count_property(m, rate):
    out = mask_tokens(np.arange(m) + 3, rate, seed=0)
    assert len(set(out.positions.tolist())) == len(out.positions) == max(1, min(m, math.ceil(rate * m - 1e-9)))


def test_mlm_zero_output_uniform(params):
    p = params.copy()
    p.mlm_w[:] = 0
    lp = log_softmax(mlm_logits(np.ones((2, 32)), p))
    np.testing.assert_allclose(-lp, math.log(p.vocab_size), atol=1e-12)


def test_mlm_constructed_argmax():
    p = EncoderParams.init(6, seed=0, d=6)
    p.mlm_w = np.eye(6) * 10
    state = np.eye(6)[4]
    assert int(np.argmax(mlm_logits(state, p))) == 4


def test_softmax_matches_high_precision(rng):
    z = rng.normal(size=7) * 5
    mpmath.mp.dps = 40
    denom = mpmath.fsum(mpmath.exp(mpmath.mpf(float(x))) for x in z)
    ref = [float(mpmath.exp(mpmath.mpf(float(x))) / denom) for x in z]
    np.testing.assert_allclose(softmax(z), ref, rtol=1e-13)
    np.testing.assert_allclose(log_softmax(z), np.log(ref), atol=1e-13)
