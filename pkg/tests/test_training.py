import math

import mpmath
import numpy as np
import pytest

from limo.encoders import EncoderParams, MaskedBatch, Vocabulary, encode_text
from limo.errors import DataError
from limo.training import (
    Example,
    LossConfig,
    TrainState,
    adamw_update,
    apply_gradients,
    finite_difference_check,
    forward,
    gradients,
    history_csv,
    m2t_loss,
    make_batch,
    make_example,
    mlm_loss,
    param_groups,
    t2m_loss,
    total_loss,
    train_loop,
)

S_ASYM = np.array([[0.9, 0.2], [0.4, 0.7]])


def tiny_examples(n, seed=0, vocab_size=12):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frames = rng.normal(0, 0.5, (int(rng.integers(20, 40)), 29))
        ids = rng.integers(3, vocab_size, int(rng.integers(3, 7)))
        out.append(Example(frames=frames, ids=ids, label=str(i)))
    return out


def tiny_batch(seed=0, B=4, vocab_size=12):
    return make_batch(tiny_examples(B, seed, vocab_size), 0.15, np.random.default_rng(seed))


@pytest.mark.parametrize("B", [2, 8, 16, 128])
def test_uniform_scores_give_log_b(B):
    S = np.full((B, B), 0.37)
    assert t2m_loss(S, 0.07) == math.log(B)
    assert m2t_loss(S, 0.07) == math.log(B)


def test_contrastive_examples():
    assert abs(t2m_loss(np.eye(2), 1.0) - 0.31326168751822283405) < 1e-15
    assert abs(t2m_loss(S_ASYM, 0.5) - 0.32895268020216827653) < 1e-15
    assert abs(m2t_loss(S_ASYM, 0.5) - 0.31326168751822283405) < 1e-15
    S = np.zeros((4, 4)) + 50.0 * np.eye(4)
    assert t2m_loss(S, 1.0) < 1e-20
    sym = np.array([[0.5, 0.1, 0.3], [0.1, 0.2, 0.0], [0.3, 0.0, 0.9]])
    assert m2t_loss(sym, 0.3) == t2m_loss(sym, 0.3)


def test_contrastive_errors():
    with pytest.raises(DataError):
        t2m_loss(np.zeros((2, 3)), 1.0)
    with pytest.raises(DataError):
        t2m_loss(np.eye(2), 0.0)


def test_mlm_zero_output():
    p = EncoderParams.init(9, seed=0, d=8)
    p.mlm_w[:] = 0
    mb = MaskedBatch(np.array([3, 4, 5]), np.array([3, 1, 5]), np.array([1]), 0.15)
    assert abs(mlm_loss(mb, p) - math.log(9)) < 1e-15


def test_mlm_constructed_perfect():
    p = EncoderParams.init(6, seed=0, d=6)
    p.alpha = 0.0
    p.table = np.eye(6)
    p.mlm_w = np.eye(6) * 50.0
    p.table[1] = p.table[4]  # the MASK row points at the hidden token
    mb = MaskedBatch(np.array([3, 4]), np.array([3, 1]), np.array([1]), 0.5)
    assert mlm_loss(mb, p) < 1e-6


def test_mlm_matches_high_precision(rng):
    p = EncoderParams.init(11, seed=4, d=8)
    mbs = [
        MaskedBatch(np.array([3, 4, 5, 6]), np.array([3, 1, 5, 1]), np.array([1, 3]), 0.5),
        MaskedBatch(np.array([7, 8]), np.array([1, 8]), np.array([0]), 0.5),
    ]
    mpmath.mp.dps = 40
    nll, n = mpmath.mpf(0), 0
    for mb in mbs:
        states = encode_text(mb.masked, p)[mb.positions]
        for s, target in zip(states, mb.original[mb.positions]):
            logits = [mpmath.fsum(mpmath.mpf(float(s[i])) * mpmath.mpf(float(p.mlm_w[i, v])) for i in range(8)) for v in range(11)]
            nll += mpmath.log(mpmath.fsum(mpmath.exp(z) for z in logits)) - logits[int(target)]
            n += 1
    assert abs(mlm_loss(mbs, p) - float(nll / n)) < 1e-12


def test_total_loss_is_linear_in_lambda():
    p = EncoderParams.init(12, seed=1, d=16)
    batch = tiny_batch()
    base = total_loss(p, batch, 0.0)
    for lam in (0.2, 1.0, 3.5):
        parts = total_loss(p, batch, lam)
        assert abs(parts.total - (base.total + lam * parts.mlm)) < 1e-12
        assert parts.ret == 0.5 * (parts.t2m + parts.m2t)


def test_forward_scores_match_contrastive_losses():
    p = EncoderParams.init(12, seed=1, d=16)
    parts, _, cache = forward(p, tiny_batch(), need_grad=False)
    assert parts.t2m == pytest.approx(t2m_loss(cache["S"], p.tau), abs=1e-12)
    assert parts.m2t == pytest.approx(m2t_loss(cache["S"], p.tau), abs=1e-12)


def test_forward_needs_two_pairs():
    p = EncoderParams.init(12, seed=1, d=16)
    with pytest.raises(DataError):
        forward(p, tiny_batch(B=1))


def test_gradients_match_finite_differences():
    p = EncoderParams.init(12, seed=2, d=32)
    checks = finite_difference_check(p, tiny_batch(seed=3), h=1e-4, seed=0)
    assert {c.group for c in checks} == set(param_groups(p))
    stable = [c for c in checks if c.winners_stable]
    assert len(stable) >= len(checks) - 2
    assert max(c.rel_error for c in stable) < 1e-4


def test_adamw_toy_step():
    p = np.array([1.0])
    m, v = np.zeros(1), np.zeros(1)
    adamw_update(p, np.array([0.5]), m, v, 1, lr=0.1, weight_decay=0.1)
    # decay 1 -> 0.99, then a bias-corrected Adam step of lr * 0.5 / (0.5 + 1e-8)
    assert abs(p[0] - 0.89000000199999996) < 1e-15


def test_weight_decay_groups_and_alpha_clip():
    p = EncoderParams.init(12, seed=0, d=8)
    p.alpha = 0.9999
    state = TrainState(p.copy())
    zero = {k: np.zeros_like(v) for k, v in param_groups(p).items()}
    zero["alpha"] = np.array([-1.0])
    apply_gradients(state, zero, lr=0.1, weight_decay=0.5)
    q = state.params
    np.testing.assert_array_equal(q.pos, p.pos)
    np.testing.assert_array_equal(q.patch_b, p.patch_b)
    np.testing.assert_allclose(q.table, p.table * 0.95)
    np.testing.assert_allclose(q.parts.weights[3], p.parts.weights[3] * 0.95)
    assert q.alpha == 1.0 and q.log_tau == p.log_tau


def test_tau_stays_positive():
    p = EncoderParams.init(12, seed=0, d=8)
    state = TrainState(p)
    for _ in range(50):
        g = {k: np.zeros_like(v) for k, v in param_groups(state.params).items()}
        g["log_tau"] = np.array([10.0])
        apply_gradients(state, g, lr=1.0, weight_decay=0.0)
    assert state.tau > 0


def test_config_validation():
    with pytest.raises(DataError):
        LossConfig(batch_size=1)
    with pytest.raises(DataError):
        LossConfig(lambda_mlm=-0.1)
    with pytest.raises(DataError):
        LossConfig(mask_rate=0.0)
    with pytest.raises(DataError):
        LossConfig.from_dict({"learning_rate": 1})
    assert LossConfig.from_dict({"lr": 0.5}).lr == 0.5
    assert LossConfig().lambda_mlm == 0.2 and LossConfig().mask_rate == 0.15


def test_make_example_subsamples():
    vocab = Vocabulary.build(["a person walks"])
    ex = make_example(np.zeros((300, 29)), "a person walks", vocab)
    assert ex.frames.shape == (224, 29) and ex.label == "a person walks"


def test_train_loop_is_deterministic_and_learns():
    cfg = LossConfig(batch_size=4, epochs=3, d_model=16, seed=5, lr=1e-2)
    train = tiny_examples(10, seed=1)
    s1, h1 = train_loop(train, cfg, 12)
    s2, h2 = train_loop(train, cfg, 12)
    assert s1.params.to_bytes() == s2.params.to_bytes()
    assert history_csv(h1) == history_csv(h2)
    assert len(h1) == 3 and h1[-1].t2m < h1[0].t2m
    assert history_csv(h1).splitlines()[0] == "epoch,L_t2m,L_m2t,L_mlm,val_R@1"
    with pytest.raises(DataError):
        train_loop(train[:3], cfg, 12)


def test_zero_lambda_leaves_mlm_matrix_untouched():
    p = EncoderParams.init(12, seed=1, d=16)
    grads = gradients(p, tiny_batch(), lambda_mlm=0.0)
    assert not np.any(grads["mlm_w"])
    assert np.any(gradients(p, tiny_batch(), lambda_mlm=0.2)["mlm_w"])


def test_unused_vocab_rows_get_no_gradient():
    p = EncoderParams.init(20, seed=1, d=16)
    grads = gradients(p, tiny_batch(vocab_size=12))  # ids stay below 12
    assert not np.any(grads["table"][12:])
    assert np.any(grads["table"][3:12])


def test_zero_gradient_step_is_identity():
    p = EncoderParams.init(12, seed=3, d=8)
    state = TrainState(p.copy())
    zero = {k: np.zeros_like(v) for k, v in param_groups(p).items()}
    for _ in range(3):
        apply_gradients(state, zero, lr=0.1, weight_decay=0.0)
    assert state.params.to_bytes() == p.to_bytes()


def test_weight_decay_only_shrinks():
    p = EncoderParams.init(12, seed=3, d=8)
    state = TrainState(p.copy())
    zero = {k: np.zeros_like(v) for k, v in param_groups(p).items()}
    apply_gradients(state, zero, lr=0.1, weight_decay=0.3)
    before, after = param_groups(p), param_groups(state.params)
    for name in before:
        assert np.all(np.abs(after[name]) <= np.abs(before[name]))
        assert np.all(after[name] * before[name] >= 0)


def test_two_pair_dataset_loss_decreases():
    cfg = LossConfig(batch_size=2, epochs=50, d_model=32, seed=0)
    state, hist = train_loop(tiny_examples(2, seed=7), cfg, 12)
    assert state.step == 50
    ret = np.array([0.5 * (h.t2m + h.m2t) for h in hist])
    smooth = np.convolve(ret, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]
    assert ret[-10:].mean() < 0.5 * ret[:10].mean()


@pytest.mark.parametrize("lam", [0.0, 0.2])
def test_lambda_sweep_runs(lam):
    cfg = LossConfig(batch_size=4, epochs=2, d_model=16, seed=1, lambda_mlm=lam)
    _, hist = train_loop(tiny_examples(8), cfg, 12)
    assert all(np.isfinite([h.t2m, h.m2t, h.mlm]).all() for h in hist)
