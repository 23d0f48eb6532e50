import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import limo.late_interaction as li
from limo.errors import DataError, DegenerateEmbeddingError
from limo.late_interaction import argmax_assignment, batch_scores, interaction_matrix, maxsim_score, save_scores_csv

L_EX = np.array([[1.0, 0.0], [0.0, 1.0]])
V_EX = np.array([[1 / math.sqrt(2), 1 / math.sqrt(2)], [1.0, 0.0], [-1.0, 0.0]])

arrays = st.integers(0, 2**32 - 1).map(np.random.default_rng)


def test_interaction_examples():
    v = np.array([[0.3, -2.0, 1.0]])
    assert interaction_matrix(v, v)[0, 0] == pytest.approx(1.0, abs=1e-7)
    assert interaction_matrix([[1.0, 0.0]], [[0.0, 3.0]])[0, 0] == 0.0
    S = interaction_matrix(L_EX, V_EX, exact=False)
    np.testing.assert_allclose(S, [[0.70710678, 1, -1], [0.70710678, 0, 0]], atol=1e-8)


def test_zero_norm_rows_raise():
    with pytest.raises(DegenerateEmbeddingError):
        interaction_matrix(np.zeros((1, 2)), V_EX)
    with pytest.raises(DegenerateEmbeddingError, match="motion 1"):
        batch_scores([L_EX], [V_EX, np.zeros((2, 2))])
    with pytest.raises(DataError):
        batch_scores([L_EX], [V_EX, np.zeros((0, 2))])


def test_maxsim_examples():
    assert maxsim_score([[1.0, 0.2]]) == 1.0
    S = interaction_matrix(L_EX, V_EX, exact=False)
    assert abs(maxsim_score(S) - 0.8535533905932737622) < 1e-12
    assert maxsim_score(np.full((3, 4), 0.25)) == 0.25
    with pytest.raises(DataError):
        maxsim_score(np.zeros((0, 3)))


def test_argmax_ties_go_low():
    S = np.array([[0.1, 0.2, 0.9, 0.3, 0.4, 0.9]])
    assert argmax_assignment(S).tolist() == [2]
    assert argmax_assignment(np.array([[0, 5, 0], [1, 5, 2]])).tolist() == [1, 1]


def test_argmax_matches_scan(rng):
    S = np.round(rng.normal(size=(6, 9)), 1)
    for i, j in enumerate(argmax_assignment(S)):
        best = max(range(9), key=lambda c: (S[i, c], -c))
        assert j == best


def test_batch_scores_examples(rng):
    t = [rng.normal(size=(4, 8))]
    m = [rng.normal(size=(5, 8))]
    assert batch_scores(t, m)[0, 0] == maxsim_score(interaction_matrix(t[0], m[0]))
    out = batch_scores(t, m + m)
    assert out[0, 0] == out[0, 1]


@given(arrays)
def test_batch_scores_bitwise_pairwise(rng):
    texts = [rng.normal(size=(int(rng.integers(1, 7)), 16)) for _ in range(4)]
    motions = [rng.normal(size=(int(rng.integers(1, 9)), 16)) for _ in range(4)]
    out = batch_scores(texts, motions)
    for i in range(4):
        for j in range(4):
            assert out[i, j] == maxsim_score(interaction_matrix(texts[i], motions[j]))


@given(arrays)
def test_permutation_invariance(rng):
    L = rng.normal(size=(5, 12))
    V = rng.normal(size=(9, 12))
    a = maxsim_score(interaction_matrix(L, V))
    assert a == maxsim_score(interaction_matrix(L, V[rng.permutation(9)]))


@given(arrays)
def test_monotone_in_patches(rng):
    L = rng.normal(size=(5, 12))
    V = rng.normal(size=(9, 12))
    extra = np.vstack([V, rng.normal(size=(1, 12))])
    assert maxsim_score(interaction_matrix(L, extra)) >= maxsim_score(interaction_matrix(L, V))


@given(arrays, st.floats(1e-3, 1e3))
def test_scale_invariance_and_bound(rng, lam):
    L = rng.normal(size=(4, 12))
    V = rng.normal(size=(6, 12))
    S = interaction_matrix(L, V)
    L2 = L.copy()
    L2[1] *= lam
    V2 = V.copy()
    V2[3] *= lam
    np.testing.assert_allclose(interaction_matrix(L2, V2), S, atol=1e-9)
    assert -1.0 <= maxsim_score(S) <= 1.0


def test_no_reverse_scoring_path():
    public = [n for n in dir(li) if not n.startswith("_")]
    assert not [n for n in public if "m2t" in n.lower() or "reverse" in n.lower()]


def test_scores_csv(tmp_path):
    save_scores_csv(tmp_path / "s.csv", np.eye(2), ["a", "b"], ["x", "y"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",x,y" and lines[1] == "a,1.0,0.0"
