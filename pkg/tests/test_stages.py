import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aepolab.errors import FormatError
from aepolab.stages import segment, stage_entropies, stage_mean_entropy, token_entropy
from aepolab.tasks import A_TOK, D_TOK, END_TOK, R_TOK, T_TOK

X, Y = 10, 11  # option tokens


def is_opt(t):
    return t in (X, Y)


def test_segment_cued_and_uncued():
    resp = [20, 21, X, D_TOK, X, R_TOK, X, 30, A_TOK, Y, END_TOK]
    s = segment(resp, is_opt, cued=True)
    assert (s.thinking, s.draft, s.reflection, s.answer) == ((0, 3), (4, 5), (6, 8), (9, 10))
    s2 = segment([T_TOK] + resp, is_opt)
    assert s2.thinking == (1, 4) and s2.answer == (10, 11)


@pytest.mark.parametrize("resp", [
    [20, D_TOK, X, A_TOK, X, R_TOK, 5, END_TOK],         # misordered
    [20, D_TOK, X, R_TOK, 5, A_TOK, X, END_TOK, 20],     # trailing tokens
    [D_TOK, X, R_TOK, 5, A_TOK, X, END_TOK],             # empty thinking
    [20, D_TOK, X, R_TOK, A_TOK, X, END_TOK],            # empty reflection
    [20, D_TOK, X, X, R_TOK, 5, A_TOK, X, END_TOK],      # two draft tokens
    [20, D_TOK, 20, R_TOK, 5, A_TOK, X, END_TOK],        # non-option draft
    [20, D_TOK, X, R_TOK, 5, A_TOK, X],                  # truncated
    [20, D_TOK, X, R_TOK, R_TOK, 5, A_TOK, X, END_TOK],  # repeated marker
])
def test_segment_rejects_malformed(resp):
    with pytest.raises(FormatError):
        segment(resp, is_opt, cued=True)


def test_token_entropy_reference_values():
    assert token_entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-12)
    assert token_entropy(np.eye(5)[2]) == 0.0
    p = np.array([0.5, 0.25, 0.25])
    assert token_entropy(p) == pytest.approx(1.5 * math.log(2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_bounds_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(9))
    h = token_entropy(p)
    assert 0.0 <= h <= math.log(9) + 1e-12
    assert token_entropy(rng.permutation(p)) == pytest.approx(h, abs=1e-12)


def test_stage_mean_entropy():
    ents = [0.1, 0.2, 0.3, 0.4]
    assert stage_mean_entropy(ents, (1, 3)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        stage_mean_entropy(ents, (2, 2))
    with pytest.raises(ValueError):
        stage_mean_entropy(ents, (2, 9))
    resp = [20, X, D_TOK, X, R_TOK, 5, A_TOK, X, END_TOK]
    se = stage_entropies(np.arange(9) / 10, segment(resp, is_opt, cued=True))
    assert se.h_thinking == pytest.approx(0.05) and se.h_reflection == pytest.approx(0.5)
