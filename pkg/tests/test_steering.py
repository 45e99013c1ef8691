import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctxscope.errors import DegenerateRow, EmptyUserMask
from ctxscope.model import Model, ModelConfig
from ctxscope.nih import build_grid
from ctxscope.steering import (DEFAULT_ALPHAS, HeadSelection, SteeringSpec, probe_heads, select_heads, steer_row,
                               steer_rows, sweep_alpha)
from ctxscope.tokenizer import TemplateSpec, conversation, render

from helpers import brute_heads, echo_model, random_record, steering_fixed_model


@st.composite
def row_and_mask(draw):
    n = draw(st.integers(1, 12))
    raw = draw(arrays(np.float64, n, elements=st.floats(0.0, 1.0)))
    assume(raw.sum() > 1e-3)
    mask = draw(arrays(np.bool_, n))
    return raw / raw.sum(), mask


alphas = st.floats(1e-3, 1.0, exclude_min=False)


def test_hand_example():
    out = steer_row([0.5, 0.5], [True, False], 0.5)
    assert np.allclose(out, [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_alpha_one_identity_and_all_user():
    row = np.array([0.2, 0.3, 0.5])
    assert np.array_equal(steer_row(row, [True, False, True], 1.0), row)
    for a in (0.01, 0.5, 0.9):
        assert np.array_equal(steer_row(row, [True, True, True], a), row)


def test_degenerate_and_bad_alpha():
    with pytest.raises(DegenerateRow):
        steer_row([0.0, 0.0], [True, False], 0.5)
    with pytest.raises(ValueError):
        steer_row([1.0], [True], 0.0)
    with pytest.raises(ValueError):
        SteeringSpec(1.5, ())


@given(row_and_mask(), alphas)
def test_output_is_stochastic(rm, a):
    row, mask = rm
    assert abs(steer_row(row, mask, a).sum() - 1.0) <= 1e-9


@given(row_and_mask(), alphas)
def test_user_mass_monotone(rm, a):
    row, mask = rm
    u = row[mask].sum()
    assume(1e-9 < u < 1 - 1e-9 and a < 1.0)
    assert steer_row(row, mask, a)[mask].sum() > u


@given(row_and_mask(), alphas)
def test_order_preserved_within_classes(rm, a):
    row, mask = rm
    out = steer_row(row, mask, a)
    for cls in (mask, ~mask):
        r, o = row[cls], out[cls]
        for i in range(len(r)):
            for j in range(len(r)):
                if r[i] < r[j]:
                    assert o[i] <= o[j]


@given(row_and_mask(), alphas, alphas)
def test_composition(rm, a, b):
    row, mask = rm
    twice = steer_row(steer_row(row, mask, a), mask, b)
    assert np.allclose(twice, steer_row(row, mask, a * b), rtol=0, atol=1e-9)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 8), alphas, st.integers(0, 10**6))
def test_vectorized_matches_rowwise(n_rows, n, a, seed):
    rng = np.random.default_rng(seed)
    rows = rng.random((n_rows, n)) + 1e-3
    rows /= rows.sum(-1, keepdims=True)
    mask = rng.random(n) < 0.5
    got = steer_rows(rows, mask, a)
    for r, g in zip(rows, got):
        assert np.allclose(g, steer_row(r, mask, a), rtol=0, atol=1e-15)


def test_select_heads_examples():
    T = 3
    mask = np.array([False, True, True])
    w = np.zeros((1, 2, T, T))
    w[0, 0, -1] = [0.7, 0.2, 0.1]
    w[0, 1, -1] = [0.3, 0.3, 0.4]
    assert select_heads(w, mask).heads == (1,)
    w[0, 1, -1] = [0.7, 0.1, 0.2]  # tie at 0.3
    assert select_heads(w, mask).heads == (0,)
    single = np.zeros((3, 1, T, T))
    single[..., -1, :] = 1 / 3
    assert select_heads(single, mask).heads == (0, 0, 0)
    with pytest.raises(EmptyUserMask):
        select_heads(w, np.zeros(T, dtype=bool))


def test_select_heads_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        L, H, T = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 9))
        w = random_record(rng, L, H, T)
        mask = rng.random(T) < 0.5
        mask[0] = True
        assert select_heads(w, mask).heads == brute_heads(w, mask)


def test_head_selection_json_roundtrip(tmp_path):
    sel = HeadSelection((2, 0, 1), "L200_D0.5000", 17, (0.5, 0.25, 0.125))
    sel.save(tmp_path / "s.json")
    assert HeadSelection.load(tmp_path / "s.json") == sel
    assert sel.targets() == ((0, 2), (1, 0), (2, 1))


def test_probe_heads_on_model():
    m = Model.init(ModelConfig(n_layers=2, n_heads=4, d_model=16))
    seq = render(conversation("find the code"), TemplateSpec.null())
    sel = probe_heads(m, seq, "p")
    assert len(sel.heads) == 2 and all(0 <= h < 4 for h in sel.heads)
    assert sel.probe_position == len(seq) - 1


def small_grid():
    return build_grid(64, 96, 2, 2, prompt_style="desk")


def test_sweep_identity_alpha():
    base = sweep_alpha(echo_model("4817"), small_grid(), alphas=[1.0])
    assert base.best_alpha == 1.0 and base.recall == {1.0: 1.0}


def test_sweep_picks_fixing_alpha():
    model = steering_fixed_model(threshold=0.3)
    sel = HeadSelection((0,))
    res = sweep_alpha(model, small_grid(), alphas=[0.9, 0.3], selection=sel)
    assert res.recall == {0.9: 0.0, 0.3: 1.0}
    assert res.best_alpha == 0.3


def test_sweep_dedupes_and_ties_to_first(tmp_path):
    model = steering_fixed_model(threshold=0.5)
    cases = small_grid()
    res = sweep_alpha(model, cases, alphas=[0.5, 0.1, 0.5, 0.9], selection=HeadSelection((0,)))
    assert list(res.recall) == [0.5, 0.1, 0.9]
    assert len(model.calls) == 3 * len(cases)
    assert res.best_alpha == 0.5
    res.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "alpha,mean_recall,mean_err"


def test_default_alphas():
    assert DEFAULT_ALPHAS == (0.01, 0.1, 0.3, 0.5, 0.7, 0.9)
