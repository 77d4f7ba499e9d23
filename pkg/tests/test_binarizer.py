import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitflip_bnn.binarizer import (
    FINAL_TK,
    BinarizePolicy,
    BinarizeSchedule,
    apply_policy,
    binarize_backward,
    binarize_forward,
    schedule_tk,
)
from bitflip_bnn.core import LayerSpec, ModelGraph
from bitflip_bnn.models import mlp
from conftest import rel_err

SQ2 = np.sqrt(2.0)
tk_pairs = st.integers(0, 30).map(lambda i: schedule_tk(i, 30))


def test_schedule_endpoints_exact():
    assert schedule_tk(0, 7) == (0.01, 100.0)
    assert schedule_tk(7, 7) == (10.0, 1.0)
    t, k = schedule_tk(20, 30)
    assert t == pytest.approx(1.0, abs=1e-15) and k == 1.0
    assert FINAL_TK == (10.0, 1.0)


def test_schedule_errors():
    with pytest.raises(ValueError):
        schedule_tk(0, 0)
    with pytest.raises(ValueError):
        schedule_tk(4, 3)
    with pytest.raises(ValueError):
        BinarizeSchedule(0)


def test_schedule_object_advances_and_saturates():
    s = BinarizeSchedule(2)
    seen = [s.tk]
    for _ in range(3):
        s.advance()
        seen.append(s.tk)
    assert seen[0] == (0.01, 100.0) and seen[-1] == (10.0, 1.0) and s.current_iter == 2


def test_forward_examples():
    assert binarize_forward(0.0, 1.0, 1.0) == 0.0
    assert binarize_forward(1.0, 1.0, 1.0) == pytest.approx(-0.5 + SQ2, abs=1e-12)
    for t, k in [(0.01, 100.0), (1.0, 1.0), (10.0, 1.0)]:
        assert binarize_forward(SQ2 / t, t, k) == k


@given(tk_pairs)
def test_continuity_at_branch_boundary(tk):
    t, k = tk
    edge = SQ2 / t
    inner = k * (-(t * t) * edge * edge / 2.0 + SQ2 * t * edge)
    # the quadratic branch evaluated exactly at the edge meets k * sign(z)
    assert abs(inner - k) < 1e-9 * max(k, 1.0)
    below = binarize_forward(np.nextafter(edge, 0.0), t, k)
    assert abs(below - k) < 1e-9 * max(k, 1.0)


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3, allow_nan=False), tk_pairs)
def test_odd_and_bounded(z, tk):
    t, k = tk
    f = binarize_forward(z, t, k)
    assert binarize_forward(-z, t, k) == -f
    assert abs(f) <= k


def test_backward_examples():
    assert binarize_backward(0.0, 2.0, 1.5) == pytest.approx(1.5 * SQ2 * 2.0, abs=1e-12)
    assert binarize_backward(SQ2 / 2.0, 2.0, 1.0) == 0.0
    assert binarize_backward(5.0, 2.0, 1.0) == 0.0
    g = binarize_backward(0.5, 1.0, 1.0)
    fd = (binarize_forward(0.5 + 1e-6, 1.0, 1.0) - binarize_forward(0.5 - 1e-6, 1.0, 1.0)) / 2e-6
    assert g == pytest.approx(SQ2 - 0.5, abs=1e-12)
    assert abs(g - fd) < 1e-6


def test_backward_matches_finite_differences_on_grid():
    """Relative error < 1e-5 away from the kinks at 0 and the branch edge."""
    worst = 0.0
    for i in range(0, 31, 3):
        t, k = schedule_tk(i, 30)
        edge = SQ2 / t
        # central differences are exact on each quadratic piece, so a step
        # proportional to the branch width only limits rounding
        h = 1e-4 * edge
        z = np.linspace(-3 * edge, 3 * edge, 2001)
        z = z[(np.abs(z) > 2 * h) & (np.abs(np.abs(z) - edge) > 2 * h)]
        fd = (binarize_forward(z + h, t, k) - binarize_forward(z - h, t, k)) / (2 * h)
        g = binarize_backward(z, t, k)
        inside = np.abs(z) < edge
        assert np.all(g[~inside] == 0.0) and np.all(fd[~inside] == 0.0)
        worst = max(worst, float(np.max(rel_err(g[inside], fd[inside]))))
    assert worst < 1e-5


def test_end_of_training_is_sign():
    t, k = schedule_tk(9, 9)
    z = np.concatenate([np.linspace(-50, -SQ2 / 10 - 1e-12, 500), np.linspace(SQ2 / 10 + 1e-12, 50, 500)])
    assert np.array_equal(binarize_forward(z, t, k), np.sign(z))


def _stack(n):
    dims = (4,) * (n - 1)
    return mlp(dims, 4, 3) if n > 1 else ModelGraph([LayerSpec("linear", 4, 3)], (4,), 3)


def test_policy_five_layers():
    g = apply_policy(_stack(5))
    w = g.weighted()
    assert len(w) == 5
    assert all(g.layers[i].precision == "binary" for i in w)
    assert [g.layers[i].binarize_input for i in w] == [False, True, True, True, False]


def test_policy_single_layer():
    g = apply_policy(_stack(1))
    assert g.layers[0].precision == "binary" and not g.layers[0].binarize_input


def test_policy_first_last_full_precision():
    g = apply_policy(_stack(5), BinarizePolicy(binarize_all_weights=False))
    w = g.weighted()
    assert [g.layers[i].precision for i in w] == ["fp32", "binary", "binary", "binary", "fp32"]


def test_policy_mismatch_errors():
    g = _stack(3)
    g.layers[0].precision, g.layers[0].n_bits = "quant", 8
    with pytest.raises(ValueError):
        apply_policy(g)
    with pytest.raises(ValueError):
        apply_policy(_stack(3), BinarizePolicy(activation_exceptions=("middle",)))
    with pytest.raises(ValueError):
        apply_policy(ModelGraph([LayerSpec("activation")], (3,), 3))
