import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcp.adjustments import (
    FAMILY_KINDS,
    AdjustmentFamily,
    DomainCheck,
    DomainError,
    forward,
    invert_in_t,
    invert_in_v,
    structural_conflict,
    validate_domain,
)

finite = st.floats(-50, 50, allow_nan=False)
positive = st.floats(1e-3, 50, allow_nan=False)


def test_forward_examples():
    assert forward("additive", 1.5, 2.0) == 3.5
    assert forward("multiplicative", 2.0, 3.0) == 6.0
    assert forward("exp_additive", 0.0, math.log(2.0)) == pytest.approx(2.0, rel=1e-12)


def test_invert_in_v_examples():
    assert invert_in_v("additive", 1.5, 3.5) == 2.0
    assert invert_in_v("multiplicative", 4.0, 2.0) == 0.5
    assert invert_in_v("exp_multiplicative", 2.0, math.exp(4.0)) == pytest.approx(2.0, rel=1e-12)


def test_invert_in_t_examples():
    assert invert_in_t("additive", 3.5) == 3.5
    assert invert_in_t("exp_additive", math.e) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(DomainError):
        invert_in_t("exp_multiplicative", 1.0)
    with pytest.raises(DomainError):
        invert_in_t("multiplicative", -0.5)


def test_domain_errors_name_the_bound():
    with pytest.raises(DomainError, match="> 0"):
        forward("multiplicative", -1.0, 2.0)
    with pytest.raises(DomainError, match="> 0"):
        invert_in_v("exp_additive", 0.0, -1.0)


def test_phi_anchor_fixed_per_kind():
    anchors = {k: AdjustmentFamily(k).phi for k in FAMILY_KINDS}
    assert anchors == {
        "additive": 0.0,
        "multiplicative": 1.0,
        "exp_additive": 0.0,
        "exp_multiplicative": 1.0,
    }


def _t_for(kind, t):
    # the exponential kinds are only usable with positive parameters (their
    # anchor images must exceed 1), and moderate magnitudes avoid overflow
    if kind == "additive":
        return t
    if kind == "exp_additive":
        return abs(t) * 0.2 + 1e-3
    return abs(t) * 0.2 + 1e-3 if kind == "exp_multiplicative" else abs(t) + 1e-3


def _v_for(kind, v):
    fam = AdjustmentFamily(kind)
    if fam.v_lower == -math.inf:
        return v
    base = fam.v_lower + 1e-3 + abs(v)
    return min(base, 40.0) if kind.startswith("exp") else base


@settings(max_examples=250, deadline=None)
@given(
    kind=st.sampled_from(FAMILY_KINDS),
    t=finite,
    v1=finite,
    v2=finite,
)
def test_monotone_in_v(kind, t, v1, v2):
    t = _t_for(kind, t)
    a, b = sorted((v1, v2))
    if b - a < 1e-9:
        return
    fa, fb = forward(kind, t, a), forward(kind, t, b)
    if not (np.isfinite(fa) and np.isfinite(fb)) or fa == 0.0:
        return  # exp saturation in float; monotonicity is vacuous there
    assert fa < fb


@settings(max_examples=250, deadline=None)
@given(kind=st.sampled_from(FAMILY_KINDS), t1=finite, t2=finite)
def test_monotone_in_t_at_anchor(kind, t1, t2):
    fam = AdjustmentFamily(kind)
    a, b = sorted((_t_for(kind, t1), _t_for(kind, t2)))
    if b - a < 1e-9:
        return
    fa, fb = forward(kind, a, fam.phi), forward(kind, b, fam.phi)
    if not (np.isfinite(fa) and np.isfinite(fb)) or fa == 0.0:
        return
    assert fa < fb


@settings(max_examples=250, deadline=None)
@given(kind=st.sampled_from(FAMILY_KINDS), t=finite, v=finite)
def test_double_round_trip(kind, t, v):
    fam = AdjustmentFamily(kind)
    t = _t_for(kind, t)
    v = _v_for(kind, v)
    # t-round trip through the anchor
    s = forward(kind, t, fam.phi)
    assert invert_in_t(kind, s) == pytest.approx(t, rel=1e-12, abs=1e-12)
    # v-round trip at fixed t; guard overflow for the exponential kinds
    w = forward(kind, t, v)
    if np.isfinite(w) and w < 1e300:
        assert invert_in_v(kind, t, w) == pytest.approx(v, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(t=positive, v=finite)
def test_worked_examples_reduce_to_ratio_and_difference(t, v):
    # additive rectification is v - t; multiplicative is v / t
    assert invert_in_v("additive", t, v) == pytest.approx(v - t, rel=1e-12, abs=1e-12)
    assert invert_in_v("multiplicative", t, v) == pytest.approx(v / t, rel=1e-12, abs=1e-12)


def test_validate_domain_examples():
    assert validate_domain("multiplicative", [-0.2, 3.0]) == DomainCheck(False, 0.3)
    assert validate_domain("exp_additive", [0.5, 2.0]) == DomainCheck(False, 0.6)
    assert validate_domain("additive", [-1e6, 1e6]).ok


def test_validate_domain_shift_puts_scores_inside():
    scores = np.array([-0.2, 3.0])
    rec = validate_domain("multiplicative", scores).recommended_shift
    assert validate_domain("multiplicative", scores + rec).ok
    # margin keeps the minimum away from the boundary
    assert (scores + rec).min() >= 0.1 - 1e-12


def test_structural_conflict():
    assert structural_conflict("multiplicative", "mixture_nll") is not None
    assert structural_conflict("exp_additive", "mixture_nll") is not None
    assert structural_conflict("additive", "mixture_nll") is None
    assert structural_conflict("multiplicative", "abs_residual") is None
