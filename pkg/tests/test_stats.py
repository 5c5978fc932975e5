import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from slideseg.errors import DegenerateTestError, InputError
from slideseg.stats import WilcoxonMethod, wilcoxon_signed_rank


def enumeration_oracle(a, b, alternative="two-sided"):
    """Literal 2^n enumeration over all sign assignments."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = len(d)
    ranks = scipy.stats.rankdata(np.abs(d))
    total_rank = ranks.sum()
    w_plus = ranks[d > 0].sum()
    w_obs = min(w_plus, total_rank - w_plus)
    count = 0
    eps = 1e-9
    for bits in range(2**n):
        wp = sum(ranks[i] for i in range(n) if (bits >> i) & 1)
        wm = total_rank - wp
        if alternative == "two-sided":
            hit = min(wp, wm) <= w_obs + eps
        elif alternative == "greater":
            hit = wp >= w_plus - eps
        else:
            hit = wp <= w_plus + eps
        count += hit
    return count / 2**n


def test_n5_all_positive_fixture():
    r = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
    assert r.method is WilcoxonMethod.EXACT
    assert r.n_effective == 5
    assert r.w_statistic == 0.0
    assert r.p_value == pytest.approx(0.0625, abs=1e-15)


def test_single_effective_pair():
    r = wilcoxon_signed_rank([1, 1, 1, 5], [1, 1, 1, 2])
    assert r.n_effective == 1
    assert r.p_value == 1.0


def test_all_zero_differences_degenerate():
    with pytest.raises(DegenerateTestError):
        wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])


def test_matches_enumeration_n12():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        r = wilcoxon_signed_rank(a, b)
        assert r.method is WilcoxonMethod.EXACT
        assert r.p_value == pytest.approx(enumeration_oracle(a, b), abs=1e-12)


def test_matches_enumeration_with_ties():
    a = np.array([3.0, 5.0, 1.0, 4.0, 4.0, 9.0, 2.0])
    b = np.array([1.0, 3.0, 3.0, 2.0, 2.0, 5.0, 4.0])  # |d| has ties
    r = wilcoxon_signed_rank(a, b)
    assert r.p_value == pytest.approx(enumeration_oracle(a, b), abs=1e-12)


def test_one_sided_alternatives_match_enumeration():
    rng = np.random.default_rng(1)
    a = rng.normal(0.4, 1, size=10)
    b = rng.normal(0, 1, size=10)
    for alt in ("greater", "less"):
        r = wilcoxon_signed_rank(a, b, alternative=alt)
        assert r.p_value == pytest.approx(enumeration_oracle(a, b, alt), abs=1e-12)


def test_matches_scipy_exact_no_ties():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.normal(size=14)
        b = rng.normal(size=14)
        ours = wilcoxon_signed_rank(a, b)
        ref = scipy.stats.wilcoxon(a, b, mode="exact")
        assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)
        assert ours.w_statistic == pytest.approx(ref.statistic, abs=1e-12)


def test_exact_cutoff_at_25():
    rng = np.random.default_rng(3)
    a25, b25 = rng.normal(size=25), rng.normal(size=25)
    assert wilcoxon_signed_rank(a25, b25).method is WilcoxonMethod.EXACT
    a26, b26 = rng.normal(size=26), rng.normal(size=26)
    assert wilcoxon_signed_rank(a26, b26).method is WilcoxonMethod.NORMAL_APPROX


def test_normal_approx_matches_scipy():
    rng = np.random.default_rng(4)
    a = rng.normal(0.3, 1, size=40)
    b = rng.normal(0, 1, size=40)
    ours = wilcoxon_signed_rank(a, b)
    assert ours.method is WilcoxonMethod.NORMAL_APPROX
    ref = scipy.stats.wilcoxon(a, b, correction=True, mode="approx")
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_rescaling_invariance():
    rng = np.random.default_rng(5)
    a = rng.normal(size=11)
    b = rng.normal(size=11)
    r1 = wilcoxon_signed_rank(a, b)
    r2 = wilcoxon_signed_rank(a * 37.5, b * 37.5)
    assert r1.p_value == r2.p_value
    assert r1.w_statistic == r2.w_statistic


def test_input_validation():
    with pytest.raises(InputError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        wilcoxon_signed_rank([], [])
    with pytest.raises(InputError):
        wilcoxon_signed_rank([1], [2], alternative="sideways")


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 12),
    seed=st.integers(0, 2**32 - 1),
    quantize=st.booleans(),
)
def test_property_exact_matches_enumeration(n, seed, quantize):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    if quantize:  # force ties and zero differences
        a = np.round(a * 2) / 2
        b = np.round(b * 2) / 2
    d = a - b
    if not np.any(d != 0):
        with pytest.raises(DegenerateTestError):
            wilcoxon_signed_rank(a, b)
        return
    r = wilcoxon_signed_rank(a, b)
    assert 0.0 < r.p_value <= 1.0
    assert r.p_value == pytest.approx(enumeration_oracle(a, b), abs=1e-12)
