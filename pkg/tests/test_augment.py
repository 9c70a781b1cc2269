import numpy as np
import pytest

from curriculum_ssl.augment import REFERENCE_STRONG, MaskPolicy, augment, expected_coverage, span_mask, weak_of


def _mc_coverage(n, span, prob, draws, seed=0):
    rng = np.random.default_rng(seed)
    return np.array([span_mask(n, span, prob, rng).mean() for _ in range(draws)])


def test_zero_probabilities_identity():
    x = np.random.default_rng(0).normal(size=(20, 8))
    pol = MaskPolicy(3, 0.0, 2, 0.0)
    np.testing.assert_array_equal(augment(x, pol, 1), x)


def test_full_channel_coverage():
    x = np.random.default_rng(0).normal(size=(7, 8)) + 5
    pol = MaskPolicy(1, 0.0, 8, 1.0)
    assert not augment(x, pol, 3).any()


def test_reference_time_mask_fraction_monte_carlo():
    cov = _mc_coverage(1000, 10, 0.65, draws=1000)
    exact = expected_coverage(1000, 10, 0.65)
    # overlap model 1 - (1 - p/len)^len
    assert exact == pytest.approx(1 - (1 - 0.065) ** 10, abs=0.005)
    se = cov.std(ddof=1) / np.sqrt(len(cov))
    assert abs(cov.mean() - exact) < 4 * se


def test_weak_of_reference_policy():
    weak = weak_of(REFERENCE_STRONG)
    assert (weak.chan_mask_len, weak.chan_mask_prob) == (64, 0.5)
    assert weak.time_mask_total_prob == 0 and weak.kind == "weak"
    with pytest.raises(ValueError):
        weak_of(weak)
    with pytest.raises(ValueError):
        MaskPolicy(2, 0.3, 2, 0.2, "weak")


def test_weak_masks_no_more_than_strong():
    strong = MaskPolicy(2, 0.4, 2, 0.25)
    weak = weak_of(strong)
    x = np.ones((30, 16))
    rng_s, rng_w = np.random.default_rng(0), np.random.default_rng(1)
    s = np.mean([1 - augment(x, strong, rng_s).mean() for _ in range(500)])
    w = np.mean([1 - augment(x, weak, rng_w).mean() for _ in range(500)])
    assert w < s


def test_weak_never_masks_time():
    x = np.ones((40, 16))
    out = augment(x, weak_of(MaskPolicy(2, 0.9, 2, 0.3)), 5)
    zero_cols = ~out.any(axis=0)
    # every zero is explained by a fully masked channel
    assert np.array_equal(out == 0, np.broadcast_to(zero_cols, out.shape))


@pytest.mark.parametrize("seed", range(5))
def test_determinism_shape_and_untouched_cells(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 16)).astype(np.float32)
    before = x.copy()
    pol = MaskPolicy(3, 0.5, 3, 0.4)
    a = augment(x, pol, seed)
    b = augment(x, pol, seed)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape and a.dtype == x.dtype
    np.testing.assert_array_equal(x, before)
    kept = a != 0
    np.testing.assert_array_equal(a[kept], x[kept])


def test_span_longer_than_axis_is_clamped():
    m = span_mask(3, 10, 1.0, np.random.default_rng(0))
    assert m.all()


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(0, 0.1, 1, 0.1)
    with pytest.raises(ValueError):
        MaskPolicy(1, 1.5, 1, 0.1)
