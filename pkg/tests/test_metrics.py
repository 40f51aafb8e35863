import numpy as np
from hypothesis import given, settings, strategies as st

from vlx.metrics import localization_mass, mean_pairwise_correlation, pearson, top_decile


def test_top_decile_selects_largest_magnitudes():
    v = -np.arange(100.0).reshape(10, 10)
    _, top = top_decile(v)
    assert top.sum() == 10 and np.all(top.reshape(-1)[90:])


def test_localization_mass_all_inside_and_outside():
    v = np.zeros((10, 10))
    v[:2, :5] = 5.0
    mask = np.zeros((10, 10), bool)
    mask[:2, :5] = True
    assert localization_mass(v, mask) == 1.0
    assert localization_mass(v, ~mask) == 0.0
    assert localization_mass(np.zeros((4, 4)), mask[:4, :4]) == 0.0


def test_localization_mass_uses_magnitude():
    v = np.zeros((10, 10))
    v[0, :10] = -1.0
    mask = np.zeros((10, 10), bool)
    mask[0, :5] = True
    assert localization_mass(v, mask) == 0.5


def test_pearson_against_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 8, 8))
    assert abs(pearson(a, b) - np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 1e-12
    assert pearson(a, np.ones_like(a)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(seed, s, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 16))
    assert abs(pearson(a, b) - pearson(s * a + c, b)) < 1e-9


def test_mean_pairwise_correlation():
    rng = np.random.default_rng(1)
    maps = list(rng.normal(size=(3, 5, 5)))
    expected = np.mean([pearson(maps[0], maps[1]), pearson(maps[0], maps[2]), pearson(maps[1], maps[2])])
    assert abs(mean_pairwise_correlation(maps) - expected) < 1e-15
    assert mean_pairwise_correlation([maps[0]] * 3) == 1.0
    assert np.isnan(mean_pairwise_correlation(maps[:1]))
