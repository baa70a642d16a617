import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from umdr.diagnostics import cosine_similarity_report, pca_project


def test_cosine_examples():
    assert cosine_similarity_report([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).mean == pytest.approx(1.0)
    assert cosine_similarity_report([1.0, 0.0], [0.0, 5.0]).mean == pytest.approx(0.0)
    r = cosine_similarity_report([[1.0, 0.0], [0.0, 0.0]], [[-1.0, 0.0], [1.0, 1.0]])
    assert r.cosines.tolist() == [-1.0, 0.0] and r.warning
    assert r.mean_abs == pytest.approx(0.5)


def test_cosine_matches_brute_force():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(20, 7)), rng.normal(size=(20, 7))
    brute = [float(x @ y / np.sqrt((x @ x) * (y @ y))) for x, y in zip(a, b)]
    assert np.allclose(cosine_similarity_report(a, b).cosines, brute, atol=1e-6)
    assert not cosine_similarity_report(a, b).warning


def test_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity_report(np.ones((2, 3)), np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)), arrays(np.float64, (6, 4), elements=st.floats(-10, 10)))
def test_cosine_bounded(a, b):
    r = cosine_similarity_report(a, b)
    assert np.all(np.abs(r.cosines) <= 1.0)


def test_pca_rank_one():
    t = np.linspace(-3, 3, 20)[:, None]
    x = t * np.array([[1.0, 2.0, -1.0]])
    p = pca_project(x)
    assert np.allclose(p[:, 1], 0.0, atol=1e-9)


def test_pca_anisotropic_gaussian():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4000, 2)) * np.array([3.0, 1.0])
    p = pca_project(x)
    # first axis follows the variance-9 coordinate
    assert abs(np.corrcoef(p[:, 0], x[:, 0])[0, 1]) > 0.99
    assert p[:, 0].var() > 7 and p[:, 1].var() < 1.3


def test_pca_mean_maps_to_origin():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 5)) + 4
    p = pca_project(np.vstack([x, x.mean(axis=0)]))
    assert np.allclose(p[-1], 0.0, atol=1e-9)


def test_pca_sign_convention_and_errors():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 4))
    assert np.allclose(pca_project(x), pca_project(x.copy()))
    assert np.allclose(np.abs(pca_project(x)), np.abs(pca_project(-x)))
    with pytest.raises(ValueError):
        pca_project(np.ones((1, 3)))
    with pytest.raises(ValueError):
        pca_project(np.ones((5, 1)))
