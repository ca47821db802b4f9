"""Scikit-learn wrapper: fit/predict surface and params round trip."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline

from obfuscheck.estimator import NoiseInjectedClassifier


def blob_data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    X = np.concatenate([
        np.clip(0.3 + 0.05 * rng.standard_normal((half, 16)), 0, 1),
        np.clip(0.7 + 0.05 * rng.standard_normal((half, 16)), 0, 1),
    ]).astype(np.float32)
    y = np.repeat([3, 7], half)  # non-contiguous labels on purpose
    return X, y


def make_clf(**kw):
    defaults = dict(arch="mlp", input_shape=(1, 4, 4), epochs=5,
                    batch_size=16, seed=0)
    defaults.update(kw)
    return NoiseInjectedClassifier(**defaults)


def test_fit_predict_flat_input():
    X, y = blob_data()
    clf = make_clf().fit(X, y)
    assert np.mean(clf.predict(X) == y) >= 0.95
    np.testing.assert_array_equal(clf.classes_, [3, 7])
    assert set(clf.predict(X)) <= {3, 7}


def test_predict_proba_normalized():
    X, y = blob_data()
    clf = make_clf().fit(X, y)
    p = clf.predict_proba(X[:5])
    assert p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)


def test_image_shaped_input():
    X, y = blob_data()
    clf = make_clf().fit(X.reshape(-1, 1, 4, 4), y)
    assert clf.predict(X).shape == y.shape


def test_not_fitted_raises():
    with pytest.raises(NotFittedError):
        make_clf().predict(np.zeros((1, 16), dtype=np.float32))


def test_input_validation():
    X, y = blob_data()
    with pytest.raises(ValueError):
        make_clf().fit(X + 10.0, y)
    clf = make_clf().fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 17), dtype=np.float32))


def test_get_set_params_and_clone():
    clf = make_clf(pni="w", granularity="channelwise")
    params = clf.get_params()
    assert params["pni"] == "w" and params["granularity"] == "channelwise"
    fresh = clone(clf)
    assert fresh.get_params() == params
    fresh.set_params(epochs=2)
    assert fresh.epochs == 2


def test_stochastic_predictions_are_seeded_not_frozen():
    X, y = blob_data()
    clf = make_clf(pni="w").fit(X, y)
    a = clf.decision_function(X[:8])
    b = clf.decision_function(X[:8])
    assert a.tobytes() != b.tobytes()  # fresh noise per call
    refit = make_clf(pni="w").fit(X, y)
    np.testing.assert_array_equal(refit.decision_function(X[:8]), a)


def test_works_in_sklearn_pipeline():
    X, y = blob_data()
    pipe = make_pipeline(make_clf(epochs=20))
    scores = cross_val_score(pipe, X, y, cv=2)
    assert scores.mean() >= 0.9
