"""Estimator surface tests: sklearn conventions, input validation,
fitting behavior, and prediction shapes."""

import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone

from petctseg.errors import NotFittedError
from petctseg.estimator import UNetSegmenter
from petctseg.validation import (check_image_stack, check_mask_stack,
                                 check_spatial_divisibility)


def blob_dataset(n=6, size=16, channels=1, seed=0):
    """Bright square on noise; easy enough to learn in a few epochs."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 0.3, (n, channels, size, size)).astype(np.float32)
    y = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        r, c = rng.integers(2, size - 6, 2)
        X[i, :, r:r + 4, c:c + 4] += 0.6
        y[i, r:r + 4, c:c + 4] = 1
    return X, y


def fast_estimator(**overrides):
    params = dict(depth=1, base_filters=4, learning_rate=1e-3, batch_size=3,
                  epochs=8, random_state=0)
    params.update(overrides)
    return UNetSegmenter(**params)


# -- validation helpers ----------------------------------------------------------


def test_check_image_stack():
    X = check_image_stack([[[[0.0, 1.0], [0.5, 0.25]]]])
    assert X.shape == (1, 1, 2, 2) and X.dtype == np.float32
    with pytest.raises(ValueError, match="4-dimensional"):
        check_image_stack(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError, match="non-finite"):
        check_image_stack(np.full((1, 1, 2, 2), np.inf))
    with pytest.raises(ValueError, match="numeric"):
        check_image_stack(np.array([[[["a", "b"], ["c", "d"]]]]))


def test_check_mask_stack():
    X = np.zeros((2, 1, 4, 4), dtype=np.float32)
    y = check_mask_stack(np.ones((2, 4, 4)), X)
    assert y.shape == (2, 1, 4, 4) and y.dtype == np.float32
    assert check_mask_stack(np.ones((2, 1, 4, 4)), X).shape == (2, 1, 4, 4)
    with pytest.raises(ValueError, match="binary"):
        check_mask_stack(np.full((2, 4, 4), 0.5), X)
    with pytest.raises(ValueError, match="match"):
        check_mask_stack(np.ones((1, 4, 4)), X)
    with pytest.raises(ValueError, match="shape"):
        check_mask_stack(np.ones((2, 3, 4, 4)), X)


def test_check_spatial_divisibility():
    check_spatial_divisibility((1, 1, 16, 16), 2)
    with pytest.raises(ValueError, match="divisible"):
        check_spatial_divisibility((1, 1, 18, 16), 2)


# -- sklearn conventions -----------------------------------------------------------


def test_params_stored_verbatim_and_cloneable():
    est = UNetSegmenter(depth=3, base_filters=16, loss="cross_entropy",
                        learning_rate=0.01, epochs=5, random_state=42)
    params = est.get_params()
    assert params["depth"] == 3
    assert params["base_filters"] == 16
    assert params["loss"] == "cross_entropy"
    assert params["learning_rate"] == 0.01
    assert params["random_state"] == 42
    duplicate = clone(est)
    assert duplicate.get_params() == params
    est.set_params(depth=1)
    assert est.depth == 1


def test_unfitted_predict_raises():
    est = UNetSegmenter()
    X = np.zeros((1, 1, 16, 16), dtype=np.float32)
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(NotFittedError):
        est.predict_proba(X)
    # NotFittedError doubles as ValueError and AttributeError, the two
    # types sklearn tooling watches for
    assert issubclass(NotFittedError, ValueError)
    assert issubclass(NotFittedError, AttributeError)


def test_fit_returns_self_and_sets_attributes():
    X, y = blob_dataset()
    est = fast_estimator(epochs=2)
    assert est.fit(X, y) is est
    assert est.in_channels_ == 1
    assert est.n_iter_ == 2
    assert len(est.loss_curve_) == 2
    assert all(np.isfinite(v) for v in est.loss_curve_)


# -- behavior -----------------------------------------------------------------------


def test_fit_learns_blob_task():
    X, y = blob_dataset()
    est = fast_estimator(epochs=60, learning_rate=2e-3)
    est.fit(X, y)
    assert est.loss_curve_[-1] < est.loss_curve_[0]
    assert est.score(X, y) > 0.8


def test_predict_shapes_and_binary_output():
    X, y = blob_dataset(n=4)
    est = fast_estimator(epochs=2).fit(X, y)
    probs = est.predict_proba(X)
    masks = est.predict(X)
    assert probs.shape == (4, 16, 16)
    assert masks.shape == (4, 16, 16)
    assert probs.min() >= 0.0 and probs.max() <= 1.0
    assert set(np.unique(masks)) <= {0, 1}
    npt.assert_array_equal(masks, (probs >= est.threshold).astype(np.uint8))


def test_fit_is_deterministic_per_seed():
    X, y = blob_dataset()
    a = fast_estimator(epochs=3).fit(X, y)
    b = fast_estimator(epochs=3).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_
    c = fast_estimator(epochs=3, random_state=5).fit(X, y)
    assert a.loss_curve_ != c.loss_curve_


def test_refit_resets_model():
    X, y = blob_dataset()
    est = fast_estimator(epochs=2)
    est.fit(X, y)
    first = est.predict_proba(X).copy()
    est.fit(X, y)
    npt.assert_array_equal(first, est.predict_proba(X))


def test_multichannel_and_channel_mismatch():
    X, y = blob_dataset(channels=2)
    est = fast_estimator(epochs=2).fit(X, y)
    assert est.in_channels_ == 2
    with pytest.raises(ValueError, match="channels"):
        est.predict(np.zeros((1, 1, 16, 16), dtype=np.float32))


def test_fit_validation_errors():
    X, y = blob_dataset(size=18)  # 18 is not divisible by 2^2
    est = fast_estimator(depth=2)
    with pytest.raises(ValueError, match="divisible"):
        est.fit(X, y)
    X, y = blob_dataset()
    with pytest.raises(ValueError, match="not a valid LossKind"):
        fast_estimator(loss="hinge").fit(X, y)
    with pytest.raises(ValueError):
        fast_estimator(batch_size=0).fit(X, y)