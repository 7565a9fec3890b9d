import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tfanet.estimator import FeatureFuser, TFANet, check_images


@pytest.fixture(scope="module")
def fitted(tiny_data):
    X = np.stack([s.image for s in tiny_data.train])
    return TFANet(epochs=2, batch_size=4).fit(X)


def test_params_round_trip():
    est = TFANet(variant="b", epochs=3, seed=4)
    params = est.get_params()
    assert params["variant"] == "b" and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.settings().train.epochs == 3


def test_check_images():
    assert check_images(np.zeros((4, 4, 3))).shape == (1, 4, 4, 3)
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4, 3), np.nan))


def test_unfitted():
    with pytest.raises(NotFittedError):
        TFANet().score_samples(np.zeros((1, 64, 64, 3)))


def test_wrong_image_size():
    with pytest.raises(ValueError, match="64x64"):
        TFANet(epochs=1).fit(np.zeros((2, 32, 32, 3)))


def test_fuser_shape():
    out = FeatureFuser().fit().transform(np.zeros((2, 64, 64, 3)))
    assert out.shape == (2, 16, 16, 56)


def test_scores_maps_and_predict(fitted, tiny_data):
    X = np.stack([s.image for s in tiny_data.test])
    scores = fitted.score_samples(X)
    assert scores.shape == (len(X),) and np.all(scores >= 0)
    assert fitted.anomaly_maps(X).shape == (len(X), 64, 64)
    assert fitted.attention(X[:2]).shape == (2, 8, 8)
    thr = float(np.median(scores))
    assert set(fitted.predict(X, thr).tolist()) <= {-1, 1}
    assert np.array_equal(fitted.predict(X, thr) == -1, scores > thr)
    with pytest.raises(ValueError):
        fitted.predict(X)


def test_save_load(fitted, tiny_data, tmp_path):
    fitted.save(tmp_path / "m.ckpt")
    back = TFANet.load(tmp_path / "m.ckpt")
    X = np.stack([s.image for s in tiny_data.test[:3]])
    assert np.array_equal(back.score_samples(X), fitted.score_samples(X))
    assert back.loss_history_ == fitted.loss_history_
