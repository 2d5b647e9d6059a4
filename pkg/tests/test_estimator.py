import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from visaff.estimator import VisaffClassifier, check_groups, check_modality_dims
from visaff.providers.synthetic import SyntheticSpec, class_centers

DIMS = (6, 5, 4)


def make_rows(n_convs=8, length=4, seed=0):
    spec = SyntheticSpec(K=3, dims={"visual": 6, "text": 5, "audio": 4}, noise_sigma=0.1)
    centers = [class_centers(spec, m) for m in ("visual", "text", "audio")]
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n_convs * length)
    X = np.hstack([c[y] + 0.1 * rng.standard_normal((y.size, c.shape[1])) for c in centers])
    groups = np.repeat([f"g{i}" for i in range(n_convs)], length)
    return X, np.array(["ang", "hap", "neu"])[y], groups


def model(**kw):
    kw = {"modality_dims": DIMS, "hidden": 8, "proj_dim": 4, "epochs": 15, "learning_rate": 1e-2, **kw}
    return VisaffClassifier(**kw)


def test_params_round_trip():
    est = model(lambda_cl=0.2)
    params = est.get_params()
    assert params["lambda_cl"] == 0.2 and params["modality_dims"] == DIMS
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(gate="closed")
    assert est.gate == "closed"


def test_fit_predict_shapes_and_labels():
    X, y, g = make_rows()
    est = model().fit(X, y, groups=g)
    pred = est.predict(X, groups=g)
    assert set(pred) <= set(est.classes_) and pred.shape == y.shape
    proba = est.predict_proba(X, groups=g)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    rel = est.reliability(X, groups=g)
    assert np.all(rel >= 1 / 3 - 1e-12) and np.all(rel <= 1)
    assert est.score(X, y) > 0.8
    assert est.n_features_in_ == sum(DIMS) and len(est.training_log_) == 15


def test_eval_set_and_determinism():
    X, y, g = make_rows()
    Xv, yv, gv = make_rows(3, seed=1)
    a = model().fit(X, y, g, eval_set=(Xv, yv, gv))
    b = model().fit(X, y, g, eval_set=(Xv, yv, gv))
    assert a.params_.to_checkpoint() == b.params_.to_checkpoint()
    assert all(r["val_wf1"] is not None for r in a.training_log_)
    with pytest.raises(ValueError, match="unseen label"):
        model().fit(X, y, g, eval_set=(Xv, np.full(yv.shape, "sad"), gv))


def test_validation_errors():
    X, y, g = make_rows(2)
    with pytest.raises(NotFittedError):
        model().predict(X)
    with pytest.raises(ValueError, match="three widths"):
        VisaffClassifier().fit(X, y)
    with pytest.raises(ValueError, match="sum to"):
        VisaffClassifier(modality_dims=(1, 1, 1)).fit(X, y)
    with pytest.raises(ValueError, match="two classes"):
        model().fit(X, np.zeros(len(y)))
    with pytest.raises(ValueError):
        model().fit(X, y[:-1])
    with pytest.raises(ValueError, match="contiguous"):
        model().fit(X, y, groups=np.array(["a", "b", "a", "b", "b", "b", "b", "b"]))
    est = model(epochs=1).fit(X, y, g)
    with pytest.raises(ValueError, match="columns"):
        est.predict(X[:, :-1])


def test_helpers():
    assert check_groups(None, 3) == [("0", 0, 3)]
    assert check_groups(["x", "x", "y"], 3) == [("x", 0, 2), ("y", 2, 3)]
    with pytest.raises(ValueError):
        check_groups(["x"], 2)
    assert check_modality_dims([2, 2, 1], 5) == (2, 2, 1)
    with pytest.raises(ValueError):
        check_modality_dims([0, 2, 3], 5)
