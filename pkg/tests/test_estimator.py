import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pvcorr import SceneFlowEstimator
from pvcorr.estimator import as_xy
from pvcorr.synthetic import gen_dataset

SMALL = dict(m=24, k=6, graph_k=6, t_train=2, t_eval=2, epochs_main=1, epochs_refine=1)


@pytest.fixture(scope="module")
def fitted():
    X, y = as_xy(gen_dataset(3, 64, seed=8))
    return SceneFlowEstimator(**SMALL).fit(X, y), X, y


def test_params_round_trip():
    est = SceneFlowEstimator(lr=0.01, corr_mode="point")
    params = est.get_params()
    assert params["lr"] == 0.01 and params["corr_mode"] == "point" and params["t_eval"] == 32
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(k=8)
    assert twin.k == 8 and est.k == 32


def test_fit_predict_shapes(fitted):
    est, X, y = fitted
    assert est.n_scenes_ == 3
    assert len(est.history_["main"]) == 1 and len(est.history_["refine"]) == 1
    flows = est.predict(X)
    assert [f.shape for f in flows] == [yy.shape for yy in y]
    assert all(f.dtype == np.float32 and np.isfinite(f).all() for f in flows)


def test_score_is_negative_epe(fitted):
    est, X, y = fitted
    m = est.evaluate(X, y)
    assert est.score(X, y) == -m.epe
    assert 0 <= m.acc_strict <= m.acc_relax <= 1


def test_fit_is_deterministic(fitted):
    est, X, y = fitted
    again = clone(est).fit(X, y)
    for name in est.params_:
        assert np.array_equal(est.params_[name].data, again.params_[name].data)


def test_not_fitted():
    X, _ = as_xy(gen_dataset(1, 64, seed=0))
    with pytest.raises(NotFittedError):
        SceneFlowEstimator().predict(X)


def test_input_validation():
    est = SceneFlowEstimator(**SMALL)
    p = np.zeros((64, 3), np.float32)
    with pytest.raises(ValueError):
        est.fit([(p, p)], [np.zeros((10, 3))])
    with pytest.raises(ValueError):
        est.fit([(p, p)], [])
    with pytest.raises(ValueError):
        est.fit([(p[:, :2], p)], [np.zeros((64, 2))])
    bad = p.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit([(bad, p)], [np.zeros((64, 3))])
    with pytest.raises(ValueError):
        SceneFlowEstimator(gamma=3.0).fit([(p, p)], [np.zeros((64, 3))])
