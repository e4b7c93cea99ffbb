import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from baselopt import BaselPortfolio, risk_measures as rm
from baselopt.adm import AdmParams, solve_mean_rho_basel
from baselopt.estimators import check_panel, check_weights
from baselopt.scenario_data import loss_vector


def test_check_panel(small_panel):
    assert check_panel(small_panel) is small_panel
    with pytest.raises(ValueError):
        check_panel(small_panel, m1=2)
    single = check_panel(small_panel.matrix)
    assert (single.m1, single.m2, single.n) == (1, 0, small_panel.n)
    again = check_panel(small_panel.matrix, small_panel.sizes, 2, 2)
    assert again.sizes == small_panel.sizes
    with pytest.raises(ValueError):
        check_panel(small_panel.matrix, small_panel.sizes)
    with pytest.raises(ValueError):
        check_panel(np.array([[np.nan, 1.0]]))


def test_check_weights():
    np.testing.assert_array_equal(check_weights([0.5, 0.5], 2), [0.5, 0.5])
    for bad, d in (([0.5, 0.5], 3), ([0.7, 0.7], 2), ([1.5, -0.5], 2)):
        with pytest.raises(ValueError):
            check_weights(bad, d)


def test_params_round_trip():
    est = BaselPortfolio(rho="cvar", C0=0.3, adm=AdmParams(max_iter=50))
    params = est.get_params()
    assert params["rho"] == "cvar" and params["adm"].max_iter == 50
    twin = clone(est)
    assert twin.get_params()["C0"] == 0.3 and not hasattr(twin, "weights_")
    est.set_params(alpha=0.9)
    assert est.alpha == 0.9


def test_fit_matches_driver(small_panel):
    est = BaselPortfolio(rho="variance", basel="basel3", C0=5.0, r0_quantile=0.6).fit(small_panel)
    r0 = float(np.quantile(small_panel.column_means(), 0.6))
    rep = solve_mean_rho_basel(small_panel, "variance", "basel3", rm.RiskParams(ell=6.0),
                               C0=5.0, r0=r0)
    assert est.r0_ == r0 and est.risk_params_.ell == 6.0
    assert est.weights_.tobytes() == rep.weights.tobytes()
    assert est.converged_ and est.n_features_in_ == small_panel.d
    np.testing.assert_allclose(est.predict(small_panel), small_panel.matrix @ est.weights_)
    np.testing.assert_allclose(est.transform(small_panel.matrix)[:, 0], -est.predict(small_panel))
    assert est.score(small_panel) == pytest.approx(-rm.variance(-(small_panel.matrix @ est.weights_)))


def test_fit_matrix_and_other_problems(small_panel):
    R = small_panel.matrix
    est = BaselPortfolio(problem="mean_rho", rho="cvar", alpha=0.9).fit(R)
    assert est.risk_params_.ell == 3.0 and est.weights_.sum() == pytest.approx(1.0)
    est = BaselPortfolio(problem="max_return", rho="cvar", alpha=0.9, b0=0.05).fit(R)
    assert est.r0_ is None
    est = BaselPortfolio(problem="mean_rho", rho="basel3").fit(R, sizes=small_panel.sizes, m1=2, m2=2)
    assert est.risk_params_.ell == 6.0
    assert est.score(small_panel) == pytest.approx(-rm.basel3(loss_vector(small_panel, est.weights_),
                                                               est.risk_params_))
    with pytest.raises(ValueError, match="ScenarioPanel"):
        est.score(R)


@pytest.mark.parametrize("kw, err", [
    (dict(problem="mean_var"), ValueError),
    (dict(rho="entropic"), ValueError),
    (dict(basel="basel4"), ValueError),
    (dict(problem="max_return"), ValueError),
    (dict(r0_quantile=None), ValueError),
    (dict(adm={"sigma1": 1.0}), TypeError),
])
def test_invalid_params(small_panel, kw, err):
    with pytest.raises(err):
        BaselPortfolio(**kw).fit(small_panel)


def test_not_fitted_and_shape(small_panel):
    with pytest.raises(NotFittedError):
        BaselPortfolio().predict(small_panel.matrix)
    est = BaselPortfolio(problem="mean_rho", rho="variance").fit(small_panel.matrix)
    with pytest.raises(ValueError, match="assets"):
        est.predict(small_panel.matrix[:, :2])
