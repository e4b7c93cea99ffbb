import numpy as np
import pytest

from baselopt import adm as A
from baselopt import oracles as orc
from baselopt import risk_measures as rm
from baselopt.qp import InfeasibleModel
from baselopt.scenario_data import ScenarioPanel, loss_vector

B3 = rm.RiskParams(ell=6.0, alpha=0.9, alpha3=0.9)


def midpoint_bound(panel, rho, params, r0):
    """Basel III cap halfway between its smallest attainable value and the unconstrained optimum."""
    free = orc.convex_reference(panel, rho=rho, params=params, r0=r0)
    top = rm.basel3(loss_vector(panel, free.u), params)
    low = orc.mean_rho_reference(panel, "basel3", params=params, r0=r0).objective
    return 0.5 * (top + low)


def r0_of(panel, q=0.6):
    return float(np.quantile(panel.column_means(), q))


def test_params_validation_and_published():
    with pytest.raises(ValueError):
        A.AdmParams(sigma1=0.0)
    with pytest.raises(ValueError):
        A.AdmParams(rule="any")
    with pytest.raises(ValueError):
        A.AdmParams(max_iter=0)
    pub = A.AdmParams.published()
    assert (pub.sigma1, pub.beta1, pub.tol_u, pub.rule, pub.normalise) == (1e-3, 0.1, 1e-4, "either", False)


def test_input_validation(small_panel):
    with pytest.raises(ValueError, match="rho"):
        A.solve_mean_rho_basel(small_panel, "basel25", "basel3", C0=1.0, r0=0.0)
    with pytest.raises(ValueError, match="basel"):
        A.solve_mean_rho_basel(small_panel, "variance", "basel2", C0=1.0, r0=0.0)
    with pytest.raises(InfeasibleModel):
        A.solve_mean_rho(small_panel, "cvar", r0=1.0)
    with pytest.raises(ValueError):
        A.solve_max_return(small_panel, "cvar")
    with pytest.raises(ValueError):
        A.solve_mean_rho_basel(small_panel, C0=float("nan"), r0=0.0)


@pytest.mark.parametrize("rho", ["variance", "cvar"])
def test_mean_rho_basel3_matches_reference(small_panel, rho):
    r0 = r0_of(small_panel)
    C0 = midpoint_bound(small_panel, rho, B3, r0)
    ref = orc.convex_reference(small_panel, rho=rho, params=B3, r0=r0, C0=C0)
    # CVaR with a dozen tail points moves slowly near the optimum
    adm = A.AdmParams(max_iter=10_000)
    rep = A.solve_mean_rho_basel(small_panel, rho, "basel3", B3, C0=C0, r0=r0, adm=adm)
    assert rep.converged
    assert rep.constraint_value <= C0 + A.FEAS_TOL
    assert small_panel.column_means() @ rep.weights >= r0 - 1e-9
    assert abs(rep.objective - ref.objective) <= 5e-3 * abs(ref.objective)


@pytest.mark.parametrize("rho", ["variance", "cvar", "basel3"])
def test_mean_rho_matches_reference(small_panel, rho):
    r0 = r0_of(small_panel)
    ref = orc.mean_rho_reference(small_panel, rho, B3, r0=r0)
    rep = A.solve_mean_rho(small_panel, rho, B3, r0=r0)
    assert rep.constraint_value is None
    assert abs(rep.objective - ref.objective) <= 5e-3 * abs(ref.objective)


@pytest.mark.parametrize("rho", ["cvar", "basel3"])
def test_max_return_matches_reference(small_panel, rho):
    base = A.solve_mean_rho(small_panel, rho, B3, r0=r0_of(small_panel, 0.2))
    b0 = 1.2 * base.objective
    ref = orc.max_return_reference(small_panel, rho, B3, b0=b0)
    rep = A.solve_max_return(small_panel, rho, B3, b0=b0)
    assert rep.converged and rep.constraint_value <= b0 + A.FEAS_TOL
    assert rep.objective == pytest.approx(ref.objective, rel=5e-3, abs=1e-8)


def test_dominating_asset(dominating_panel):
    rep = A.solve_mean_rho_basel(dominating_panel, "variance", "basel3", B3, C0=1.0, r0=0.0)
    assert rep.converged
    np.testing.assert_allclose(rep.weights, [1.0, 0.0], atol=1e-4)
    assert rep.objective == pytest.approx(0.0, abs=1e-10)


def test_nonconvex_objectives_feasible(small_panel):
    r0 = r0_of(small_panel)
    C0 = midpoint_bound(small_panel, "variance", B3, r0)
    for rho in ("var", "cvar"):
        for basel in ("basel25", "basel3"):
            cap = C0 if basel == "basel3" else 1e3
            rep = A.solve_mean_rho_basel(small_panel, rho, basel, B3, C0=cap, r0=r0)
            assert np.all(rep.weights >= 0) and rep.weights.sum() == pytest.approx(1.0)
            if rep.converged:
                assert rep.constraint_value <= cap + A.FEAS_TOL


def test_normalisation_invariance(small_panel):
    r0 = r0_of(small_panel)
    C0 = midpoint_bound(small_panel, "cvar", B3, r0)
    rep = A.solve_mean_rho_basel(small_panel, "cvar", "basel3", B3, C0=C0, r0=r0)
    big = ScenarioPanel(tuple(10.0 * b for b in small_panel.blocks), small_panel.m1, small_panel.m2)
    rep10 = A.solve_mean_rho_basel(big, "cvar", "basel3", B3, C0=10 * C0, r0=10 * r0)
    np.testing.assert_allclose(rep10.weights, rep.weights, atol=1e-4)
    assert rep10.objective == pytest.approx(10 * rep.objective, rel=1e-3)


def test_deterministic(small_panel):
    r0 = r0_of(small_panel)
    a = A.solve_mean_rho_basel(small_panel, "var", "basel25", B3, C0=10.0, r0=r0)
    b = A.solve_mean_rho_basel(small_panel, "var", "basel25", B3, C0=10.0, r0=r0)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.iterations == b.iterations and a.history == b.history


def test_max_iter_reported(small_panel):
    rep = A.solve_mean_rho(small_panel, "cvar", B3, r0=r0_of(small_panel), adm=A.AdmParams(max_iter=2))
    assert rep.status == A.MAX_ITER and rep.iterations == 2 and len(rep.history) == 2


def test_stop_rule_never_accepts_infeasible():
    adm = A.AdmParams(rule="either")
    assert not A._stop(adm, 0.0, 0.0, 2 * A.FEAS_TOL)
    assert A._stop(adm, 1.0, 0.0, 0.0)
    assert not A._stop(A.AdmParams(), 1.0, 0.0, 0.0)


def test_report_dict(small_panel):
    rep = A.solve_mean_rho(small_panel, "variance", r0=r0_of(small_panel))
    d = rep.to_dict()
    assert d["status"] == rep.status and len(d["weights"]) == small_panel.d
    assert "history" not in d and len(rep.to_dict(include_history=True)["history"]) == rep.iterations


def test_kkt_residual_at_reference(small_panel):
    r0 = r0_of(small_panel)
    C0 = midpoint_bound(small_panel, "variance", B3, r0)
    ref = orc.convex_reference(small_panel, rho="variance", params=B3, r0=r0, C0=C0)
    problem = A.make_problem("mean_rho_basel", small_panel, "variance", B3, basel="basel3",
                             bound=C0, r0=r0)
    kkt = A.kkt_residual(orc.reference_state(small_panel, ref, params=B3), problem)
    assert kkt["primal_x"] == 0.0 and kkt["primal_y"] == 0.0
    assert kkt["stationarity"] <= 1e-6 and kkt["complementarity"] <= 1e-8


def test_warm_start(small_panel):
    r0 = r0_of(small_panel)
    cold = A.solve_mean_rho(small_panel, "variance", r0=r0)
    warm = A.solve_mean_rho(small_panel, "variance", r0=r0, u0=cold.weights)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-4)
