import math

import numpy as np
import pytest
from scipy.optimize import minimize

from baselopt import oracles as orc
from baselopt import risk_measures as rm
from baselopt.qp import InfeasibleModel
from baselopt.scenario_data import LossVector, Partition, ScenarioPanel, dedup_rows, loss_vector


def simplex_grid(d, steps):
    """All weight vectors on the simplex with entries in multiples of 1/steps."""
    out = []

    def rec(prefix, left):
        if len(prefix) == d - 1:
            out.append(prefix + [left])
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k)

    rec([], steps)
    return np.array(out, dtype=float) / steps


# --- prox grid oracle --------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError):
        orc.ProxRequest([0.0, 1.0], sigma=0.0)
    with pytest.raises(ValueError):
        orc.ProxRequest([np.nan])
    with pytest.raises(ValueError):
        orc.ProxRequest([0.0, 1.0], partition=Partition((3,), 1, 0))


def test_grid_oracle_limits():
    req = orc.ProxRequest(np.zeros(7), 1.0, rm.RiskParams(alpha=0.5))
    with pytest.raises(orc.OracleBudgetExceeded):
        orc.prox_grid_oracle(req, "prox_var")
    with pytest.raises(ValueError):
        orc.prox_grid_oracle(req, "prox_entropy")
    with pytest.raises(orc.OracleBudgetExceeded):
        orc.prox_grid_oracle(orc.ProxRequest(np.zeros(51)), "prox_cvar")


def test_grid_oracle_known_answers():
    req = orc.ProxRequest([0.0, 2.0], sigma=2.0)
    z, val = orc.prox_grid_oracle(req, "prox_variance")
    np.testing.assert_allclose(z, [1 / 3, 5 / 3], atol=1e-6)
    req = orc.ProxRequest([1.0, 2.0, 3.0, 4.0, 5.0], params=rm.RiskParams(alpha=0.6), bound=2.5)
    z, val = orc.prox_grid_oracle(req, "project_var_ball")
    assert val == pytest.approx(0.125, abs=1e-6)


def test_subproblem_objective_marks_infeasible():
    req = orc.ProxRequest([0.0, 0.0], bound=0.0, params=rm.RiskParams(alpha=0.5))
    vals = orc.subproblem_objective(req, "project_var_ball", [[0.0, 0.0], [1.0, 1.0]])
    assert vals[0] == 0.0 and np.isinf(vals[1])


@pytest.mark.parametrize("which", ["basel25", "basel3"])
def test_batch_measure_matches_scalar(which):
    g = np.random.default_rng(5)
    lay = Partition((3, 2, 2, 3), 2, 2)
    params = rm.RiskParams(alpha=0.6, alpha3=0.7)
    Z = g.normal(size=(20, 10))
    batch = orc._batch_measure(which, Z, params, lay)
    f = rm.basel25 if which == "basel25" else rm.basel3
    ref = [f(LossVector(z, lay.sizes, 2, 2), params) for z in Z]
    np.testing.assert_allclose(batch, ref, atol=1e-14)


# --- convex references --------------------------------------------------------

def test_convex_reference_variance_vs_slsqp(small_panel):
    Y = dedup_rows(small_panel)
    mu = small_panel.column_means()
    r0 = float(np.quantile(mu, 0.5))
    ref = orc.convex_reference(small_panel, rho="variance", r0=r0)
    cons = [{"type": "eq", "fun": lambda u: u.sum() - 1.0},
            {"type": "ineq", "fun": lambda u: mu @ u - r0}]
    d = small_panel.d
    res = minimize(lambda u: rm.variance(-(Y @ u)), np.full(d, 1.0 / d), method="SLSQP",
                   bounds=[(0, 1)] * d, constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
    assert ref.objective <= res.fun * (1 + 1e-6) + 1e-14
    assert mu @ ref.u >= r0 - 1e-9


def test_convex_reference_cvar_basel3_beats_grid(small_panel):
    params = rm.RiskParams(alpha=0.9, alpha3=0.9, ell=6.0)
    mu = small_panel.column_means()
    r0 = float(np.quantile(mu, 0.3))
    low = orc.mean_rho_reference(small_panel, "basel3", params, r0=r0).objective
    C0 = low + 0.01
    ref = orc.convex_reference(small_panel, rho="cvar", params=params, r0=r0, C0=C0)
    Y = dedup_rows(small_panel)
    assert rm.basel3(loss_vector(small_panel, ref.u), params) <= C0 + 1e-8
    for u in simplex_grid(small_panel.d, 20):
        if mu @ u >= r0 and rm.basel3(loss_vector(small_panel, u), params) <= C0:
            assert ref.objective <= rm.cvar_at(-(Y @ u), params.alpha) + 1e-9


def test_reference_input_checks(small_panel):
    with pytest.raises(ValueError):
        orc.convex_reference(small_panel, rho="var")
    with pytest.raises(ValueError):
        orc.convex_reference(small_panel, rho="cvar", C0=1.0, basel="basel25")
    with pytest.raises(InfeasibleModel):
        orc.convex_reference(small_panel, rho="cvar", r0=1.0)
    with pytest.raises(InfeasibleModel):
        orc.convex_reference(small_panel, rho="cvar", C0=-10.0)


def test_max_return_reference_beats_grid(small_panel):
    params = rm.RiskParams(alpha=0.9)
    R = small_panel.matrix
    mu = small_panel.column_means()
    b0 = float(np.median([rm.cvar_at(-(R @ u), 0.9) for u in np.eye(small_panel.d)]))
    ref = orc.max_return_reference(small_panel, "cvar", params, b0=b0)
    assert rm.cvar_at(-(R @ ref.u), 0.9) <= b0 + 1e-8
    for u in simplex_grid(small_panel.d, 20):
        if rm.cvar_at(-(R @ u), 0.9) <= b0:
            assert mu @ u <= ref.objective + 1e-12


# --- mean-VaR enumeration ---------------------------------------------------

def tiny_instance(seed, d=2, n=8):
    g = np.random.default_rng(seed)
    Y = g.normal(0.001, 0.02, size=(n, d))
    mu = Y.mean(axis=0)
    return Y, mu, float(mu.min())


@pytest.mark.parametrize("seed", range(4))
def test_enumeration_matches_line_search(seed):
    Y, mu, r0 = tiny_instance(seed)
    out = orc.mean_var_enumerate(Y, 0.8, r0, mu)
    p = rm.tail_index(0.8, 8)
    assert out["n_lps"] == math.comb(8, 8 - p)
    t = np.linspace(0, 1, 200_001)
    U = np.column_stack([t, 1 - t])
    L = -(U @ Y.T)
    vals = np.sort(L, axis=1)[:, p - 1]
    vals[U @ mu < r0 - 1e-15] = np.inf
    # the LPs are solved by an interior-point method, accurate to about 1e-9
    assert out["objective"] <= vals.min() + 1e-9
    assert out["objective"] >= vals.min() - 1e-6
    assert out["objective"] == pytest.approx(out["lp_value"], abs=1e-8)


def test_enumeration_budget():
    Y, mu, r0 = tiny_instance(0, n=40)
    with pytest.raises(orc.OracleBudgetExceeded):
        orc.mean_var_enumerate(Y, 0.5, r0, mu)


def test_enumeration_with_basel_caps(small_panel):
    blocks = tuple(small_panel.blocks[s][:4, :2] for s in (0, 2))
    panel = ScenarioPanel(blocks, 1, 1)
    Y = dedup_rows(panel)[:6]
    mu = panel.column_means()
    params = rm.RiskParams(alpha=0.7, alpha3=0.7, ell=3.0)
    free = orc.mean_var_enumerate(Y, 0.8, float(mu.min()), mu)
    for basel in ("basel3", "basel25"):
        f = rm.basel3 if basel == "basel3" else rm.basel25
        caps = [f(loss_vector(panel, u), params) for u in simplex_grid(2, 50)]
        C0 = float(np.quantile(caps, 0.5))
        out = orc.mean_var_enumerate(Y, 0.8, float(mu.min()), mu, panel, basel, params, C0)
        assert f(loss_vector(panel, out["u"]), params) <= C0 + 1e-8
        assert out["objective"] >= free["objective"] - 1e-9


# --- MIP export -------------------------------------------------------------

def test_mip_counts_desk_size():
    sizes = [504] * 60 + [463] * 60
    assert sum(sizes) == 58020
    assert orc.mip_counts("var_basel25", 10, 4379, sizes, 60, 60).binaries == 62399
    assert orc.mip_counts("var_basel3", 10, 4379, sizes, 60, 60).binaries == 4379
    assert orc.mip_counts("variance_basel25", 10, 4379, sizes, 60, 60).binaries == 58020
    with pytest.raises(ValueError):
        orc.mip_counts("var_basel2", 10, 4379, sizes, 60, 60)


@pytest.mark.parametrize("variant", orc.VARIANTS)
def test_export_consistent(small_panel, variant, tmp_path):
    path = tmp_path / "m.lp"
    model = orc.export_mip(variant, small_panel, path, r0=0.0)
    text = path.read_text()
    assert text.startswith(f"\\ baselopt export: {variant}\n") and text.endswith("End\n")
    n_bin = len(text.split("Binaries\n")[1].split("End")[0].split()) if "Binaries" in text else 0
    assert n_bin == model.binaries
    n_prime = dedup_rows(small_panel).shape[0]
    exp = orc.mip_counts(variant, small_panel.d, n_prime, small_panel.sizes, 2, 2)
    assert model.to_dict() == {**exp.to_dict(), "eta": model.eta}
    again = tmp_path / "n.lp"
    orc.export_mip(variant, small_panel, again, r0=0.0)
    assert again.read_bytes() == path.read_bytes()


def test_big_m_bounds_losses(small_panel):
    Y = small_panel.matrix
    eta = orc.big_m(Y)
    assert eta <= orc.big_m(Y, cheap=True) + 1e-15
    for u in simplex_grid(small_panel.d, 10):
        loss = -(Y @ u)
        assert loss.max() - min(0.0, loss.min()) <= eta + 1e-12
