"""scikit-learn style wrapper around the ADM drivers.

>>> est = BaselPortfolio(rho="cvar", C0=0.25).fit(panel)      # doctest: +SKIP
>>> est.weights_, est.report_.status                          # doctest: +SKIP
>>> est.predict(panel.matrix)   # portfolio returns per scenario # doctest: +SKIP

``fit`` accepts a :class:`~baselopt.scenario_data.ScenarioPanel` or a
plain ``(n, d)`` return matrix together with ``sizes``, ``m1`` and ``m2``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import risk_measures as rm
from .adm import (BASEL_CHOICES, RHO_CHOICES, AdmParams, solve_max_return, solve_mean_rho,
                  solve_mean_rho_basel)
from .scenario_data import ScenarioPanel, loss_vector

PROBLEMS = ("mean_rho_basel", "mean_rho", "max_return")


def check_panel(X, sizes=None, m1=None, m2=None) -> ScenarioPanel:
    """Coerce ``X`` to a :class:`ScenarioPanel`.

    A matrix without ``sizes`` becomes one normal block, which suits the
    problems that do not involve a Basel measure.
    """
    if isinstance(X, ScenarioPanel):
        if sizes is not None or m1 is not None or m2 is not None:
            raise ValueError("sizes/m1/m2 are taken from the panel; do not pass them")
        return X
    R = check_array(X, dtype=float, ensure_all_finite=True)
    if sizes is None:
        if m1 not in (None, 1) or m2 not in (None, 0):
            raise ValueError("m1/m2 need matching block sizes")
        return ScenarioPanel((R,), 1, 0)
    sizes = [int(s) for s in sizes]
    if m1 is None or m2 is None:
        raise ValueError("block sizes need m1 and m2")
    return ScenarioPanel.from_matrix(R, sizes, int(m1), int(m2))


def check_weights(u, d: int, tol: float = 1e-9) -> np.ndarray:
    """Validate a long-only fully invested weight vector of length ``d``."""
    u = np.asarray(check_array(np.atleast_2d(u), dtype=float), dtype=float).ravel()
    if u.size != d:
        raise ValueError(f"weights have {u.size} entries, expected {d}")
    if abs(u.sum() - 1.0) > tol or u.min() < -tol:
        raise ValueError("weights must be nonnegative and sum to one")
    return u


class BaselPortfolio(BaseEstimator):
    """Portfolio selection by the ADM under a Basel capital rule or risk budget.

    Parameters
    ----------
    problem : {"mean_rho_basel", "mean_rho", "max_return"}
    rho : {"variance", "var", "cvar", "basel25", "basel3"}
        Objective risk (or the budgeted risk for ``max_return``).
    basel : {"basel25", "basel3"}
        Capital measure of ``mean_rho_basel``.
    alpha, alpha3, k : float
        VaR/CVaR level, Basel III CVaR level and Basel 2.5 multiplier.
    ell : float or None
        Stressed multiplier; ``None`` picks 6 when Basel III is involved
        and 3 otherwise.
    C0, b0 : float
        Capital bound and risk budget.
    r0, r0_quantile : float or None
        Target return, or a quantile of the asset sample means used when
        ``r0`` is None.
    adm : AdmParams or None
        Solver settings; ``None`` uses the defaults.
    """

    def __init__(self, problem="mean_rho_basel", rho="variance", basel="basel3", alpha=0.99,
                 alpha3=0.98, k=3.0, ell=None, C0=0.2, b0=None, r0=None, r0_quantile=0.8,
                 adm=None):
        self.problem = problem
        self.rho = rho
        self.basel = basel
        self.alpha = alpha
        self.alpha3 = alpha3
        self.k = k
        self.ell = ell
        self.C0 = C0
        self.b0 = b0
        self.r0 = r0
        self.r0_quantile = r0_quantile
        self.adm = adm

    def _risk_params(self) -> rm.RiskParams:
        ell = self.ell
        if ell is None:
            uses_b3 = self.rho == "basel3" or (self.problem == "mean_rho_basel" and self.basel == "basel3")
            ell = 6.0 if uses_b3 else 3.0
        return rm.RiskParams(alpha=self.alpha, k=self.k, ell=ell, alpha3=self.alpha3)

    def _validate_params(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"problem must be one of {PROBLEMS}")
        if self.rho not in RHO_CHOICES:
            raise ValueError(f"rho must be one of {RHO_CHOICES}")
        if self.problem == "mean_rho_basel" and self.basel not in BASEL_CHOICES:
            raise ValueError(f"basel must be one of {BASEL_CHOICES}")
        if self.problem == "max_return" and self.b0 is None:
            raise ValueError("max_return needs a risk budget b0")
        if self.problem != "max_return" and self.r0 is None and self.r0_quantile is None:
            raise ValueError("give r0 or r0_quantile")
        if self.adm is not None and not isinstance(self.adm, AdmParams):
            raise TypeError("adm must be an AdmParams instance")

    def fit(self, X, y=None, sizes=None, m1=None, m2=None):
        """Solve the configured problem on the scenarios ``X``; ``y`` is ignored."""
        self._validate_params()
        panel = check_panel(X, sizes, m1, m2)
        params = self._risk_params()
        r0 = None
        if self.problem != "max_return":
            r0 = (float(self.r0) if self.r0 is not None
                  else float(np.quantile(panel.column_means(), self.r0_quantile)))
        if self.problem == "mean_rho_basel":
            rep = solve_mean_rho_basel(panel, self.rho, self.basel, params, self.C0, r0, self.adm)
        elif self.problem == "mean_rho":
            rep = solve_mean_rho(panel, self.rho, params, r0, self.adm)
        else:
            rep = solve_max_return(panel, self.rho, params, self.b0, self.adm)
        self.report_ = rep
        self.weights_ = rep.weights.copy()
        self.r0_ = r0
        self.risk_params_ = params
        self.n_features_in_ = panel.d
        self.converged_ = rep.converged
        return self

    def predict(self, X) -> np.ndarray:
        """Portfolio return of every scenario row of ``X``."""
        check_is_fitted(self, "weights_")
        R = check_array(X.matrix if isinstance(X, ScenarioPanel) else X, dtype=float)
        if R.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {R.shape[1]} assets, the model was fitted on {self.n_features_in_}")
        return R @ self.weights_

    def transform(self, X) -> np.ndarray:
        """Portfolio losses ``-R u``, shaped ``(n, 1)``."""
        return -self.predict(X)[:, None]

    def score(self, X, y=None) -> float:
        """Negative objective risk of the fitted weights on ``X`` (higher is better).

        Basel measures need ``X`` to be a :class:`ScenarioPanel`.
        """
        check_is_fitted(self, "weights_")
        if self.rho in BASEL_CHOICES:
            if not isinstance(X, ScenarioPanel):
                raise ValueError("Basel scores need a ScenarioPanel")
            x = loss_vector(X, self.weights_)
        else:
            x = -self.predict(X)
        return -rm.evaluate(self.rho, x, self.risk_params_)
