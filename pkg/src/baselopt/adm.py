"""Alternating-direction augmented Lagrangian drivers.

Three problems share one iteration skeleton:

``mean_rho_basel``
    min rho(-Y u) over the target-return simplex, s.t. basel(-R u) <= C0.
    Splits x = -R u and y = -Y u, with multipliers lambda and pi.
``mean_rho``
    min rho(-R u) over the target-return simplex (single split x = -R u).
``max_return``
    max mu'u over the plain simplex, s.t. rho(-R u) <= b0.

Every iteration performs an x-update (projection or prox), an optional
y-update (prox), a u-update QP and a multiplier ascent step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import prox as px
from . import risk_measures as rm
from .qp import (InfeasibleModel, QpProblem, check_target_return, clean_simplex,
                 simplex_constraints, solve_qp, solve_u_update, u_update_hessian)
from .scenario_data import LossVector, Partition, ScenarioPanel, dedup_rows

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"

RHO_CHOICES = ("variance", "var", "cvar", "basel25", "basel3")
BASEL_CHOICES = ("basel25", "basel3")
FEAS_TOL = 1e-6
# Penalty by objective. With a small penalty the VaR prox jumps between
# order statistics and the iterates stall at poor local points; a larger
# one keeps each step local. Other objectives converge fastest near 0.3.
SIGMA_DEFAULT = {"var": 3.0, None: 0.3}


@dataclass(frozen=True)
class AdmParams:
    """Penalties, step sizes and stopping rule of the ADM.

    Penalties act on returns normalised to unit root-mean-square (see
    :func:`data_scale`) unless ``normalise`` is off. Penalties left at
    ``None`` take :data:`SIGMA_DEFAULT` for the objective ``rho`` (the VaR
    prox needs a larger one, see :meth:`for_rho`). :meth:`published`
    gives the original fixed settings ``sigma = 1e-3``, ``beta = 0.1``,
    ``tol_u = 1e-4`` and the either-residual stopping rule.
    """

    sigma1: float | None = None
    sigma2: float | None = None
    beta1: float = 1.0
    beta2: float = 1.0
    tol_feas: float = 1e-8
    tol_u: float = 1e-5
    max_iter: int = 2000
    normalise: bool = True
    rule: str = "both"

    @classmethod
    def published(cls) -> "AdmParams":
        return cls(sigma1=1e-3, sigma2=1e-3, beta1=0.1, beta2=0.1, tol_u=1e-4, normalise=False,
                   rule="either")

    def for_rho(self, rho: str) -> "AdmParams":
        """Copy with unset penalties filled in for the objective ``rho``."""
        sigma = SIGMA_DEFAULT.get(rho, SIGMA_DEFAULT[None])
        return replace(self, sigma1=sigma if self.sigma1 is None else self.sigma1,
                       sigma2=sigma if self.sigma2 is None else self.sigma2)

    def __post_init__(self):
        for name in ("sigma1", "sigma2"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2", "tol_feas", "tol_u"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.rule not in ("both", "either"):
            raise ValueError("rule must be 'both' or 'either'")


@dataclass
class AdmState:
    """Iterates of one run plus what the subproblem solves revealed.

    ``sub_x`` is ``eta * h`` for the capital (or risk-ball) constraint and
    ``sub_y`` the subgradient ``g`` of rho at ``y``; both are read off the
    prox/projection optimality conditions. ``eta`` is the constraint
    multiplier recovered from the x-update QP duals.
    """

    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    y: np.ndarray | None = None
    pi: np.ndarray | None = None
    iter: int = 0
    eta: float = 0.0
    sub_x: np.ndarray | None = None
    sub_y: np.ndarray | None = None
    history: list = field(default_factory=list)


@dataclass
class SolveReport:
    problem: str
    rho: str
    basel: str | None
    weights: np.ndarray
    objective: float
    constraint_value: float | None
    bound: float | None
    status: str
    iterations: int
    primal_residual_x: float
    primal_residual_y: float
    kkt: dict
    wall_time: float
    history: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_dict(self, include_history: bool = False) -> dict:
        out = {
            "problem": self.problem,
            "rho": self.rho,
            "basel": self.basel,
            "status": self.status,
            "weights": [float(v) for v in self.weights],
            "objective": float(self.objective),
            "constraint_value": None if self.constraint_value is None else float(self.constraint_value),
            "bound": None if self.bound is None else float(self.bound),
            "iterations": int(self.iterations),
            "primal_residual_x": float(self.primal_residual_x),
            "primal_residual_y": float(self.primal_residual_y),
            "kkt": {k: float(v) for k, v in self.kkt.items()},
            "history_length": len(self.history),
            "wall_time": float(self.wall_time),
            "diagnostics": {k: float(v) for k, v in self.diagnostics.items()},
        }
        if include_history:
            out["history"] = [list(map(float, h)) for h in self.history]
        return out


@dataclass
class AdmProblem:
    """Data of one model instance, shared by the drivers and :func:`kkt_residual`."""

    kind: str
    R: np.ndarray
    partition: Partition
    rho: str
    params: rm.RiskParams
    mu: np.ndarray
    r0: float | None = None
    Y: np.ndarray | None = None
    basel: str | None = None
    bound: float | None = None

    @property
    def d(self) -> int:
        return self.R.shape[1]

    def losses(self, u) -> LossVector:
        lay = self.partition
        return LossVector(-(self.R @ u), lay.sizes, lay.m1, lay.m2)

    def risk_of(self, name, values, layout=None):
        if name in BASEL_CHOICES:
            lay = layout or self.partition
            values = LossVector(values, lay.sizes, lay.m1, lay.m2)
        return rm.evaluate(name, values, self.params)

    def objective(self, u) -> float:
        if self.kind == "mean_rho_basel":
            return rm.evaluate(self.rho, -(self.Y @ u), self.params)
        if self.kind == "mean_rho":
            return self.risk_of(self.rho, -(self.R @ u))
        return float(self.mu @ u)

    def constraint(self, u) -> float | None:
        if self.kind == "mean_rho_basel":
            return self.risk_of(self.basel, -(self.R @ u))
        if self.kind == "max_return":
            return self.risk_of(self.rho, -(self.R @ u))
        return None


def _as_panel(panel) -> ScenarioPanel:
    if isinstance(panel, ScenarioPanel):
        return panel
    R = np.atleast_2d(np.asarray(panel, dtype=float))
    return ScenarioPanel((R,), 1, 0)


def initial_weights(d, mu=None, r0=None) -> np.ndarray:
    """Equal weights, moved to the nearest point of the return-constrained simplex if needed."""
    u0 = np.full(d, 1.0 / d)
    if mu is None or r0 is None or mu @ u0 >= r0:
        return u0
    check_target_return(mu, r0)
    sol = solve_qp(QpProblem(np.eye(d), -u0, **simplex_constraints(d, mu, r0)))
    if sol.status != "optimal":
        raise InfeasibleModel("target return infeasible: cannot initialise weights")
    return clean_simplex(sol.z)


def _tangent_projection(a, u, mu=None, r0=None, tol=1e-9):
    """Project ``a`` onto the tangent cone of the (return-constrained) simplex at ``u``."""
    d = u.size
    A_in, b_in = [], []
    active = u <= tol
    lb = np.where(active, 0.0, -np.inf)
    if mu is not None and r0 is not None and mu @ u - r0 <= tol:
        A_in.append(-mu)
        b_in.append(0.0)
    sol = solve_qp(QpProblem(np.eye(d), -a, A_eq=np.ones((1, d)), b_eq=[0.0],
                             A_in=np.array(A_in) if A_in else None,
                             b_in=np.array(b_in) if b_in else None, lb=lb))
    return sol.z


def kkt_residual(state: AdmState, problem: AdmProblem) -> dict:
    """First-order optimality diagnostics at an ADM state.

    Returns primal residuals ``||x + R u||`` and ``||y + Y u||``, the
    complementarity ``|eta (basel(x) - C0)|`` and a stationarity surrogate:
    the norm of the tangent-cone projection of ``-grad`` at ``u``, where the
    gradient is assembled from the subgradients stored on the state. When
    a state carries no stored subgradients they are recovered from the
    multipliers (``-lambda`` and ``-pi``).
    """
    u = np.asarray(state.u, dtype=float)
    R, Y = problem.R, problem.Y
    out = {"primal_x": float(np.linalg.norm(state.x + R @ u))}
    out["primal_y"] = float(np.linalg.norm(state.y + Y @ u)) if Y is not None and state.y is not None else 0.0

    sub_x = state.sub_x if state.sub_x is not None else -np.asarray(state.lam, dtype=float)
    if problem.kind == "mean_rho_basel":
        sub_y = state.sub_y if state.sub_y is not None else -np.asarray(state.pi, dtype=float)
        direction = Y.T @ sub_y + R.T @ sub_x
        gap = problem.risk_of(problem.basel, state.x) - problem.bound
        out["complementarity"] = abs(state.eta * gap)
    elif problem.kind == "mean_rho":
        direction = R.T @ sub_x
        out["complementarity"] = 0.0
    else:
        direction = problem.mu + R.T @ sub_x
        gap = problem.risk_of(problem.rho, state.x) - problem.bound
        out["complementarity"] = abs(state.eta * gap)
    r0 = problem.r0 if problem.kind != "max_return" else None
    proj = _tangent_projection(direction, u, problem.mu, r0)
    out["stationarity"] = float(np.linalg.norm(proj))
    out["eta"] = float(state.eta)
    return out


def _finish(problem, scaled, state, status, t0, extra=None) -> SolveReport:
    u = state.u
    kkt = kkt_residual(state, scaled)
    return SolveReport(
        problem=problem.kind, rho=problem.rho, basel=problem.basel, weights=u.copy(),
        objective=problem.objective(u), constraint_value=problem.constraint(u),
        bound=problem.bound, status=status, iterations=state.iter,
        primal_residual_x=kkt["primal_x"], primal_residual_y=kkt["primal_y"],
        kkt=kkt, wall_time=time.perf_counter() - t0, history=state.history,
        diagnostics=extra or {})


def data_scale(R) -> float:
    """Factor ``kappa`` that brings the scenario returns to unit root-mean-square."""
    rms = float(np.sqrt(np.mean(np.square(R))))
    return 1.0 / rms if rms > 0 and np.isfinite(rms) else 1.0


def normalise(problem: AdmProblem, kappa: float) -> AdmProblem:
    """Equivalent instance with returns multiplied by ``kappa``.

    Every risk measure is positively homogeneous (degree two for the
    variance, one otherwise), so the bound is rescaled accordingly and
    the minimisers are unchanged. For ``max_return`` the expected returns
    are further scaled to unit maximum, which only rescales the objective.
    """
    bounded = problem.basel if problem.kind == "mean_rho_basel" else problem.rho
    degree = 2 if bounded == "variance" else 1
    mu = problem.mu * kappa
    if problem.kind == "max_return":
        # the objective itself: bring the largest expected return to one
        top = np.abs(mu).max()
        mu = mu / top if top > 0 else mu
    return replace(
        problem, R=problem.R * kappa, Y=None if problem.Y is None else problem.Y * kappa,
        mu=mu, r0=None if problem.r0 is None else problem.r0 * kappa,
        bound=None if problem.bound is None else problem.bound * kappa ** degree)


def _stop(adm, feas, du, excess):
    """Stopping test; never accepts weights that break the constraint by more than FEAS_TOL.

    ``rule="both"`` needs a small primal residual and a small relative
    step in ``u``; ``rule="either"`` accepts one of the two. The step test
    alone fires whenever ``u`` rests on a vertex of the portfolio set,
    and the residual test alone fires while the multipliers are still
    moving, so ``"either"`` can stop far from a solution.
    """
    if excess > FEAS_TOL:
        return False
    if adm.rule == "either":
        return feas <= adm.tol_feas or du <= adm.tol_u
    return feas <= adm.tol_feas and du <= adm.tol_u


def _x_projection(problem, v, sigma, cache):
    """Constraint-set x-update; returns (x, eta) with eta scaled to the sigma-weighted objective.

    ``cache`` carries the previous capital multipliers, which seed the
    root bracket of the next Basel III projection.
    """
    which = problem.basel if problem.kind == "mean_rho_basel" else problem.rho
    if which in BASEL_CHOICES:
        x, info = px.project_basel(v, problem.partition, problem.params, problem.bound,
                                   which, full_output=True, hint=cache.get("duals"))
        duals = info["capital_duals"]
        if np.any(duals > 0):
            cache["duals"] = duals
        return x, sigma * float(np.sum(duals))
    # single smooth-or-polyhedral ball: eta * h = sigma (v - x); report its norm
    rho = problem.rho
    x = px.project_ball(rho, v, problem.bound, problem.params, problem.partition)
    diff = np.linalg.norm(v - x)
    return x, (sigma * diff if diff > 0 else 0.0)


def _run(original: AdmProblem, adm: AdmParams, u0=None) -> SolveReport:
    t0 = time.perf_counter()
    adm = adm.for_rho(original.rho)
    kappa = data_scale(original.R) if adm.normalise else 1.0
    problem = normalise(original, kappa)
    R, Y, mu = problem.R, problem.Y, problem.mu
    kind = problem.kind
    r0 = problem.r0 if kind != "max_return" else None
    s1, s2 = adm.sigma1, adm.sigma2
    two_block = kind == "mean_rho_basel"
    if u0 is None:
        u0 = initial_weights(problem.d, mu, r0)
    u = np.asarray(u0, dtype=float).copy()
    H = u_update_hessian(R, Y if two_block else None, s1, s2)
    if not two_block:
        H = H / s1
    state = AdmState(x=-(R @ u), u=u, lam=np.zeros(R.shape[0]))
    if two_block:
        state.y = -(Y @ u)
        state.pi = np.zeros(Y.shape[0])

    status = MAX_ITER
    best_violation = np.inf
    cache = {}
    for j in range(adm.max_iter):
        lam, pi = state.lam, state.pi
        v = -(R @ u + lam / s1)
        if kind == "mean_rho":
            x = px.prox(problem.rho, v, s1, problem.params, problem.partition)
            eta = 1.0
        else:
            x, eta = _x_projection(problem, v, s1, cache)
        sub_x = s1 * (v - x)
        if two_block:
            w = -(Y @ u + pi / s2)
            y = px.prox(problem.rho, w, s2, problem.params)
            sub_y = s2 * (w - y)
            b = R.T @ (lam + s1 * x) + Y.T @ (pi + s2 * y)
        elif kind == "mean_rho":
            b = R.T @ (lam / s1 + x)
        else:
            b = R.T @ (lam / s1 + x) - mu / s1
        u_new = solve_u_update(H, b, mu if r0 is not None else None, r0, u0=u).u

        rx = x + R @ u_new
        state.lam = lam + adm.beta1 * s1 * rx
        feas = float(rx @ rx)
        if two_block:
            ry = y + Y @ u_new
            state.pi = pi + adm.beta2 * s2 * ry
            feas += float(ry @ ry)
            state.y, state.sub_y = y, sub_y
        du = float(np.linalg.norm(u_new - u) / max(1.0, np.linalg.norm(u)))
        state.x, state.sub_x, state.eta = x, sub_x, eta
        state.u = u = u_new
        state.iter = j + 1
        state.history.append((float(rx @ rx), feas - float(rx @ rx), du))
        c = original.constraint(u)
        excess = -np.inf if c is None else c - original.bound
        best_violation = min(best_violation, excess)
        if _stop(adm, feas, du, excess):
            status = CONVERGED
            break

    extra = {"kappa": kappa}
    if status != CONVERGED and np.isfinite(best_violation):
        extra["min_constraint_excess"] = best_violation
    return _finish(original, problem, state, status, t0, extra)


def _check_choice(name, value, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")


def make_problem(kind, panel, rho, params=None, *, Y=None, basel=None, bound=None,
                 r0=None, mu=None) -> AdmProblem:
    """Validate inputs and build an :class:`AdmProblem`."""
    panel = _as_panel(panel)
    params = params or rm.RiskParams()
    R = panel.matrix
    mu = panel.column_means() if mu is None else np.asarray(mu, dtype=float)
    if mu.size != panel.d:
        raise ValueError(f"mu has length {mu.size}, panel has {panel.d} assets")
    if kind == "mean_rho_basel":
        _check_choice("rho", rho, ("variance", "var", "cvar"))
        _check_choice("basel", basel, BASEL_CHOICES)
        Y = dedup_rows(panel) if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != panel.d:
            raise ValueError("Y and the panel must have the same number of assets")
    else:
        _check_choice("rho", rho, RHO_CHOICES)
        Y = None
    if kind != "max_return":
        check_target_return(mu, r0)
    if bound is not None and not np.isfinite(bound):
        raise ValueError("capital/risk bound must be finite")
    return AdmProblem(kind=kind, R=R, partition=panel.partition, rho=rho, params=params,
                      mu=mu, r0=r0, Y=Y, basel=basel, bound=bound)


def solve_mean_rho_basel(panel, rho="variance", basel="basel3", params=None, C0=0.2,
                         r0=None, adm=None, Y=None, mu=None, u0=None) -> SolveReport:
    """Minimise ``rho(-Y u)`` subject to the Basel capital constraint ``basel(-R u) <= C0``."""
    problem = make_problem("mean_rho_basel", panel, rho, params, Y=Y, basel=basel,
                           bound=C0, r0=r0, mu=mu)
    return _run(problem, adm or AdmParams(), u0)


def solve_mean_rho(panel, rho="cvar", params=None, r0=None, adm=None, mu=None, u0=None) -> SolveReport:
    """Minimise ``rho(-R u)`` over the target-return simplex."""
    problem = make_problem("mean_rho", panel, rho, params, r0=r0, mu=mu)
    return _run(problem, adm or AdmParams(), u0)


def solve_max_return(panel, rho="cvar", params=None, b0=None, adm=None, mu=None, u0=None) -> SolveReport:
    """Maximise ``mu'u`` over the simplex subject to the risk budget ``rho(-R u) <= b0``."""
    if b0 is None:
        raise ValueError("a risk budget b0 is required")
    problem = make_problem("max_return", panel, rho, params, bound=b0, mu=mu)
    return _run(problem, adm or AdmParams(), u0)
