"""Independent reference solutions used to check the ADM and its subproblem solvers.

* :func:`convex_reference` and :func:`max_return_reference` solve the
  convex model variants directly as one QP/LP.
* :func:`mean_var_enumerate` finds the exact global optimum of tiny
  mean-VaR instances by enumerating which observations sit above the VaR.
* :func:`prox_grid_oracle` is a derivative-free lattice search for the
  prox/projection subproblems on short vectors.
* :func:`export_mip` writes the mixed-integer reformulations as an LP file.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import risk_measures as rm
from .adm import AdmProblem, AdmState, make_problem
from .qp import OPTIMAL, InfeasibleModel, QpProblem, check_target_return, clean_simplex, solve_qp
from .scenario_data import LossVector, Partition, ScenarioPanel, dedup_rows

ENUM_MAX_EXCLUDED = 4
ENUM_MAX_LPS = 2000


class OracleBudgetExceeded(RuntimeError):
    pass


# --- convex references --------------------------------------------------------

class _Lp:
    """Tiny helper that grows a QpProblem column- and row-wise."""

    def __init__(self):
        self.n = 0
        self.names = []
        self.lb = []
        self.c = []
        self.rows_in, self.rhs_in = [], []
        self.rows_eq, self.rhs_eq = [], []
        self.Qblocks = []

    def add(self, k, name, lb=-np.inf, cost=0.0):
        start = self.n
        self.n += k
        self.names.append((name, start, k))
        self.lb.extend([lb] * k)
        self.c.extend([cost] * k if np.isscalar(cost) else list(cost))
        return slice(start, start + k)

    def leq(self, coefs, rhs):
        self.rows_in.append(coefs)
        self.rhs_in.append(rhs)
        return len(self.rows_in) - 1

    def eq(self, coefs, rhs):
        self.rows_eq.append(coefs)
        self.rhs_eq.append(rhs)

    def dense(self, coefs):
        r = np.zeros(self.n)
        for idx, val in coefs:
            r[idx] += val
        return r

    def problem(self, Q=None):
        Qf = np.zeros((self.n, self.n))
        if Q is not None:
            sl, M = Q
            Qf[sl, sl] = M
        A_in = np.array([self.dense(r) for r in self.rows_in]) if self.rows_in else None
        A_eq = np.array([self.dense(r) for r in self.rows_eq]) if self.rows_eq else None
        return QpProblem(Qf, np.array(self.c), A_eq, np.array(self.rhs_eq) if A_eq is not None else None,
                         A_in, np.array(self.rhs_in) if A_in is not None else None, lb=np.array(self.lb))


def _portfolio_rows(lp, us, mu, r0):
    lp.eq([(us, 1.0)], 1.0)
    if r0 is not None:
        lp.leq([(us, -np.asarray(mu))], -r0)


def _cvar_rows(lp, us, rows, alpha, scale=1.0, name="cvar"):
    """Epigraph ``t + c sum z`` of CVaR(-rows u); returns (coefficient list, epigraph-row indices)."""
    n = rows.shape[0]
    t = lp.add(1, name + "_t")
    z = lp.add(n, name + "_z", lb=0.0)
    ids = []
    for i in range(n):
        ids.append(lp.leq([(us, -rows[i]), (t, -1.0), (slice(z.start + i, z.start + i + 1), -1.0)], 0.0))
    c = 1.0 / ((1.0 - alpha) * n)
    return [(t, scale), (z, scale * c)], ids


def _basel3_rows(lp, us, panel, params, C0):
    m1, m2 = panel.m1, panel.m2
    terms, epi = [], []
    for s in range(m1, m1 + m2):
        coefs, ids = _cvar_rows(lp, us, panel.block(s), params.alpha3, name=f"b3_{s}")
        terms.append(coefs)
        epi.append(ids)
    first = lp.leq(terms[0], C0)
    avg = lp.leq([(sl, v * params.ell / m2) for t in terms for sl, v in t], C0)
    return (first, avg), epi


@dataclass
class ReferenceSolution:
    u: np.ndarray
    objective: float
    status: str
    qp: object = None
    capital_rows: tuple = ()
    epigraph_rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _solve_reference(lp, Q=None):
    prob = lp.problem(Q)
    scale = max(np.abs(prob.Q).max(), np.abs(prob.c).max(), 1e-300)
    prob.Q = prob.Q / scale
    prob.c = prob.c / scale
    sol = solve_qp(prob)
    if sol.status != OPTIMAL:
        if sol.status == "infeasible":
            raise InfeasibleModel("reference model is infeasible")
        raise RuntimeError(f"reference solve ended with status {sol.status}")
    return sol, scale


def convex_reference(panel, Y=None, rho="variance", params=None, C0=None, r0=None, mu=None,
                     basel="basel3") -> ReferenceSolution:
    """Global optimum of mean-variance/mean-CVaR, optionally with a Basel III cap, as one QP/LP.

    ``C0=None`` drops the capital constraint.
    """
    if rho not in ("variance", "cvar"):
        raise ValueError("convex reference covers rho in {'variance', 'cvar'} only")
    if C0 is not None and basel != "basel3":
        raise ValueError("only the Basel III constraint is convex")
    params = params or rm.RiskParams()
    Y = dedup_rows(panel) if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    mu = panel.column_means() if mu is None else np.asarray(mu, dtype=float)
    check_target_return(mu, r0)
    d = panel.d
    lp = _Lp()
    us = lp.add(d, "u", lb=0.0)
    _portfolio_rows(lp, us, mu, r0)
    Q = None
    if rho == "variance":
        n = Y.shape[0]
        Yc = Y - Y.mean(axis=0)
        Q = (us, 2.0 * Yc.T @ Yc / n)
    else:
        coefs, _ = _cvar_rows(lp, us, Y, params.alpha, name="obj")
        for sl, v in coefs:
            lp.c[sl] = [v] * (sl.stop - sl.start)
    cap, epi = ((), [])
    if C0 is not None:
        cap, epi = _basel3_rows(lp, us, panel, params, C0)
    sol, scale = _solve_reference(lp, Q)
    u = clean_simplex(sol.z[us])
    obj = rm.evaluate(rho, -(Y @ u), params)
    ref = ReferenceSolution(u, obj, sol.status, sol, cap, epi)
    ref.extra["scale"] = scale
    return ref


def mean_rho_reference(panel, rho="cvar", params=None, r0=None, mu=None) -> ReferenceSolution:
    """Global optimum of the convex mean-rho problems (variance, CVaR, Basel III) on ``-R u``."""
    params = params or rm.RiskParams()
    R = panel.matrix
    if rho in ("variance", "cvar"):
        single = ScenarioPanel((R,), 1, 0)
        return convex_reference(single, Y=R, rho=rho, params=params, r0=r0,
                                mu=panel.column_means() if mu is None else mu)
    if rho != "basel3":
        raise ValueError("mean-rho reference covers variance, cvar and basel3")
    mu = panel.column_means() if mu is None else np.asarray(mu, dtype=float)
    check_target_return(mu, r0)
    lp = _Lp()
    us = lp.add(panel.d, "u", lb=0.0)
    _portfolio_rows(lp, us, mu, r0)
    tau = lp.add(1, "tau", cost=1.0)
    m1, m2 = panel.m1, panel.m2
    terms = []
    for s in range(m1, m1 + m2):
        coefs, _ = _cvar_rows(lp, us, panel.block(s), params.alpha3, name=f"b3_{s}")
        terms.append(coefs)
    lp.leq(terms[0] + [(tau, -1.0)], 0.0)
    lp.leq([(sl, v * params.ell / m2) for t in terms for sl, v in t] + [(tau, -1.0)], 0.0)
    sol, _ = _solve_reference(lp)
    u = clean_simplex(sol.z[us])
    x = LossVector(-(R @ u), panel.sizes, m1, m2)
    return ReferenceSolution(u, rm.basel3(x, params), sol.status, sol)


def max_return_reference(panel, rho="cvar", params=None, b0=None, mu=None) -> ReferenceSolution:
    """LP reference for ``max mu'u`` over the simplex with a CVaR or Basel III budget."""
    params = params or rm.RiskParams()
    mu = panel.column_means() if mu is None else np.asarray(mu, dtype=float)
    lp = _Lp()
    us = lp.add(panel.d, "u", lb=0.0, cost=-mu)
    _portfolio_rows(lp, us, mu, None)
    if rho == "cvar":
        coefs, _ = _cvar_rows(lp, us, panel.matrix, params.alpha, name="risk")
        lp.leq(coefs, b0)
    elif rho == "basel3":
        _basel3_rows(lp, us, panel, params, b0)
    else:
        raise ValueError("max-return reference covers cvar and basel3")
    sol, _ = _solve_reference(lp)
    u = clean_simplex(sol.z[us])
    return ReferenceSolution(u, float(mu @ u), sol.status, sol)


def reference_state(panel, ref: ReferenceSolution, Y=None, rho="variance", params=None) -> AdmState:
    """ADM state sitting at a convex reference optimum, with subgradients from its duals.

    Lets :func:`baselopt.adm.kkt_residual` be checked at a known solution.
    """
    params = params or rm.RiskParams()
    Y = dedup_rows(panel) if Y is None else Y
    R = panel.matrix
    u = ref.u
    x, y = -(R @ u), -(Y @ u)
    scale = ref.extra.get("scale", 1.0)
    if rho == "variance":
        g = 2.0 / y.size * (y - y.mean())
    else:
        raise ValueError("reference_state supports the variance objective")
    sub_x = np.zeros_like(x)
    eta = 0.0
    if ref.capital_rows:
        duals = ref.qp.y_in * scale
        eta = float(duals[list(ref.capital_rows)].sum())
        off = panel.offsets
        for j, s in enumerate(range(panel.m1, panel.m1 + panel.m2)):
            sub_x[off[s]:off[s + 1]] = duals[ref.epigraph_rows[j]]
    return AdmState(x=x, u=u, lam=-sub_x, y=y, pi=-g, eta=eta, sub_x=sub_x, sub_y=g)


# --- exhaustive mean-VaR --------------------------------------------------------

def _excluded_sets(n, p):
    k = n - p
    if k > ENUM_MAX_EXCLUDED:
        raise OracleBudgetExceeded(f"{k} excluded observations exceed the limit {ENUM_MAX_EXCLUDED}")
    if math.comb(n, k) > ENUM_MAX_LPS:
        raise OracleBudgetExceeded(f"C({n}, {k}) = {math.comb(n, k)} LPs exceed the budget {ENUM_MAX_LPS}")
    return list(itertools.combinations(range(n), k))


def mean_var_enumerate(Y, alpha, r0, mu, panel=None, basel=None, params=None, C0=None) -> dict:
    """Exact global minimum of ``VaR_alpha(-Y u)`` over the target-return simplex.

    For every choice of ``n' - p'`` observations allowed above the VaR an
    LP ``min beta  s.t.  -Y_i u <= beta`` (other ``i``) is solved; the
    smallest LP value is the optimum. A Basel III cap adds convex rows to
    every LP; a Basel 2.5 cap multiplies the enumeration by one excluded
    set per block.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    mu = np.asarray(mu, dtype=float)
    params = params or rm.RiskParams(alpha=alpha)
    check_target_return(mu, r0)
    n, d = Y.shape
    p = rm.tail_index(alpha, n)
    sets = _excluded_sets(n, p)
    block_sets = [()]
    if basel == "basel25":
        per_block = [_excluded_sets(b.shape[0], rm.tail_index(params.alpha, b.shape[0]))
                     for b in panel.blocks]
        total = len(sets) * math.prod(len(s) for s in per_block)
        if total > ENUM_MAX_LPS:
            raise OracleBudgetExceeded(f"{total} LPs exceed the budget {ENUM_MAX_LPS}")
        block_sets = list(itertools.product(*per_block))
    elif basel not in (None, "basel3"):
        raise ValueError(f"unknown Basel measure {basel!r}")

    best = None
    count = 0
    for S in sets:
        keep = np.setdiff1d(np.arange(n), S)
        for B in block_sets:
            lp = _Lp()
            us = lp.add(d, "u", lb=0.0)
            beta = lp.add(1, "beta", cost=1.0)
            _portfolio_rows(lp, us, mu, r0)
            for i in keep:
                lp.leq([(us, -Y[i]), (beta, -1.0)], 0.0)
            if basel == "basel3":
                _basel3_rows(lp, us, panel, params, C0)
            elif basel == "basel25":
                _basel25_enum_rows(lp, us, panel, params, C0, B)
            sol = solve_qp(lp.problem())
            count += 1
            if sol.status != OPTIMAL:
                continue
            if best is None or sol.obj < best[0]:
                best = (sol.obj, clean_simplex(sol.z[us]))
    if best is None:
        raise InfeasibleModel("no enumerated LP was feasible")
    u = best[1]
    return {"objective": rm.var_at(-(Y @ u), alpha), "lp_value": best[0], "u": u, "n_lps": count}


def _basel25_enum_rows(lp, us, panel, params, C0, excluded):
    m1, m2 = panel.m1, panel.m2
    betas = lp.add(panel.m, "beta_s")
    g = lp.add(2, "gamma")
    bs = lambda s: slice(betas.start + s, betas.start + s + 1)
    g1, g2 = slice(g.start, g.start + 1), slice(g.start + 1, g.start + 2)
    for s, block in enumerate(panel.blocks):
        for i in np.setdiff1d(np.arange(block.shape[0]), excluded[s]):
            lp.leq([(us, -block[i]), (bs(s), -1.0)], 0.0)
    lp.leq([(bs(0), 1.0), (g1, -1.0)], 0.0)
    lp.leq([(bs(s), params.k / m1) for s in range(m1)] + [(g1, -1.0)], 0.0)
    lp.leq([(bs(m1), 1.0), (g2, -1.0)], 0.0)
    lp.leq([(bs(s), params.ell / m2) for s in range(m1, m1 + m2)] + [(g2, -1.0)], 0.0)
    lp.leq([(g1, 1.0), (g2, 1.0)], C0)


# --- grid oracle for the prox subproblems --------------------------------------

@dataclass
class ProxRequest:
    """One prox/projection instance: anchor, penalty, risk parameters and bound."""

    anchor: np.ndarray
    sigma: float = 1.0
    params: rm.RiskParams = field(default_factory=rm.RiskParams)
    partition: Partition | None = None
    bound: float | None = None

    def __post_init__(self):
        self.anchor = np.ravel(np.asarray(self.anchor, dtype=float))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not np.all(np.isfinite(self.anchor)):
            raise ValueError("anchor must be finite")
        if self.partition is not None and sum(self.partition.sizes) != self.anchor.size:
            raise ValueError("partition does not match the anchor length")


def _sorted(Z):
    return np.sort(Z, axis=-1)


def _batch_measure(name, Z, params, partition=None):
    """Vectorised risk measures over the rows of ``Z``."""
    Z = np.atleast_2d(Z)
    n = Z.shape[1]
    if name == "variance":
        return Z.var(axis=1)
    if name == "var":
        return _sorted(Z)[:, rm.tail_index(params.alpha, n) - 1]
    if name == "cvar":
        return _sorted(Z) @ rm.cvar_weights(params.alpha, n)
    off = partition.offsets
    m1, m2 = partition.m1, partition.m2
    blocks = [Z[:, off[s]:off[s + 1]] for s in range(m1 + m2)]
    if name == "basel25":
        var = [_sorted(b)[:, rm.tail_index(params.alpha, b.shape[1]) - 1] for b in blocks]
        t1 = np.maximum(var[0], params.k / m1 * sum(var[:m1]))
        t2 = np.maximum(var[m1], params.ell / m2 * sum(var[m1:]))
        return t1 + t2
    if name == "basel3":
        cv = [_sorted(b) @ rm.cvar_weights(params.alpha3, b.shape[1]) for b in blocks[m1:]]
        return np.maximum(cv[0], params.ell / m2 * sum(cv))
    raise ValueError(f"unknown measure {name!r}")


OPERATORS = {
    # name: (measure, kind)
    "prox_variance": ("variance", "prox"),
    "prox_var": ("var", "prox"),
    "prox_cvar": ("cvar", "prox"),
    "prox_basel25": ("basel25", "prox"),
    "prox_basel3": ("basel3", "prox"),
    "project_var_ball": ("var", "ball"),
    "project_cvar_ball": ("cvar", "ball"),
    "project_variance_ball": ("variance", "ball"),
    "project_basel25": ("basel25", "ball"),
    "project_basel3": ("basel3", "ball"),
}


def subproblem_objective(request: ProxRequest, which: str, Z) -> np.ndarray:
    """Objective of ``which`` at the rows of ``Z`` (``inf`` where a ball constraint fails)."""
    measure, kind = OPERATORS[which]
    Z = np.atleast_2d(Z)
    dist = 0.5 * ((Z - request.anchor) ** 2).sum(axis=1)
    risk = _batch_measure(measure, Z, request.params, request.partition)
    if kind == "prox":
        return risk + request.sigma * dist
    return np.where(risk <= request.bound + 1e-12, dist, np.inf)


def _cvar_line_oracle(request: ProxRequest):
    """Prox of CVaR by a grid over the threshold ``t``; the inner problem is scalar and separable."""
    w = request.anchor
    n = w.size
    sigma = request.sigma
    cw = 1.0 / ((1.0 - request.params.alpha) * n)

    def inner(t):
        t = np.asarray(t, dtype=float)[:, None]
        # candidates for min_y cw (y - t)_+ + sigma/2 (y - w)^2: below t, at t, above t
        below = np.minimum(w, t)
        above = np.maximum(w - cw / sigma, t)
        cost = lambda y: cw * np.maximum(y - t, 0.0) + 0.5 * sigma * (y - w) ** 2
        cands = np.stack([below, np.broadcast_to(t, below.shape), above])
        costs = cost(cands)
        k = np.argmin(costs, axis=0)
        y = np.take_along_axis(cands, k[None], axis=0)[0]
        return y, t[:, 0] + costs.min(axis=0).sum(axis=1)

    lo = w.min() - cw / sigma - 1.0
    hi = w.max() + 1.0
    step = 1e-3
    grid = np.arange(lo, hi + step, step)
    for _ in range(4):
        _, vals = inner(grid)
        j = int(np.argmin(vals))
        centre = grid[j]
        grid = np.linspace(centre - step, centre + step, 201)
        step /= 100.0
    y, vals = inner(grid)
    j = int(np.argmin(vals))
    return y[j], float(vals[j] - grid[j]) + float(grid[j])


def _reach(request: ProxRequest, which: str) -> float:
    """Bound on the distance between the anchor and the subproblem solution."""
    measure, kind = OPERATORS[which]
    v, p = request.anchor, request.params
    if measure == "variance":
        return float(np.ptp(v))
    if kind == "prox":
        K = {"var": 1.0, "cvar": 1.0, "basel25": p.k + p.ell, "basel3": max(1.0, p.ell)}[measure]
        return K / request.sigma
    excess = max(0.0, float(_batch_measure(measure, v, p, request.partition)[0]) - request.bound)
    slope = min(1.0, p.k, p.ell) if measure.startswith("basel") else 1.0
    return float(np.sqrt(v.size)) * excess / slope


def _repair(request: ProxRequest, measure: str, Z):
    """Map rows of ``Z`` into the ball ``{measure <= bound}``; feasible rows are kept.

    The variance ball is reached by shrinking towards the row mean, the
    VaR and CVaR balls by a downward shift (both measures are translation
    equivariant). Basel rows are returned unchanged.
    """
    b = request.bound
    if measure == "variance":
        m = Z.mean(axis=1, keepdims=True)
        var = Z.var(axis=1)
        scale = np.ones_like(var)
        over = var > b
        scale[over] = np.sqrt(b / var[over])
        return m + (Z - m) * scale[:, None]
    if measure in ("var", "cvar"):
        risk = _batch_measure(measure, Z, request.params)
        return Z - np.maximum(risk - b, 0.0)[:, None]
    return Z


def prox_grid_oracle(request: ProxRequest, which: str, max_dim: int = 6, budget: int = 100_000,
                     n_starts: int = 4):
    """Best lattice point for a prox/projection subproblem.

    A uniform grid over the box ``anchor +- (max(1, |anchor|_inf) + 2 + reach)``,
    where ``reach`` bounds the distance from the anchor to the solution,
    seeds a pattern search (full ``3^n`` neighbourhoods) from the
    ``n_starts`` best lattice points and the anchor. The step doubles after
    a successful move and is divided by ten after a failed one until it
    falls below ``1e-8``. Ball projections search over
    points mapped into the ball (see :func:`_repair`), which keeps the
    search off the boundary. CVaR prox requests use a one-dimensional
    threshold grid instead and accept vectors up to length 50. Returns
    ``(point, objective)``.
    """
    if which not in OPERATORS:
        raise ValueError(f"unknown operator {which!r}")
    n = request.anchor.size
    if which == "prox_cvar":
        if n > 50:
            raise OracleBudgetExceeded("CVaR line oracle handles at most 50 entries")
        y, _ = _cvar_line_oracle(request)
        return y, float(subproblem_objective(request, which, y)[0])
    if n > max_dim:
        raise OracleBudgetExceeded(f"grid oracle handles at most {max_dim} entries, got {n}")
    measure, kind = OPERATORS[which]
    fix = (lambda Z: _repair(request, measure, np.atleast_2d(Z))) if kind == "ball" else np.atleast_2d
    f = lambda Z: subproblem_objective(request, which, fix(Z))
    v = request.anchor
    radius = max(1.0, np.abs(v).max()) + 2.0 + _reach(request, which)
    k = max(3, int(budget ** (1.0 / n)))
    axes = [np.linspace(c - radius, c + radius, k) for c in v]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    vals = f(mesh)
    starts = [mesh[i] for i in np.argsort(vals, kind="stable")[:n_starts] if np.isfinite(vals[i])]
    if np.isfinite(f(v)[0]):
        starts.append(v.copy())
    if not starts:
        raise OracleBudgetExceeded("grid found no feasible point")
    moves = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n)))
    best_z, best_f = None, np.inf
    for z in starts:
        z = z.copy()
        fz = float(f(z)[0])
        h = 2.0 * radius / (k - 1)
        while h > 1e-8:
            cand = z + h * moves
            cv = f(cand)
            j = int(np.argmin(cv))
            if cv[j] < fz:
                z, fz = cand[j], float(cv[j])
                h = min(2.0 * h, radius)
            else:
                h /= 10.0
        if fz < best_f:
            best_z, best_f = z, fz
    return fix(best_z)[0], best_f


# --- MIP export ---------------------------------------------------------------

VARIANTS = ("var_basel25", "var_basel3", "cvar_basel25", "variance_basel25",
            "variance_basel3", "cvar_basel3")


@dataclass
class MipModel:
    """Size summary of an exported model.

    Bound rows (``u >= 0``, ``z >= 0``, binaries) are not counted as
    constraints; the budget equality and the return floor are.
    """

    variant: str
    binaries: int
    continuous: int
    constraints: int
    eta: float | None

    def to_dict(self):
        return {"variant": self.variant, "binaries": self.binaries, "continuous": self.continuous,
                "constraints": self.constraints, "eta": self.eta}


def mip_counts(variant, d, n_prime, sizes, m1, m2) -> MipModel:
    """Variable and row counts of an exported variant, from the problem dimensions alone."""
    sizes = list(sizes)
    m = m1 + m2
    n_all = sum(sizes)
    n_str = sum(sizes[m1:])
    portfolio = 2
    b25 = dict(binaries=n_all, continuous=m + 2, constraints=n_all + m + 5)
    b3 = dict(binaries=0, continuous=m2 + n_str, constraints=n_str + 2)
    rho = {
        "var": dict(binaries=n_prime, continuous=1, constraints=n_prime + 1),
        "cvar": dict(binaries=0, continuous=n_prime + 1, constraints=n_prime),
        "variance": dict(binaries=0, continuous=n_prime, constraints=n_prime),
    }
    if variant not in VARIANTS:
        raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")
    r, b = variant.split("_")
    parts = [rho[r], b25 if b == "basel25" else b3]
    tot = {k: sum(p[k] for p in parts) for k in ("binaries", "continuous", "constraints")}
    return MipModel(variant, tot["binaries"], tot["continuous"] + d, tot["constraints"] + portfolio, None)


def big_m(Y, mu=None, r0=None, cheap=False) -> float:
    """Big-M constant for the VaR indicator rows.

    Exact mode solves two LPs per row for the largest and smallest loss
    ``-Y_j u`` over the portfolio set and returns ``max - min(0, min)``,
    which also covers a negative VaR level. ``cheap`` uses
    ``2 max |Y_ji|`` instead.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if cheap:
        return float(2.0 * np.abs(Y).max())
    d = Y.shape[1]
    lo, hi = np.inf, -np.inf
    kw = dict(A_eq=np.ones((1, d)), b_eq=[1.0], lb=np.zeros(d))
    if mu is not None and r0 is not None:
        kw.update(A_in=-np.asarray(mu)[None, :], b_in=[-r0])
    for row in np.unique(Y, axis=0):
        for sign in (1.0, -1.0):
            sol = solve_qp(QpProblem(None, sign * row, **kw))
            if sol.status != OPTIMAL:
                raise InfeasibleModel("portfolio set is empty")
            loss = float(-row @ sol.z)
            hi, lo = max(hi, loss), min(lo, loss)
    return hi - min(0.0, lo)


def _fmt(v):
    return f"{v:.17g}"


class _LpWriter:
    def __init__(self):
        self.rows = []
        self.count = 0

    def row(self, terms, sense, rhs):
        self.count += 1
        body = " ".join(f"{'+' if c >= 0 else '-'} {_fmt(abs(c))} {name}" for name, c in terms if c != 0)
        self.rows.append(f" c{self.count}: {body or '0 u_1'} {sense} {_fmt(rhs)}")


def export_mip(variant, panel: ScenarioPanel, path=None, Y=None, params=None, C0=0.2, r0=None,
               mu=None, cheap_eta=False) -> MipModel:
    """Write one of the MIP/QP/LP reformulations in CPLEX LP format and return its size.

    Supported variants: ``var_basel25``, ``var_basel3``, ``cvar_basel25``,
    ``variance_basel25`` and the convex ``variance_basel3``/``cvar_basel3``.
    The variance objective is written on centred losses so that it stays
    diagonal. With ``path=None`` the model is assembled but not written.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")
    params = params or rm.RiskParams()
    Y = dedup_rows(panel) if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    mu = panel.column_means() if mu is None else np.asarray(mu, dtype=float)
    rho, basel = variant.split("_")
    d, n_prime = panel.d, Y.shape[0]
    m1, m2 = panel.m1, panel.m2
    u = [f"u_{j + 1}" for j in range(d)]
    w = _LpWriter()
    binaries, continuous = [], list(u)
    free = []
    objective = []
    needs_eta = rho == "var" or basel == "basel25"
    eta = big_m(np.vstack([Y, panel.matrix]), mu, r0, cheap=cheap_eta) if needs_eta else None

    def lin(row, names):
        return [(nm, -float(c)) for nm, c in zip(names, row)]

    if rho == "var":
        continuous.append("beta_0")
        free.append("beta_0")
        objective = [("beta_0", 1.0)]
        zs = [f"zp_{i + 1}" for i in range(n_prime)]
        binaries += zs
        for i in range(n_prime):
            w.row(lin(Y[i], u) + [("beta_0", -1.0), (zs[i], -eta)], "<=", 0.0)
        w.row([(z, 1.0) for z in zs], "<=", n_prime - rm.tail_index(params.alpha, n_prime))
    elif rho == "cvar":
        t = "t_0"
        rs = [f"rp_{i + 1}" for i in range(n_prime)]
        continuous += [t] + rs
        free.append(t)
        c = 1.0 / ((1.0 - params.alpha) * n_prime)
        objective = [(t, 1.0)] + [(r, c) for r in rs]
        for i in range(n_prime):
            w.row(lin(Y[i], u) + [(t, -1.0), (rs[i], -1.0)], "<=", 0.0)
    else:
        ys = [f"y_{i + 1}" for i in range(n_prime)]
        continuous += ys
        free += ys
        Yc = Y - Y.mean(axis=0)
        for i in range(n_prime):
            w.row([(ys[i], 1.0)] + [(nm, float(cc)) for nm, cc in zip(u, Yc[i])], "=", 0.0)
        quad = [(y, 2.0 / n_prime) for y in ys]

    off = panel.offsets
    if basel == "basel25":
        betas = [f"beta_{s + 1}" for s in range(panel.m)]
        continuous += betas + ["gamma_1", "gamma_2"]
        free += betas + ["gamma_1", "gamma_2"]
        for s, block in enumerate(panel.blocks):
            ns = block.shape[0]
            zs = [f"z_{s + 1}_{i + 1}" for i in range(ns)]
            binaries += zs
            for i in range(ns):
                w.row(lin(block[i], u) + [(betas[s], -1.0), (zs[i], -eta)], "<=", 0.0)
            w.row([(z, 1.0) for z in zs], "<=", ns - rm.tail_index(params.alpha, ns))
        w.row([(betas[0], 1.0), ("gamma_1", -1.0)], "<=", 0.0)
        w.row([(betas[s], params.k / m1) for s in range(m1)] + [("gamma_1", -1.0)], "<=", 0.0)
        w.row([(betas[m1], 1.0), ("gamma_2", -1.0)], "<=", 0.0)
        w.row([(betas[s], params.ell / m2) for s in range(m1, m1 + m2)] + [("gamma_2", -1.0)], "<=", 0.0)
        w.row([("gamma_1", 1.0), ("gamma_2", 1.0)], "<=", C0)
    else:
        terms = []
        for s in range(m1, m1 + m2):
            block = panel.blocks[s]
            ns = block.shape[0]
            ts = f"t_{s + 1}"
            rs = [f"r_{s + 1}_{i + 1}" for i in range(ns)]
            continuous += [ts] + rs
            free.append(ts)
            for i in range(ns):
                w.row(lin(block[i], u) + [(ts, -1.0), (rs[i], -1.0)], "<=", 0.0)
            c = 1.0 / ((1.0 - params.alpha3) * ns)
            terms.append([(ts, 1.0)] + [(r, c) for r in rs])
        w.row(terms[0], "<=", C0)
        w.row([(nm, cc * params.ell / m2) for t in terms for nm, cc in t], "<=", C0)

    w.row([(nm, 1.0) for nm in u], "=", 1.0)
    if r0 is None:
        r0 = -1e30
    w.row([(nm, float(m)) for nm, m in zip(u, mu)], ">=", r0)

    model = MipModel(variant, len(binaries), len(continuous), w.count, eta)
    expected = mip_counts(variant, d, n_prime, panel.sizes, m1, m2)
    if (model.binaries, model.continuous, model.constraints) != (
            expected.binaries, expected.continuous, expected.constraints):
        raise AssertionError(f"assembled counts {model} disagree with {expected}")
    if path is not None:
        _write_lp(Path(path), variant, objective, quad if rho == "variance" else None,
                  w.rows, free, binaries)
    return model


def _write_lp(path, variant, objective, quad, rows, free, binaries):
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"\\ baselopt export: {variant}\n")
        fh.write("Minimize\n obj:")
        for name, c in objective:
            fh.write(f" {'+' if c >= 0 else '-'} {_fmt(abs(c))} {name}")
        if quad:
            fh.write(" + [")
            fh.write(" + ".join(f"{_fmt(c)} {name} ^2" for name, c in quad))
            fh.write(" ] / 2")
        if not objective and not quad:
            fh.write(" 0 u_1")
        fh.write("\nSubject To\n")
        for r in rows:
            fh.write(r + "\n")
        fh.write("Bounds\n")
        for name in free:
            fh.write(f" {name} free\n")
        if binaries:
            fh.write("Binaries\n")
            for name in binaries:
                fh.write(f" {name}\n")
        fh.write("End\n")
