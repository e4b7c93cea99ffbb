"""Proximal operators and Euclidean projections for the ADM subproblems.

Two families live here:

* prox operators ``argmin_y rho(y) + sigma/2 ||y - w||^2`` for the
  variance, VaR, CVaR and the two Basel measures;
* projections ``argmin_y ||y - w||^2  s.t.  rho(y) <= b`` onto risk
  balls, including the Basel capital sets.

Basel 2.5 operators assemble explicit QPs for :func:`baselopt.qp.solve_qp`.
Basel III operators solve their one or two capital multipliers by nested
root finding on the concave dual, with the QP kept as a fallback.
Everything else is closed form or a one-dimensional search.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from . import risk_measures as rm
from .qp import OPTIMAL, QpError, QpProblem, solve_qp
from .scenario_data import LossVector, Partition


class ProxFailure(RuntimeError):
    """A subproblem solver could not produce a certified answer."""


def _vec(w):
    if isinstance(w, LossVector):
        w = w.values
    return np.array(np.ravel(w), dtype=float)


def _layout(v, partition):
    if partition is None:
        if not isinstance(v, LossVector):
            raise TypeError("a partition is required unless v is a LossVector")
        return v.layout
    if isinstance(partition, Partition):
        return partition
    if isinstance(partition, LossVector):
        return partition.layout
    sizes, m1, m2 = partition
    return Partition(tuple(sizes), m1, m2)


# --- variance ---------------------------------------------------------------

def prox_variance(w, sigma: float) -> np.ndarray:
    """Closed-form prox of the sample variance."""
    w = _vec(w)
    n = w.size
    return (sigma * w + 2.0 * w.sum() / n ** 2) / (sigma + 2.0 / n)


def project_variance_ball(w, b0: float) -> np.ndarray:
    """Project onto ``{y : variance(y) <= b0}`` by shrinking deviations about the mean."""
    if b0 < 0:
        raise ValueError("variance budget must be nonnegative")
    w = _vec(w)
    v = rm.variance(w)
    if v <= b0:
        return w
    mean = w.mean()
    return mean + math.sqrt(b0 / v) * (w - mean)


# --- value-at-risk ----------------------------------------------------------

def prox_var(w, sigma: float, alpha: float) -> np.ndarray:
    """Prox of the sample VaR.

    The ``p' - i* + 1`` entries ranked ``i*..p'`` are pulled down to a
    common level ``gamma_{i*}``; larger entries are untouched. ``i*`` is the
    highest rank whose level falls between its sorted neighbours.
    """
    w = _vec(w)
    n = w.size
    p = rm.tail_index(alpha, n)
    order = rm.sort_order(w)
    ws = w[order]
    head = ws[:p]
    suffix = np.cumsum(head[::-1])[::-1]              # sum_{j=i}^{p} ws_j
    counts = np.arange(p, 0, -1, dtype=float)         # p - i + 1
    gamma = (sigma * suffix - 1.0) / (sigma * counts)
    lower = np.concatenate([[-np.inf], head[:-1]])
    ok = (lower < gamma) & (gamma <= head)
    if not ok.any():
        # gamma_i <= ws_i holds by induction once ws_{i-1} < gamma_i fails for all
        # higher ranks; rounding can break the second test near ties
        ok = lower < gamma
    if not ok.any():
        raise ProxFailure("VaR prox found no admissible breakpoint")
    i_star = int(np.flatnonzero(ok)[-1])
    y = w.copy()
    y[order[i_star:p]] = gamma[i_star]
    return y


def project_var_ball(w, alpha: float, b0: float) -> np.ndarray:
    """Project onto ``{y : VaR_alpha(y) <= b0}`` by clipping the ``p'`` smallest entries."""
    w = _vec(w)
    p = rm.tail_index(alpha, w.size)
    idx = rm.sort_order(w)[:p]
    y = w.copy()
    y[idx] = np.minimum(w[idx], b0)
    return y


# --- conditional value-at-risk ---------------------------------------------

def _cvar_y(w, t, c):
    """Optimal ``y`` for a fixed CVaR threshold ``t`` (vectorised over ``t``)."""
    t = np.asarray(t, dtype=float)[..., None]
    return np.where(w - c > t, w - c, np.where(w > t, t, w))


def _cvar_phi(w, t, c, sigma, alpha):
    n = w.size
    y = _cvar_y(w, t, c)
    tt = np.asarray(t, dtype=float)[..., None]
    tail = np.maximum(y - tt, 0.0).sum(axis=-1) / ((1.0 - alpha) * n)
    return np.asarray(t) + tail + 0.5 * sigma * ((y - w) ** 2).sum(axis=-1)


def _sorted_suffix(w):
    ws = np.sort(w)
    # suffix[k] = sum of ws[k:]
    return ws, np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])


def _threshold_sorted(ws, suffix, a, sigma):
    """Threshold root for a sorted anchor; returns ``(t, k)`` with ``k = #{w_i - c > t}``.

    The slope of the threshold objective, ``1 - a k_A + sigma sum_B (t - w_i)``,
    is evaluated at every kink; the root is then solved on the bracketing
    piece, where the index sets ``A`` and ``B`` are fixed.
    """
    n = ws.size
    c = a / sigma
    wc = ws - c
    knots = np.concatenate((ws, wc))
    knots.sort()
    kw = n - ws.searchsorted(knots, "right")
    ka = n - wc.searchsorted(knots, "right")
    slope = 1.0 - a * ka + sigma * ((kw - ka) * knots - (suffix[n - kw] - suffix[n - ka]))
    j = int((slope >= 0.0).argmax())
    t = float(knots[j])
    if j > 0 and slope[j] != 0.0:
        lo, hi = float(knots[j - 1]), t
        mid = 0.5 * (lo + hi)
        kw_m = n - int(ws.searchsorted(mid, "right"))
        ka_m = n - int(wc.searchsorted(mid, "right"))
        nb = kw_m - ka_m
        if nb > 0:
            s_b = suffix[n - kw_m] - suffix[n - ka_m]
            t = min(max((s_b - (1.0 - a * ka_m) / sigma) / nb, lo), hi)
    return t, n - int(wc.searchsorted(t, "right"))


def _prox_cvar_value(ws, suffix, a, sigma):
    """CVaR of the prox point, from the threshold alone (``ws`` sorted ascending)."""
    t, ka = _threshold_sorted(ws, suffix, a, sigma)
    return t + a * (suffix[ws.size - ka] - ka * (a / sigma + t))


def cvar_threshold(w, sigma: float, alpha: float) -> float:
    """Minimiser ``t*`` of the one-dimensional CVaR prox objective.

    The objective is convex and piecewise quadratic in ``t`` with kinks at
    ``w_i`` and ``w_i - c``, so its slope is piecewise linear and
    nondecreasing. The slope is evaluated at every kink with suffix sums
    of the sorted anchor and the root is solved exactly on the bracketing
    piece.
    """
    w = _vec(w)
    ws, suffix = _sorted_suffix(w)
    return _threshold_sorted(ws, suffix, 1.0 / ((1.0 - alpha) * w.size), sigma)[0]


def prox_cvar(w, sigma: float, alpha: float, return_threshold: bool = False):
    """Prox of the sample CVaR via the threshold search of :func:`cvar_threshold`."""
    if not alpha < 1.0:
        raise ValueError("CVaR needs alpha < 1")
    w = _vec(w)
    c = 1.0 / (sigma * (1.0 - alpha) * w.size)
    t = cvar_threshold(w, sigma, alpha)
    y = _cvar_y(w, t, c)
    return (y, t) if return_threshold else y


def project_cvar_ball(w, alpha: float, b0: float, return_multiplier: bool = False):
    """Project onto ``{y : CVaR_alpha(y) <= b0}``.

    The projection is the CVaR prox with the multiplier ``eta`` that puts
    the prox point on the boundary; ``CVaR`` of the prox point is monotone
    in ``eta``, so a scalar root finder locates it.
    """
    if not alpha < 1.0:
        raise ValueError("CVaR needs alpha < 1")
    w = _vec(w)
    if rm.cvar_at(w, alpha) <= b0:
        return (w, 0.0) if return_multiplier else w
    ws, suffix = _sorted_suffix(w)
    a = 1.0 / ((1.0 - alpha) * w.size)
    eta = _grow_root(lambda e: _prox_cvar_value(ws, suffix, a, 1.0 / e) if e > 0
                     else rm.cvar_at(w, alpha), b0)
    y = prox_cvar(w, 1.0 / eta, alpha)
    return (y, eta) if return_multiplier else y


# --- Basel capital sets -----------------------------------------------------

def _solve(problem, what):
    try:
        sol = solve_qp(problem)
    except QpError as exc:
        raise ProxFailure(f"{what}: {exc}") from exc
    if sol.status != OPTIMAL:
        raise ProxFailure(f"{what}: QP ended with status {sol.status}")
    return sol


def _basel25_qp(v, lay, params, C0, sigma):
    """Assemble the sorted-head QP shared by the Basel 2.5 projection and prox.

    With ``sigma is None`` the capital bound is the constant ``C0``;
    otherwise the bound becomes a decision variable ``tau`` that is added
    to the objective ``tau + sigma/2 ||z - h||^2``.
    """
    m1, m2 = lay.m1, lay.m2
    if m1 < 1 or m2 < 1:
        raise ValueError("Basel 2.5 needs normal and stressed blocks")
    off = lay.offsets
    orders, heads, ps = [], [], []
    for s, ns in enumerate(lay.sizes):
        block = v[off[s]:off[s + 1]]
        o = rm.sort_order(block)
        p = rm.tail_index(params.alpha, ns)
        orders.append(o)
        heads.append(block[o[:p]])
        ps.append(p)
    zoff = np.concatenate([[0], np.cumsum(ps)]).astype(int)
    P = int(zoff[-1])
    g1, g2 = P, P + 1
    with_tau = sigma is not None
    N = P + 2 + int(with_tau)
    weight = 1.0 if sigma is None else sigma
    Q = np.zeros((N, N))
    Q[np.arange(P), np.arange(P)] = weight
    c = np.zeros(N)
    c[:P] = -weight * np.concatenate(heads)
    if with_tau:
        c[N - 1] = 1.0

    rows, rhs = [], []

    def row():
        r = np.zeros(N)
        rows.append(r)
        rhs.append(0.0)
        return r

    for s, p in enumerate(ps):
        for i in range(p - 1):
            r = row()
            r[zoff[s] + i] = 1.0
            r[zoff[s] + i + 1] = -1.0
    r = row()
    r[g1] = r[g2] = 1.0
    if with_tau:
        r[N - 1] = -1.0
    else:
        rhs[-1] = C0
    cap_row = len(rows) - 1
    last = lambda s: zoff[s] + ps[s] - 1
    r = row()
    r[last(0)] = 1.0
    r[g1] = -1.0
    r = row()
    r[last(m1)] = 1.0
    r[g2] = -1.0
    r = row()
    for s in range(m1):
        r[last(s)] += params.k / m1
    r[g1] = -1.0
    r = row()
    for s in range(m1, m1 + m2):
        r[last(s)] += params.ell / m2
    r[g2] = -1.0

    problem = QpProblem(Q, c, A_in=np.array(rows), b_in=np.array(rhs))
    sol = _solve(problem, "Basel 2.5 subproblem")
    x = v.copy()
    for s, p in enumerate(ps):
        x[off[s] + orders[s][:p]] = sol.z[zoff[s]:zoff[s] + p]
    info = {"capital_duals": np.array([sol.y_in[cap_row]]), "qp": sol}
    if with_tau:
        info["tau"] = float(sol.z[N - 1])
    return x, info


def _basel3_qp(v, lay, params, C0, sigma):
    """Assemble the stressed-block CVaR epigraph QP for Basel III."""
    m1, m2 = lay.m1, lay.m2
    if m2 < 1:
        raise ValueError("Basel III needs stressed blocks")
    off = lay.offsets
    alpha = params.alpha3
    blocks = list(range(m1, m1 + m2))
    sizes = [lay.sizes[s] for s in blocks]
    ns_tot = sum(sizes)
    # variables: x (stressed, ns_tot), t (m2), z (ns_tot), [tau]
    with_tau = sigma is not None
    N = 2 * ns_tot + m2 + int(with_tau)
    t0, z0 = ns_tot, ns_tot + m2
    weight = 1.0 if sigma is None else sigma
    vs = np.concatenate([v[off[s]:off[s + 1]] for s in blocks])
    Q = np.zeros((N, N))
    Q[np.arange(ns_tot), np.arange(ns_tot)] = weight
    c = np.zeros(N)
    c[:ns_tot] = -weight * vs
    if with_tau:
        c[N - 1] = 1.0

    G = np.zeros((ns_tot + 2, N))
    h = np.zeros(ns_tot + 2)
    pos = 0
    for j, ns in enumerate(sizes):
        idx = np.arange(pos, pos + ns)
        G[idx, idx] = 1.0
        G[idx, t0 + j] = -1.0
        G[idx, z0 + idx] = -1.0
        pos += ns
    first, avg = ns_tot, ns_tot + 1
    G[first, t0] = 1.0
    G[first, z0:z0 + sizes[0]] = 1.0 / ((1.0 - alpha) * sizes[0])
    pos = 0
    for j, ns in enumerate(sizes):
        G[avg, t0 + j] = params.ell / m2
        G[avg, z0 + pos:z0 + pos + ns] = params.ell / (m2 * (1.0 - alpha) * ns)
        pos += ns
    if with_tau:
        G[first, N - 1] = G[avg, N - 1] = -1.0
    else:
        h[first] = h[avg] = C0
    lb = np.full(N, -np.inf)
    lb[z0:z0 + ns_tot] = 0.0

    sol = _solve(QpProblem(Q, c, A_in=G, b_in=h, lb=lb), "Basel III subproblem")
    x = v.copy()
    pos = 0
    for s, ns in zip(blocks, sizes):
        x[off[s]:off[s + 1]] = sol.z[pos:pos + ns]
        pos += ns
    info = {"capital_duals": sol.y_in[[first, avg]].copy(), "qp": sol}
    if with_tau:
        info["tau"] = float(sol.z[N - 1])
    return x, info


def _grow_root(f, target, guess=None):
    """Root of the nonincreasing ``f(eta) = target`` on ``eta >= 0``.

    A positive ``guess`` (typically the multiplier of the previous call)
    seeds a tight bracket that is widened geometrically as needed.
    """
    lo, hi = 0.0, 1.0
    if guess is not None and guess > 0:
        lo, hi = 0.99 * guess, 1.01 * guess
        while lo > 0 and f(lo) <= target:
            hi, lo = lo, (lo * 0.25 if lo > 1e-12 * guess else 0.0)
    while f(hi) > target:
        lo, hi = hi, hi * 4.0
        if hi > 1e300:
            raise ProxFailure("capital bound cannot be reached")
    return brentq(lambda e: f(e) - target, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                  maxiter=500)


def _basel3_dual(v, lay, params, C0, tol=1e-12, hint=None):
    """Projection onto the Basel III set through its two capital multipliers.

    For multipliers ``(eta1, eta2)`` the Lagrangian minimiser is a CVaR
    prox on each stressed block. A single active row is a monotone scalar
    root in its multiplier. When both rows bind, ``eta2`` is solved for
    each trial ``eta1`` and the outer root in ``eta1`` is again monotone,
    since the dual function is concave. Returns ``None`` if no candidate
    is feasible to ``tol`` relative to the data scale.
    """
    m1, m2 = lay.m1, lay.m2
    off = lay.offsets
    alpha, ell = params.alpha3, params.ell
    idx = list(range(m1, m1 + m2))
    blocks = [v[off[s]:off[s + 1]] for s in idx]
    pre = [_sorted_suffix(b) for b in blocks]
    a = [1.0 / ((1.0 - alpha) * b.size) for b in blocks]
    base = [rm.cvar_at(b, alpha) for b in blocks]
    slack = tol * max(1.0, abs(C0), float(np.abs(v).max()))
    g1_hint = None if hint is None else hint[0]
    g2_hint = None if hint is None else hint[1]

    def weight(j, e1, e2):
        return e2 * ell / m2 + (e1 if j == 0 else 0.0)

    def value(j, wt):
        if wt <= 0:
            return base[j]
        return _prox_cvar_value(pre[j][0], pre[j][1], a[j], 1.0 / wt)

    def f2(e1, e2):
        return ell / m2 * sum(value(j, weight(j, e1, e2)) for j in range(m2))

    def best_e2(e1):
        if f2(e1, 0.0) <= C0:
            return 0.0
        return _grow_root(lambda e2: f2(e1, e2), C0, g2_hint)

    def both():
        e1 = _grow_root(lambda e1: value(0, weight(0, e1, best_e2(e1))), C0, g1_hint)
        return e1, best_e2(e1)

    candidates = []
    if ell / m2 * sum(base) > C0:
        candidates.append(lambda: (0.0, _grow_root(lambda e2: f2(0.0, e2), C0, g2_hint)))
    if base[0] > C0:
        candidates.append(lambda: (_grow_root(lambda e1: value(0, e1), C0, g1_hint), 0.0))
        candidates.append(both)
    for make in candidates:
        e1, e2 = make()
        x = v.copy()
        for j, s in enumerate(idx):
            wt = weight(j, e1, e2)
            if wt > 0:
                x[off[s]:off[s + 1]] = prox_cvar(blocks[j], 1.0 / wt, alpha)
        xs = [x[off[s]:off[s + 1]] for s in idx]
        g1 = rm.cvar_at(xs[0], alpha)
        g2 = ell / m2 * sum(rm.cvar_at(xb, alpha) for xb in xs)
        if g1 <= C0 + slack and g2 <= C0 + slack:
            return x, np.array([e1, e2])
    return None


def _basel3_prox_dual(v, lay, params, sigma):
    """Prox of the Basel III measure through its one-dimensional dual.

    ``min tau + sigma/2 ||x - v||^2`` with ``tau`` above both capital
    terms has multipliers ``(w, 1 - w)``; for fixed ``w`` every stressed
    block takes a CVaR prox, and the optimal ``w`` balances the two terms.
    """
    m1, m2 = lay.m1, lay.m2
    off = lay.offsets
    alpha, ell = params.alpha3, params.ell
    idx = list(range(m1, m1 + m2))
    blocks = [v[off[s]:off[s + 1]] for s in idx]
    pre = [_sorted_suffix(b) for b in blocks]
    a = [1.0 / ((1.0 - alpha) * b.size) for b in blocks]

    def weights(w):
        return [((w if j == 0 else 0.0) + (1.0 - w) * ell / m2) / sigma for j in range(m2)]

    def balance(w):
        vals = [_prox_cvar_value(pre[j][0], pre[j][1], a[j], 1.0 / wt) if wt > 0
                else rm.cvar_at(blocks[j], alpha) for j, wt in enumerate(weights(w))]
        return vals[0] - ell / m2 * sum(vals)

    if balance(0.0) <= 0.0:
        w = 0.0
    elif balance(1.0) >= 0.0:
        w = 1.0
    else:
        w = brentq(balance, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    x = v.copy()
    for j, (s, wt) in enumerate(zip(idx, weights(w))):
        if wt > 0:
            x[off[s]:off[s + 1]] = prox_cvar(blocks[j], 1.0 / wt, alpha)
    xs = LossVector(x, lay.sizes, m1, m2)
    return x, {"capital_duals": np.array([w, 1.0 - w]), "tau": rm.basel3(xs, params)}


def project_basel25(v, partition, params: rm.RiskParams, C0: float, full_output: bool = False):
    """Euclidean projection onto ``{x : basel25(x) <= C0}``.

    Only the ``p_s`` smallest entries of each block move; the rest of ``v``
    is returned bit-identical. Non-unique in general: ties are broken by
    the stable sort order.
    """
    v = _vec(v)
    lay = _layout(v, partition)
    if rm.basel25(LossVector(v, lay.sizes, lay.m1, lay.m2), params) <= C0:
        out = (v, {"capital_duals": np.zeros(1)})
    else:
        out = _basel25_qp(v, lay, params, C0, None)
    return out if full_output else out[0]


def project_basel3(v, partition, params: rm.RiskParams, C0: float, full_output: bool = False,
                   hint=None):
    """Euclidean projection onto ``{x : basel3(x) <= C0}``; normal blocks pass through."""
    v = _vec(v)
    lay = _layout(v, partition)
    if rm.basel3(LossVector(v, lay.sizes, lay.m1, lay.m2), params) <= C0:
        out = (v, {"capital_duals": np.zeros(2)})
    else:
        fast = _basel3_dual(v, lay, params, C0, hint=hint)
        out = (fast[0], {"capital_duals": fast[1]}) if fast else _basel3_qp(v, lay, params, C0, None)
    return out if full_output else out[0]


def prox_basel(v, partition, params: rm.RiskParams, sigma: float, which: str,
               full_output: bool = False):
    """Prox of a Basel measure: ``argmin_x basel(x) + sigma/2 ||x - v||^2``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = _vec(v)
    lay = _layout(v, partition)
    if which == "basel25":
        out = _basel25_qp(v, lay, params, None, sigma)
    elif which == "basel3":
        out = _basel3_prox_dual(v, lay, params, sigma)
    else:
        raise ValueError(f"unknown Basel measure {which!r}")
    return out if full_output else out[0]


def project_basel(v, partition, params, C0, which, full_output=False, hint=None):
    if which == "basel25":
        return project_basel25(v, partition, params, C0, full_output)
    if which == "basel3":
        return project_basel3(v, partition, params, C0, full_output, hint)
    raise ValueError(f"unknown Basel measure {which!r}")


# --- dispatch used by the ADM drivers ---------------------------------------

def prox(rho: str, w, sigma: float, params: rm.RiskParams, partition=None):
    """Prox of the named measure at ``w`` with penalty ``sigma``."""
    if rho == "variance":
        return prox_variance(w, sigma)
    if rho == "var":
        return prox_var(w, sigma, params.alpha)
    if rho == "cvar":
        return prox_cvar(w, sigma, params.alpha)
    if rho in ("basel25", "basel3"):
        return prox_basel(w, partition, params, sigma, rho)
    raise ValueError(f"unknown risk measure {rho!r}")


def project_ball(rho: str, w, b0: float, params: rm.RiskParams, partition=None):
    """Projection of ``w`` onto the sublevel set ``{rho <= b0}``."""
    if rho == "variance":
        return project_variance_ball(w, b0)
    if rho == "var":
        return project_var_ball(w, params.alpha, b0)
    if rho == "cvar":
        return project_cvar_ball(w, params.alpha, b0)
    if rho in ("basel25", "basel3"):
        return project_basel(w, partition, params, b0, rho)
    raise ValueError(f"unknown risk measure {rho!r}")
