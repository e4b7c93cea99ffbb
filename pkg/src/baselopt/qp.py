"""Dense convex QP/LP solver (primal-dual interior point, Mehrotra predictor-corrector).

Solves::

    minimize    1/2 z'Qz + c'z
    subject to  A_eq z  = b_eq
                A_in z <= b_in
                lb <= z <= ub

Finite bounds are treated as extra inequality rows internally but their
contribution to the normal matrix is added as a diagonal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .scenario_data import PortfolioWeights

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

MAX_ITERATIONS = 200
TOL = 1e-9
CERT_TOL = 1e-8


class QpError(ValueError):
    """Malformed problem data or a non-convex quadratic term."""


class InfeasibleModel(QpError):
    """The feasible region is empty."""


@dataclass
class QpProblem:
    Q: np.ndarray | None
    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.ravel(np.asarray(self.c, dtype=float))
        n = self.c.size
        if n < 1:
            raise QpError("problem needs at least one variable")
        if self.Q is None:
            self.Q = np.zeros((n, n))
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.shape != (n, n):
            raise QpError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-12 * (1 + np.abs(self.Q).max())):
            raise QpError("Q is not symmetric")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, n, "inequality")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(
            np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(
            np.asarray(self.ub, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.Q @ z + self.c @ z)

    def data_scale(self) -> float:
        parts = [self.Q, self.c, self.A_eq, self.b_eq, self.A_in, self.b_in,
                 self.lb[np.isfinite(self.lb)], self.ub[np.isfinite(self.ub)]]
        return 1.0 + max((np.abs(p).max() for p in parts if p.size), default=0.0)


def _rows(A, b, n, what):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if A.shape[1] != n or A.shape[0] != b.size:
        raise QpError(f"{what} rows have shape {A.shape} with {b.size} right-hand sides; n = {n}")
    return A, b


@dataclass
class QpSolution:
    z: np.ndarray
    obj: float
    status: str
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_lb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    gap: float = np.inf
    violation_bound: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_certificate(p: QpProblem, sol: QpSolution) -> tuple:
    """Scaled (primal infeasibility, dual infeasibility, complementarity) at ``sol``.

    Recomputed from scratch, so it can be used to audit any returned point.
    """
    z = sol.z
    scale = p.data_scale()
    prim = [0.0]
    if p.A_eq.size:
        prim.append(np.abs(p.A_eq @ z - p.b_eq).max())
    slack_in = p.b_in - p.A_in @ z
    if slack_in.size:
        prim.append(max(0.0, -slack_in.min()))
    fl, fu = np.isfinite(p.lb), np.isfinite(p.ub)
    if fl.any():
        prim.append(max(0.0, (p.lb[fl] - z[fl]).max()))
    if fu.any():
        prim.append(max(0.0, (z[fu] - p.ub[fu]).max()))
    grad = p.Q @ z + p.c + p.A_eq.T @ sol.y_eq + p.A_in.T @ sol.y_in
    grad -= _scatter(p.n, fl, sol.y_lb)
    grad += _scatter(p.n, fu, sol.y_ub)
    dual = np.abs(grad).max()
    neg = [0.0]
    for y in (sol.y_in, sol.y_lb, sol.y_ub):
        if y.size:
            neg.append(max(0.0, -y.min()))
    comp = [0.0]
    if slack_in.size:
        comp.append(np.abs(sol.y_in * slack_in).max())
    if fl.any():
        comp.append(np.abs(sol.y_lb * (z[fl] - p.lb[fl])).max())
    if fu.any():
        comp.append(np.abs(sol.y_ub * (p.ub[fu] - z[fu])).max())
    return max(prim) / scale, max(dual, max(neg)) / scale, max(comp) / scale


def _scatter(n, mask, vals):
    out = np.zeros(n)
    out[mask] = vals
    return out


class _Ipm:
    """Internal state of one interior-point run.

    Inequalities are ``G z <= h`` with ``G = [A_in; I_ub; -I_lb]``; only
    the general rows are stored densely.
    """

    def __init__(self, p: QpProblem, max_iter: int, tol: float):
        self.p = p
        self.max_iter = max_iter
        self.tol = tol
        n = p.n
        self.iu = np.flatnonzero(np.isfinite(p.ub))
        self.il = np.flatnonzero(np.isfinite(p.lb))
        self.mg = p.A_in.shape[0]
        self.h = np.concatenate([p.b_in, p.ub[self.iu], -p.lb[self.il]])
        self.m = self.h.size
        self.scale = p.data_scale()
        q_diag = np.abs(np.diag(p.Q))
        self.reg = 1e-10 * (1.0 + q_diag.sum() / n)
        self.dual_reg = 1e-12 * self.scale

    def G(self, z):
        return np.concatenate([self.p.A_in @ z, z[self.iu], -z[self.il]])

    def GT(self, v):
        mg, nu = self.mg, self.iu.size
        out = self.p.A_in.T @ v[:mg]
        np.add.at(out, self.iu, v[mg:mg + nu])
        np.subtract.at(out, self.il, v[mg + nu:])
        return out

    def normal_matrix(self, w):
        p, mg, nu = self.p, self.mg, self.iu.size
        M = p.Q.copy()
        if mg:
            Aw = p.A_in * w[:mg, None]
            M += p.A_in.T @ Aw
        diag = np.zeros(p.n)
        np.add.at(diag, self.iu, w[mg:mg + nu])
        np.add.at(diag, self.il, w[mg + nu:])
        M[np.diag_indices_from(M)] += diag
        return M

    def factor(self, w):
        M = self.normal_matrix(w)
        reg = self.reg
        if not np.all(np.isfinite(M)):
            raise QpError("normal matrix has non-finite entries")
        for _ in range(8):
            try:
                Mc = M.copy()
                Mc[np.diag_indices_from(Mc)] += reg
                L = sla.cho_factor(Mc, lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                reg *= 100.0
        else:
            raise QpError("normal matrix is not positive definite; Q may be indefinite")
        A = self.p.A_eq
        if A.shape[0] == 0:
            return L, None, None
        MinvAT = sla.cho_solve(L, A.T, check_finite=False)
        S = A @ MinvAT
        S[np.diag_indices_from(S)] += self.dual_reg * (1.0 + np.abs(np.diag(S)).max())
        try:
            Sf = sla.cho_factor(S, lower=True, check_finite=False)
            return L, MinvAT, ("chol", Sf)
        except np.linalg.LinAlgError:
            return L, MinvAT, ("lu", sla.lu_factor(S, check_finite=False))

    @staticmethod
    def _schur_solve(Sf, r):
        kind, f = Sf
        if kind == "chol":
            return sla.cho_solve(f, r, check_finite=False)
        return sla.lu_solve(f, r, check_finite=False)

    def solve_newton(self, fac, r1, r_eq):
        """Solve ``M dz + A'dy = r1, A dz = r_eq`` with ``fac = factor(w)``."""
        L, MinvAT, Sf = fac
        Minv_r1 = sla.cho_solve(L, r1, check_finite=False)
        if Sf is None:
            return Minv_r1, np.zeros(0)
        dy = self._schur_solve(Sf, self.p.A_eq @ Minv_r1 - r_eq)
        return Minv_r1 - MinvAT @ dy, dy

    def start(self):
        p = self.p
        n = p.n
        fac = self.factor(np.ones(self.m))
        z, _ = self.solve_newton(fac, -p.c + self.GT(self.h), p.b_eq)
        s = self.h - self.G(z)
        lam = -s.copy()
        if self.m:
            a_p = -s.min()
            if a_p >= -1e-8:
                s = s + 1.0 + a_p
            a_d = -lam.min()
            if a_d >= -1e-8:
                lam = lam + 1.0 + a_d
            s = np.maximum(s, 1e-4)
            lam = np.maximum(lam, 1e-4)
        y = np.zeros(p.A_eq.shape[0])
        return z, s, lam, y

    def residuals(self, z, s, lam, y):
        p = self.p
        r_d = p.Q @ z + p.c + p.A_eq.T @ y + self.GT(lam)
        r_eq = p.A_eq @ z - p.b_eq
        r_in = self.G(z) + s - self.h
        return r_d, r_eq, r_in

    @staticmethod
    def _step(v, dv):
        neg = dv < 0
        if not neg.any():
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    def run(self):
        p = self.p
        z, s, lam, y = self.start()
        m = self.m
        best = None
        status = MAX_ITER
        it = 0
        for it in range(1, self.max_iter + 1):
            r_d, r_eq, r_in = self.residuals(z, s, lam, y)
            mu = float(s @ lam) / m if m else 0.0
            prim = max(np.abs(r_eq).max(initial=0.0), np.abs(r_in).max(initial=0.0)) / self.scale
            dual = np.abs(r_d).max() / self.scale
            gap = float(np.max(s * lam, initial=0.0)) / self.scale
            merit = max(prim, dual, gap)
            if best is None or merit < best[0]:
                best = (merit, it, z.copy(), s.copy(), lam.copy(), y.copy())
            if prim <= self.tol and dual <= self.tol and gap <= self.tol:
                status = OPTIMAL
                break
            if m and (np.abs(lam).max() > 1e14 * self.scale or np.abs(z).max() > 1e14 * self.scale):
                break
            if it - best[1] > 25:
                break
            if m == 0:
                fac = self.factor(np.zeros(0))
                dz, dy = self.solve_newton(fac, -r_d, -r_eq)
                z, y = z + dz, y + dy
                continue

            with np.errstate(over="ignore", divide="ignore"):
                w = np.minimum(lam / s, 1e20)
            try:
                fac = self.factor(w)
            except QpError:
                break

            def direction(rc):
                # rc is the target for  lam*ds + s*dlam
                r1 = -r_d - self.GT(w * r_in + rc / s)
                dz, dy = self.solve_newton(fac, r1, -r_eq)
                dlam = w * (self.G(dz) + r_in) + rc / s
                ds = (rc - s * dlam) / lam
                return dz, ds, dlam, dy

            dz_a, ds_a, dl_a, dy_a = direction(-s * lam)
            a_p = self._step(s, ds_a)
            a_d = self._step(lam, dl_a)
            mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dl_a)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            rc = -s * lam + sigma * mu - ds_a * dl_a
            dz, ds, dl, dy = direction(rc)
            a_p = min(1.0, 0.99 * self._step(s, ds))
            a_d = min(1.0, 0.99 * self._step(lam, dl))
            z = z + a_p * dz
            s = s + a_p * ds
            lam = lam + a_d * dl
            y = y + a_d * dy
            s = np.maximum(s, 1e-300)
            lam = np.maximum(lam, 1e-300)

        if status != OPTIMAL and best is not None:
            merit, _, z, s, lam, y = best[:6]
            if merit <= CERT_TOL:
                status = OPTIMAL
        return z, s, lam, y, status, it


def solve_qp(p: QpProblem, max_iter: int = MAX_ITERATIONS, tol: float = TOL) -> QpSolution:
    """Solve a convex QP; LPs are the special case ``Q = 0``.

    A returned ``optimal`` status means :func:`kkt_certificate` is below
    ``1e-8`` on every component. When the interior-point run fails, a
    phase-one LP decides between ``infeasible`` (with a certified lower
    bound on the total constraint violation) and ``max_iter``.
    """
    ipm = _Ipm(p, max_iter, tol)
    z, s, lam, y, status, it = ipm.run()
    mg, nu = ipm.mg, ipm.iu.size
    sol = QpSolution(
        z=z, obj=p.objective(z), status=status, y_eq=y,
        y_in=lam[:mg], y_ub=lam[mg:mg + nu], y_lb=lam[mg + nu:], iterations=it)
    sol.primal_residual, sol.dual_residual, sol.gap = kkt_certificate(p, sol)
    if status == OPTIMAL and max(sol.primal_residual, sol.dual_residual, sol.gap) > CERT_TOL:
        status = MAX_ITER
        sol.status = MAX_ITER
    if status != OPTIMAL:
        bound = violation_lower_bound(p)
        sol.violation_bound = bound
        if bound > CERT_TOL:
            sol.status = INFEASIBLE
        log.debug("QP ended with status %s after %d iterations", sol.status, it)
    return sol


def violation_lower_bound(p: QpProblem) -> float:
    """Certified lower bound on the minimum L1 constraint violation.

    Solves the always-feasible phase-one LP ``min 1'(e+ + e- + v)`` and
    returns its dual objective (zero when that LP itself fails).
    """
    n, me, mi = p.n, p.A_eq.shape[0], p.A_in.shape[0]
    fl, fu = np.isfinite(p.lb), np.isfinite(p.ub)
    # variables: z (free), e+ (me), e- (me), v (mi), bl (#lb), bu (#ub)
    nl, nu_ = int(fl.sum()), int(fu.sum())
    N = n + 2 * me + mi + nl + nu_
    c = np.concatenate([np.zeros(n), np.ones(2 * me + mi + nl + nu_)])
    A_eq = np.zeros((me, N))
    A_eq[:, :n] = p.A_eq
    A_eq[:, n:n + me] = np.eye(me)
    A_eq[:, n + me:n + 2 * me] = -np.eye(me)
    rows, rhs = [], []
    if mi:
        G = np.zeros((mi, N))
        G[:, :n] = p.A_in
        G[:, n + 2 * me:n + 2 * me + mi] = -np.eye(mi)
        rows.append(G)
        rhs.append(p.b_in)
    off = n + 2 * me + mi
    for j, idx in enumerate(np.flatnonzero(fl)):
        r = np.zeros(N)
        r[idx] = -1.0
        r[off + j] = -1.0
        rows.append(r[None, :])
        rhs.append([-p.lb[idx]])
    off += nl
    for j, idx in enumerate(np.flatnonzero(fu)):
        r = np.zeros(N)
        r[idx] = 1.0
        r[off + j] = -1.0
        rows.append(r[None, :])
        rhs.append([p.ub[idx]])
    lb = np.concatenate([np.full(n, -np.inf), np.zeros(N - n)])
    aux = QpProblem(None, c, A_eq, p.b_eq, np.vstack(rows) if rows else None,
                    np.concatenate(rhs) if rhs else None, lb=lb)
    ipm = _Ipm(aux, MAX_ITERATIONS, TOL)
    try:
        z, s, lam, y, status, _ = ipm.run()
    except QpError:
        return 0.0
    if status != OPTIMAL:
        return 0.0
    mg = ipm.mg
    # dual objective of the phase-one LP: -b_eq'y - h'lam
    dual_obj = -float(aux.b_eq @ y) - float(ipm.h @ lam)
    return max(0.0, min(dual_obj, float(c @ z)))


def simplex_constraints(d: int, mu=None, r0=None):
    """Rows of ``{1'u = 1, mu'u >= r0, u >= 0}`` in QpProblem form."""
    A_eq = np.ones((1, d))
    b_eq = np.ones(1)
    A_in = b_in = None
    if mu is not None and r0 is not None:
        A_in = -np.asarray(mu, dtype=float)[None, :]
        b_in = np.array([-float(r0)])
    return dict(A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=np.zeros(d))


def check_target_return(mu, r0) -> None:
    mu = np.asarray(mu, dtype=float)
    if r0 is not None and r0 > mu.max() + 1e-12:
        raise InfeasibleModel(
            f"target return infeasible: r0 = {r0:.6g} exceeds the largest expected return {mu.max():.6g}")


def solve_u_update(H, b_e, mu=None, r0=None, u0=None) -> PortfolioWeights:
    """Minimise ``1/2 u'Hu + b_e'u`` over the long-only simplex with a return floor.

    ``H`` is the assembled quadratic ``s1 R'R + s2 Y'Y`` (see
    :func:`u_update_hessian`). A feasible ``u0`` enables the warm-started
    active-set solver; the interior-point method is the fallback.
    """
    H = np.asarray(H, dtype=float)
    d = H.shape[0]
    check_target_return(mu if mu is not None else np.zeros(d), r0 if mu is not None else None)
    if u0 is not None:
        u = simplex_active_set(H, b_e, mu, r0, u0)
        if u is not None:
            return PortfolioWeights(u, mu, r0)
    sol = solve_qp(u_update_problem(H, b_e, mu, r0))
    if sol.status == INFEASIBLE:
        raise InfeasibleModel("target return infeasible: portfolio set is empty")
    if sol.status != OPTIMAL:
        log.warning("u-update QP stopped at %s (residuals %.2e/%.2e/%.2e)",
                    sol.status, sol.primal_residual, sol.dual_residual, sol.gap)
    return PortfolioWeights(clean_simplex(sol.z), mu, r0)


def u_update_problem(H, b_e, mu=None, r0=None) -> QpProblem:
    """Assemble the u-update QP, rescaled so the largest coefficient is one.

    With small penalties ``H`` can be ~1e-6, which would leave the
    absolute IPM tolerance meaningless; rescaling keeps the minimiser.
    """
    H = np.asarray(H, dtype=float)
    b_e = np.asarray(b_e, dtype=float)
    scale = max(np.abs(H).max(), np.abs(b_e).max())
    if scale > 0:
        H, b_e = H / scale, b_e / scale
    return QpProblem(H, b_e, **simplex_constraints(H.shape[0], mu, r0))


def clean_simplex(u):
    """Clip the tiny negative entries an interior-point iterate may carry and renormalise."""
    u = np.where(u < 0, 0.0, u)
    return u / u.sum()


def u_update_hessian(R, Y, sigma1, sigma2):
    H = sigma1 * (R.T @ R)
    if Y is not None:
        H = H + sigma2 * (Y.T @ Y)
    return 0.5 * (H + H.T)


def simplex_active_set(H, b, mu, r0, u0, max_iter=None, tol=1e-10):
    """Primal active-set method for the u-update QP, warm-started at a feasible ``u0``.

    Requires ``H`` positive definite on the free coordinates. Returns
    ``None`` when ``u0`` is infeasible, a working-set system is singular,
    the iteration limit is hit or the final KKT check fails, so callers
    can fall back to :func:`solve_qp`.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b.size
    scale = max(np.abs(H).max(), np.abs(b).max(), 1e-300)
    H, b = H / scale, b / scale
    has_ret = mu is not None and r0 is not None
    mu = np.asarray(mu, dtype=float) if has_ret else np.zeros(d)
    u = np.asarray(u0, dtype=float).copy()
    if u.min() < -tol or abs(u.sum() - 1.0) > 1e-9 or (has_ret and mu @ u < r0 - 1e-9):
        return None
    u = np.maximum(u, 0.0)
    ret_tol = tol * max(1.0, np.abs(mu).max())
    fixed = u <= 0.0
    ret_active = has_ret and mu @ u - r0 <= ret_tol
    for _ in range(max_iter or 10 * d + 20):
        F = np.flatnonzero(~fixed)
        rows = [np.ones(F.size)] + ([mu[F]] if ret_active else [])
        A = np.array(rows)
        k = A.shape[0]
        K = np.zeros((F.size + k, F.size + k))
        K[:F.size, :F.size] = H[np.ix_(F, F)]
        K[:F.size, F.size:] = A.T
        K[F.size:, :F.size] = A
        g = H @ u + b
        rhs = np.concatenate([-g[F], np.zeros(k)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        p = np.zeros(d)
        p[F] = sol[:F.size]
        if np.abs(p).max() <= 1e-13:
            # multipliers: g = -y0 1 - yr mu + nu  (nu >= 0 on fixed bounds, yr <= 0)
            y = -sol[F.size:]
            nu = g - y[0] - (y[1] * mu if ret_active else 0.0)
            cand = [(nu[i], i) for i in np.flatnonzero(fixed)]
            if ret_active:
                cand.append((y[1] * np.linalg.norm(mu), -1))
            worst = min(cand, default=(0.0, None))
            if worst[0] >= -1e-10:
                return u / u.sum()
            if worst[1] == -1:
                ret_active = False
            else:
                fixed[worst[1]] = False
            continue
        step, block = 1.0, None
        neg = np.flatnonzero((p < 0) & ~fixed)
        if neg.size:
            ratios = -u[neg] / p[neg]
            j = int(np.argmin(ratios))
            if ratios[j] < step:
                step, block = ratios[j], neg[j]
        if has_ret and not ret_active:
            dr = mu @ p
            if dr < 0:
                r = (mu @ u - r0) / -dr
                if r < step:
                    step, block = r, -1
        u = u + step * p
        if block is None:
            continue
        if block == -1:
            ret_active = True
        else:
            u[block] = 0.0
            fixed[block] = True
    return None
