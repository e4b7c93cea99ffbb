"""Multi-asset Kou double-exponential jump-diffusion return simulator.

Each day is sampled exactly from the closed-form solution of the SDE::

    gross_i = exp((mu_i - sigma_i^2/2) dt + sigma_i sqrt(dt) Z_i) * exp(sum_k V_ik)

with ``Z ~ N(0, corr)``, ``N_i ~ Poisson(lambda_i dt)`` jumps per day and
log jump sizes ``V`` that are ``Exp(eta_u)`` with probability ``p`` and
``-Exp(eta_d)`` otherwise.

Random streams
--------------
All draws come from numpy's ``Philox`` (4x64, 10 rounds) counter-based
generator keyed by the user seed. Independent streams are separated by
the high counter words: stream ``(kind, asset)`` starts at counter
``[0, 0, asset, kind]`` with ``kind`` 0 for the Gaussian diffusion, 1
for jump counts and 2 for jump sizes. Gaussians for day ``t`` are the
``t``-th row of a ``(n_days, d)`` standard-normal draw, so a path with
``lambda = 0`` is the pure lognormal path of the same seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .scenario_data import ScenarioPanel

DIFFUSION, COUNTS, SIZES = 0, 1, 2
EIG_CLIP = 1e-12


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class KouParams:
    mu: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    p: np.ndarray
    eta_u: np.ndarray
    eta_d: np.ndarray
    corr: np.ndarray
    dt: float = 1.0 / 252.0

    def __post_init__(self):
        arrs = {}
        for name in ("mu", "sigma", "lam", "p", "eta_u", "eta_d"):
            arrs[name] = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
        d = arrs["mu"].size
        for name, a in arrs.items():
            if a.size != d:
                raise SimulationError(f"{name} has {a.size} entries, expected {d}")
            if not np.all(np.isfinite(a)):
                raise SimulationError(f"{name} has non-finite entries")
            object.__setattr__(self, name, a)
        if np.any(arrs["sigma"] < 0) or np.any(arrs["lam"] < 0):
            raise SimulationError("sigma and lambda must be nonnegative")
        if np.any((arrs["p"] < 0) | (arrs["p"] > 1)):
            raise SimulationError("jump probabilities p must lie in [0, 1]")
        if np.any(arrs["eta_u"] <= 1):
            raise SimulationError("eta_u must exceed 1 for a finite mean up-jump")
        if np.any(arrs["eta_d"] <= 0):
            raise SimulationError("eta_d must be positive")
        if not self.dt > 0:
            raise SimulationError("dt must be positive")
        corr = np.atleast_2d(np.asarray(self.corr, dtype=float))
        if corr.shape != (d, d):
            raise SimulationError(f"correlation matrix has shape {corr.shape}, expected {(d, d)}")
        if not np.allclose(corr, corr.T, atol=1e-12) or not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            raise SimulationError("correlation matrix must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(corr).min() < -1e-10:
            raise SimulationError("correlation matrix is not positive semidefinite")
        object.__setattr__(self, "corr", corr)

    @property
    def d(self) -> int:
        return self.mu.size

    def jump_mean(self) -> np.ndarray:
        """``E[e^V] - 1`` per asset."""
        return (self.p * self.eta_u / (self.eta_u - 1.0)
                + (1.0 - self.p) * self.eta_d / (self.eta_d + 1.0) - 1.0)

    def expected_gross(self) -> np.ndarray:
        return np.exp((self.mu + self.lam * self.jump_mean()) * self.dt)

    def to_dict(self) -> dict:
        assets = [dict(mu=float(a), sigma=float(b), **{"lambda": float(c)}, p=float(e),
                       eta_u=float(f), eta_d=float(g))
                  for a, b, c, e, f, g in zip(self.mu, self.sigma, self.lam, self.p,
                                              self.eta_u, self.eta_d)]
        return {"assets": assets, "correlation": self.corr.tolist(), "dt": self.dt}

    @classmethod
    def from_dict(cls, doc: dict) -> "KouParams":
        try:
            assets = doc["assets"]
            get = lambda k: [a[k] for a in assets]
            return cls(get("mu"), get("sigma"), get("lambda"), get("p"), get("eta_u"),
                       get("eta_d"), doc["correlation"], doc.get("dt", 1.0 / 252.0))
        except (KeyError, TypeError) as exc:
            raise SimulationError(f"malformed parameter document: missing {exc}") from exc


def corr_factor(corr) -> np.ndarray:
    """Symmetric square-root factor ``F`` with ``F F' = corr`` (eigenvalues clipped at 0)."""
    vals, vecs = np.linalg.eigh(np.asarray(corr, dtype=float))
    vals = np.where(vals < EIG_CLIP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _stream(seed: int, kind: int, asset: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, asset, kind]))


def simulate_returns(params: KouParams, n_days: int, seed: int) -> np.ndarray:
    """Simulate ``n_days`` of simple returns, shape ``(n_days, d)``."""
    if n_days < 1:
        raise SimulationError("n_days must be at least 1")
    d, dt = params.d, params.dt
    Z = _stream(seed, DIFFUSION).standard_normal((n_days, d)) @ corr_factor(params.corr).T
    log_gross = (params.mu - 0.5 * params.sigma ** 2) * dt + params.sigma * np.sqrt(dt) * Z
    for i in range(d):
        if params.lam[i] == 0:
            continue
        counts = _stream(seed, COUNTS, i).poisson(params.lam[i] * dt, n_days)
        total = int(counts.sum())
        if total == 0:
            continue
        g = _stream(seed, SIZES, i)
        up = g.random(total) < params.p[i]
        mag = g.standard_exponential(total)
        V = np.where(up, mag / params.eta_u[i], -mag / params.eta_d[i])
        day = np.repeat(np.arange(n_days), counts)
        log_gross[:, i] += np.bincount(day, weights=V, minlength=n_days)
    return np.expm1(log_gross)


def build_panel(normal: KouParams, stressed: KouParams, m1: int, m2: int, window_len: int,
                seed: int, asset_names=None) -> ScenarioPanel:
    """Rolling-window panel: ``m1`` normal and ``m2`` stressed windows of ``window_len`` days.

    Block ``s`` of each regime is the window ending ``s`` days before the
    end of that regime's path, so adjacent blocks share ``window_len - 1``
    rows. The stressed path uses ``seed + 1``.
    """
    if window_len < 1 or m1 < 1 or m2 < 1:
        raise SimulationError("window_len, m1 and m2 must be at least 1")
    if normal.d != stressed.d:
        raise SimulationError("normal and stressed parameters cover different asset counts")

    def windows(path, m):
        L = path.shape[0]
        return [path[L - window_len - s:L - s] for s in range(m)]

    npath = simulate_returns(normal, window_len + m1 - 1, seed)
    spath = simulate_returns(stressed, window_len + m2 - 1, seed + 1)
    return ScenarioPanel(tuple(windows(npath, m1) + windows(spath, m2)), m1, m2, asset_names)


def load_params(path) -> KouParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return KouParams.from_dict(doc)


def _presets() -> dict:
    text = resources.files("baselopt").joinpath("data/presets.json").read_text(encoding="utf-8")
    return json.loads(text)


def preset(name: str, d: int) -> KouParams:
    """Illustrative ``normal``/``stressed`` parameters expanded to ``d`` assets.

    Asset templates are cycled and every off-diagonal correlation is the
    preset's constant ``pairwise_correlation``.
    """
    presets = _presets()
    if name not in presets:
        raise SimulationError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    doc = presets[name]
    templates = doc["assets"]
    assets = [templates[i % len(templates)] for i in range(d)]
    rho = doc["pairwise_correlation"]
    corr = np.full((d, d), rho)
    np.fill_diagonal(corr, 1.0)
    return KouParams.from_dict({"assets": assets, "correlation": corr.tolist(), "dt": doc.get("dt", 1 / 252)})
