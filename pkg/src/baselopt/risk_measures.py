"""Sample risk measures on scenario loss vectors.

All functions take losses (positive = money lost). Order statistics use
a stable sort so that ties are broken by original position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario_data import LossVector

_SNAP = 1e-9


@dataclass(frozen=True)
class RiskParams:
    """Confidence levels and Basel multipliers.

    ``alpha``/``k``/``ell`` parametrise Basel 2.5 (and plain VaR/CVaR);
    ``alpha3`` is the CVaR level of the Basel III measure. ``ell`` is
    shared by both Basel measures.
    """

    alpha: float = 0.99
    k: float = 3.0
    ell: float = 3.0
    alpha3: float = 0.98

    def __post_init__(self):
        for name in ("alpha", "alpha3"):
            a = getattr(self, name)
            if not 0.0 < a < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {a}")
        for name in ("k", "ell"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def with_alpha(self, alpha: float) -> "RiskParams":
        return RiskParams(alpha, self.k, self.ell, self.alpha3)


def alpha_n(alpha: float, n: int) -> float:
    """``alpha * n``, snapped to the nearest integer when within rounding noise."""
    q = alpha * n
    r = round(q)
    if abs(q - r) <= _SNAP * max(1.0, q):
        return float(r)
    return q


def tail_index(alpha: float, n: int) -> int:
    """``ceil(alpha * n)`` clipped to ``[1, n]``.

    ``0.8 * 5`` evaluates to ``4.000000000000001`` in binary floating point;
    the snap in :func:`alpha_n` keeps that at 4 instead of 5.
    """
    if n < 1:
        raise ValueError("need at least one observation")
    return min(n, max(1, math.ceil(alpha_n(alpha, n))))


def _vec(x) -> np.ndarray:
    if isinstance(x, LossVector):
        x = x.values
    x = np.ravel(np.asarray(x, dtype=float))
    if x.size == 0:
        raise ValueError("empty loss vector")
    return x


def sort_order(x) -> np.ndarray:
    """Stable ascending permutation of ``x``."""
    return np.argsort(x, kind="stable")


def order_stat(x, p: int) -> float:
    """The ``p``-th smallest entry of ``x`` (1-based)."""
    x = _vec(x)
    if not 1 <= p <= x.size:
        raise ValueError(f"order index {p} outside 1..{x.size}")
    return float(np.sort(x, kind="stable")[p - 1])


def variance(x) -> float:
    x = _vec(x)
    n = x.size
    return float(x @ x / n - x.sum() ** 2 / n ** 2)


def var_at(x, alpha: float) -> float:
    """Sample value-at-risk: the ``ceil(alpha n)``-th smallest loss."""
    x = _vec(x)
    return order_stat(x, tail_index(alpha, x.size))


def cvar_weights(alpha: float, n: int) -> np.ndarray:
    """Weights on the sorted losses whose dot product is the sample CVaR."""
    if not alpha < 1.0:
        raise ValueError("CVaR needs alpha < 1")
    p = tail_index(alpha, n)
    an = alpha_n(alpha, n)
    denom = n - an          # (1 - alpha) n, exact when alpha n snaps to an integer
    w = np.zeros(n)
    w[p - 1] = (p - an) / denom
    w[p:] = 1.0 / denom
    return w


def cvar_at(x, alpha: float) -> float:
    """Sample conditional value-at-risk (expected shortfall)."""
    x = _vec(x)
    return float(cvar_weights(alpha, x.size) @ np.sort(x, kind="stable"))


def _losses(x: LossVector) -> LossVector:
    if not isinstance(x, LossVector):
        raise TypeError("Basel measures need a LossVector carrying its block partition")
    return x


def _basel_pair(first: float, block_values, mult: float) -> float:
    return max(first, mult / len(block_values) * float(np.sum(block_values)))


def basel2(x: LossVector, params: RiskParams) -> float:
    """Normal-market Basel charge: max of current VaR and ``k`` times mean VaR."""
    x = _losses(x)
    if x.m1 < 1:
        raise ValueError("Basel II charge needs at least one normal block")
    vars_ = [var_at(b, params.alpha) for b in x.normal_blocks()]
    return _basel_pair(vars_[0], vars_, params.k)


def basel25(x: LossVector, params: RiskParams) -> float:
    x = _losses(x)
    if x.m1 < 1 or x.m2 < 1:
        raise ValueError("Basel 2.5 needs normal and stressed blocks")
    stressed = [var_at(b, params.alpha) for b in x.stressed_blocks()]
    return basel2(x, params) + _basel_pair(stressed[0], stressed, params.ell)


def basel3(x: LossVector, params: RiskParams) -> float:
    """Stressed-CVaR capital charge; normal blocks do not enter."""
    x = _losses(x)
    if x.m2 < 1:
        raise ValueError("Basel III needs at least one stressed block")
    cvars = [cvar_at(b, params.alpha3) for b in x.stressed_blocks()]
    return _basel_pair(cvars[0], cvars, params.ell)


def evaluate(name: str, x, params: RiskParams) -> float:
    """Dispatch by measure name (variance, var, cvar, basel2, basel25, basel3)."""
    if name == "variance":
        return variance(x)
    if name == "var":
        return var_at(x, params.alpha)
    if name == "cvar":
        return cvar_at(x, params.alpha)
    if name == "basel2":
        return basel2(x, params)
    if name == "basel25":
        return basel25(x, params)
    if name == "basel3":
        return basel3(x, params)
    raise ValueError(f"unknown risk measure {name!r}")


def block_tail_indices(partition, alpha: float) -> list:
    """``p_s = ceil(alpha n_s)`` for every block size."""
    return [tail_index(alpha, n) for n in partition]
