"""Scenario panels, portfolio losses and the panel CSV format.

A panel stacks per-scenario blocks of return observations (rows are
observations, columns are assets). Normal-market blocks come first and
stressed blocks last; everything downstream indexes blocks through
:attr:`ScenarioPanel.offsets`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

NORMAL = "normal"
STRESSED = "stressed"


class PanelError(ValueError):
    """Raised for malformed panels or unreadable panel files."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScenarioPanel:
    """Stacked scenario blocks with normal/stressed roles.

    Parameters
    ----------
    blocks : sequence of (n_s, d) arrays
        Simple returns per period. Blocks ``0..m1-1`` are normal and
        ``m1..m1+m2-1`` are stressed.
    m1, m2 : int
        Number of normal and stressed blocks.
    asset_names : sequence of str, optional
    """

    blocks: tuple
    m1: int
    m2: int
    asset_names: tuple | None = None
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        blocks = tuple(_frozen(np.atleast_2d(b)) for b in self.blocks)
        if not blocks:
            raise PanelError("panel has no blocks")
        if self.m1 < 0 or self.m2 < 0 or self.m1 + self.m2 != len(blocks):
            raise PanelError(
                f"m1 + m2 = {self.m1 + self.m2} does not match {len(blocks)} blocks")
        d = blocks[0].shape[1]
        if d < 1:
            raise PanelError("blocks need at least one asset column")
        for s, b in enumerate(blocks):
            if b.ndim != 2 or b.shape[1] != d:
                raise PanelError(f"block {s} has shape {b.shape}, expected (*, {d})")
            if b.shape[0] < 1:
                raise PanelError(f"block {s} is empty")
            if not np.all(np.isfinite(b)):
                raise PanelError(f"block {s} contains non-finite entries")
        names = None
        if self.asset_names is not None:
            names = tuple(str(a) for a in self.asset_names)
            if len(names) != d:
                raise PanelError(f"{len(names)} asset names for {d} columns")
        offsets = np.concatenate([[0], np.cumsum([b.shape[0] for b in blocks])])
        offsets.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "asset_names", names)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def from_matrix(cls, R, sizes, m1, m2, asset_names=None):
        """Split a stacked ``(n, d)`` matrix into blocks of the given sizes."""
        R = np.asarray(R, dtype=float)
        cuts = np.cumsum(sizes)[:-1]
        if int(np.sum(sizes)) != R.shape[0]:
            raise PanelError(f"block sizes sum to {int(np.sum(sizes))}, matrix has {R.shape[0]} rows")
        return cls(tuple(np.split(R, cuts)), m1, m2, asset_names)

    @property
    def d(self) -> int:
        return self.blocks[0].shape[1]

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> tuple:
        return tuple(b.shape[0] for b in self.blocks)

    @property
    def partition(self) -> Partition:
        return Partition(self.sizes, self.m1, self.m2)

    @property
    def roles(self) -> tuple:
        return (NORMAL,) * self.m1 + (STRESSED,) * self.m2

    @property
    def matrix(self) -> np.ndarray:
        """The stacked ``(n, d)`` return matrix."""
        return np.vstack(self.blocks)

    def block(self, s: int) -> np.ndarray:
        return self.blocks[s]

    def column_means(self) -> np.ndarray:
        return self.matrix.mean(axis=0)


class Partition(NamedTuple):
    """Block sizes of a stacked vector and how many blocks are normal/stressed."""

    sizes: tuple
    m1: int
    m2: int

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def n(self) -> int:
        return int(sum(self.sizes))


@dataclass(frozen=True)
class PortfolioWeights:
    """Long-only weights on the simplex, optionally tied to a return target."""

    u: np.ndarray
    mu: np.ndarray | None = None
    r0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(np.ravel(self.u)))
        if self.mu is not None:
            object.__setattr__(self, "mu", _frozen(np.ravel(self.mu)))

    @property
    def expected_return(self) -> float | None:
        return None if self.mu is None else float(self.mu @ self.u)

    def is_feasible(self, tol: float = 1e-9) -> bool:
        u = self.u
        ok = abs(u.sum() - 1.0) <= tol and bool(np.all(u >= -1e-12))
        if self.mu is not None and self.r0 is not None:
            ok = ok and self.mu @ u >= self.r0 - tol
        return ok


@dataclass(frozen=True)
class LossVector:
    """Stacked portfolio losses, remembering the block partition."""

    values: np.ndarray
    partition: tuple
    m1: int = 1
    m2: int = 0

    def __post_init__(self):
        values = _frozen(np.ravel(self.values))
        partition = tuple(int(p) for p in self.partition)
        if sum(partition) != values.size:
            raise PanelError(
                f"loss vector of length {values.size} does not match partition total {sum(partition)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "partition", partition)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.partition)]).astype(int)

    @property
    def layout(self) -> Partition:
        return Partition(self.partition, self.m1, self.m2)

    def block(self, s: int) -> np.ndarray:
        o = self.offsets
        return self.values[o[s]:o[s + 1]]

    def normal_blocks(self) -> list:
        return [self.block(s) for s in range(self.m1)]

    def stressed_blocks(self) -> list:
        return [self.block(s) for s in range(self.m1, self.m1 + self.m2)]

    def __len__(self):
        return self.values.size


def loss_vector(panel: ScenarioPanel, u) -> LossVector:
    """Portfolio losses ``-R u`` for every observation, block by block."""
    u = u.u if isinstance(u, PortfolioWeights) else np.ravel(np.asarray(u, dtype=float))
    if u.size != panel.d:
        raise PanelError(f"weights have length {u.size}, panel has {panel.d} assets")
    values = np.concatenate([-(b @ u) for b in panel.blocks])
    return LossVector(values, panel.sizes, panel.m1, panel.m2)


def dedup_rows(panel) -> np.ndarray:
    """Stack all block rows and drop exact duplicates, keeping first occurrences.

    Rows compare by their bit patterns, so ``0.0`` and ``-0.0`` count as
    different rows.
    """
    R = panel.matrix if isinstance(panel, ScenarioPanel) else np.atleast_2d(np.asarray(panel, dtype=float))
    R = np.ascontiguousarray(R)
    keys = R.view(np.dtype((np.void, R.dtype.itemsize * R.shape[1]))).ravel()
    _, first = np.unique(keys, return_index=True)
    return R[np.sort(first)].copy()


def load_panel_csv(path, m1: int, m2: int) -> ScenarioPanel:
    """Read a panel CSV (``scenario_id,<asset_1>,...,<asset_d>``).

    Rows sharing a ``scenario_id`` must be contiguous; blocks are created
    in file order and the first ``m1`` become the normal blocks. An
    optional ``date`` column right after ``scenario_id`` is ignored.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PanelError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise PanelError("no observations")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "scenario_id":
        raise PanelError("header must start with 'scenario_id'")
    first_asset = 2 if len(header) > 1 and header[1] == "date" else 1
    assets = header[first_asset:]
    if not assets:
        raise PanelError("header names no asset columns")
    body = rows[1:]
    if not body:
        raise PanelError("no observations")

    ids, data = [], []
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise PanelError(f"ragged row {r}: {len(row)} fields, expected {len(header)}")
        try:
            vals = [float(x) for x in row[first_asset:]]
        except ValueError as exc:
            raise PanelError(f"parse failure at row {r}: {exc}") from exc
        if not all(np.isfinite(vals)):
            raise PanelError(f"non-finite entry at row {r}")
        ids.append(row[0].strip())
        data.append(vals)

    order, seen = [], set()
    for i, sid in enumerate(ids):
        if i == 0 or sid != ids[i - 1]:
            if sid in seen:
                raise PanelError(f"scenario_id {sid!r} is not contiguous")
            seen.add(sid)
            order.append(i)
    if len(order) != m1 + m2:
        raise PanelError(f"file has {len(order)} scenarios, expected m1 + m2 = {m1 + m2}")
    data = np.array(data, dtype=float)
    bounds = order + [len(ids)]
    blocks = [data[bounds[s]:bounds[s + 1]] for s in range(len(order))]
    return ScenarioPanel(tuple(blocks), m1, m2, tuple(assets))


def write_panel_csv(panel: ScenarioPanel, path, scenario_ids: Sequence[str] | None = None) -> None:
    """Write a panel with 17 significant digits so that reading it back is exact."""
    names = panel.asset_names or tuple(f"asset_{j + 1}" for j in range(panel.d))
    if scenario_ids is None:
        scenario_ids = [f"s{s + 1}" for s in range(panel.m)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", *names])
        for sid, block in zip(scenario_ids, panel.blocks):
            for row in block:
                w.writerow([sid, *(f"{v:.17g}" for v in row)])
