"""Order meta environments by how useful they look for an unseen target.

A cheap surrogate is fitted on each meta environment and scored on every other
one; per tested environment the surrogates are ranked with Scott-Knott, and
the environments are ordered by mean rank so the most useful one trains last.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import EnvironmentDataset, SystemDataset, env_key
from .learners import predict, train_linear
from .stats import MreSeries, mre, scott_knott

SUBSAMPLE_FRACTION = 0.8


@dataclass(frozen=True, eq=False)
class MreMatrix:
    """Repeated cross-environment MREs; ``cells[(i, j)]`` scores model ``i`` on env ``j``."""

    ids: tuple
    cells: dict
    repeats: int

    def __post_init__(self):
        for i in self.ids:
            if (i, i) in self.cells:
                raise ValueError("diagonal cells must stay empty")
            for j in self.ids:
                if i != j and len(self.cells[(i, j)]) != self.repeats:
                    raise ValueError(f"cell ({i}, {j}) needs {self.repeats} values")

    def column(self, j):
        return [(i, self.cells[(i, j)]) for i in self.ids if i != j]

    def mean(self, i, j) -> float:
        return float(np.mean(self.cells[(i, j)]))


@dataclass(frozen=True, eq=False)
class RankMatrix:
    ids: tuple
    ranks: dict
    mean_ranks: dict
    mean_mres: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SequencePlan:
    order: tuple
    mean_ranks: dict = field(default_factory=dict)
    target: Optional[str] = None
    surrogate: str = "linear"
    mean_mres: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if len(set(self.order)) != len(self.order):
            raise ValueError("a sequence plan cannot repeat an environment")

    def to_dict(self):
        return {"target": self.target, "order": list(self.order),
                "mean_ranks": dict(self.mean_ranks), "mean_mres": dict(self.mean_mres),
                "surrogate": self.surrogate}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["order"]), dict(d.get("mean_ranks", {})), d.get("target"),
                   d.get("surrogate", "linear"), dict(d.get("mean_mres", {})))


def _surrogate_predict(fit: Callable, env: EnvironmentDataset):
    model = fit(env.X, env.y)
    return lambda X: predict(model, X)


def assess_environments(envs: Sequence[EnvironmentDataset], repeats: int = 30, seed: int = 0,
                        surrogate: Callable = train_linear) -> MreMatrix:
    """Cross-environment MRE matrix for an explicit list of meta environments.

    Every cell uses the same ``repeats`` random 80% subsamples, drawn from
    ``seed`` alone, so identical environments produce identical cells.
    """
    if len(envs) < 2:
        raise ValueError("assessing usefulness needs at least 2 meta environments")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    ids = tuple(e.env_id for e in envs)
    models = {e.env_id: _surrogate_predict(surrogate, e) for e in envs}
    cells, subsets = {}, {}
    for env_j in envs:
        n = len(env_j)
        if n not in subsets:
            k = max(1, int(round(SUBSAMPLE_FRACTION * n)))
            rng = np.random.default_rng([seed & 0xFFFFFFFF, n])
            subsets[n] = [rng.permutation(n)[:k] for _ in range(repeats)]
        for i in ids:
            if i == env_j.env_id:
                continue
            pred = models[i](env_j.X)
            cells[(i, env_j.env_id)] = np.array(
                [mre(env_j.y[idx], pred[idx]) for idx in subsets[n]])
    return MreMatrix(ids, cells, repeats)


def assess_usefulness(system: SystemDataset, target_env_id: str, repeats: int = 30,
                      seed: int = 0, surrogate: Callable = train_linear) -> MreMatrix:
    return assess_environments(system.meta_envs(target_env_id), repeats, seed, surrogate)


def rank_environments(A: MreMatrix, seed: int = 0, **sk_options) -> RankMatrix:
    """Scott-Knott rank of every row within each tested column, then mean rank per row.

    ``mean_mres`` holds each row's average cell mean, used to break rank ties.
    """
    ranks = {}
    for j in A.ids:
        column = A.column(j)
        result = scott_knott([MreSeries(i, v) for i, v in column],
                             seed=(seed + env_key(j)) & 0xFFFFFFFF, **sk_options)
        for i, _ in column:
            ranks[(i, j)] = result.ranks[i]
    mean_ranks, mean_mres = {}, {}
    for i in A.ids:
        others = [j for j in A.ids if j != i]
        mean_ranks[i] = float(np.mean([ranks[(i, j)] for j in others]))
        mean_mres[i] = float(np.mean([A.mean(i, j) for j in others]))
    return RankMatrix(A.ids, ranks, mean_ranks, mean_mres)


def order_by_rank(ids: Sequence[str], mean_ranks: dict, mean_mres: Optional[dict] = None) -> tuple:
    """Worst mean rank first, best last.

    Equal mean ranks are ordered by mean cross-environment MRE (lower trains
    later), then by env id. With two meta environments every rank is 1, so the
    MRE is the only signal left.
    """
    mean_mres = mean_mres or {}
    return tuple(sorted(ids, key=lambda i: (-mean_ranks[i], -mean_mres.get(i, 0.0), i)))


def select_environments(envs: Sequence[EnvironmentDataset], target: Optional[str] = None,
                        repeats: int = 30, seed: int = 0, surrogate: Callable = train_linear,
                        **sk_options) -> SequencePlan:
    ids = [e.env_id for e in envs]
    if not ids:
        raise ValueError("sequence selection needs at least one meta environment")
    name = getattr(surrogate, "__name__", "custom").replace("train_", "")
    if len(ids) == 1:
        return SequencePlan((ids[0],), {ids[0]: 1.0}, target, name)
    A = assess_environments(envs, repeats, seed, surrogate)
    R = rank_environments(A, seed, **sk_options)
    return SequencePlan(order_by_rank(ids, R.mean_ranks, R.mean_mres), R.mean_ranks, target, name,
                        R.mean_mres)


def select_sequence(system: SystemDataset, target_env_id: str, repeats: int = 30, seed: int = 0,
                    surrogate: Callable = train_linear, **sk_options) -> SequencePlan:
    """Training order of the meta environments for ``target_env_id``."""
    envs = system.meta_envs(target_env_id)
    return select_environments(envs, target_env_id, repeats, seed, surrogate, **sk_options)
