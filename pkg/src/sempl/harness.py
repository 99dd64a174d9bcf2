"""Evaluation protocol: every environment serves once as the target; for each
training size the models are trained on ``repeats`` random splits and scored
by MRE on the held-out samples.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import SystemDataset, draw_split, subsample_fraction, training_size_schedule
from .learners import LearnerConfig, TrainingError, predict, train_linear, train_net, hyper_search
from .meta import MetaTrainConfig, fine_tune, maml_train_parallel, train_sequentially
from .sequence import select_environments
from .stats import MreSeries, mre, scott_knott

log = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"


def derive_seed(master: int, *parts) -> int:
    """Stable 32-bit seed from a master seed and a tuple of labels."""
    words = [int(master) & 0xFFFFFFFF]
    for p in parts:
        words.append(int(p) & 0xFFFFFFFF if isinstance(p, (int, np.integer))
                     else zlib.crc32(str(p).encode("utf-8")))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentPlan:
    system: SystemDataset
    models: tuple = ("sempl", "maml", "net", "linear")
    sizes: Optional[tuple] = None
    repeats: int = 30
    seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    pretrain_epochs: int = 500
    pretrain_fraction: float = 1.0
    search: bool = False
    targets: Optional[tuple] = None
    selection_repeats: int = 30
    maml_inner_epochs: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not self.models:
            raise ValueError("an experiment needs at least one model")
        for m in self.models:
            if m not in REGISTRY:
                raise ValueError(f"unknown model {m!r}; registered: {sorted(REGISTRY)}")
        if len(set(self.models)) != len(self.models):
            raise ValueError("model names must be unique")
        if not 0.0 <= self.pretrain_fraction <= 1.0:
            raise ValueError("pretrain fraction must lie in [0, 1]")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(self.targets))
            for t in self.targets:
                self.system.env(t)
        sizes = training_size_schedule(self.system, self.sizes)
        object.__setattr__(self, "sizes", tuple(sizes))

    @property
    def target_ids(self):
        return self.targets if self.targets is not None else tuple(self.system.env_ids)

    @property
    def meta_config(self) -> MetaTrainConfig:
        return MetaTrainConfig(replace(self.learner, epochs=self.pretrain_epochs))


@dataclass(frozen=True)
class Context:
    plan: ExperimentPlan
    model: str
    target: str

    @property
    def seed(self):
        # shared by all models so meta-learners start from the same initialization
        return derive_seed(self.plan.seed, self.target, "pretrain")

    def meta_data(self):
        """Meta environments, subsampled to the plan's pre-training fraction."""
        envs = []
        for env in self.plan.system.meta_envs(self.target):
            sub = subsample_fraction(env, self.plan.pretrain_fraction,
                                     derive_seed(self.plan.seed, "fraction", self.target))
            if sub is not None and len(sub) > 0:
                envs.append(sub)
        return envs


class Trainer:
    """A model family: optional pre-training once per target, then per-split fitting."""

    def pretrain(self, ctx: Context):
        return None

    def fit(self, state, X, y, ctx: Context, seed: int):
        raise NotImplementedError


class LinearTrainer(Trainer):
    def fit(self, state, X, y, ctx, seed):
        return train_linear(X, y)


class NetTrainer(Trainer):
    def fit(self, state, X, y, ctx, seed):
        cfg = replace(ctx.plan.learner, seed=seed)
        if ctx.plan.search:
            cfg = hyper_search(X, y, cfg)
        return train_net(X, y, cfg)


class SequentialMetaTrainer(Trainer):
    def pretrain(self, ctx):
        envs = ctx.meta_data()
        if not envs:
            return None
        plan = select_environments(envs, ctx.target, ctx.plan.selection_repeats, ctx.seed)
        by_id = {e.env_id: e for e in envs}
        cfg = replace(ctx.plan.meta_config, seed=ctx.seed)
        return train_sequentially([by_id[i] for i in plan.order], cfg, plan)

    def fit(self, meta, X, y, ctx, seed):
        cfg = replace(ctx.plan.learner, seed=seed)
        if meta is None:
            if ctx.plan.search:
                cfg = hyper_search(X, y, cfg)
            return train_net(X, y, cfg)
        return fine_tune(meta, X, y, cfg, search=ctx.plan.search)


class ParallelMetaTrainer(SequentialMetaTrainer):
    def pretrain(self, ctx):
        envs = ctx.meta_data()
        if not envs:
            return None
        data = {e.env_id: e for e in envs}
        cfg = replace(ctx.plan.meta_config, seed=ctx.seed)
        return maml_train_parallel(ctx.plan.system, list(data), cfg,
                                   ctx.plan.maml_inner_epochs, data=data)


REGISTRY = {
    "sempl": SequentialMetaTrainer(),
    "maml": ParallelMetaTrainer(),
    "net": NetTrainer(),
    "linear": LinearTrainer(),
}


def register_model(name: str, trainer: Trainer):
    REGISTRY[name] = trainer


@dataclass(frozen=True)
class Record:
    model: str
    target: str
    size: int
    run: int
    mre: Optional[float]
    wall_ms: float
    status: str = OK


@dataclass(frozen=True)
class SpeedupResult:
    baseline: str
    subject: str
    b: Optional[int]
    s: Optional[int]
    sp: Optional[float]

    def to_dict(self):
        return {"baseline": self.baseline, "subject": self.subject, "b": self.b, "s": self.s,
                "sp": "N/A" if self.sp is None else self.sp}


def _run_group(plan: ExperimentPlan, model: str, target: str) -> list:
    trainer = REGISTRY[model]
    ctx = Context(plan, model, target)
    env = plan.system.env(target)
    records = []
    try:
        state = trainer.pretrain(ctx)
    except (ValueError, ArithmeticError) as exc:
        log.warning("pre-training %s for target %s failed: %s", model, target, exc)
        return [Record(model, target, size, run, None, 0.0, f"{FAILED}: {exc}")
                for size in plan.sizes for run in range(plan.repeats)]
    for size in plan.sizes:
        for run in range(plan.repeats):
            split = draw_split(env, size, derive_seed(plan.seed, "split", target, size, run))
            seed = derive_seed(plan.seed, model, target, size, run)
            t0 = time.perf_counter()
            try:
                fitted = trainer.fit(state, env.X[split.train], env.y[split.train], ctx, seed)
                value = mre(env.y[split.test], predict(fitted, env.X[split.test]))
                if not np.isfinite(value):
                    raise TrainingError("non-finite test MRE")
                status = OK
            except (ValueError, ArithmeticError) as exc:
                log.warning("%s/%s/%d/%d failed: %s", model, target, size, run, exc)
                value, status = None, f"{FAILED}: {exc}"
            records.append(Record(model, target, size, run, value,
                                  (time.perf_counter() - t0) * 1000.0, status))
    return records


def run_experiment(plan: ExperimentPlan, jobs: int = 1) -> "ExperimentReport":
    """Run every (model, target, size, run) cell of ``plan``.

    Output is identical for any ``jobs``; records are sorted by model, target,
    size and run.
    """
    groups = [(m, t) for m in plan.models for t in plan.target_ids]
    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_group, [plan] * len(groups),
                                   [g[0] for g in groups], [g[1] for g in groups]))
    else:
        chunks = [_run_group(plan, m, t) for m, t in groups]
    records = sorted((r for chunk in chunks for r in chunk),
                     key=lambda r: (r.model, r.target, r.size, r.run))
    return ExperimentReport(records, plan.models, plan.target_ids, plan.sizes, plan.seed)


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    records: list
    models: tuple
    targets: tuple
    sizes: tuple
    seed: int = 0

    def values(self, model, target, size) -> np.ndarray:
        return np.array([r.mre for r in self.records
                         if r.model == model and r.target == target and r.size == size
                         and r.status == OK], dtype=float)

    def mean_mre(self, model, target, size) -> float:
        v = self.values(model, target, size)
        if len(v) == 0:
            raise KeyError(f"no successful records for ({model}, {target}, {size})")
        return float(v.mean())

    def cells(self):
        """Mean and standard error per (model, target, size)."""
        out = []
        for m in self.models:
            for t in self.targets:
                for s in self.sizes:
                    v = self.values(m, t, s)
                    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
                    out.append({"model": m, "target": t, "size": s, "n": int(len(v)),
                                "mean": float(v.mean()) if len(v) else None,
                                "std_error": se if len(v) else None})
        return out

    def records_csv(self, timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "target", "size", "run", "mre", "wall_ms", "status"])
        for r in self.records:
            w.writerow([r.model, r.target, r.size, r.run,
                        "" if r.mre is None else repr(r.mre),
                        f"{r.wall_ms:.3f}" if timing else "", r.status])
        return buf.getvalue()

    def summary(self, subject: str = "sempl") -> dict:
        ranks = rank_models(self, seed=self.seed)
        speedups = []
        if subject in self.models:
            for t in self.targets:
                for baseline in self.models:
                    if baseline == subject:
                        continue
                    try:
                        sp = compute_speedup(self, baseline, subject, t)
                    except KeyError:
                        continue
                    speedups.append({"target": t, **sp.to_dict()})
        return {"models": list(self.models), "targets": list(self.targets),
                "sizes": list(self.sizes), "cells": self.cells(),
                "mean_ranks": ranks, "speedups": speedups,
                "failures": sum(1 for r in self.records if r.status != OK)}

    def write(self, out_dir, timing: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.csv").write_text(self.records_csv(timing), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True)
                                          + "\n", encoding="utf-8")
        return out


def compute_speedup(report: ExperimentReport, baseline_id: str, subject_id: str, target: str,
                    sizes: Optional[Sequence[int]] = None) -> SpeedupResult:
    """``b`` is the smallest size at which the baseline reaches its own best mean MRE,
    ``s`` the smallest size at which the subject is at least as good; ``sp = b / s``.
    """
    sizes = sorted(sizes or report.sizes)
    base = [report.mean_mre(baseline_id, target, s) for s in sizes]
    subj = [report.mean_mre(subject_id, target, s) for s in sizes]
    best = min(base)
    b = sizes[base.index(best)]
    reached = [s for s, v in zip(sizes, subj) if v <= best]
    if not reached:
        return SpeedupResult(baseline_id, subject_id, b, None, None)
    s = reached[0]
    return SpeedupResult(baseline_id, subject_id, b, s, b / s)


def rank_models(report: ExperimentReport, seed: int = 0, **sk_options) -> dict:
    """Mean Scott-Knott rank of every model over all (target, size) cases."""
    totals = {m: [] for m in report.models}
    for t in report.targets:
        for s in report.sizes:
            series = [MreSeries(m, report.values(m, t, s)) for m in report.models
                      if len(report.values(m, t, s))]
            if not series:
                continue
            result = scott_knott(series, seed=derive_seed(seed, "rank", t, s), **sk_options)
            for m, r in result.ranks.items():
                totals[m].append(r)
    return {m: float(np.mean(v)) for m, v in totals.items() if v}
