"""Sequential meta-training, fine-tuning, and a parallel first-order MAML
baseline for contrast.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset import EnvironmentDataset, ScalingRecord, SystemDataset
from .learners import (LearnerConfig, ParameterVector, TrainedModel, hyper_search,
                       init_net, train_net)
from .sequence import SequencePlan


@dataclass(frozen=True)
class MetaTrainConfig:
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    outer_iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer iteration limit must be at least 1")

    @property
    def stage_config(self) -> LearnerConfig:
        return replace(self.learner, seed=self.seed)


@dataclass(frozen=True, eq=False)
class MetaModel:
    params: ParameterVector
    scaling: Optional[ScalingRecord]
    plan: Optional[SequencePlan] = None
    stages: tuple = ()
    outer_iterations: int = 1
    method: str = "sequential"

    def as_model(self) -> TrainedModel:
        return TrainedModel(self.params, self.scaling, {"meta": self.provenance()})

    def provenance(self) -> dict:
        return {"method": self.method,
                "plan": None if self.plan is None else self.plan.to_dict(),
                "outer_iterations": self.outer_iterations,
                "stages": [dict(s) for s in self.stages]}


def _stage_record(outer, env, model):
    return {"outer": outer, "env": env.env_id, "samples": len(env),
            "final_loss": model.metadata["final_loss"],
            "epochs": model.metadata["epochs_run"]}


def train_sequentially(envs: Sequence[EnvironmentDataset], cfg: MetaTrainConfig,
                       plan: Optional[SequencePlan] = None) -> MetaModel:
    """Learn ``envs`` one after another, each stage warm-started from the last."""
    if not envs:
        raise ValueError("meta-training needs at least one environment")
    stage_cfg = cfg.stage_config
    n_features = envs[0].X.shape[1]
    params = init_net(n_features, stage_cfg.hidden, stage_cfg.seed)
    arch = params.architecture
    stages, model = [], None
    for outer in range(cfg.outer_iterations):
        for env in envs:
            model = train_net(env.X, env.y, stage_cfg, params)
            assert model.params.architecture == arch
            params = model.params
            stages.append(_stage_record(outer, env, model))
    if plan is None:
        plan = SequencePlan(tuple(e.env_id for e in envs))
    return MetaModel(params, model.scaling, plan, tuple(stages), cfg.outer_iterations)


def meta_train(system: SystemDataset, plan: SequencePlan, cfg: MetaTrainConfig,
               data: Optional[Mapping[str, EnvironmentDataset]] = None) -> MetaModel:
    """Pre-train on the plan's environments in order.

    ``data`` optionally replaces an environment's samples (e.g. a subsample);
    a ``None`` entry drops that environment.
    """
    known = set(system.env_ids)
    for env_id in plan.order:
        if env_id not in known:
            raise KeyError(f"plan names unknown environment {env_id!r}")
        if env_id == plan.target:
            raise ValueError(f"plan includes its own target {env_id!r}")
    data = data or {}
    envs = []
    for env_id in plan.order:
        env = data[env_id] if env_id in data else system.env(env_id)
        if env is not None:
            envs.append(env)
    return train_sequentially(envs, cfg, plan)


def fine_tune(meta: MetaModel, X, y, cfg: LearnerConfig, search: bool = False,
              track_mre: bool = False) -> TrainedModel:
    """Train on target samples starting from the meta-model's parameters.

    With zero epochs the meta-model is returned unchanged, scaling included.
    """
    if len(np.asarray(y).reshape(-1)) == 0:
        raise ValueError("fine-tuning needs at least one target sample")
    if cfg.epochs == 0:
        return TrainedModel(meta.params, meta.scaling,
                            {"epochs_run": 0, "config": cfg.to_dict(), "final_loss": None})
    if search:
        cfg = hyper_search(X, y, cfg, init=meta.params)
    return train_net(X, y, cfg, init=meta.params, track_mre=track_mre)


def _mean_scaling(records):
    return ScalingRecord(np.mean([r.x_scale for r in records], axis=0),
                         float(np.mean([r.y_scale for r in records])))


def maml_train_parallel(system: SystemDataset, meta_env_ids: Sequence[str], cfg: MetaTrainConfig,
                        inner_epochs: Optional[int] = None, meta_step: float = 1.0,
                        data: Optional[Mapping[str, EnvironmentDataset]] = None) -> MetaModel:
    """First-order parallel meta-training.

    Each outer iteration adapts a copy of the shared parameters to every
    environment for ``inner_epochs`` epochs, then moves the shared parameters
    ``meta_step`` of the way to the mean of the adapted copies. Environments are
    aggregated in sorted id order so the result does not depend on input order.
    """
    ids = sorted(set(meta_env_ids))
    if not ids:
        raise ValueError("parallel meta-training needs at least one environment")
    data = data or {}
    envs = [data[i] if data.get(i) is not None else system.env(i) for i in ids]
    stage_cfg = cfg.stage_config
    if inner_epochs is not None:
        stage_cfg = replace(stage_cfg, epochs=int(inner_epochs))
    theta = init_net(envs[0].X.shape[1], stage_cfg.hidden, stage_cfg.seed)
    stages, scalings = [], []
    for outer in range(cfg.outer_iterations):
        adapted = []
        for env in envs:
            model = train_net(env.X, env.y, stage_cfg, theta)
            adapted.append(model.params.flat())
            scalings.append(model.scaling)
            stages.append(_stage_record(outer, env, model))
        mean = np.sum(adapted, axis=0) / len(adapted)
        theta = theta.with_flat((1.0 - meta_step) * theta.flat() + meta_step * mean)
    plan = SequencePlan(tuple(ids))
    return MetaModel(theta, _mean_scaling(scalings[-len(envs):]), plan, tuple(stages),
                     cfg.outer_iterations, method="parallel")
