"""Sequential meta-learning for configuration performance prediction across
environments.

Environments are ranked by how well a cheap linear surrogate trained on each
transfers to the others, a network is pre-trained on them one at a time with
the most useful last, and the result is fine-tuned on a few target samples.
"""
from .dataset import (DatasetError, EnvironmentDataset, OptionSchema, ScalingRecord,
                      SynthSpec, SystemDataset, draw_split, generate_synthetic_system,
                      load_system, subsample_fraction, training_size_schedule, write_system)
from .estimators import (L1MLPRegressor, LinearSurrogateRegressor, ParallelMetaRegressor,
                         SeMPLRegressor)
from .harness import (ExperimentPlan, ExperimentReport, compute_speedup, rank_models,
                      run_experiment)
from .learners import (ArchitectureError, CheckpointError, LearnerConfig, ParameterVector,
                       TrainedModel, TrainingError, export_params, import_model, import_params,
                       predict, train_linear, train_net)
from .meta import MetaModel, MetaTrainConfig, fine_tune, maml_train_parallel, meta_train
from .sequence import SequencePlan, assess_usefulness, rank_environments, select_sequence
from .stats import MreSeries, RankResult, a12, mre, scott_knott

__version__ = "0.1.0"

__all__ = [
    "ArchitectureError", "CheckpointError", "DatasetError", "EnvironmentDataset",
    "ExperimentPlan", "ExperimentReport", "L1MLPRegressor", "LearnerConfig",
    "LinearSurrogateRegressor", "MetaModel", "MetaTrainConfig", "MreSeries", "OptionSchema",
    "ParallelMetaRegressor", "ParameterVector", "RankResult", "ScalingRecord", "SeMPLRegressor",
    "SequencePlan", "SynthSpec", "SystemDataset", "TrainedModel", "TrainingError", "a12",
    "assess_usefulness", "compute_speedup", "draw_split", "export_params", "fine_tune",
    "generate_synthetic_system", "import_model", "import_params", "load_system",
    "maml_train_parallel", "meta_train", "mre", "predict", "rank_environments", "rank_models",
    "run_experiment", "scott_knott", "select_sequence", "subsample_fraction", "train_linear",
    "train_net", "training_size_schedule", "write_system",
]
