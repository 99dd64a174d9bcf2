"""Command-line entry point.

Every subcommand accepts ``--config FILE``, a JSON object whose keys mirror the
long flags (``pretrain_fraction`` or ``pretrain-fraction``) plus an optional
``learner`` object; explicit flags win over the file. ``SEMPL_SEED`` supplies
the seed when neither gives one.

Failures print one JSON line on stderr, ``{"error": kind, "code": n,
"message": ...}``, and exit with 1 (usage), 2 (data) or 3 (numeric failure).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import (SynthSpec, draw_split, generate_synthetic_system, load_system,
                      subsample_fraction, training_size_schedule, write_system)
from .harness import ExperimentPlan, derive_seed, run_experiment
from .learners import LearnerConfig, export_params, import_model, predict
from .meta import MetaModel, MetaTrainConfig, fine_tune, maml_train_parallel, meta_train
from .sequence import SequencePlan, select_sequence
from .stats import MreSeries, mre, scott_knott

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULTS = {
    "repeats": 30,
    "selection_repeats": 30,
    "pretrain_fraction": 1.0,
    "pretrain_epochs": 500,
    "jobs": 1,
    "method": "sequential",
    "models": "sempl,maml,net,linear",
    "timing": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class RunConfig:
    data: Optional[Path] = None
    target: Optional[str] = None
    sizes: Optional[tuple] = None
    repeats: int = 30
    seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    pretrain_fraction: float = 1.0
    out: Optional[Path] = None
    pretrain_epochs: int = 500
    selection_repeats: int = 30
    search: bool = False
    jobs: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repeats < 1 or self.selection_repeats < 1:
            raise UsageError("repeats must be at least 1")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")
        if not 0.0 <= self.pretrain_fraction <= 1.0:
            raise UsageError("pretrain fraction must lie in [0, 1]")
        if self.data is not None and not Path(self.data).is_dir():
            raise FileNotFoundError(f"dataset directory {self.data} does not exist")

    def require(self, *names):
        for name in names:
            value = getattr(self, name, None) if name in self.__dataclass_fields__ else self.options.get(name)
            if value is None:
                raise UsageError(f"--{name.replace('_', '-')} is required")


# --------------------------------------------------------------------------
# argument parsing

def _int_list(text):
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _add(p, *names):
    specs = {
        "data": (["--data"], dict(metavar="DIR", help="system directory of per-environment CSVs")),
        "target": (["--target"], dict(metavar="ID", help="target environment id")),
        "sizes": (["--sizes"], dict(type=_int_list, metavar="a,b,c",
                                    help="training sizes (default: the system's schedule)")),
        "size": (["--size"], dict(type=int, metavar="N",
                                  help="target training size (default: smallest scheduled size)")),
        "repeats": (["--repeats"], dict(type=int, metavar="N",
                                        help="repeated runs per cell (default 30)")),
        "selection_repeats": (["--selection-repeats"], dict(
            type=int, metavar="N", help="subsample repeats when ranking environments (default 30)")),
        "seed": (["--seed"], dict(type=int, metavar="N",
                                  help="master seed (default: $SEMPL_SEED, else 0)")),
        "pretrain_fraction": (["--pretrain-fraction"], dict(
            type=float, metavar="F", help="fraction of each meta environment used for pre-training")),
        "out": (["--out"], dict(metavar="DIR", help="output directory")),
        "jobs": (["--jobs"], dict(type=int, metavar="N", help="worker processes (default 1)")),
        "epochs": (["--epochs"], dict(type=int, metavar="N", help="fine-tuning / training epochs")),
        "pretrain_epochs": (["--pretrain-epochs"], dict(
            type=int, metavar="N", help="epochs per meta environment (default 500)")),
        "grid": (["--grid"], dict(metavar="FILE", help="JSON grid {learning_rate: [...], l1: [...]}; "
                                                       "enables hyper-parameter search")),
        "hidden": (["--hidden"], dict(type=_int_list, metavar="a,b", help="hidden layer widths")),
        "plan": (["--plan"], dict(metavar="FILE", help="sequence plan JSON (default: select one)")),
        "method": (["--method"], dict(choices=["sequential", "parallel"],
                                      help="meta-training method (default sequential)")),
        "checkpoint": (["--checkpoint"], dict(metavar="FILE", help="model checkpoint JSON")),
        "configs": (["--configs"], dict(metavar="FILE", help="CSV of configurations to predict")),
        "models": (["--models"], dict(metavar="a,b", help="models to evaluate "
                                                          "(default sempl,maml,net,linear)")),
        "timing": (["--timing"], dict(action="store_true", help="record wall-clock times")),
        "spec": (["--spec"], dict(metavar="FILE", help="synthetic system recipe JSON")),
        "measurements": (["--measurements"], dict(metavar="FILE",
                                                  help="CSV of (label, value) rows")),
    }
    for name in names:
        flags, kw = specs[name]
        p.add_argument(*flags, dest=name, **kw)


COMMAND_OPTIONS = {
    "sequence": ("rank meta environments and print the training order",
                 ("data", "target", "selection_repeats", "seed", "out")),
    "pretrain": ("pre-train a meta-model and write a checkpoint",
                 ("data", "target", "plan", "method", "selection_repeats", "seed",
                  "pretrain_fraction", "pretrain_epochs", "hidden", "out")),
    "finetune": ("fine-tune a checkpoint on target samples and report MRE",
                 ("data", "target", "checkpoint", "size", "sizes", "seed", "epochs", "grid", "out")),
    "predict": ("predict performance of configurations with a checkpoint",
                ("checkpoint", "configs", "out")),
    "evaluate": ("run the full evaluation protocol",
                 ("data", "target", "sizes", "repeats", "selection_repeats", "seed",
                  "pretrain_fraction", "epochs", "pretrain_epochs", "hidden", "grid", "models",
                  "jobs", "timing", "out")),
    "synth": ("generate a synthetic multi-environment system", ("spec", "seed", "out")),
    "rank": ("Scott-Knott rank a set of measurement series", ("measurements", "seed", "out")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sempl", description="Sequential meta-learning for configuration "
                     "performance prediction.", argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    for name, (help_text, options) in COMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", dest="config", metavar="FILE",
                       help="JSON file mirroring these flags; flags win")
        _add(p, *options)
    return parser


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{what} {path} is not valid JSON: {exc}") from None


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, ``--config`` and explicit flags (in that order of precedence)."""
    given = vars(args).copy()
    command = given.pop("command")
    merged = dict(DEFAULTS)
    learner_overrides = {}
    if "config" in given:
        doc = _read_json(given.pop("config"), "config file")
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = set(COMMAND_OPTIONS[command][1])
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key == "learner":
                learner_overrides.update(value)
            elif key in allowed:
                merged[key] = tuple(value) if key in ("sizes", "hidden") and value is not None else value
            else:
                raise UsageError(f"unknown config key {key!r} for {command}")
    merged.update(given)

    seed = merged.pop("seed", None)
    if seed is None:
        env_seed = os.environ.get("SEMPL_SEED")
        try:
            seed = int(env_seed) if env_seed not in (None, "") else 0
        except ValueError:
            raise UsageError(f"SEMPL_SEED must be an integer, got {env_seed!r}") from None

    learner = LearnerConfig.from_dict(learner_overrides) if learner_overrides else LearnerConfig()
    if merged.get("epochs") is not None:
        learner = replace(learner, epochs=int(merged.pop("epochs")))
    if merged.get("hidden") is not None:
        learner = replace(learner, hidden=tuple(merged.pop("hidden")))
    search = False
    if merged.get("grid") is not None:
        grid = _read_json(merged.pop("grid"), "grid file")
        if not isinstance(grid, dict) or not grid:
            raise ValueError("grid file must hold an object with learning_rate and/or l1 lists")
        unknown = set(grid) - {"learning_rate", "l1"}
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        learner = replace(learner, grid_learning_rate=grid.get("learning_rate", [learner.learning_rate]),
                          grid_l1=grid.get("l1", [learner.l1]))
        search = True

    core = {k: merged.pop(k) for k in ("data", "target", "out") if merged.get(k) is not None}
    for k in ("data", "out"):
        if k in core:
            core[k] = Path(core[k])
    sizes = merged.pop("sizes", None)
    return RunConfig(
        sizes=None if sizes is None else tuple(int(s) for s in sizes),
        repeats=int(merged.pop("repeats")), seed=int(seed), learner=learner,
        pretrain_fraction=float(merged.pop("pretrain_fraction")),
        pretrain_epochs=int(merged.pop("pretrain_epochs")),
        selection_repeats=int(merged.pop("selection_repeats")), search=search,
        jobs=int(merged.pop("jobs")), options=merged, **core)


# --------------------------------------------------------------------------
# subcommands

def _emit(doc, out=None, name=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out is not None and name is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
    return text


def _meta_envs(system, cfg: RunConfig):
    envs = {}
    for env in system.meta_envs(cfg.target):
        sub = subsample_fraction(env, cfg.pretrain_fraction,
                                 derive_seed(cfg.seed, "fraction", cfg.target))
        envs[env.env_id] = sub
    return envs


def cmd_sequence(cfg: RunConfig, stdout) -> int:
    cfg.require("data", "target")
    system = load_system(cfg.data)
    t0 = time.perf_counter()
    plan = select_sequence(system, cfg.target, cfg.selection_repeats, cfg.seed)
    elapsed = (time.perf_counter() - t0) * 1000.0
    doc = plan.to_dict()
    _emit(doc, cfg.out, "plan.json")
    stdout.write(json.dumps({**doc, "elapsed_ms": round(elapsed, 3)}, sort_keys=True) + "\n")
    return 0


def cmd_pretrain(cfg: RunConfig, stdout) -> int:
    cfg.require("data", "target", "out")
    system = load_system(cfg.data)
    system.env(cfg.target)
    data = _meta_envs(system, cfg)
    if all(v is None for v in data.values()):
        raise ValueError("pretrain fraction leaves no meta samples; nothing to pre-train on")
    seed = derive_seed(cfg.seed, cfg.target, "pretrain")
    mcfg = MetaTrainConfig(replace(cfg.learner, epochs=cfg.pretrain_epochs), seed=seed)
    method = cfg.options.get("method", "sequential")
    if method == "parallel":
        ids = [k for k, v in data.items() if v is not None]
        meta = maml_train_parallel(system, ids, mcfg, data=data)
    else:
        if cfg.options.get("plan") is not None:
            plan = SequencePlan.from_dict(_read_json(cfg.options["plan"], "plan file"))
        else:
            plan = select_sequence(system, cfg.target, cfg.selection_repeats, cfg.seed)
        meta = meta_train(system, plan, mcfg, data=data)
    provenance = {**meta.provenance(), "system": system.name, "target": cfg.target,
                  "seed": cfg.seed, "pretrain_fraction": cfg.pretrain_fraction,
                  "learner": mcfg.stage_config.to_dict()}
    blob = export_params(meta.as_model(), {"provenance": provenance,
                                           "options": list(system.schema.names)})
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "meta.json"
    path.write_bytes(blob)
    stdout.write(json.dumps({"checkpoint": str(path), "method": meta.method,
                             "order": list(meta.plan.order)}, sort_keys=True) + "\n")
    return 0


def _load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return import_model(p.read_bytes())


def _prediction_rows(names, X, y, pred):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*names, *(["performance"] if y is not None else []), "prediction"])
    for i in range(len(pred)):
        row = [repr(float(v)) for v in X[i]]
        if y is not None:
            row.append(repr(float(y[i])))
        row.append(repr(float(pred[i])))
        w.writerow(row)
    return buf.getvalue()


def cmd_finetune(cfg: RunConfig, stdout) -> int:
    cfg.require("data", "target", "checkpoint", "out")
    system = load_system(cfg.data)
    env = system.env(cfg.target)
    start = _load_checkpoint(cfg.options["checkpoint"])
    size = cfg.options.get("size")
    if size is None:
        size = training_size_schedule(system, cfg.sizes)[0]
    split = draw_split(env, int(size), derive_seed(cfg.seed, "split", cfg.target, int(size), 0))
    meta = MetaModel(start.params, start.scaling)
    learner = replace(cfg.learner, seed=derive_seed(cfg.seed, "sempl", cfg.target, int(size), 0))
    model = fine_tune(meta, env.X[split.train], env.y[split.train], learner, search=cfg.search)
    train_mre = mre(env.y[split.train], predict(model, env.X[split.train]))
    test_pred = predict(model, env.X[split.test])
    test_mre = mre(env.y[split.test], test_pred)
    if not (np.isfinite(train_mre) and np.isfinite(test_mre)):
        raise ArithmeticError("fine-tuned model produced non-finite errors")
    cfg.out.mkdir(parents=True, exist_ok=True)
    extra = {"options": list(system.schema.names),
             "provenance": {"start": start.metadata.get("provenance"), "target": cfg.target,
                            "size": int(size), "seed": cfg.seed, "learner": learner.to_dict()}}
    (cfg.out / "model.json").write_bytes(export_params(model, extra))
    (cfg.out / "predictions.csv").write_text(
        _prediction_rows(system.schema.names, env.X[split.test], env.y[split.test], test_pred),
        encoding="utf-8")
    stdout.write(json.dumps({"target": cfg.target, "size": int(size), "train_mre": train_mre,
                             "test_mre": test_mre, "n_test": int(len(split.test))},
                            sort_keys=True) + "\n")
    return 0


def _read_configs(path, names):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"configuration file {path} does not exist")
    with p.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty configuration file")
    header = [h.strip() for h in rows[0]]
    if names is None:
        names = [h for h in header if h not in ("performance", "prediction")]
    missing = [n for n in names if n not in header]
    if missing:
        raise ValueError(f"{path}: missing option columns {missing}")
    cols = [header.index(n) for n in names]
    X = []
    for i, row in enumerate(rows[1:], start=2):
        try:
            X.append([float(row[c]) for c in cols])
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{i}: non-numeric or missing option value") from None
    return list(names), np.array(X, dtype=float).reshape(len(X), len(names))


def cmd_predict(cfg: RunConfig, stdout) -> int:
    cfg.require("checkpoint", "configs")
    model = _load_checkpoint(cfg.options["checkpoint"])
    names, X = _read_configs(cfg.options["configs"], model.metadata.get("options"))
    pred = predict(model, X)
    if not np.all(np.isfinite(pred)):
        raise ArithmeticError("checkpoint produced non-finite predictions")
    text = _prediction_rows(names, X, None, pred)
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "predictions.csv").write_text(text, encoding="utf-8")
    else:
        stdout.write(text)
    return 0


def cmd_evaluate(cfg: RunConfig, stdout) -> int:
    cfg.require("data", "out")
    system = load_system(cfg.data)
    models = tuple(m.strip() for m in str(cfg.options["models"]).split(",") if m.strip())
    targets = None if cfg.target is None else tuple(cfg.target.split(","))
    plan = ExperimentPlan(system, models=models, sizes=cfg.sizes, repeats=cfg.repeats,
                          seed=cfg.seed, learner=cfg.learner, pretrain_epochs=cfg.pretrain_epochs,
                          pretrain_fraction=cfg.pretrain_fraction, search=cfg.search,
                          targets=targets, selection_repeats=cfg.selection_repeats)
    report = run_experiment(plan, jobs=cfg.jobs)
    report.write(cfg.out, timing=bool(cfg.options.get("timing")))
    summary = report.summary()
    stdout.write(json.dumps({"out": str(cfg.out), "records": len(report.records),
                             "failures": summary["failures"], "mean_ranks": summary["mean_ranks"]},
                            sort_keys=True) + "\n")
    return 0


def cmd_synth(cfg: RunConfig, stdout) -> int:
    cfg.require("out")
    spec_path = cfg.options.get("spec")
    try:
        spec = SynthSpec() if spec_path is None else SynthSpec.from_dict(_read_json(spec_path, "spec file"))
    except TypeError as exc:
        raise ValueError(f"bad synthetic spec: {exc}") from None
    system = generate_synthetic_system(spec, cfg.seed)
    write_system(system, cfg.out)
    stdout.write(json.dumps({"out": str(cfg.out), "environments": system.env_ids,
                             "samples": len(system.environments[0])}, sort_keys=True) + "\n")
    return 0


def cmd_rank(cfg: RunConfig, stdout) -> int:
    cfg.require("measurements")
    p = Path(cfg.options["measurements"])
    if not p.is_file():
        raise FileNotFoundError(f"measurements file {p} does not exist")
    values = {}
    with p.open(newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or (i == 1 and row[:2] == ["label", "value"]):
                continue
            try:
                values.setdefault(row[0].strip(), []).append(float(row[1]))
            except (ValueError, IndexError):
                raise ValueError(f"{p}:{i}: expected 'label,value'") from None
    if not values:
        raise ValueError(f"{p}: no measurements")
    result = scott_knott([MreSeries(k, v) for k, v in values.items()], seed=cfg.seed)
    text = _emit(result.to_dict(), cfg.out, "ranks.json")
    stdout.write(text)
    return 0


COMMANDS = {
    "sequence": cmd_sequence,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "rank": cmd_rank,
}


def _fail(kind, code, message, stderr):
    stderr.write(json.dumps({"error": kind, "code": code, "message": str(message)}) + "\n")
    return code


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve(args)
        return COMMANDS[command](cfg, stdout)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc, stderr)
    except ArithmeticError as exc:
        return _fail("numeric", EXIT_NUMERIC, exc, stderr)
    except KeyError as exc:
        return _fail("data", EXIT_DATA, exc.args[0] if exc.args else exc, stderr)
    except (ValueError, OSError) as exc:
        return _fail("data", EXIT_DATA, exc, stderr)


if __name__ == "__main__":
    sys.exit(main())
