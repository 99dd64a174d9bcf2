"""Configuration-performance data: schema, per-environment datasets, loading,
sampling schedules, splits, feature scaling and a synthetic system generator.

Every environment of a system measures the same set of configurations; only
the performance column differs between environments.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

BINARY = "binary"
NUMERIC = "numeric"
MIXED = "mixed"

# Mixed-system training sizes used when a dataset carries no explicit list.
DEFAULT_MIXED_SIZES = {
    "storm": [158, 211, 522, 678, 1403],
    "imagemagick": [11, 24, 45, 66, 70],
    "exastencils": [106, 181, 366, 485, 695],
    "x264": [24, 53, 81, 122, 141],
}


class DatasetError(ValueError):
    """Invalid or inconsistent input data, with an optional file/row location."""

    def __init__(self, message, path=None, row=None):
        self.path = None if path is None else str(path)
        self.row = row
        where = ""
        if self.path is not None:
            where = f"{self.path}"
            if row is not None:
                where += f":{row}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class OptionSchema:
    names: tuple
    kinds: tuple
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DatasetError("option names must be unique")
        if len(self.kinds) != len(self.names):
            raise DatasetError("one kind per option is required")
        for name, kind in zip(self.names, self.kinds):
            if kind not in (BINARY, NUMERIC):
                raise DatasetError(f"unknown option kind {kind!r} for {name!r}")
            if kind == NUMERIC:
                lo, hi = self.bounds.get(name, (None, None))
                if lo is None or not lo < hi:
                    raise DatasetError(f"numeric option {name!r} needs min < max")

    def __len__(self):
        return len(self.names)

    @property
    def kind(self) -> str:
        return MIXED if NUMERIC in self.kinds else BINARY

    @classmethod
    def infer(cls, names, X: np.ndarray) -> "OptionSchema":
        """Binary when a column only holds 0/1, numeric otherwise."""
        kinds, bounds = [], {}
        for j, name in enumerate(names):
            col = X[:, j]
            if np.all((col == 0) | (col == 1)):
                kinds.append(BINARY)
            else:
                kinds.append(NUMERIC)
                bounds[name] = (float(col.min()), float(col.max()))
        return cls(tuple(names), tuple(kinds), bounds)


@dataclass(frozen=True)
class ConfigurationSample:
    options: np.ndarray
    performance: float


@dataclass(frozen=True, eq=False)
class EnvironmentDataset:
    """All measured samples of one environment: ``X`` is (n, d), ``y`` is (n,)."""

    env_id: str
    label: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise DatasetError(f"environment {self.env_id!r}: options must be 2-D")
        if len(y) == 0:
            raise DatasetError(f"environment {self.env_id!r} is empty")
        if X.shape[0] != len(y):
            raise DatasetError(f"environment {self.env_id!r}: X/y length mismatch")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError(f"environment {self.env_id!r}: non-finite values")
        if np.any(y == 0):
            row = int(np.flatnonzero(y == 0)[0])
            raise DatasetError(
                f"environment {self.env_id!r}: zero performance at sample {row} "
                "(relative error divides by the actual value)")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> ConfigurationSample:
        return ConfigurationSample(self.X[i], float(self.y[i]))

    def subset(self, indices) -> "EnvironmentDataset":
        idx = np.asarray(indices, dtype=int)
        return EnvironmentDataset(self.env_id, self.label, self.X[idx], self.y[idx])


@dataclass(frozen=True, eq=False)
class SystemDataset:
    name: str
    schema: OptionSchema
    environments: tuple
    sizes: Optional[tuple] = None

    def __post_init__(self):
        envs = tuple(self.environments)
        object.__setattr__(self, "environments", envs)
        if len(envs) < 2:
            raise DatasetError(
                f"system {self.name!r} needs at least 2 environments, got {len(envs)}")
        ids = [e.env_id for e in envs]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"system {self.name!r}: duplicate environment ids")
        reference = None
        for env in envs:
            if env.X.shape[1] != len(self.schema):
                raise DatasetError(
                    f"environment {env.env_id!r} has {env.X.shape[1]} options, "
                    f"schema has {len(self.schema)}")
            rows = _sorted_rows(env.X)
            if reference is None:
                reference = rows
            elif rows.shape != reference.shape or not np.array_equal(rows, reference):
                raise DatasetError(
                    f"environment {env.env_id!r} does not measure the same "
                    "configurations as the other environments")

    @property
    def kind(self) -> str:
        return self.schema.kind

    @property
    def env_ids(self) -> list:
        return [e.env_id for e in self.environments]

    def env(self, env_id: str) -> EnvironmentDataset:
        for e in self.environments:
            if e.env_id == env_id:
                return e
        raise KeyError(f"unknown environment {env_id!r}; known: {self.env_ids}")

    def meta_envs(self, target_env_id: str) -> list:
        self.env(target_env_id)
        return [e for e in self.environments if e.env_id != target_env_id]


def _sorted_rows(X):
    order = np.lexsort(X.T[::-1]) if X.shape[1] else np.arange(len(X))
    return X[order]


# --------------------------------------------------------------------------
# loading

def _read_csv(path: Path, perf_column: Optional[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("empty file", path) from None
        if perf_column is None:
            perf_idx = len(header) - 1
        elif perf_column in header:
            perf_idx = header.index(perf_column)
        else:
            raise DatasetError(f"missing performance column {perf_column!r}", path, 1)
        if len(header) < 2:
            raise DatasetError("need at least one option and a performance column", path, 1)
        names = [h for i, h in enumerate(header) if i != perf_idx]
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"expected {len(header)} cells, found {len(row)}", path, lineno)
            values = []
            for cell, col in zip(row, header):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(
                        f"non-numeric cell {cell!r} in column {col!r}", path, lineno) from None
                if not math.isfinite(v):
                    raise DatasetError(f"non-finite cell in column {col!r}", path, lineno)
                values.append(v)
            perf = values.pop(perf_idx)
            if perf == 0:
                raise DatasetError(
                    "zero performance value; relative error needs a nonzero actual",
                    path, lineno)
            X.append(values)
            y.append(perf)
    if not y:
        raise DatasetError("no data rows", path)
    return names, np.array(X, dtype=float), np.array(y, dtype=float)


def load_system(root_path, manifest=None) -> SystemDataset:
    """Load one system from a directory holding one ``<env_id>.csv`` per environment.

    ``manifest`` may be a path or a parsed dict; when omitted, ``manifest.json``
    inside the directory is used if present. Without a manifest every CSV is an
    environment (sorted by file name) and the last column is the performance.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError("not a directory", root)
    if manifest is None and (root / "manifest.json").exists():
        manifest = root / "manifest.json"
    if isinstance(manifest, (str, Path)):
        mpath = Path(manifest)
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"unreadable manifest: {exc}", mpath) from None
    manifest = manifest or {}

    if "environments" in manifest:
        entries = [(root / e["file"], e.get("label")) for e in manifest["environments"]]
    else:
        entries = [(p, None) for p in sorted(root.glob("*.csv"))]
    if len(entries) < 2:
        raise DatasetError(f"need at least 2 environment CSVs, found {len(entries)}", root)

    perf_column = manifest.get("performance_column")
    names0, envs, first = None, [], None
    for path, label in entries:
        if not path.exists():
            raise DatasetError("environment file not found", path)
        names, X, y = _read_csv(path, perf_column)
        if names0 is None:
            names0, first = names, path
        elif names != names0:
            diff = [f"{a!r}!={b!r}" for a, b in zip(names, names0) if a != b]
            raise DatasetError(
                f"schema mismatch with {first.name}: "
                + (", ".join(diff) if diff else f"{len(names)} vs {len(names0)} options"),
                path)
        envs.append(EnvironmentDataset(path.stem, label or path.stem, X, y))

    schema = OptionSchema.infer(names0, np.vstack([e.X for e in envs]))
    kind = manifest.get("kind")
    if kind is not None and kind not in (BINARY, MIXED):
        raise DatasetError(f"manifest kind must be binary or mixed, got {kind!r}")
    if kind == BINARY and schema.kind == MIXED:
        raise DatasetError("manifest declares a binary system but options are numeric", root)
    if kind == MIXED and schema.kind == BINARY:
        raise DatasetError("manifest declares a mixed system but every option is binary", root)
    sizes = manifest.get("mixed_sizes")
    name = manifest.get("system", root.name)
    try:
        return SystemDataset(name, schema, envs, tuple(sizes) if sizes else None)
    except DatasetError as exc:
        raise DatasetError(str(exc), root) from None


def write_system(system: SystemDataset, out_dir, performance_column="performance"):
    """Write ``system`` in the on-disk layout read by :func:`load_system`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for env in system.environments:
        with open(out / f"{env.env_id}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(system.schema.names) + [performance_column])
            for x, p in zip(env.X, env.y):
                w.writerow([_fmt(v) for v in x] + [repr(float(p))])
    manifest = {
        "system": system.name,
        "performance_column": performance_column,
        "kind": system.kind,
        "environments": [{"file": f"{e.env_id}.csv", "label": e.label}
                         for e in system.environments],
    }
    if system.sizes:
        manifest["mixed_sizes"] = list(system.sizes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# --------------------------------------------------------------------------
# sampling

def training_size_schedule(system: SystemDataset, explicit: Optional[Sequence[int]] = None) -> list:
    """Training sizes for the target environment.

    Binary systems use ``{n, 2n, 3n, 4n, 5n}`` for ``n`` options. Mixed systems need
    an explicit list, the dataset's manifest sizes, or a known default for the
    system name. Sizes are clamped to leave at least one test sample.
    """
    if explicit is not None:
        sizes = [int(s) for s in explicit]
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError(f"training sizes must be positive, got {sizes}")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"training sizes must be strictly increasing, got {sizes}")
    elif system.kind == BINARY:
        n = len(system.schema)
        sizes = [n * k for k in range(1, 6)]
    elif system.sizes:
        sizes = [int(s) for s in system.sizes]
    elif system.name.lower() in DEFAULT_MIXED_SIZES:
        sizes = list(DEFAULT_MIXED_SIZES[system.name.lower()])
    else:
        raise ValueError(
            f"mixed system {system.name!r} has no training sizes; pass them explicitly")
    cap = min(len(e) for e in system.environments) - 1
    clamped = []
    for s in sizes:
        s = min(s, cap)
        if s >= 1 and s not in clamped:
            clamped.append(s)
    if not clamped:
        raise ValueError("environments are too small to hold out a test sample")
    return clamped


@dataclass(frozen=True)
class TrainTestSplit:
    train: np.ndarray
    test: np.ndarray
    seed: int


def env_key(env_id: str) -> int:
    return zlib.crc32(env_id.encode("utf-8"))


def draw_split(env: EnvironmentDataset, size: int, seed: int) -> TrainTestSplit:
    """Random ``size``-sample training set without replacement; the rest is test."""
    n = len(env)
    if not 1 <= size < n:
        raise ValueError(f"training size must be in [1, {n - 1}], got {size}")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, int(size), env_key(env.env_id)])
    perm = rng.permutation(n)
    return TrainTestSplit(np.sort(perm[:size]), np.sort(perm[size:]), seed)


def subsample_fraction(env: EnvironmentDataset, fraction: float, seed: int) -> Optional[EnvironmentDataset]:
    """Seeded random ``fraction`` of an environment, or None if nothing is kept."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if fraction == 1.0:
        return env
    k = int(round(fraction * len(env)))
    if k == 0:
        return None
    rng = np.random.default_rng([seed & 0xFFFFFFFF, env_key(env.env_id), 7])
    return env.subset(np.sort(rng.permutation(len(env))[:k]))


# --------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class ScalingRecord:
    """Max-abs scaling factors; a zero factor marks a dropped constant column."""

    x_scale: np.ndarray
    y_scale: float

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        inv = np.divide(1.0, self.x_scale, out=np.zeros_like(self.x_scale),
                        where=self.x_scale != 0)
        return X * inv

    def transform_y(self, y):
        return np.asarray(y, dtype=float) / self.y_scale

    def inverse_y(self, y_scaled):
        return np.asarray(y_scaled, dtype=float) * self.y_scale

    def to_dict(self):
        return {"x_scale": [float(v) for v in self.x_scale], "y_scale": float(self.y_scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_scale"], dtype=float), float(d["y_scale"]))


def fit_scaling(X, y) -> ScalingRecord:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("cannot fit scaling on an empty training set")
    x_scale = np.abs(X).max(axis=0)
    x_scale[np.ptp(X, axis=0) == 0] = 0.0
    y_scale = float(np.abs(y).max())
    if y_scale == 0:
        y_scale = 1.0
    return ScalingRecord(x_scale, y_scale)


def scale_features(train: EnvironmentDataset, apply_to: EnvironmentDataset):
    """Scale ``apply_to`` with factors fitted on ``train``.

    Returns ``(X_scaled, y_scaled, record)``.
    """
    record = fit_scaling(train.X, train.y)
    return record.transform(apply_to.X), record.transform_y(apply_to.y), record


# --------------------------------------------------------------------------
# synthetic systems

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic multi-environment system.

    ``deltas[i]`` is the divergence of environment ``i`` from a shared reference
    function: 0 reproduces it, 1 replaces it with an independent function of the
    same family. ``env_seeds`` overrides the per-environment distortion seeds.
    """

    n_options: int = 10
    n_samples: int = 500
    deltas: tuple = (0.0, 0.5, 1.0)
    n_terms: int = 6
    n_interactions: int = 4
    interaction_weight: float = 0.5
    base: float = 100.0
    spread: float = 0.3
    growth: float = 2.0
    name: str = "synthetic"
    env_seeds: Optional[tuple] = None

    def __post_init__(self):
        deltas = tuple(float(d) for d in self.deltas)
        object.__setattr__(self, "deltas", deltas)
        if len(deltas) < 2:
            raise ValueError("a synthetic system needs at least 2 environments")
        if any(not 0.0 <= d <= 1.0 for d in deltas):
            raise ValueError(f"divergences must lie in [0, 1], got {deltas}")
        if self.n_options < 1 or self.n_samples < 2:
            raise ValueError("need at least 1 option and 2 samples")
        if self.env_seeds is not None and len(self.env_seeds) != len(deltas):
            raise ValueError("one seed per environment is required")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("deltas", "env_seeds"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _draw_configurations(n_options, n_samples, rng):
    if n_options <= 20 and 2 ** n_options <= n_samples:
        codes = np.arange(2 ** n_options)
    elif n_options <= 62:
        codes = set()
        while len(codes) < n_samples:
            codes.update(int(c) for c in rng.integers(0, 2 ** n_options, size=n_samples))
        codes = np.array(sorted(codes)[:n_samples], dtype=np.int64)
        codes = rng.permutation(codes)
    else:
        return rng.integers(0, 2, size=(n_samples, n_options)).astype(float)
    bits = (codes[:, None] >> np.arange(n_options)[None, :]) & 1
    return bits.astype(float)


def _sparse_function(X, spec: SynthSpec, rng):
    """Sparse linear terms plus pairwise interactions, standardized on ``X``."""
    n, d = X.shape
    terms = rng.choice(d, size=min(spec.n_terms, d), replace=False)
    f = X[:, terms] @ rng.normal(0.0, 1.0, size=len(terms))
    if d > 1:
        for _ in range(spec.n_interactions):
            j, k = rng.choice(d, size=2, replace=False)
            f = f + spec.interaction_weight * rng.normal() * X[:, j] * X[:, k]
    return _standardize(f)


def _standardize(f):
    f = f - f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def generate_synthetic_system(spec: SynthSpec, seed: int) -> SystemDataset:
    """Environments whose log-performance blends a shared reference function
    with a private distortion.

    With ``g`` the reference and ``h`` an independent draw made orthogonal to
    ``g`` on the sampled configurations (both unit variance), divergence ``d``
    gives the signal ``sqrt(1 - d**2) * g + d * h``, i.e. ``d`` is the sine of
    the angle between the environment and the reference. Performance is
    ``base * exp(spread * (1 + growth * d) * signal)``: more divergent
    environments also spread wider.
    """
    root = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)
    shared_seq, *env_seqs = root.spawn(1 + len(spec.deltas))
    shared = np.random.default_rng(shared_seq)
    X = _draw_configurations(spec.n_options, spec.n_samples, shared)
    g = _sparse_function(X, spec, shared)

    envs = []
    for i, delta in enumerate(spec.deltas):
        if spec.env_seeds is not None:
            rng = np.random.default_rng([int(spec.env_seeds[i]) & 0xFFFFFFFF,
                                         int(seed) & 0xFFFFFFFF])
        else:
            rng = np.random.default_rng(env_seqs[i])
        h = _sparse_function(X, spec, rng)
        if g @ g > 0:
            h = _standardize(h - (h @ g) / (g @ g) * g)
        signal = math.sqrt(1.0 - delta ** 2) * g + delta * h
        y = spec.base * np.exp(spec.spread * (1.0 + spec.growth * delta) * signal)
        envs.append(EnvironmentDataset(f"e{i}", f"{spec.name}/delta={delta:.2f}", X, y))
    schema = OptionSchema(tuple(f"o{j}" for j in range(spec.n_options)),
                          (BINARY,) * spec.n_options)
    return SystemDataset(spec.name, schema, envs)
