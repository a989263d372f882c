"""Experiment configuration files.

A configuration is a TOML document with the tables below.  Every key is
optional unless marked otherwise; unknown tables or keys are rejected.

``[experiment]``
    ``algorithm`` (str) or ``algorithms`` (list of str), required;
    ``seed`` = 0, ``rounds`` = 20, ``local_epochs`` = 1, ``batch_size`` = 32,
    ``base_lr`` = 0.01, ``beta`` = 0.99, ``gamma`` = 0.99,
    ``sample_fraction`` = 1.0
``[model]``
    ``kind`` = "softmax_regression", ``hidden_dims`` = []
``[data]``
    ``source`` = "synthetic" or "idx"; ``train_size`` and ``test_size``
    (required); ``seed`` defaults to the experiment seed.
    Synthetic: ``num_classes`` = 2, ``per_class`` = 300, ``input_dim`` = 10,
    ``separation`` = 3.0.  IDX: ``images``, ``labels`` (paths relative to
    ``paths.dataset_dir``), ``num_classes`` = 10.
``[partition]``
    ``scheme`` = "iid", ``clients`` = 10, ``alpha_d``, ``shards_per_client``
``[algo_params]``
    ``mu`` = 0.01, ``alpha`` = 0.001, ``beta1`` = 0.9, ``beta2`` = 0.99,
    ``tau`` = 1e-3, ``server_lr`` = 0.01
``[fixed_point]``
    ``eps1`` = 1e-3, ``eps2`` = 1e-3, ``max_outer`` = 200,
    ``inner_tol`` = 1e-8, ``inner_max_iters`` = 100, ``damping`` = 0.5
``[bounds]``
    ``trials`` = 50, ``radius`` = 1e-3
``[paths]``
    ``dataset_dir`` = ".", ``output_dir`` = "out",
    ``trajectory_path`` = "trajectory_{algorithm}_seed{seed}.mft"
    (relative paths resolve against the config file's directory; the
    trajectory path resolves against ``output_dir``)
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import LabeledDataset, PartitionSpec, load_idx, make_synthetic, train_test_split
from .engine import ALGORITHMS, AlgoParams, TrainingConfig
from .meanfield import FixedPointConfig
from .models import ModelSpec
from .numerics import Stream, rng_stream


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, dict[str, tuple[type, ...]]] = {
    "experiment": {"algorithm": (str,), "algorithms": (list,), "seed": (int,), "rounds": (int,),
                   "local_epochs": (int,), "batch_size": (int,), "base_lr": (int, float),
                   "beta": (int, float), "gamma": (int, float), "sample_fraction": (int, float)},
    "model": {"kind": (str,), "hidden_dims": (list,)},
    "data": {"source": (str,), "train_size": (int,), "test_size": (int,), "seed": (int,),
             "num_classes": (int,), "per_class": (int,), "input_dim": (int,), "separation": (int, float),
             "images": (str,), "labels": (str,)},
    "partition": {"scheme": (str,), "clients": (int,), "alpha_d": (int, float), "shards_per_client": (int,)},
    "algo_params": {"mu": (int, float), "alpha": (int, float), "beta1": (int, float), "beta2": (int, float),
                    "tau": (int, float), "server_lr": (int, float)},
    "fixed_point": {"eps1": (int, float), "eps2": (int, float), "max_outer": (int,),
                    "inner_tol": (int, float), "inner_max_iters": (int,), "damping": (int, float)},
    "bounds": {"trials": (int,), "radius": (int, float)},
    "paths": {"dataset_dir": (str,), "output_dir": (str,), "trajectory_path": (str,)},
}


@dataclass(frozen=True)
class DataConfig:
    source: str
    train_size: int
    test_size: int
    seed: int
    num_classes: int
    per_class: int = 300
    input_dim: int = 10
    separation: float = 3.0
    images: Path | None = None
    labels: Path | None = None


@dataclass(frozen=True)
class ExperimentFile:
    algorithms: tuple[str, ...]
    training: TrainingConfig
    data: DataConfig
    output_dir: Path
    trajectory_template: str
    bound_trials: int = 50
    bound_radius: float = 1e-3
    _explicit_data_seed: bool = False

    def config_for(self, algorithm: str) -> TrainingConfig:
        return self.training.with_algorithm(algorithm)

    def trajectory_path(self, algorithm: str) -> Path:
        name = self.trajectory_template.format(algorithm=algorithm, seed=self.training.seed)
        path = Path(name)
        return path if path.is_absolute() else self.output_dir / path

    def with_seed(self, seed: int) -> "ExperimentFile":
        data = self.data if self._explicit_data_seed else replace(self.data, seed=seed)
        training = replace(self.training, seed=seed, partition=replace(self.training.partition, seed=seed))
        return replace(self, training=training, data=data)

    def with_output(self, output_dir) -> "ExperimentFile":
        return replace(self, output_dir=Path(output_dir))



def _check_types(doc: dict[str, Any]) -> None:
    for table, body in doc.items():
        if table not in _SCHEMA:
            raise ConfigError(f"unknown table [{table}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{table}] must be a table")
        for key, value in body.items():
            if key not in _SCHEMA[table]:
                raise ConfigError(f"unknown key [{table}].{key}")
            allowed = _SCHEMA[table][key]
            if isinstance(value, bool) or not isinstance(value, allowed):
                names = " or ".join(t.__name__ for t in allowed)
                raise ConfigError(f"[{table}].{key}: expected {names}, got {type(value).__name__}")


def parse(text: str, base_dir: Path = Path(".")) -> ExperimentFile:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from None
    _check_types(doc)
    ex = doc.get("experiment", {})
    if ("algorithm" in ex) == ("algorithms" in ex):
        raise ConfigError("[experiment] needs exactly one of 'algorithm' or 'algorithms'")
    algorithms = tuple(ex["algorithms"]) if "algorithms" in ex else (ex["algorithm"],)
    if not algorithms:
        raise ConfigError("[experiment].algorithms is empty")
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"[experiment].algorithm: unknown algorithm {a!r}")
    seed = ex.get("seed", 0)

    d = doc.get("data", {})
    source = d.get("source", "synthetic")
    for key in ("train_size", "test_size"):
        if key not in d:
            raise ConfigError(f"[data].{key} is required")
    paths = doc.get("paths", {})
    dataset_dir = base_dir / paths.get("dataset_dir", ".")
    if source == "synthetic":
        extra = {k: d[k] for k in ("per_class", "input_dim", "separation") if k in d}
        data = DataConfig("synthetic", d["train_size"], d["test_size"], d.get("seed", seed),
                          d.get("num_classes", 2), **extra)
        input_dim = data.input_dim
    elif source == "idx":
        for key in ("images", "labels"):
            if key not in d:
                raise ConfigError(f"[data].{key} is required for source = 'idx'")
        data = DataConfig("idx", d["train_size"], d["test_size"], d.get("seed", seed), d.get("num_classes", 10),
                          images=dataset_dir / d["images"], labels=dataset_dir / d["labels"])
        input_dim = None
    else:
        raise ConfigError(f"[data].source: expected 'synthetic' or 'idx', got {source!r}")

    m = doc.get("model", {})
    p = doc.get("partition", {})
    try:
        model_kwargs = dict(kind=m.get("kind", "softmax_regression"), num_classes=data.num_classes,
                            hidden_dims=tuple(m.get("hidden_dims", ())))
        # IDX images are 28x28 unless the file says otherwise; checked again at load time
        model = ModelSpec(input_dim=input_dim or 784, **model_kwargs)
        part = PartitionSpec(p.get("scheme", "iid"), p.get("clients", 10), seed,
                             p.get("alpha_d"), p.get("shards_per_client"))
        training = TrainingConfig(
            algorithm=algorithms[0], model=model, partition=part,
            T=ex.get("rounds", 20), E=ex.get("local_epochs", 1), batch_size=ex.get("batch_size", 32),
            base_lr=float(ex.get("base_lr", 0.01)), beta=float(ex.get("beta", 0.99)),
            gamma=float(ex.get("gamma", 0.99)), sample_fraction=float(ex.get("sample_fraction", 1.0)),
            seed=seed,
            algo_params=AlgoParams(**{k: float(v) for k, v in doc.get("algo_params", {}).items()}),
            fixed_point=FixedPointConfig(**doc.get("fixed_point", {})),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    bounds = doc.get("bounds", {})
    return ExperimentFile(
        algorithms=algorithms,
        training=training,
        data=data,
        output_dir=base_dir / paths.get("output_dir", "out"),
        trajectory_template=paths.get("trajectory_path", "trajectory_{algorithm}_seed{seed}.mft"),
        bound_trials=bounds.get("trials", 50),
        bound_radius=float(bounds.get("radius", 1e-3)),
        _explicit_data_seed="seed" in d,
    )


def load(path) -> ExperimentFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse(text, path.parent)


def load_datasets(exp: ExperimentFile) -> tuple[LabeledDataset, LabeledDataset]:
    """Build the train/test split described by ``exp.data``."""
    d = exp.data
    if d.source == "synthetic":
        full = make_synthetic(d.num_classes, d.per_class, d.input_dim, d.separation,
                              rng_stream(d.seed, Stream.SYNTHETIC), "synthetic")
    else:
        full = load_idx(d.images, d.labels, d.num_classes)
        if full.X.shape[1] != exp.training.model.input_dim:
            raise ConfigError(f"images have {full.X.shape[1]} pixels, model expects "
                              f"{exp.training.model.input_dim}")
    if d.train_size + d.test_size > len(full):
        raise ConfigError(f"train_size + test_size = {d.train_size + d.test_size} exceeds "
                          f"the {len(full)} available examples")
    return train_test_split(full, d.train_size, d.test_size, rng_stream(d.seed, Stream.SPLIT))
