"""Benchmark configuration files.

INI-style sections, all optional::

    [benchmark]     fixed rules; may only restate their required values
    nas_method = network-morphism
    hpo_method = bayesian
    seed_architecture = resnet50
    min_precision_bits = 16
    max_error = 0.30

    [dataset]       ImageNet by default; anything else is flagged nonstandard
    train_images = 1281167
    val_images = 50000
    image_shape = 224x224x3

    [cluster]       ClusterConfig fields (replica_count, run_budget_seconds, ...)

    [executor]
    kind = simulated            ; or "command"
    command_template = ./train.sh {arch_file} {epoch} {batch_size} {kernel_size} {out_file}

    [hpo]
    batch_size = 448
    kernel_size = 3
    learning_rate = 0.1 with linear decay
    optimizer = gradient descent with momentum
    loss = categorical cross entropy
    parallel_data_transformation = 48

Learning rate, optimizer, loss and data-transformation parallelism are
recorded and forwarded to the command executor; the simulator ignores them.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, ConfigParseError, FixedFieldOverride, RangeError
from .graph import TensorShape
from .harness import ClusterConfig
from .hpo import HyperParams
from .opcount import IMAGENET, DatasetDescriptor

SEED_ENV = "AIPERF_SEED"
EXECUTORS = ("simulated", "command")

FIXED = {
    "nas_method": "network-morphism",
    "hpo_method": "bayesian",
    "seed_architecture": "resnet50",
    "min_precision_bits": 16,
    "max_error": 0.30,
}


@dataclass(frozen=True)
class BenchmarkConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    dataset: DatasetDescriptor = IMAGENET
    hyperparams: HyperParams = field(default_factory=HyperParams)
    executor: str = "simulated"
    command_template: str = ""
    learning_rate: str = "0.1 with linear decay"
    optimizer: str = "gradient descent with momentum"
    loss: str = "categorical cross entropy"
    parallel_data_transformation: int = 48

    # fixed rules are read-only attributes, not fields
    nas_method = FIXED["nas_method"]
    hpo_method = FIXED["hpo_method"]
    seed_architecture = FIXED["seed_architecture"]
    min_precision_bits = FIXED["min_precision_bits"]
    max_error = FIXED["max_error"]

    def __post_init__(self):
        if self.executor not in EXECUTORS:
            raise RangeError(f"executor kind must be one of {EXECUTORS}, got {self.executor!r}")
        if self.executor == "command" and not self.command_template:
            raise ConfigError("executor kind 'command' needs a command_template")
        if self.parallel_data_transformation < 1:
            raise RangeError("parallel_data_transformation must be positive")

    @property
    def nonstandard(self) -> bool:
        return self.dataset != IMAGENET

    def with_seed(self, seed: int) -> "BenchmarkConfig":
        return dataclasses.replace(self, cluster=dataclasses.replace(self.cluster, rng_seed=seed))

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready resolved configuration, used as the run-log header."""
        return {
            "benchmark": dict(FIXED),
            "dataset": {
                "train_images": self.dataset.train_images,
                "val_images": self.dataset.val_images,
                "image_shape": str(self.dataset.image_shape),
                "nonstandard": self.nonstandard,
            },
            "cluster": dataclasses.asdict(self.cluster),
            "executor": {"kind": self.executor, "command_template": self.command_template},
            "hpo": {
                "batch_size": self.hyperparams.batch_size,
                "kernel_size": self.hyperparams.kernel_size,
                "learning_rate": self.learning_rate,
                "optimizer": self.optimizer,
                "loss": self.loss,
                "parallel_data_transformation": self.parallel_data_transformation,
            },
            "rng_seed": self.cluster.rng_seed,
        }

    def passthrough(self) -> dict[str, Any]:
        """Extra placeholders offered to command templates."""
        return {
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "loss": self.loss,
            "parallel_data_transformation": self.parallel_data_transformation,
        }


_CLUSTER_TYPES = {f.name: f.type for f in dataclasses.fields(ClusterConfig)}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigParseError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None
    return raw


def loads_config(text: str) -> BenchmarkConfig:
    # interpolation off: command templates contain braces and percent signs
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc)) from None

    unknown = set(cp.sections()) - {"benchmark", "dataset", "cluster", "executor", "hpo"}
    if unknown:
        raise ConfigParseError(f"unknown section(s): {sorted(unknown)}")

    def section(name, allowed):
        if not cp.has_section(name):
            return {}
        items = dict(cp.items(name))
        bad = set(items) - set(allowed)
        if bad:
            raise ConfigParseError(f"[{name}] unknown key(s): {sorted(bad)}")
        return items

    for key, raw in section("benchmark", FIXED).items():
        want = FIXED[key]
        got = _convert("benchmark", key, raw, type(want))
        if got != want:
            raise FixedFieldOverride(f"[benchmark] {key} is fixed at {want!r}; cannot set {raw!r}")

    kwargs: dict[str, Any] = {}
    try:
        ds = section("dataset", ("train_images", "val_images", "image_shape"))
        if ds:
            kwargs["dataset"] = DatasetDescriptor(
                train_images=_convert("dataset", "train_images", ds.get("train_images", str(IMAGENET.train_images)), int),
                val_images=_convert("dataset", "val_images", ds.get("val_images", str(IMAGENET.val_images)), int),
                image_shape=TensorShape.parse(ds.get("image_shape", str(IMAGENET.image_shape))),
            )

        cl = section("cluster", _CLUSTER_TYPES)
        kwargs["cluster"] = ClusterConfig(**{k: _convert("cluster", k, v, _CLUSTER_TYPES[k]) for k, v in cl.items()})

        ex = section("executor", ("kind", "command_template"))
        if "kind" in ex:
            kwargs["executor"] = ex["kind"].strip()
        if "command_template" in ex:
            kwargs["command_template"] = ex["command_template"].strip()

        hp = section("hpo", ("batch_size", "kernel_size", "learning_rate", "optimizer", "loss",
                             "parallel_data_transformation"))
        kwargs["hyperparams"] = HyperParams(
            batch_size=_convert("hpo", "batch_size", hp.get("batch_size", "448"), int),
            kernel_size=_convert("hpo", "kernel_size", hp.get("kernel_size", "3"), int),
        )
        for key in ("learning_rate", "optimizer", "loss"):
            if key in hp:
                kwargs[key] = hp[key].strip()
        if "parallel_data_transformation" in hp:
            kwargs["parallel_data_transformation"] = _convert(
                "hpo", "parallel_data_transformation", hp["parallel_data_transformation"], int)
        return BenchmarkConfig(**kwargs)
    except (ConfigParseError, FixedFieldOverride, RangeError):
        raise
    except (ConfigError, ValueError) as exc:
        raise RangeError(str(exc)) from None


def load_config(path) -> BenchmarkConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from None
    return loads_config(text)


def dumps_config(cfg: BenchmarkConfig) -> str:
    d = cfg.to_dict()
    lines = ["[benchmark]"]
    lines += [f"{k} = {v}" for k, v in FIXED.items()]
    lines += ["", "[dataset]"]
    lines += [f"{k} = {d['dataset'][k]}" for k in ("train_images", "val_images", "image_shape")]
    lines += ["", "[cluster]"]
    lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in d["cluster"].items()]
    lines += ["", "[executor]", f"kind = {cfg.executor}", f"command_template = {cfg.command_template}"]
    lines += ["", "[hpo]"]
    lines += [f"{k} = {v}" for k, v in d["hpo"].items()]
    return "\n".join(lines) + "\n"


def apply_env(cfg: BenchmarkConfig, environ: Mapping[str, str] | None = None) -> BenchmarkConfig:
    """Honour ``AIPERF_SEED`` so CI can pin the seed without editing files."""
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.with_seed(int(raw))
    except ValueError:
        raise ConfigParseError(f"{SEED_ENV}={raw!r} is not an integer") from None
