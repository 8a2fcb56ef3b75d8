"""Declarative training and experiment configuration.

Configs are plain dataclasses. ``from_dict`` validates the incoming mapping
against the JSON schemas shipped in ``ssmri/schemas`` before building them.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any

import jsonschema

from .errors import ValidationError


class SchemaError(ValidationError):
    """A config document does not match its schema."""


@dataclass
class MaskSpec:
    kind: str = "random2d"
    rate: float = 0.2
    center_size: int | None = None
    seed: int = 0


@dataclass
class ResampleSpec:
    # "auto" follows the acquisition pattern: lines for cartesian1d, points otherwise
    kind: str = "auto"
    rate: float = 0.3
    center_size: int | None = None
    vary_per_step: bool = True


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 1e-5
    epochs: int = 20


@dataclass
class EMConfig:
    outer_iters: int = 4
    inner_tol: float = 1e-3
    inner_max_epochs: int = 5
    optimizer: str = "sgd"
    learning_rate: float | None = None
    n_probe: int = 4
    stop_on_omega: bool = False


@dataclass
class Ablations:
    no_resampling: bool = False
    fixed_resample_mask: bool = False
    no_stop_gradient: bool = False
    no_param_replacement: bool = False


@dataclass
class LossWeights:
    symmetry: float = 0.01
    similarity: float = 1.0


@dataclass
class NetConfig:
    n_phases: int = 9
    channels: int = 16
    rho: float = 0.5
    threshold: float = 0.01
    init: str = "random"
    init_noise: float = 1.0


@dataclass
class SSDUConfig:
    loss_fraction: float = 0.4
    repartition_each_epoch: bool = False


@dataclass
class ParallelConfig:
    same_partitions: bool = False
    shared_init: bool = False


@dataclass
class TrainConfig:
    strategy: str = "siamrecon"
    mask_spec: MaskSpec = field(default_factory=MaskSpec)
    resample_spec: ResampleSpec = field(default_factory=ResampleSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    em: EMConfig = field(default_factory=EMConfig)
    ablations: Ablations = field(default_factory=Ablations)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    ssdu: SSDUConfig = field(default_factory=SSDUConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    require_ssdu_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.optimizer.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.em.inner_tol <= 0:
            raise ValidationError("em.inner_tol must be positive")
        if self.em.outer_iters < 1 or self.em.inner_max_epochs < 1:
            raise ValidationError("em.outer_iters and em.inner_max_epochs must be >= 1")
        if self.strategy != "siamrecon" and self.ablations != Ablations():
            raise ValidationError("ablation flags only apply to the siamrecon strategy")

    @property
    def mstep_lr(self) -> float:
        lr = self.em.learning_rate
        return self.optimizer.learning_rate if lr is None else lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        validate(data, "train_config")
        return _build(cls, data)

    def replace(self, **changes) -> "TrainConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"em.outer_iters": 2})``."""
        d = self.to_dict()
        for key, value in changes.items():
            set_dotted(d, key, value)
        return TrainConfig.from_dict(d)


@dataclass
class DatasetSpec:
    count: int = 50
    H: int = 32
    W: int = 32
    seed: int = 0
    n_val: int = 0
    n_test: int = 10
    n_ellipses: int = 8


@dataclass
class EvalSpec:
    metrics: list[str] = field(default_factory=lambda: ["psnr", "ssim"])
    windowed_ssim: bool = True


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    acquisition: MaskSpec = field(default_factory=MaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = "runs/experiment"
    init_params: str | None = None
    ablation_rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])

    def __post_init__(self):
        if not self.name:
            raise ValidationError("experiment name must be nonempty")
        n_train = self.dataset.count - self.dataset.n_val - self.dataset.n_test
        if n_train < 1:
            raise ValidationError("dataset.count leaves no training items")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        validate(data, "experiment")
        return _build(cls, data)


def load_schema(name: str) -> dict:
    text = resources.files("ssmri").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _registry():
    from referencing import Registry, Resource

    resources_ = []
    for name in ("train_config", "experiment"):
        schema = load_schema(name)
        resources_.append((schema["$id"], Resource.from_contents(schema)))
    return Registry().with_resources(resources_)


def validate(data: Any, schema_name: str) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(schema_name), registry=_registry())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(f"schema error at {where}: {err.message}")


def _build(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        f = hints[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            kwargs[key] = _build(type(default), value)
        else:
            kwargs[key] = copy.deepcopy(value)
    return cls(**kwargs)


def set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise SchemaError(f"unknown config path {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise SchemaError(f"unknown config path {key!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``a.b=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise SchemaError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
