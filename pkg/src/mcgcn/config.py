"""Run configuration: a single JSON document, strictly validated.

Unknown keys are rejected and every field is bounds-checked before a run
starts. Errors name the offending dotted field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from mcgcn.datasynth import GeneratorConfig

TASK_MODES = ("multitask", "morphology_only", "distribution_only")
GRAPH_MODES = ("multi", "knn_only", "radius_only")


class ConfigError(ValueError):
    pass


@dataclass
class GraphParams:
    k: int = 5
    r: float = 0.15
    symmetrize: bool = False


@dataclass
class ModelParams:
    depth: int = 8
    hidden: int = 32
    beta: float = 1.0
    eps: float = 1e-7
    fusion: str = "concat"
    shared_streams: bool = False
    use_edge_features: bool = True


@dataclass
class TrainingParams:
    optimizer: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 8
    alpha: float = 1.5
    weight_lr: float = 0.025
    grad_clip: float = 5.0
    weight_decay: float = 0.0


@dataclass
class DistillationParams:
    enabled: bool = False
    teacher_logits_path: str | None = None
    temperature: float = 2.0


@dataclass
class AblationParams:
    task_modes: list = field(default_factory=lambda: list(TASK_MODES))
    graph_modes: list = field(default_factory=lambda: list(GRAPH_MODES))
    depths: list = field(default_factory=lambda: [2, 4, 8, 16])
    seeds: list = field(default_factory=list)


@dataclass
class Paths:
    dataset: str = "data"


@dataclass
class RunConfig:
    seed: int = 7
    paths: Paths = field(default_factory=Paths)
    generator: dict = field(default_factory=dict)
    graph: GraphParams = field(default_factory=GraphParams)
    model: ModelParams = field(default_factory=ModelParams)
    training: TrainingParams = field(default_factory=TrainingParams)
    task_mode: str = "multitask"
    graph_mode: str = "multi"
    distillation: DistillationParams = field(default_factory=DistillationParams)
    ablation: AblationParams = field(default_factory=AblationParams)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(seed=self.seed, **self.generator)

    @property
    def streams(self) -> tuple:
        return {"multi": ("knn", "radius"), "knn_only": ("knn",), "radius_only": ("radius",)}[self.graph_mode]

    def validate(self) -> "RunConfig":
        def need(name, ok, bound):
            if not ok:
                raise ConfigError(f"{name} must be {bound}, got {_lookup(self, name)!r}")

        need("seed", isinstance(self.seed, int) and self.seed >= 0, "a nonnegative integer")
        need("graph.k", isinstance(self.graph.k, int) and self.graph.k >= 1, "an integer >= 1")
        need("graph.r", _num(self.graph.r) and self.graph.r >= 0, ">= 0")
        need("model.depth", isinstance(self.model.depth, int) and 0 <= self.model.depth <= 64, "an integer in [0, 64]")
        need("model.hidden", isinstance(self.model.hidden, int) and 1 <= self.model.hidden <= 1024, "an integer in [1, 1024]")
        need("model.beta", _num(self.model.beta) and 0 <= self.model.beta <= 1e6, "in [0, 1e6]")
        need("model.eps", _num(self.model.eps) and 0 < self.model.eps <= 1e-2, "in (0, 1e-2]")
        need("model.fusion", self.model.fusion == "concat", "'concat'")
        need("training.optimizer", self.training.optimizer == "sgd_momentum", "'sgd_momentum'")
        need("training.lr", _num(self.training.lr) and 0 < self.training.lr <= 10, "in (0, 10]")
        need("training.momentum", _num(self.training.momentum) and 0 <= self.training.momentum < 1, "in [0, 1)")
        need("training.epochs", isinstance(self.training.epochs, int) and 0 <= self.training.epochs <= 100_000, "an integer in [0, 100000]")
        need("training.batch_size", isinstance(self.training.batch_size, int) and self.training.batch_size >= 1, "an integer >= 1")
        need("training.alpha", _num(self.training.alpha) and 0 <= self.training.alpha <= 10, "in [0, 10]")
        need("training.weight_lr", _num(self.training.weight_lr) and 0 < self.training.weight_lr <= 1, "in (0, 1]")
        need("training.grad_clip", _num(self.training.grad_clip) and self.training.grad_clip >= 0, ">= 0 (0 disables)")
        need("training.weight_decay", _num(self.training.weight_decay) and 0 <= self.training.weight_decay < 1, "in [0, 1)")
        need("task_mode", self.task_mode in TASK_MODES, f"one of {TASK_MODES}")
        need("graph_mode", self.graph_mode in GRAPH_MODES, f"one of {GRAPH_MODES}")
        need("distillation.temperature", _num(self.distillation.temperature) and self.distillation.temperature > 0, "> 0")
        need(
            "distillation.teacher_logits_path",
            not self.distillation.enabled or bool(self.distillation.teacher_logits_path),
            "set when distillation is enabled",
        )
        need("ablation.task_modes", bool(self.ablation.task_modes) and all(m in TASK_MODES for m in self.ablation.task_modes), f"a non-empty list from {TASK_MODES}")
        need("ablation.graph_modes", bool(self.ablation.graph_modes) and all(m in GRAPH_MODES for m in self.ablation.graph_modes), f"a non-empty list from {GRAPH_MODES}")
        need("ablation.depths", bool(self.ablation.depths) and all(isinstance(d, int) and 0 <= d <= 64 for d in self.ablation.depths), "a non-empty list of integers in [0, 64]")
        need("ablation.seeds", all(isinstance(s, int) and s >= 0 for s in self.ablation.seeds), "a list of nonnegative integers")
        try:
            self.generator_config().validate()
        except TypeError as exc:
            raise ConfigError(f"generator: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x == x and abs(x) != float("inf")


def _lookup(obj, dotted):
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        target = _NESTED.get((cls, name))
        if target is not None:
            kwargs[name] = _build(target, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "paths"): Paths,
    (RunConfig, "graph"): GraphParams,
    (RunConfig, "model"): ModelParams,
    (RunConfig, "training"): TrainingParams,
    (RunConfig, "distillation"): DistillationParams,
    (RunConfig, "ablation"): AblationParams,
}


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    gen_fields = {f.name for f in dataclasses.fields(GeneratorConfig)} - {"seed"}
    unknown = sorted(set(cfg.generator) - gen_fields)
    if unknown:
        raise ConfigError(f"unknown config key generator.{unknown[0]}")
    return cfg.validate()


def load(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)
