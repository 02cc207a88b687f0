"""Strict YAML run configuration.

Four optional top-level sections map onto dataclasses::

    model:     {depth, embed_size, num_heads, ffn_mult, latent_dim, fusion_mode, ...}
    train:     {steps, batch_size, learning_rate, warmup_steps, mask_ratio, seed, balanced, ...}
    tasks:     {weights: {task_id: int}}
    inference: {steps, guidance_scale, sway, n_samples, seed}

Unknown sections or keys are rejected and every error carries the line and
column of the offending node.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evaluate import EVAL_SAMPLES, EVAL_SEED
from .flowmatch import DEFAULT_STEPS, DEFAULT_SWAY
from .model import ModelConfig
from .tasks import ConfigError, TaskRegistry
from .train import TrainConfig


@dataclass
class InferenceConfig:
    steps: int = DEFAULT_STEPS
    guidance_scale: float | None = None  # None: per-task default
    sway: float = DEFAULT_SWAY
    n_samples: int = EVAL_SAMPLES
    seed: int = EVAL_SEED


@dataclass
class TasksConfig:
    weights: dict[str, int] = field(default_factory=dict)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def registry(self) -> TaskRegistry:
        return TaskRegistry().with_weights(self.tasks.weights)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "tasks": TasksConfig, "inference": InferenceConfig}


def _where(source: str, node: yaml.Node) -> str:
    m = node.start_mark
    return f"{source}:{m.line + 1}:{m.column + 1}"


def _scalar(node: yaml.Node, source: str, want, key: str):
    if not isinstance(node, yaml.ScalarNode):
        if want is tuple and isinstance(node, yaml.SequenceNode):
            return tuple(_scalar(n, source, float, key) for n in node.value)
        raise ConfigError(f"{_where(source, node)}: {key} expects a scalar")
    value = yaml.safe_load(node.value) if node.style is None else node.value
    if want in (float, "float|None") and isinstance(value, str) and node.style is None:
        # YAML 1.1 reads "3e-4" (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
    }.get(want, False)
    if want == "float|None":
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if not ok:
        name = want if isinstance(want, str) else want.__name__
        raise ConfigError(f"{_where(source, node)}: {key} expects {name}, got {node.value!r}")
    return float(value) if want is float else value


def _field_kind(f: dataclasses.Field):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return {
        "int": int, "float": float, "bool": bool, "str": str,
        "float | None": "float|None", "tuple[float, float]": tuple,
    }.get(t, t)


def _mapping(node: yaml.Node, source: str, what: str) -> list[tuple[yaml.ScalarNode, yaml.Node]]:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(source, node)}: {what} must be a mapping")
    seen = set()
    for k, _ in node.value:
        if k.value in seen:
            raise ConfigError(f"{_where(source, k)}: duplicate key {k.value!r}")
        seen.add(k.value)
    return node.value


def _section(cls, node: yaml.Node, source: str, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in _mapping(node, source, f"section {name!r}"):
        if k.value not in fields:
            raise ConfigError(f"{_where(source, k)}: unknown key {name}.{k.value} (allowed: {sorted(fields)})")
        kind = _field_kind(fields[k.value])
        if k.value == "weights":
            known = TaskRegistry().task_ids
            weights = {}
            for wk, wv in _mapping(v, source, "tasks.weights"):
                if wk.value not in known:
                    raise ConfigError(f"{_where(source, wk)}: unknown task {wk.value!r} (allowed: {known})")
                weights[wk.value] = _scalar(wv, source, int, f"{name}.weights.{wk.value}")
            kwargs["weights"] = weights
        else:
            kwargs[k.value] = _scalar(v, source, kind, f"{name}.{k.value}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{_where(source, node)}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        m = exc.problem_mark
        where = f"{source}:{m.line + 1}:{m.column + 1}" if m else source
        raise ConfigError(f"{where}: {exc.problem}") from None
    if root is None:
        return RunConfig()
    parts = {}
    for k, v in _mapping(root, source, "config"):
        if k.value not in SECTIONS:
            raise ConfigError(f"{_where(source, k)}: unknown section {k.value!r} (allowed: {sorted(SECTIONS)})")
        parts[k.value] = _section(SECTIONS[k.value], v, source, k.value)
    cfg = RunConfig(**parts)
    try:
        cfg.registry()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
