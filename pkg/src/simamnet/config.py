"""Run configuration: a strict YAML document with a canonical dump.

Every key is optional and falls back to the component defaults. Unknown or
mistyped keys raise ConfigError naming the key path and source line.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import yaml

from .datapipe import AugmentPolicy
from .features import HogSpec
from .harness import FEATURE_KINDS, MODEL_KINDS, BenchConfig, FeatureParams, TrainConfig
from .resnet import ResNetConfig, Stem
from .simam import Placement, SimAMConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    pass


# field kinds used by the validator
_INT, _FLOAT, _BOOL, _STR, _OPT_STR = "int", "float", "bool", "str", "str or null"
_INTS, _FLOATS, _STRS = "list of int", "list of float", "list of str"


def _f(kind, default, choices=None):
    meta = {"kind": kind, "choices": choices}
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DataSection:
    manifest: str | None = _f(_OPT_STR, None)     # null -> generate synthetic pairs
    synth_n: int = _f(_INT, 300)
    synth_size: int = _f(_INT, 64)
    val_fraction: float = _f(_FLOAT, 0.2)
    keep_rgb: bool = _f(_BOOL, False)


@dataclass
class ModelSection:
    stem: str = _f(_STR, Stem.SMALL_3X3.value, [s.value for s in Stem])
    width_mult: float = _f(_FLOAT, 1.0)
    post_add_relu: bool = _f(_BOOL, True)
    blocks_per_stage: list = _f(_INTS, [3, 4, 6, 3])
    simam_lambda: float = _f(_FLOAT, 1e-4)
    simam_placement: str = _f(_STR, Placement.PER_BLOCK_ADDITIVE.value,
                              [p.value for p in Placement])
    dtype: str = _f(_STR, "float32", ["float32", "float64"])


@dataclass
class TrainSection:
    epochs: int = _f(_INT, 500)
    batch_size: int = _f(_INT, 16)
    lr: float = _f(_FLOAT, 0.01)
    lr_min: float = _f(_FLOAT, 1e-4)
    momentum: float = _f(_FLOAT, 0.9)
    weight_decay: float = _f(_FLOAT, 1e-4)


@dataclass
class AugmentSection:
    enabled: bool = _f(_BOOL, True)
    hflip_prob: float = _f(_FLOAT, 0.5)
    vflip_prob: float = _f(_FLOAT, 0.5)
    rotation_degrees: list = _f(_FLOATS, [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0])
    brightness_min: float = _f(_FLOAT, 0.8)
    brightness_max: float = _f(_FLOAT, 1.2)


@dataclass
class FeatureSection:
    subsample_size: int = _f(_INT, 16)
    histogram_bins: int = _f(_INT, 32)
    pca_k: int = _f(_INT, 16)
    hog_cell: int = _f(_INT, 8)
    hog_bins: int = _f(_INT, 9)
    hog_block: int = _f(_INT, 2)


@dataclass
class BenchSection:
    models: list = _f(_STRS, list(MODEL_KINDS), list(MODEL_KINDS))
    features: list = _f(_STRS, list(FEATURE_KINDS), list(FEATURE_KINDS))
    cnn_epochs: int = _f(_INT, 10)
    mlp_epochs: int = _f(_INT, 100)
    mlp_hidden: int = _f(_INT, 64)


@dataclass
class OutputSection:
    dir: str = _f(_STR, "runs/default")


@dataclass
class RunConfig:
    seed: int = _f(_INT, 0)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    bench: BenchSection = field(default_factory=BenchSection)
    output: OutputSection = field(default_factory=OutputSection)

    # component views

    def resnet_config(self) -> ResNetConfig:
        m = self.model
        return ResNetConfig(input_channels=6 if self.data.keep_rgb else 2, stem=Stem(m.stem),
                            width_mult=m.width_mult, post_add_relu=m.post_add_relu,
                            blocks_per_stage=tuple(m.blocks_per_stage),
                            simam=SimAMConfig(m.simam_lambda, Placement(m.simam_placement)))

    def augment_policy(self) -> AugmentPolicy | None:
        a = self.augment
        if not a.enabled:
            return None
        return AugmentPolicy(a.hflip_prob, a.vflip_prob, tuple(a.rotation_degrees),
                             (a.brightness_min, a.brightness_max), self.seed)

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs if epochs is None else epochs,
                           batch_size=t.batch_size, lr=t.lr, lr_min=t.lr_min,
                           momentum=t.momentum, weight_decay=t.weight_decay,
                           seed=self.seed, augmentation=self.augment_policy())

    def feature_params(self) -> FeatureParams:
        f = self.features
        return FeatureParams(f.subsample_size, f.histogram_bins, f.pca_k,
                             HogSpec(f.hog_cell, f.hog_bins, f.hog_block))

    def bench_config(self) -> BenchConfig:
        b = self.bench
        mlp = TrainConfig(epochs=b.mlp_epochs, batch_size=self.train.batch_size,
                          lr=self.train.lr, lr_min=self.train.lr_min,
                          momentum=self.train.momentum,
                          weight_decay=self.train.weight_decay, seed=self.seed)
        return BenchConfig(cnn=self.resnet_config(), cnn_train=self.train_config(b.cnn_epochs),
                           mlp_train=mlp, mlp_hidden=b.mlp_hidden,
                           features=self.feature_params(), seed=self.seed,
                           dtype=self.model.dtype)

    def validate(self) -> None:
        """Build every component config so range errors surface at load time."""
        try:
            self.resnet_config()
            self.train_config()
            self.bench_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 < self.data.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        if self.data.synth_n < 3:
            raise ConfigError("data.synth_n must be >= 3")


def _line(marks: dict, path: str) -> str:
    return f" (line {marks[path]})" if path in marks else ""


def _collect_marks(node, path: str, marks: dict) -> None:
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            sub = f"{path}.{key}" if path else key
            if key in seen:
                raise ConfigError(f"duplicate key '{sub}' (line {k.start_mark.line + 1})")
            seen.add(key)
            marks[sub] = k.start_mark.line + 1
            _collect_marks(v, sub, marks)


def _check_value(kind: str, value: Any, path: str, marks: dict, choices) -> Any:
    def bad():
        return ConfigError(f"key '{path}'{_line(marks, path)}: expected {kind}, "
                           f"got {value!r}")

    def scalar(k, v):
        if k == _BOOL:
            if not isinstance(v, bool):
                raise bad()
            return v
        if k == _INT:
            if isinstance(v, bool) or not isinstance(v, int):
                raise bad()
            return v
        if k == _FLOAT:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise bad()
            return float(v)
        if not isinstance(v, str):
            raise bad()
        if choices is not None and v not in choices:
            raise ConfigError(f"key '{path}'{_line(marks, path)}: {v!r} not one of "
                              f"{', '.join(choices)}")
        return v

    if kind == _OPT_STR:
        return None if value is None else scalar(_STR, value)
    if kind in (_INTS, _FLOATS, _STRS):
        if not isinstance(value, list):
            raise bad()
        elem = {_INTS: _INT, _FLOATS: _FLOAT, _STRS: _STR}[kind]
        return [scalar(elem, v) for v in value]
    return scalar(kind, value)


def _build(cls, data, path: str, marks: dict):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"key '{path or '<root>'}'{_line(marks, path)}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            sub = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key '{sub}'{_line(marks, sub)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        section = f.default_factory if is_dataclass(f.default_factory) else None
        if section is not None:
            kwargs[name] = _build(section, value, sub, marks)
        else:
            kwargs[name] = _check_value(f.metadata["kind"], value, sub, marks,
                                        f.metadata["choices"])
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            marks: dict = {}
            if node is not None:
                _collect_marks(node, "", marks)
            data = loader.construct_document(node) if node is not None else {}
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    cfg = _build(RunConfig, data, "", marks)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _as_tree(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _as_tree(v) if is_dataclass(v) else (list(v) if isinstance(v, list) else v)
    return out


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML: fixed key order, every field present, block style."""
    return yaml.safe_dump(_as_tree(cfg), sort_keys=False, default_flow_style=False,
                          allow_unicode=False, width=1000)
