"""Bottleneck blocks and the staged ResNet-50 builder with SimAM placement."""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (BatchNormParams, Conv2dParams, LinearParams, batchnorm, conv2d,
                     global_avg_pool, linear, maxpool2)
from .rng import derive_rng
from .simam import Placement, SimAMConfig, apply_placement, simam_forward
from .tensor import Tensor, TensorError, add, relu

__all__ = [
    "Stem", "StageConfig", "ResNetConfig", "BottleneckParams", "ResNetModel",
    "stage_configs", "bottleneck_forward", "build_model", "forward", "param_count",
    "save_checkpoint", "load_checkpoint", "MIN_INPUT_EXTENT",
]

# ResNet-50 stage table: bottleneck width, output width, block count
STAGE_MIDS = (64, 128, 256, 512)
STAGE_BLOCKS = (3, 4, 6, 3)
EXPANSION = 4
STEM_WIDTH = 64
MIN_INPUT_EXTENT = 32


class Stem(str, enum.Enum):
    PAPER_1X1 = "paper_1x1"      # 1x1 conv, 64 -> bn -> relu -> 2x2 max pool
    CLASSIC_7X7 = "classic_7x7"  # 7x7 stride-2 conv -> bn -> relu -> 2x2 max pool
    SMALL_3X3 = "small_3x3"      # 3x3 stride-1 conv -> bn -> relu, no pooling


@dataclass(frozen=True)
class StageConfig:
    c_mid: int
    c_out: int
    blocks: int
    stride: int


@dataclass(frozen=True)
class ResNetConfig:
    input_channels: int = 2
    num_classes: int = 3
    stem: Stem = Stem.SMALL_3X3
    width_mult: float = 1.0
    simam: SimAMConfig = field(default_factory=SimAMConfig)
    post_add_relu: bool = True
    blocks_per_stage: tuple[int, ...] = STAGE_BLOCKS

    def __post_init__(self):
        object.__setattr__(self, "stem", Stem(self.stem))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        if isinstance(self.simam, dict):
            object.__setattr__(self, "simam", SimAMConfig(**self.simam))
        if not 0 < self.width_mult <= 1:
            raise ValueError(f"width_mult must lie in (0, 1], got {self.width_mult}")
        if self.input_channels < 1 or self.num_classes < 2:
            raise ValueError("need input_channels >= 1 and num_classes >= 2")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError("blocks_per_stage needs four positive counts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem"] = self.stem.value
        d["simam"] = {"lam": self.simam.lam, "placement": self.simam.placement.value}
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResNetConfig":
        return cls(**d)


def _scaled(c: int, width: float) -> int:
    out = int(round(c * width))
    if out < 1:
        raise ValueError(f"width_mult {width} leaves zero channels for width {c}")
    return out


def stage_configs(cfg: ResNetConfig) -> list[StageConfig]:
    stages = []
    for i, (mid, blocks) in enumerate(zip(STAGE_MIDS, cfg.blocks_per_stage)):
        c_mid = _scaled(mid, cfg.width_mult)
        stages.append(StageConfig(c_mid, EXPANSION * c_mid, blocks, 1 if i == 0 else 2))
    return stages


@dataclass
class BottleneckParams:
    conv1: Conv2dParams
    bn1: BatchNormParams
    conv2: Conv2dParams
    bn2: BatchNormParams
    conv3: Conv2dParams
    bn3: BatchNormParams
    proj_conv: Conv2dParams | None = None
    proj_bn: BatchNormParams | None = None

    @property
    def c_in(self) -> int:
        return self.conv1.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.conv3.weight.shape[0]

    @classmethod
    def init(cls, c_in: int, c_mid: int, c_out: int, stride: int,
             rng: np.random.Generator, dtype=np.float64) -> "BottleneckParams":
        p = cls(Conv2dParams.init(c_in, c_mid, 1, rng, dtype=dtype),
                BatchNormParams.init(c_mid, dtype),
                Conv2dParams.init(c_mid, c_mid, 3, rng, stride=stride, pad=1, dtype=dtype),
                BatchNormParams.init(c_mid, dtype),
                Conv2dParams.init(c_mid, c_out, 1, rng, dtype=dtype),
                BatchNormParams.init(c_out, dtype))
        if stride != 1 or c_in != c_out:
            p.proj_conv = Conv2dParams.init(c_in, c_out, 1, rng, stride=stride, dtype=dtype)
            p.proj_bn = BatchNormParams.init(c_out, dtype)
        return p

    def named_modules(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        yield "conv3", self.conv3
        yield "bn3", self.bn3
        if self.proj_conv is not None:
            yield "proj_conv", self.proj_conv
            yield "proj_bn", self.proj_bn


def bottleneck_forward(x: Tensor, p: BottleneckParams, cfg: SimAMConfig,
                       mode: str = "train", post_add_relu: bool = True) -> Tensor:
    """relu(bn3(conv3(relu(bn2(conv2(relu(bn1(conv1 x)))))))) combined with the shortcut."""
    if x.shape[1] != p.c_in:
        raise TensorError(f"block expects {p.c_in} channels, got {x.shape[1]}")
    f = relu(batchnorm(conv2d(x, p.conv1), p.bn1, mode))
    f = relu(batchnorm(conv2d(f, p.conv2), p.bn2, mode))
    f = batchnorm(conv2d(f, p.conv3), p.bn3, mode)
    shortcut = x if p.proj_conv is None else batchnorm(conv2d(x, p.proj_conv), p.proj_bn, mode)
    y = apply_placement(f, shortcut, cfg)
    return relu(y) if post_add_relu else y


@dataclass
class ResNetModel:
    config: ResNetConfig
    stem_conv: Conv2dParams
    stem_bn: BatchNormParams
    stages: list[list[BottleneckParams]]
    head: LinearParams

    def named_modules(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for name, mod in block.named_modules():
                    yield f"stage{si + 2}.{bi}.{name}", mod
        yield "head", self.head

    def named_arrays(self):
        """(name, holder, attribute) for every weight and running statistic."""
        for prefix, mod in self.named_modules():
            attrs = ("gamma", "beta", "running_mean", "running_var") \
                if isinstance(mod, BatchNormParams) else ("weight", "bias")
            for a in attrs:
                if getattr(mod, a) is not None:
                    yield f"{prefix}.{a}", mod, a

    def parameters(self) -> list[Tensor]:
        params = []
        for _, mod in self.named_modules():
            params.extend(mod.parameters())
        return params

    def embed(self, x: Tensor, mode: str = "train") -> Tensor:
        """Pooled [N, C] features feeding the classifier head."""
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise TensorError(
                f"model expects [N,{cfg.input_channels},H,W], got {list(x.shape)}")
        if min(x.shape[2:]) < MIN_INPUT_EXTENT:
            raise TensorError(f"input extents must be >= {MIN_INPUT_EXTENT}, got {x.shape[2:]}")
        h = relu(batchnorm(conv2d(x, self.stem_conv), self.stem_bn, mode))
        if cfg.stem is not Stem.SMALL_3X3:
            h = maxpool2(h)
        for si, stage in enumerate(self.stages):
            for block in stage:
                h = bottleneck_forward(h, block, cfg.simam, mode, cfg.post_add_relu)
            if si == 0 and cfg.simam.placement is Placement.AFTER_STAGE2:
                h = simam_forward(h, cfg.simam)
        return global_avg_pool(h)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return linear(self.embed(x, mode), self.head)


def forward(m: ResNetModel, x: Tensor, mode: str = "train") -> Tensor:
    return m.forward(x, mode)


def build_model(cfg: ResNetConfig, seed: int, dtype=np.float64) -> ResNetModel:
    """Deterministically initialised network; same (cfg, seed) gives identical weights."""
    rng = derive_rng(seed, "init")
    stem_c = _scaled(STEM_WIDTH, cfg.width_mult)
    if cfg.stem is Stem.CLASSIC_7X7:
        stem = Conv2dParams.init(cfg.input_channels, stem_c, 7, rng, stride=2, pad=3, dtype=dtype)
    elif cfg.stem is Stem.PAPER_1X1:
        stem = Conv2dParams.init(cfg.input_channels, stem_c, 1, rng, dtype=dtype)
    else:
        stem = Conv2dParams.init(cfg.input_channels, stem_c, 3, rng, pad=1, dtype=dtype)
    stages, c_in = [], stem_c
    for sc in stage_configs(cfg):
        blocks = []
        for b in range(sc.blocks):
            blocks.append(BottleneckParams.init(
                c_in, sc.c_mid, sc.c_out, sc.stride if b == 0 else 1, rng, dtype))
            c_in = sc.c_out
        stages.append(blocks)
    head = LinearParams.init(c_in, cfg.num_classes, rng, dtype)
    return ResNetModel(cfg, stem, BatchNormParams.init(stem_c, dtype), stages, head)


def param_count(m) -> int:
    """Scalar trainable parameters (running statistics excluded)."""
    return sum(p.size for p in m.parameters())


_MAGIC = b"SIMAMNET-CKPT\x00v1\n"


def save_checkpoint(model: ResNetModel, path) -> None:
    """Write config echo plus every named array; byte output is deterministic."""
    entries, blobs, offset = [], [], 0
    for name, mod, attr in model.named_arrays():
        arr = getattr(mod, attr).data
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ResNetModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    body = pos + hlen
    cfg = ResNetConfig.from_dict(header["config"])
    entries = {e["name"]: e for e in header["arrays"]}
    first = header["arrays"][0]
    model = build_model(cfg, 0, dtype=np.dtype(first["dtype"]).newbyteorder("="))
    for name, mod, attr in model.named_arrays():
        e = entries.pop(name, None)
        if e is None:
            raise ValueError(f"{path}: missing array {name}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=body + e["offset"]).reshape(e["shape"])
        old = getattr(mod, attr)
        setattr(mod, attr, Tensor(arr.astype(arr.dtype.newbyteorder("=")).copy(),
                                  requires_grad=old.requires_grad))
    if entries:
        raise ValueError(f"{path}: unexpected arrays {sorted(entries)}")
    return model
