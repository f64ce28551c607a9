"""SE-ResNet builders with optional result-conditioned attention.

Three trunk depths (34/50/101) in three modes:

* ``se``   -- plain squeeze-and-excitation in every residual block.
* ``se_a`` -- auxiliary classifiers attached mid-trunk contribute weighted
  losses, but their logits do not feed the attention blocks.
* ``se_r`` -- auxiliary logits are additionally concatenated into the
  excitation input of every block in the routed downstream stages.

The stem is adapted for 32x32 inputs: a 3x3 stride-1 pad-1 convolution with
batch norm and ReLU, and no max pooling. Stages 2-4 downsample with a
stride-2 convolution and a projection shortcut in their first block.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import AuxHead, SqueezeExcite
from .errors import ConfigError, NumericsError

MODES = ("se", "se_a", "se_r")
STEMS = ("cifar", "imagenet")
ATTENTION_INPUTS = ("logits", "softmax")

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class StagePlan:
    """Per-stage block counts and output channels for one trunk depth."""

    block_counts: tuple[int, int, int, int]
    channels: tuple[int, int, int, int]
    block_kind: str  # "basic" or "bottleneck"


_PLANS = {
    34: StagePlan((3, 4, 6, 3), (64, 128, 256, 512), "basic"),
    50: StagePlan((3, 4, 6, 3), (256, 512, 1024, 2048), "bottleneck"),
    101: StagePlan((3, 4, 23, 3), (256, 512, 1024, 2048), "bottleneck"),
}


def stage_plan(variant: int) -> StagePlan:
    """Stage layout for a trunk depth; raises ConfigError for unknown depths."""
    try:
        return _PLANS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {sorted(_PLANS)}") from None


def _default_aux_positions(mode: str) -> tuple[int, ...]:
    return () if mode == "se" else (2, 3)


def _default_routing(mode: str, aux_positions: tuple[int, ...]) -> dict[int, tuple[int, ...]]:
    if mode != "se_r":
        return {}
    # each auxiliary head feeds every block of the immediately following stage
    return {p: (p + 1,) for p in aux_positions}


@dataclass
class ModelSpec:
    """Everything needed to build a model.

    ``aux_positions`` are stage indices (1-based) after which an auxiliary
    head is attached; ``attention_routing`` maps each of those positions to
    the stages whose attention blocks receive that head's logits. ``None``
    for either selects the mode's default (heads after stages 2 and 3, each
    routed to the next stage).
    """

    variant: int = 34
    mode: str = "se"
    reduction_ratio: int = 8
    num_classes: int = 100
    aux_positions: tuple[int, ...] | None = None
    attention_routing: dict[int, tuple[int, ...]] | None = None
    aux_dropout: float = 0.7
    attention_input: str = "logits"
    detach_aux_into_attention: bool = False
    stem: str = "cifar"

    def __post_init__(self) -> None:
        if self.aux_positions is None:
            self.aux_positions = _default_aux_positions(self.mode)
        else:
            self.aux_positions = tuple(sorted(self.aux_positions))
        if self.attention_routing is None:
            self.attention_routing = _default_routing(self.mode, self.aux_positions)
        else:
            self.attention_routing = {int(k): tuple(sorted(v)) for k, v in self.attention_routing.items()}
        self.validate()

    def validate(self) -> None:
        stage_plan(self.variant)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}, expected one of {STEMS}")
        if self.attention_input not in ATTENTION_INPUTS:
            raise ConfigError(f"attention_input must be one of {ATTENTION_INPUTS}, got {self.attention_input!r}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if not 0.0 <= self.aux_dropout < 1.0:
            raise ConfigError(f"aux_dropout must lie in [0, 1), got {self.aux_dropout}")
        if not set(self.aux_positions) <= {1, 2, 3}:
            raise ConfigError(f"aux_positions must be within {{1, 2, 3}}, got {self.aux_positions}")
        if self.mode == "se" and self.aux_positions:
            raise ConfigError("mode 'se' takes no auxiliary classifiers")
        if self.mode in ("se_a", "se_r") and not self.aux_positions:
            raise ConfigError(f"mode {self.mode!r} requires at least one aux position")
        if self.mode != "se_r" and self.attention_routing:
            raise ConfigError(f"mode {self.mode!r} must not route aux logits into attention")
        if self.mode == "se_r":
            if not self.attention_routing:
                raise ConfigError("mode 'se_r' requires attention routing")
            for src, targets in self.attention_routing.items():
                if src not in self.aux_positions:
                    raise ConfigError(f"routing source stage {src} has no auxiliary classifier")
                if not targets:
                    raise ConfigError(f"routing for aux position {src} lists no target stage")
                for tgt in targets:
                    if tgt not in (1, 2, 3, 4):
                        raise ConfigError(f"routing target stage {tgt} out of range")
                    if tgt <= src:
                        raise ConfigError(
                            f"routing target stage {tgt} is not strictly after aux position {src}"
                        )

    def stage_sources(self, stage: int) -> tuple[int, ...]:
        """Aux positions whose logits feed the given stage, nearest-input first."""
        return tuple(p for p in self.aux_positions if stage in self.attention_routing.get(p, ()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aux_positions"] = list(self.aux_positions)
        d["attention_routing"] = {int(k): list(v) for k, v in self.attention_routing.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("aux_positions") is not None:
            d["aux_positions"] = tuple(d["aux_positions"])
        if d.get("attention_routing") is not None:
            d["attention_routing"] = {int(k): tuple(v) for k, v in d["attention_routing"].items()}
        return cls(**d)


class ForwardOutput(NamedTuple):
    main_logits: Tensor
    aux_logits: list[Tensor]  # one entry per aux position, nearest-input first


class BasicBlock(nn.Module):
    """Two 3x3 convolutions; attention sits after the second batch norm,
    before the residual addition."""

    expansion = 1

    def __init__(self, in_channels: int, channels: int, stride: int, reduction: int, aux_dim: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.se = SqueezeExcite(channels, reduction, aux_dim)
        self.downsample = None
        if stride != 1 or in_channels != channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(channels),
            )

    def forward(self, x: Tensor, aux: Tensor | None = None) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = self.se(out, aux)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 (carries the stride) -> 1x1 with 4x expansion."""

    expansion = 4

    def __init__(self, in_channels: int, channels: int, stride: int, reduction: int, aux_dim: int) -> None:
        super().__init__()
        width = channels // self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(channels)
        self.se = SqueezeExcite(channels, reduction, aux_dim)
        self.downsample = None
        if stride != 1 or in_channels != channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(channels),
            )

    def forward(self, x: Tensor, aux: Tensor | None = None) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        out = self.se(out, aux)
        return F.relu(out + identity)


class _Stage(nn.Module):
    """A sequence of residual blocks sharing one optional aux input."""

    def __init__(self, blocks: list[nn.Module]) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: Tensor, aux: Tensor | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, aux)
        return x


def _check_finite(x: Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite activations after {where}")


class SEResNet(nn.Module):
    """Four-stage residual trunk with channel attention and optional
    auxiliary classifiers.

    ``forward`` returns the main logits plus one logits tensor per aux
    position. In ``se_r`` mode the auxiliary heads run in evaluation as
    well, since the main path consumes their output.
    """

    def __init__(self, spec: ModelSpec, plan: StagePlan | None = None) -> None:
        super().__init__()
        spec.validate()
        self.spec = spec
        plan = plan or stage_plan(spec.variant)
        self.plan = plan
        block_cls = BasicBlock if plan.block_kind == "basic" else Bottleneck

        stem_channels = 64
        if spec.stem == "cifar":
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_channels, 3, stride=1, padding=1, bias=False),
                nn.BatchNorm2d(stem_channels),
                nn.ReLU(inplace=True),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_channels, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(stem_channels),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )

        stages = []
        in_channels = stem_channels
        for idx in range(4):
            stage_num = idx + 1
            out_channels = plan.channels[idx]
            aux_dim = spec.num_classes * len(spec.stage_sources(stage_num))
            stride = 1 if idx == 0 else 2
            blocks = []
            for b in range(plan.block_counts[idx]):
                blocks.append(
                    block_cls(
                        in_channels,
                        out_channels,
                        stride if b == 0 else 1,
                        spec.reduction_ratio,
                        aux_dim,
                    )
                )
                in_channels = out_channels
            stages.append(_Stage(blocks))
        self.stages = nn.ModuleList(stages)

        self.aux_heads = nn.ModuleDict(
            {
                str(p): AuxHead(plan.channels[p - 1], spec.num_classes, dropout=spec.aux_dropout)
                for p in spec.aux_positions
            }
        )
        self.fc = nn.Linear(plan.channels[-1], spec.num_classes)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _attention_input(self, logits_by_pos: dict[int, Tensor], stage_num: int) -> Tensor | None:
        sources = self.spec.stage_sources(stage_num)
        if not sources:
            return None
        parts = []
        for p in sources:
            t = logits_by_pos[p]
            if self.spec.detach_aux_into_attention:
                t = t.detach()
            if self.spec.attention_input == "softmax":
                t = torch.softmax(t, dim=-1)
            parts.append(t)
        return torch.cat(parts, dim=-1) if len(parts) > 1 else parts[0]

    def forward(self, x: Tensor) -> ForwardOutput:
        x = self.stem(x)
        _check_finite(x, "stem")
        logits_by_pos: dict[int, Tensor] = {}
        for idx, stage in enumerate(self.stages):
            stage_num = idx + 1
            x = stage(x, self._attention_input(logits_by_pos, stage_num))
            _check_finite(x, f"stage{stage_num}")
            if str(stage_num) in self.aux_heads:
                t = self.aux_heads[str(stage_num)](x)
                _check_finite(t, f"aux head at stage {stage_num}")
                logits_by_pos[stage_num] = t
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        main = self.fc(x)
        _check_finite(main, "main classifier")
        return ForwardOutput(main, [logits_by_pos[p] for p in self.spec.aux_positions])


def build_model(spec: ModelSpec) -> SEResNet:
    """Build a model from a validated spec."""
    return SEResNet(spec)


def save_checkpoint(
    path,
    model: SEResNet,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    data_rng_state: Tensor | None = None,
) -> None:
    """Single-file archive: spec, named parameters/buffers, rng state, epoch.

    Schema (version 1) keys: ``schema``, ``spec`` (plain dict), ``model``
    (state dict), ``optimizer`` (state dict or None), ``epoch``,
    ``torch_rng`` and ``data_rng`` (byte tensors or None).
    """
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "spec": model.spec.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "torch_rng": torch.get_rng_state(),
        "data_rng": data_rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    schema = payload.get("schema")
    if schema != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {schema!r}, expected {CHECKPOINT_SCHEMA}")
    return payload


def model_from_checkpoint(payload: dict) -> SEResNet:
    model = build_model(ModelSpec.from_dict(payload["spec"]))
    model.load_state_dict(payload["model"])
    return model
