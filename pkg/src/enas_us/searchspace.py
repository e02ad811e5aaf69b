"""Stack plans, network descriptions, shape audits and analytic parameter counts.

Everything here is plain data; :mod:`enas_us.nets` turns these descriptions
into torch modules.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .genotype import (
    ArchPair,
    CellGenotype,
    CountingConfig,
    bn_params,
    cell_param_count,
    check,
    conv_bn_params,
)

SEARCH_BASE_CHANNELS = 20
FINAL_BASE_CHANNELS = 36
STEM_KERNEL = 3

# published reference parameter counts
PUBLISHED_PARAMS = {"ENAS17": 4_251_780, "ENAS7": 2_342_484, "ALEXNET": 56_858_656, "CNN3": 619_202}


class CellType(enum.Enum):
    NORMAL = "N"
    REDUCTION = "R"


N, R = CellType.NORMAL, CellType.REDUCTION

_VARIANTS = {
    "ENAS7": (N, R, N, R, N, N, N),
    "ENAS17": (N,) * 5 + (R,) + (N,) * 5 + (R,) + (N,) * 5,
}


@dataclass(frozen=True)
class StackPlan:
    cells: tuple[CellType, ...]
    base_channels: int = FINAL_BASE_CHANNELS
    num_classes: int = 2
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise ValueError("a stack plan needs at least one cell")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    def pattern(self) -> str:
        return "".join(c.value for c in self.cells)


def make_stack_plan(variant: str, base_channels: int = FINAL_BASE_CHANNELS, num_classes: int = 2) -> StackPlan:
    key = variant.upper().replace("-", "").replace("_", "").replace(" ", "")
    if key not in _VARIANTS:
        raise ValueError(f"unknown stack variant {variant!r}; expected one of {sorted(_VARIANTS)}")
    return StackPlan(_VARIANTS[key], base_channels, num_classes, key)


def plan_from_pattern(pattern: str, base_channels: int, num_classes: int = 2) -> StackPlan:
    """``"NRNRNNN"`` style plans, mostly for tests and small searches."""
    return StackPlan(tuple(CellType(ch) for ch in pattern.upper()), base_channels, num_classes, pattern.upper())


@dataclass(frozen=True)
class CellSlot:
    """Channel and stride layout of one cell position, independent of its genotype."""

    position: int
    kind: CellType
    c_prev_prev: int
    c_prev: int
    c_out: int
    stride_prev_prev: int
    stride_prev: int
    scale: int  # cumulative down-sampling factor of this cell's output


@dataclass(frozen=True)
class CellInstance:
    slot: CellSlot
    genotype: CellGenotype

    def __getattr__(self, name):
        # delegate layout fields (c_out, kind, ...) to the slot
        return getattr(object.__getattribute__(self, "slot"), name)


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    stem_channels: int
    cells: tuple[CellInstance, ...]
    num_classes: int
    num_nodes: int
    name: str = "custom"

    @property
    def head_in(self) -> int:
        return self.cells[-1].c_out if self.cells else self.stem_channels

    def pattern(self) -> str:
        return "".join(c.kind.value for c in self.cells)


def cell_layout(plan: StackPlan) -> list[CellSlot]:
    slots = []
    c_pp = c_p = plan.base_channels
    scale_pp = scale_p = 1
    for pos, kind in enumerate(plan.cells):
        reduce = kind is CellType.REDUCTION
        c_out = 2 * c_p if reduce else c_p
        scale = 2 * scale_p if reduce else scale_p
        slots.append(CellSlot(pos, kind, c_pp, c_p, c_out, scale // scale_pp, scale // scale_p, scale))
        c_pp, c_p = c_p, c_out
        scale_pp, scale_p = scale_p, scale
    return slots


def build_network(arch: ArchPair, plan: StackPlan, in_channels: int = 1) -> NetworkSpec:
    check(arch.normal)
    check(arch.reduction)
    cells = tuple(
        CellInstance(slot, arch.reduction if slot.kind is CellType.REDUCTION else arch.normal)
        for slot in cell_layout(plan)
    )
    return NetworkSpec(in_channels, plan.base_channels, cells, plan.num_classes, arch.num_nodes, plan.name)


# -- AlexNet baseline --------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class PoolLayer:
    kernel: int
    stride: int


@dataclass(frozen=True)
class AdaptivePoolLayer:
    side: int


@dataclass(frozen=True)
class LinearLayer:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class AlexNetSpec:
    layers: tuple
    in_channels: int
    input_side: int
    num_classes: int
    name: str = "ALEXNET"


def _conv_out(n: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (n + 2 * padding - kernel) // stride + 1


ALEXNET_MIN_SIDE = 63


def build_alexnet(num_classes: int = 2, input_side: int = 224, in_channels: int = 3,
                  adaptive_pool: bool = False) -> AlexNetSpec:
    """Single-stream AlexNet (no grouping, no LRN) with a ``num_classes``-wide last layer.

    The first linear layer reads the real flattened size at ``input_side``.
    ``adaptive_pool=True`` inserts a 6x6 adaptive average pool instead, which
    keeps the first linear layer at its canonical 9216 inputs.
    """
    if input_side < ALEXNET_MIN_SIDE:
        raise ValueError(f"AlexNet needs input_side >= {ALEXNET_MIN_SIDE}, got {input_side}")
    features = [
        ConvLayer(in_channels, 64, 11, 4, 2), PoolLayer(3, 2),
        ConvLayer(64, 192, 5, 1, 2), PoolLayer(3, 2),
        ConvLayer(192, 384, 3, 1, 1), ConvLayer(384, 256, 3, 1, 1), ConvLayer(256, 256, 3, 1, 1),
        PoolLayer(3, 2),
    ]
    side = input_side
    for layer in features:
        if isinstance(layer, ConvLayer):
            side = _conv_out(side, layer.kernel, layer.stride, layer.padding)
        else:
            side = _conv_out(side, layer.kernel, layer.stride)
    if adaptive_pool:
        features.append(AdaptivePoolLayer(6))
        side = 6
    flat = 256 * side * side
    head = [LinearLayer(flat, 4096), LinearLayer(4096, 4096), LinearLayer(4096, num_classes)]
    return AlexNetSpec(tuple(features + head), in_channels, input_side, num_classes)


# -- shapes and counts -------------------------------------------------------

def forward_shapes(net, input_shape: tuple[int, int, int]) -> list[tuple[str, tuple[int, ...]]]:
    """Per-stage output shapes as ``(stage, shape)``; spatial shapes are (H, W, C)."""
    h, w, c = input_shape
    if h < 1 or w < 1:
        raise ValueError(f"input: spatial dims must be positive, got {input_shape}")
    if isinstance(net, AlexNetSpec):
        return _alexnet_shapes(net, h, w, c)
    if c != net.in_channels:
        raise ValueError(f"input has {c} channels but the stem expects {net.in_channels}")
    stages = [("stem", (h, w, net.stem_channels))]
    for cell in net.cells:
        shape = (math.ceil(h / cell.scale), math.ceil(w / cell.scale), cell.c_out)
        stages.append((f"cell{cell.position}:{cell.kind.value}", shape))
    stages.append(("pool", (net.head_in,)))
    stages.append(("logits", (net.num_classes,)))
    return stages


def _alexnet_shapes(net: AlexNetSpec, h: int, w: int, c: int) -> list:
    if c != net.in_channels:
        raise ValueError(f"input has {c} channels but AlexNet expects {net.in_channels}")
    stages = []
    flat = None
    for i, layer in enumerate(net.layers):
        name = f"{type(layer).__name__.replace('Layer', '').lower()}{i}"
        if isinstance(layer, ConvLayer):
            h, w, c = (_conv_out(h, layer.kernel, layer.stride, layer.padding),
                       _conv_out(w, layer.kernel, layer.stride, layer.padding), layer.c_out)
        elif isinstance(layer, PoolLayer):
            h, w = _conv_out(h, layer.kernel, layer.stride), _conv_out(w, layer.kernel, layer.stride)
        elif isinstance(layer, AdaptivePoolLayer):
            h = w = layer.side
        else:
            if flat is None:
                flat = h * w * c
                if flat != layer.n_in:
                    raise ValueError(f"{name}: expects {layer.n_in} inputs, got {flat}")
            stages.append((name, (layer.n_out,)))
            continue
        if h < 1 or w < 1:
            raise ValueError(f"{name}: spatial dimension underflow ({h}x{w})")
        stages.append((name, (h, w, c)))
    return stages


def stem_param_count(net: NetworkSpec, cfg: CountingConfig) -> int:
    return conv_bn_params(net.in_channels, net.stem_channels, STEM_KERNEL, cfg) + bn_params(net.stem_channels, cfg)


def head_param_count(net: NetworkSpec) -> int:
    return net.head_in * net.num_classes + net.num_classes


def network_param_count(net, cfg: CountingConfig = CountingConfig()) -> int:
    if isinstance(net, AlexNetSpec):
        total = 0
        for layer in net.layers:
            if isinstance(layer, ConvLayer):
                total += layer.kernel ** 2 * layer.c_in * layer.c_out + layer.c_out
            elif isinstance(layer, LinearLayer):
                total += layer.n_in * layer.n_out + layer.n_out
        return total
    total = stem_param_count(net, cfg) + head_param_count(net)
    for cell in net.cells:
        total += cell_param_count(
            cell.genotype, cell.c_prev, cell.c_out, cfg,
            c_prev_prev=cell.c_prev_prev, stride=cell.stride_prev, stride_prev_prev=cell.stride_prev_prev,
        )
    return total


def deviation_pct(value: int, reference: int) -> float:
    return 100.0 * (value - reference) / reference


# -- manifests ---------------------------------------------------------------

@dataclass
class NetworkManifest:
    """Everything needed to rebuild a network, stored next to each checkpoint."""

    variant: str
    pattern: str
    base_channels: int
    num_classes: int
    in_channels: int
    B: int
    counting: dict
    total_params: int
    arch: dict = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: NetworkSpec, arch: ArchPair, cfg: CountingConfig) -> "NetworkManifest":
        return cls(net.name, net.pattern(), net.stem_channels, net.num_classes, net.in_channels,
                   net.num_nodes, cfg.to_dict(), network_param_count(net, cfg), arch.to_dict())

    def rebuild(self) -> tuple[NetworkSpec, ArchPair, CountingConfig]:
        arch = ArchPair.from_dict(self.arch)
        plan = plan_from_pattern(self.pattern, self.base_channels, self.num_classes)
        net = build_network(arch, plan, self.in_channels)
        net = NetworkSpec(net.in_channels, net.stem_channels, net.cells, net.num_classes, net.num_nodes, self.variant)
        return net, arch, CountingConfig(**self.counting)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NetworkManifest":
        return cls(**json.loads(Path(path).read_text()))
