"""Torch modules for fixed networks, the shared-weight supergraph and AlexNet."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .genotype import ArchPair, CountingConfig, GenotypeError, OpKind, check, loose_ends
from .searchspace import (
    STEM_KERNEL,
    AdaptivePoolLayer,
    AlexNetSpec,
    CellSlot,
    CellType,
    ConvLayer,
    LinearLayer,
    NetworkSpec,
    PoolLayer,
    StackPlan,
    cell_layout,
)


def _bn(channels: int, cfg: CountingConfig, track: bool) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, affine=cfg.include_batchnorm_affine, track_running_stats=track)


class Projection(nn.Sequential):
    """ReLU, 1x1 convolution (possibly strided), batchnorm."""

    is_projection = True

    def __init__(self, c_in, c_out, stride, cfg, track=True):
        super().__init__(
            nn.ReLU(),
            nn.Conv2d(c_in, c_out, 1, stride=stride, bias=cfg.include_conv_bias),
            _bn(c_out, cfg, track),
        )


class SepConv(nn.Sequential):
    """ReLU, depthwise kxk, pointwise 1x1, batchnorm."""

    def __init__(self, c_in, c_out, kernel, stride, cfg, track=True):
        super().__init__(
            nn.ReLU(),
            nn.Conv2d(c_in, c_in, kernel, stride=stride, padding=kernel // 2, groups=c_in,
                      bias=cfg.include_conv_bias),
            nn.Conv2d(c_in, c_out, 1, bias=cfg.include_conv_bias),
            _bn(c_out, cfg, track),
        )


class Pool(nn.Module):
    def __init__(self, kind, c_in, c_out, stride, cfg, track=True):
        super().__init__()
        if kind is OpKind.AVG_POOL_3:
            self.pool = nn.AvgPool2d(3, stride=stride, padding=1, count_include_pad=False)
        else:
            self.pool = nn.MaxPool2d(3, stride=stride, padding=1)
        self.proj = Projection(c_in, c_out, 1, cfg, track) if c_in != c_out else None

    def forward(self, x):
        x = self.pool(x)
        return x if self.proj is None else self.proj(x)


def make_op(op: OpKind, c_in: int, c_out: int, stride: int, cfg: CountingConfig, track: bool = True) -> nn.Module:
    if op.is_conv:
        return SepConv(c_in, c_out, op.kernel_size, stride, cfg, track)
    if op is OpKind.IDENTITY:
        if c_in == c_out and stride == 1:
            return nn.Identity()
        return Projection(c_in, c_out, stride, cfg, track)
    return Pool(op, c_in, c_out, stride, cfg, track)


def _source(slot: CellSlot, j: int) -> tuple[int, int]:
    if j == 0:
        return slot.c_prev_prev, slot.stride_prev_prev
    if j == 1:
        return slot.c_prev, slot.stride_prev
    return slot.c_out, 1


class FixedCell(nn.Module):
    def __init__(self, slot: CellSlot, genotype, cfg: CountingConfig):
        super().__init__()
        self.genotype = genotype
        self.loose = loose_ends(genotype)
        self.ops = nn.ModuleList()
        for node in genotype.nodes:
            for _, j, op in node.edges():
                c, s = _source(slot, j)
                self.ops.append(make_op(op, c, slot.c_out, s, cfg))
        width = len(self.loose) * slot.c_out
        self.out_proj = Projection(width, slot.c_out, 1, cfg) if width != slot.c_out else None

    def forward(self, h0, h1):
        states = [h0, h1]
        for i, node in enumerate(self.genotype.nodes):
            states.append(self.ops[2 * i](states[node.in_a]) + self.ops[2 * i + 1](states[node.in_b]))
        out = torch.cat([states[i + 2] for i in self.loose], dim=1)
        return out if self.out_proj is None else self.out_proj(out)


class Stem(nn.Sequential):
    def __init__(self, c_in, c_out, cfg, track=True):
        super().__init__(
            nn.Conv2d(c_in, c_out, STEM_KERNEL, padding=STEM_KERNEL // 2, bias=cfg.include_conv_bias),
            _bn(c_out, cfg, track),
        )


class Head(nn.Module):
    def __init__(self, c_in, num_classes):
        super().__init__()
        self.linear = nn.Linear(c_in, num_classes)

    def forward(self, x):
        x = F.adaptive_avg_pool2d(F.relu(x), 1).flatten(1)
        return self.linear(x)


class CellNetwork(nn.Module):
    """A genotype-fixed stack of cells, trained from scratch."""

    def __init__(self, spec: NetworkSpec, cfg: CountingConfig = CountingConfig()):
        super().__init__()
        self.spec = spec
        self.stem = Stem(spec.in_channels, spec.stem_channels, cfg)
        self.cells = nn.ModuleList(FixedCell(c.slot, c.genotype, cfg) for c in spec.cells)
        self.head = Head(spec.head_in, spec.num_classes)

    def forward(self, x):
        h0 = h1 = self.stem(x)
        for cell in self.cells:
            h0, h1 = h1, cell(h0, h1)
        return self.head(h1)


# -- weight sharing ----------------------------------------------------------

class SharedOutput(nn.Module):
    """Output projection over any subset of loose ends.

    One weight block per node; a sampled cell uses the columns of its loose
    ends. Single loose ends pass through unprojected, as in :class:`FixedCell`.
    """

    def __init__(self, num_nodes, c_out, cfg, track):
        super().__init__()
        self.c_out = c_out
        self.weight = nn.Parameter(torch.empty(c_out, num_nodes * c_out, 1, 1))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.bias = nn.Parameter(torch.zeros(c_out)) if cfg.include_conv_bias else None
        self.bn = _bn(c_out, cfg, track)

    def forward(self, states, loose):
        x = torch.cat([states[i] for i in loose], dim=1)
        if len(loose) == 1:
            return x
        cols = torch.cat([torch.arange(i * self.c_out, (i + 1) * self.c_out) for i in loose])
        return self.bn(F.conv2d(F.relu(x), self.weight[:, cols], self.bias))


class SharedCell(nn.Module):
    def __init__(self, slot: CellSlot, num_nodes: int, cfg: CountingConfig):
        super().__init__()
        self.slot = slot
        self.num_nodes = num_nodes
        self.edges = nn.ModuleDict()
        for i in range(num_nodes):
            for side in "ab":
                for j in range(i + 2):
                    c, s = _source(slot, j)
                    for op in OpKind:
                        self.edges[self.key(i, side, j, op)] = make_op(op, c, slot.c_out, s, cfg, track=False)
        self.output = SharedOutput(num_nodes, slot.c_out, cfg, track=False)

    @staticmethod
    def key(node, side, j, op) -> str:
        return f"{node}{side}{j}_{op.token}"

    def forward(self, h0, h1, genotype):
        states = [h0, h1]
        for i, node in enumerate(genotype.nodes):
            states.append(sum(self.edges[self.key(i, side, j, op)](states[j]) for side, j, op in node.edges()))
        return self.output(states[2:], loose_ends(genotype))


class SharedSupergraph(nn.Module):
    """Parameters for every (cell position, node, input side, source, op).

    Batchnorms use batch statistics only; running averages would mix the
    statistics of different sampled subnetworks.
    """

    def __init__(self, plan: StackPlan, num_nodes: int, cfg: CountingConfig = CountingConfig(), in_channels: int = 1):
        super().__init__()
        self.plan = plan
        self.num_nodes = num_nodes
        self.stem = Stem(in_channels, plan.base_channels, cfg, track=False)
        self.cells = nn.ModuleList(SharedCell(slot, num_nodes, cfg) for slot in cell_layout(plan))
        c_final = self.cells[-1].slot.c_out
        self.head = Head(c_final, plan.num_classes)

    def forward(self, x, arch: ArchPair):
        h0 = h1 = self.stem(x)
        for cell in self.cells:
            genotype = arch.reduction if cell.slot.kind is CellType.REDUCTION else arch.normal
            h0, h1 = h1, cell(h0, h1, genotype)
        return self.head(h1)

    def used_parameters(self, arch: ArchPair) -> list[nn.Parameter]:
        params = list(self.stem.parameters()) + list(self.head.parameters())
        for cell in self.cells:
            genotype = arch.reduction if cell.slot.kind is CellType.REDUCTION else arch.normal
            for i, node in enumerate(genotype.nodes):
                for side, j, op in node.edges():
                    params += list(cell.edges[cell.key(i, side, j, op)].parameters())
            if len(loose_ends(genotype)) > 1:
                params += list(cell.output.parameters())
        unique = {id(p): p for p in params}
        return list(unique.values())


class Subnetwork:
    """A sampled architecture routed through the supergraph's shared weights."""

    def __init__(self, supergraph: SharedSupergraph, arch: ArchPair):
        self.supergraph = supergraph
        self.arch = arch

    def __call__(self, x):
        return self.supergraph(x, self.arch)

    def parameters(self):
        return self.supergraph.used_parameters(self.arch)

    def train(self, mode=True):
        self.supergraph.train(mode)
        return self

    def eval(self):
        return self.train(False)


def activate_subnetwork(supergraph: SharedSupergraph, arch: ArchPair) -> Subnetwork:
    if arch.num_nodes != supergraph.num_nodes:
        raise GenotypeError(f"architecture has B={arch.num_nodes} but the supergraph was built for "
                            f"B={supergraph.num_nodes}")
    check(arch.normal, supergraph.num_nodes)
    check(arch.reduction, supergraph.num_nodes)
    return Subnetwork(supergraph, arch)


# -- AlexNet -----------------------------------------------------------------

class AlexNet(nn.Module):
    def __init__(self, spec: AlexNetSpec, dropout: float = 0.5):
        super().__init__()
        self.spec = spec
        features = []
        for layer in spec.layers:
            if isinstance(layer, ConvLayer):
                features += [nn.Conv2d(layer.c_in, layer.c_out, layer.kernel, layer.stride, layer.padding),
                             nn.ReLU(inplace=True)]
            elif isinstance(layer, PoolLayer):
                features.append(nn.MaxPool2d(layer.kernel, layer.stride))
            elif isinstance(layer, AdaptivePoolLayer):
                features.append(nn.AdaptiveAvgPool2d(layer.side))
        linears = [layer for layer in spec.layers if isinstance(layer, LinearLayer)]
        classifier = []
        for layer in linears[:-1]:
            classifier += [nn.Dropout(dropout), nn.Linear(layer.n_in, layer.n_out), nn.ReLU(inplace=True)]
        classifier.append(nn.Linear(linears[-1].n_in, linears[-1].n_out))
        self.features = nn.Sequential(*features)
        self.classifier = nn.Sequential(*classifier)

    def forward(self, x):
        return self.classifier(torch.flatten(self.features(x), 1))


def instantiate(spec, cfg: CountingConfig = CountingConfig()) -> nn.Module:
    if isinstance(spec, AlexNetSpec):
        return AlexNet(spec)
    return CellNetwork(spec, cfg)


def enumerate_parameters(module: nn.Module, cfg: CountingConfig = CountingConfig()) -> int:
    """Count parameters by walking the instantiated weight containers."""
    total = 0
    stack = [(module, False)]
    while stack:
        m, in_proj = stack.pop()
        in_proj = in_proj or getattr(m, "is_projection", False)
        if not (in_proj and not cfg.include_projection_ops):
            total += sum(p.numel() for p in m.parameters(recurse=False))
        stack.extend((child, in_proj) for child in m.children())
    return total
