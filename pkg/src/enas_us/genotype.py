"""Micro-cell genotypes: representation, validation, encoding, counting and rendering.

A cell has ``B`` nodes. Node ``i`` picks two inputs from ``[0, i + 2)`` where
indices 0 and 1 are the outputs of the two preceding cells and ``j + 2`` is
node ``j`` of the same cell. Each input goes through one of five operations
and the two results are summed. Nodes never consumed by a later node
("loose ends") are concatenated to form the cell output.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_NUM_NODES = 5


class OpKind(enum.IntEnum):
    IDENTITY = 0
    SEP_CONV_3 = 1
    SEP_CONV_5 = 2
    AVG_POOL_3 = 3
    MAX_POOL_3 = 4

    @property
    def token(self) -> str:
        return OP_TOKENS[self]

    @property
    def kernel_size(self) -> int:
        return {OpKind.SEP_CONV_5: 5, OpKind.IDENTITY: 1}.get(self, 3)

    @property
    def is_conv(self) -> bool:
        return self in (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5)

    @classmethod
    def from_token(cls, token: str) -> "OpKind":
        try:
            return _TOKEN_TO_OP[token]
        except KeyError:
            raise GenotypeError(f"unknown operation {token!r}; expected one of {sorted(_TOKEN_TO_OP)}") from None


NUM_OPS = len(OpKind)

OP_TOKENS = {
    OpKind.IDENTITY: "identity",
    OpKind.SEP_CONV_3: "sep3",
    OpKind.SEP_CONV_5: "sep5",
    OpKind.AVG_POOL_3: "avg3",
    OpKind.MAX_POOL_3: "max3",
}
_TOKEN_TO_OP = {v: k for k, v in OP_TOKENS.items()}


class GenotypeError(ValueError):
    """Raised when a genotype or its encoding is malformed."""


class SequenceLengthError(GenotypeError):
    pass


class OpIndexError(GenotypeError):
    pass


class InputIndexError(GenotypeError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    in_a: int
    op_a: OpKind
    in_b: int
    op_b: OpKind

    def edges(self) -> tuple[tuple[str, int, OpKind], tuple[str, int, OpKind]]:
        return ("a", self.in_a, self.op_a), ("b", self.in_b, self.op_b)


@dataclass(frozen=True)
class CellGenotype:
    nodes: tuple[NodeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_lists(cls, rows: Iterable[Sequence]) -> "CellGenotype":
        """Build from ``[in_a, op_a, in_b, op_b]`` rows; ops may be tokens or ints."""
        nodes = []
        for row in rows:
            if len(row) != 4:
                raise GenotypeError(f"node row must have 4 entries, got {list(row)!r}")
            in_a, op_a, in_b, op_b = row
            nodes.append(NodeSpec(int(in_a), _as_op(op_a), int(in_b), _as_op(op_b)))
        return cls(tuple(nodes))

    def to_lists(self) -> list[list]:
        return [[n.in_a, n.op_a.token, n.in_b, n.op_b.token] for n in self.nodes]


@dataclass(frozen=True)
class ArchPair:
    normal: CellGenotype
    reduction: CellGenotype

    def __post_init__(self):
        if self.normal.num_nodes != self.reduction.num_nodes:
            raise GenotypeError(
                f"normal cell has {self.normal.num_nodes} nodes but reduction cell has "
                f"{self.reduction.num_nodes}"
            )

    @property
    def num_nodes(self) -> int:
        return self.normal.num_nodes

    def encode(self) -> list[int]:
        return encode(self.normal) + encode(self.reduction)

    @classmethod
    def decode(cls, sequence: Sequence[int], num_nodes: int) -> "ArchPair":
        n = 4 * num_nodes
        if len(sequence) != 2 * n:
            raise SequenceLengthError(f"expected {2 * n} decisions for B={num_nodes}, got {len(sequence)}")
        return cls(decode(sequence[:n], num_nodes), decode(sequence[n:], num_nodes))

    def to_dict(self) -> dict:
        return {"B": self.num_nodes, "normal": self.normal.to_lists(), "reduction": self.reduction.to_lists()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchPair":
        try:
            num_nodes = int(doc["B"])
            normal = CellGenotype.from_lists(doc["normal"])
            reduction = CellGenotype.from_lists(doc["reduction"])
        except KeyError as exc:
            raise GenotypeError(f"genotype document is missing field {exc.args[0]!r}") from None
        problems = [f"normal {v}" for v in validate(normal, num_nodes)]
        problems += [f"reduction {v}" for v in validate(reduction, num_nodes)]
        if problems:
            raise GenotypeError("; ".join(problems))
        return cls(normal, reduction)


@dataclass(frozen=True)
class CountingConfig:
    """Which parameter groups are included in a count.

    ``include_batchnorm_affine`` and ``include_conv_bias`` also decide whether
    the built modules carry those parameters at all; projections are always
    built when shapes demand them and only excluded from the tally.
    """

    include_batchnorm_affine: bool = True
    include_conv_bias: bool = False
    include_projection_ops: bool = True

    def to_dict(self) -> dict:
        return {
            "include_batchnorm_affine": self.include_batchnorm_affine,
            "include_conv_bias": self.include_conv_bias,
            "include_projection_ops": self.include_projection_ops,
        }


def _as_op(value) -> OpKind:
    if isinstance(value, OpKind):
        return value
    if isinstance(value, str):
        return OpKind.from_token(value)
    value = int(value)
    if not 0 <= value < NUM_OPS:
        raise OpIndexError(f"op index {value} out of range [0,{NUM_OPS})")
    return OpKind(value)


def validate(genotype: CellGenotype, expected_nodes: int | None = None) -> list[str]:
    """Return a list of violations; an empty list means the genotype is valid."""
    violations = []
    nodes = genotype.nodes
    if expected_nodes is not None and len(nodes) != expected_nodes:
        violations.append(f"expected {expected_nodes} nodes, got {len(nodes)}")
    if not nodes:
        violations.append("cell has no nodes")
    for i, node in enumerate(nodes):
        for field in ("in_a", "in_b"):
            idx = getattr(node, field)
            if not isinstance(idx, (int, np.integer)) or not 0 <= idx < i + 2:
                violations.append(f"node {i} {field}: input {idx} out of range [0,{i + 2})")
        for field in ("op_a", "op_b"):
            if not isinstance(getattr(node, field), OpKind):
                violations.append(f"node {i} {field}: {getattr(node, field)!r} is not an OpKind")
    return violations


def check(genotype: CellGenotype, expected_nodes: int | None = None) -> None:
    violations = validate(genotype, expected_nodes)
    if violations:
        raise GenotypeError("; ".join(violations))


def encode(genotype: CellGenotype) -> list[int]:
    check(genotype)
    seq = []
    for node in genotype.nodes:
        seq += [node.in_a, int(node.op_a), node.in_b, int(node.op_b)]
    return seq


def decode(sequence: Sequence[int], num_nodes: int) -> CellGenotype:
    if len(sequence) != 4 * num_nodes:
        raise SequenceLengthError(f"expected {4 * num_nodes} decisions for B={num_nodes}, got {len(sequence)}")
    nodes = []
    for i in range(num_nodes):
        in_a, op_a, in_b, op_b = (int(v) for v in sequence[4 * i: 4 * i + 4])
        for idx in (in_a, in_b):
            if not 0 <= idx < i + 2:
                raise InputIndexError(f"node {i} input {idx} out of range [0,{i + 2})")
        for op in (op_a, op_b):
            if not 0 <= op < NUM_OPS:
                raise OpIndexError(f"node {i} op index {op} out of range [0,{NUM_OPS})")
        nodes.append(NodeSpec(in_a, OpKind(op_a), in_b, OpKind(op_b)))
    return CellGenotype(tuple(nodes))


def loose_ends(genotype: CellGenotype) -> list[int]:
    """Node positions never consumed by a later node, in ascending order."""
    used = set()
    for node in genotype.nodes:
        used.update((node.in_a, node.in_b))
    return [i for i in range(genotype.num_nodes) if i + 2 not in used]


def random_genotype(num_nodes: int, rng: np.random.Generator) -> CellGenotype:
    nodes = []
    for i in range(num_nodes):
        in_a, in_b = rng.integers(0, i + 2, size=2)
        op_a, op_b = rng.integers(0, NUM_OPS, size=2)
        nodes.append(NodeSpec(int(in_a), OpKind(int(op_a)), int(in_b), OpKind(int(op_b))))
    return CellGenotype(tuple(nodes))


def random_arch(num_nodes: int, rng: np.random.Generator) -> ArchPair:
    return ArchPair(random_genotype(num_nodes, rng), random_genotype(num_nodes, rng))


# -- parameter counting ------------------------------------------------------

def conv_bn_params(c_in: int, c_out: int, kernel: int, cfg: CountingConfig, depthwise: bool = False) -> int:
    weights = kernel * kernel * c_in if depthwise else kernel * kernel * c_in * c_out
    bias = (c_in if depthwise else c_out) if cfg.include_conv_bias else 0
    return weights + bias


def bn_params(channels: int, cfg: CountingConfig) -> int:
    return 2 * channels if cfg.include_batchnorm_affine else 0


def projection_params(c_in: int, c_out: int, cfg: CountingConfig) -> int:
    if not cfg.include_projection_ops:
        return 0
    return conv_bn_params(c_in, c_out, 1, cfg) + bn_params(c_out, cfg)


def op_param_count(op: OpKind, c: int, c_out: int, stride: int, cfg: CountingConfig) -> int:
    """Parameters of one operation reading ``c`` channels and writing ``c_out``."""
    if op.is_conv:
        k = op.kernel_size
        return (conv_bn_params(c, c, k, cfg, depthwise=True) + conv_bn_params(c, c_out, 1, cfg)
                + bn_params(c_out, cfg))
    if op is OpKind.IDENTITY:
        if c == c_out and stride == 1:
            return 0
        return projection_params(c, c_out, cfg)
    # pooling carries the stride itself; only a channel mismatch needs a projection
    return 0 if c == c_out else projection_params(c, c_out, cfg)


def edge_source(j: int, c_in: int, c_out: int, c_prev_prev: int, stride: int, stride_prev_prev: int) -> tuple[int, int]:
    """Channel count and stride seen by an op reading input index ``j``."""
    if j == 0:
        return c_prev_prev, stride_prev_prev
    if j == 1:
        return c_in, stride
    return c_out, 1


def cell_param_count(
    genotype: CellGenotype,
    c_in: int,
    c_out: int,
    cfg: CountingConfig = CountingConfig(),
    *,
    c_prev_prev: int | None = None,
    stride: int = 1,
    stride_prev_prev: int | None = None,
) -> int:
    """Analytic parameter count of a cell.

    ``c_in``/``stride`` describe input 1 (previous cell); input 0 defaults to
    the same unless ``c_prev_prev``/``stride_prev_prev`` are given.
    """
    check(genotype)
    c_pp = c_in if c_prev_prev is None else c_prev_prev
    s_pp = stride if stride_prev_prev is None else stride_prev_prev
    total = 0
    for node in genotype.nodes:
        for _, j, op in node.edges():
            c, s = edge_source(j, c_in, c_out, c_pp, stride, s_pp)
            total += op_param_count(op, c, c_out, s, cfg)
    width = len(loose_ends(genotype)) * c_out
    if width != c_out:
        total += projection_params(width, c_out, cfg)
    return total


# -- rendering and files -----------------------------------------------------

def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(genotype: CellGenotype, title: str = "cell") -> str:
    check(genotype)
    lines = [f"digraph {_dot_quote(title)} {{", "  rankdir=LR;", "  node [shape=box];",
             '  in0 [label="c_{k-2}"];', '  in1 [label="c_{k-1}"];']
    for i in range(genotype.num_nodes):
        lines.append(f'  n{i} [label="{i}", shape=ellipse];')
    lines.append('  out [label="concat", shape=box];')
    names = lambda j: f"in{j}" if j < 2 else f"n{j - 2}"  # noqa: E731
    for i, node in enumerate(genotype.nodes):
        for _, j, op in node.edges():
            lines.append(f'  {names(j)} -> n{i} [label="{op.token}"];')
    for i in loose_ends(genotype):
        lines.append(f"  n{i} -> out;")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_arch(arch: ArchPair, path: str | Path) -> None:
    Path(path).write_text(json.dumps(arch.to_dict(), indent=2) + "\n")


def load_arch(path: str | Path) -> ArchPair:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"{path}: not valid JSON ({exc})") from None
    return ArchPair.from_dict(doc)
