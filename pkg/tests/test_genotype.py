import graphlib
import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enas_us.genotype import (
    ArchPair,
    CellGenotype,
    CountingConfig,
    GenotypeError,
    InputIndexError,
    NodeSpec,
    OpIndexError,
    OpKind,
    SequenceLengthError,
    cell_param_count,
    decode,
    encode,
    load_arch,
    loose_ends,
    random_arch,
    random_genotype,
    save_arch,
    to_dot,
    validate,
)

I, S3, S5, A3, M3 = OpKind


@st.composite
def genotypes(draw, max_nodes=6):
    b = draw(st.integers(1, max_nodes))
    nodes = []
    for i in range(b):
        nodes.append(NodeSpec(draw(st.integers(0, i + 1)), OpKind(draw(st.integers(0, 4))),
                              draw(st.integers(0, i + 1)), OpKind(draw(st.integers(0, 4)))))
    return CellGenotype(tuple(nodes))


def test_exactly_five_ops():
    assert [op.token for op in OpKind] == ["identity", "sep3", "sep5", "avg3", "max3"]


def test_validate_minimal_cell():
    assert validate(CellGenotype((NodeSpec(0, I, 1, I),)), 1) == []


def test_validate_forward_reference():
    g = CellGenotype((NodeSpec(3, I, 1, I), NodeSpec(0, I, 1, I)))
    (violation,) = validate(g, 2)
    assert violation.startswith("node 0 in_a")
    assert "input 3 out of range [0,2)" in violation


def test_validate_wrong_length():
    g = CellGenotype((NodeSpec(0, I, 1, I),))
    assert validate(g, 2) == ["expected 2 nodes, got 1"]


def test_all_nodes_loose_when_only_cell_inputs_used():
    g = CellGenotype(tuple(NodeSpec(0, S3, 1, M3) for _ in range(5)))
    assert validate(g, 5) == []
    assert loose_ends(g) == [0, 1, 2, 3, 4]


def test_encode_examples():
    assert encode(CellGenotype((NodeSpec(0, I, 1, I),))) == [0, 0, 1, 0]
    g = CellGenotype((NodeSpec(0, S3, 1, M3), NodeSpec(2, S5, 0, A3)))
    assert encode(g) == [0, 1, 1, 4, 2, 2, 0, 3]


def test_encode_rejects_invalid():
    with pytest.raises(GenotypeError, match="out of range"):
        encode(CellGenotype((NodeSpec(2, I, 1, I),)))


def test_decode_examples():
    assert decode([0, 0, 1, 0], 1) == CellGenotype((NodeSpec(0, I, 1, I),))
    with pytest.raises(SequenceLengthError):
        decode([0, 0, 1, 0], 2)
    with pytest.raises(OpIndexError):
        decode([0, 5, 1, 0], 1)
    with pytest.raises(InputIndexError):
        decode([2, 0, 1, 0], 1)


def test_round_trip_random(rng):
    for _ in range(100):
        b = int(rng.integers(1, 8))
        g = random_genotype(b, rng)
        assert decode(encode(g), b) == g


@given(genotypes())
def test_encode_decode_inverse(g):
    seq = encode(g)
    assert len(seq) == 4 * g.num_nodes
    assert decode(seq, g.num_nodes) == g
    assert encode(decode(seq, g.num_nodes)) == seq


@given(st.integers(1, 5).flatmap(lambda b: st.tuples(st.just(b), st.lists(st.integers(-1, 7), min_size=4 * b,
                                                                               max_size=4 * b))))
def test_validate_accepts_exactly_decodable(case):
    b, seq = case
    try:
        g = decode(seq, b)
    except GenotypeError:
        ok = False
    else:
        ok = validate(g, b) == []
    in_bounds = all(0 <= seq[4 * i + k] < i + 2 for i in range(b) for k in (0, 2)) and \
        all(0 <= seq[4 * i + k] < 5 for i in range(b) for k in (1, 3))
    assert ok == in_bounds


def test_loose_end_examples():
    assert loose_ends(CellGenotype((NodeSpec(1, S3, 0, M3),))) == [0]
    g = CellGenotype((NodeSpec(0, I, 1, I), NodeSpec(0, I, 1, I), NodeSpec(2, I, 3, I)))
    assert loose_ends(g) == [2]
    g = CellGenotype((NodeSpec(0, I, 1, I), NodeSpec(1, I, 0, I)))
    assert loose_ends(g) == [0, 1]


@given(genotypes())
def test_loose_ends_brute_force(g):
    ends = loose_ends(g)
    assert ends
    for i in range(g.num_nodes):
        referenced = any(i + 2 in (later.in_a, later.in_b) for later in g.nodes[i + 1:])
        assert (i in ends) == (not referenced)


def test_param_count_identity_cell_is_zero():
    g = CellGenotype((NodeSpec(0, I, 1, I), NodeSpec(2, I, 1, I)))
    # one loose end, matching channels: nothing to project
    assert cell_param_count(g, 16, 16, CountingConfig(include_projection_ops=False)) == 0
    assert cell_param_count(g, 16, 16) == 0


def test_param_count_single_sep3():
    g = CellGenotype((NodeSpec(0, S3, 1, I),))
    cfg = CountingConfig(include_batchnorm_affine=True, include_conv_bias=False)
    assert cell_param_count(g, 20, 20, cfg) == 3 * 3 * 20 + 20 * 20 + 2 * 20 == 620


def test_param_count_with_biases_and_projection():
    g = CellGenotype((NodeSpec(0, S5, 1, A3), NodeSpec(0, I, 1, I)))
    cfg = CountingConfig(True, True, True)
    sep5 = 25 * 8 + 8 + 8 * 16 + 16 + 32  # depthwise + bias, pointwise + bias, bn
    proj = 8 * 16 + 16 + 32
    out_proj = 32 * 16 + 16 + 32
    # avg pool and identity read 8 channels into a 16-channel cell: both projected
    assert cell_param_count(g, 8, 16, cfg) == sep5 + proj + 2 * proj + out_proj


@given(genotypes(4), st.integers(1, 12), st.integers(1, 12), st.booleans(), st.booleans(), st.booleans())
def test_param_count_monotone(g, c_in, c_out, bn, bias, proj):
    # only away from c_in == c_out, where identity and pool edges lose their projection
    cfg = CountingConfig(bn, bias, proj)
    base = cell_param_count(g, c_in, c_out, cfg)
    if c_in + 1 != c_out:
        assert cell_param_count(g, c_in + 1, c_out, cfg) >= base
    if c_out + 1 != c_in:
        assert cell_param_count(g, c_in, c_out + 1, cfg) >= base


def test_param_count_drops_when_widths_meet():
    g = CellGenotype((NodeSpec(0, I, 0, I),))
    cfg = CountingConfig(False, False, True)
    assert cell_param_count(g, 2, 1, cfg) == 4
    assert cell_param_count(g, 2, 2, cfg) == 0


def _dot_graph(text):
    vertices = set(re.findall(r"^\s+(\w+) \[label", text, re.M))
    edges = re.findall(r"^\s+(\w+) -> (\w+)", text, re.M)
    return vertices, edges


def test_dot_minimal_cell():
    text = to_dot(CellGenotype((NodeSpec(0, I, 1, I),)), "normal")
    vertices, edges = _dot_graph(text)
    assert vertices == {"in0", "in1", "n0", "out"}
    assert len(edges) == 3
    assert text == to_dot(CellGenotype((NodeSpec(0, I, 1, I),)), "normal")


@given(genotypes(5))
@settings(max_examples=50)
def test_dot_is_acyclic(g):
    vertices, edges = _dot_graph(to_dot(g))
    sorter = graphlib.TopologicalSorter({v: set() for v in vertices})
    for src, dst in edges:
        sorter.add(dst, src)
    order = list(sorter.static_order())
    assert set(order) == vertices
    assert sum(1 for e in edges if e[1] == "out") == len(loose_ends(g))


def test_file_round_trip(tmp_path, rng):
    arch = random_arch(5, rng)
    path = tmp_path / "g.json"
    save_arch(arch, path)
    doc = json.loads(path.read_text())
    assert doc["B"] == 5 and set(doc) == {"B", "normal", "reduction"}
    assert all(isinstance(row[1], str) for row in doc["normal"])
    assert load_arch(path) == arch
    save_arch(load_arch(path), tmp_path / "h.json")
    assert (tmp_path / "h.json").read_bytes() == path.read_bytes()


def test_file_rejects_bad_documents(tmp_path):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"B": 1, "normal": [[0, "sep7", 1, "identity"]], "reduction": []}))
    with pytest.raises(GenotypeError, match="unknown operation"):
        load_arch(path)
    path.write_text(json.dumps({"B": 1, "normal": [[0, "sep3", 2, "identity"]],
                                "reduction": [[0, "sep3", 1, "identity"]]}))
    with pytest.raises(GenotypeError, match="normal node 0 in_b"):
        load_arch(path)


def test_arch_pair_requires_same_node_count(rng):
    with pytest.raises(GenotypeError):
        ArchPair(random_genotype(2, rng), random_genotype(3, rng))
    arch = random_arch(4, rng)
    assert ArchPair.decode(arch.encode(), 4) == arch
