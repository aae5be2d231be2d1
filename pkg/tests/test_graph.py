import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from automl_bench.errors import ArchParseError, DanglingNode, GraphError, InvalidInput, ShapeMismatch
from automl_bench.graph import (INPUT_ID, ArchitectureGraph, GraphBuilder, LayerKind, LayerSpec, Node,
                                TensorShape, build_resnet50, canonical_digest, infer_shapes, loads,
                                parameter_count)

from oracles import resnet50_tally


def tiny(extra_relu=False, shape=TensorShape(32, 32, 3)):
    g = GraphBuilder(shape)
    x = g.add("c1", LayerSpec.conv(8, 3, 1))
    x = g.add("r1", LayerSpec.of("ReLU"), x)
    if extra_relu:
        x = g.add("r2", LayerSpec.of("ReLU"), x)
    x = g.add("gap", LayerSpec.of("GlobalAvgPool"), x)
    x = g.add("fc", LayerSpec.dense(10), x)
    g.add("sm", LayerSpec.of("Softmax"), x)
    return g.build()


@pytest.fixture(scope="module")
def resnet():
    return build_resnet50()


def test_tensor_shape_rejects_zero():
    with pytest.raises(ValueError):
        TensorShape(0, 4, 4)
    assert str(TensorShape.parse("224x224x3")) == "224x224x3"


def test_layer_spec_field_presence():
    with pytest.raises(GraphError):
        LayerSpec(LayerKind.RELU, kernel_size=3)
    with pytest.raises(GraphError):
        LayerSpec(LayerKind.CONV, out_channels=4)  # kernel missing
    with pytest.raises(GraphError):
        LayerSpec(LayerKind.MAXPOOL, kernel_size=3, out_channels=4)
    assert LayerSpec.conv(4, 3).stride == 1


def test_identity_1x1_conv():
    g = GraphBuilder(TensorShape(224, 224, 3))
    x = g.add("c", LayerSpec.conv(3, 1, 1))
    g.add("sm", LayerSpec.of("Softmax"), x)
    shapes = infer_shapes(g.build())
    assert shapes["c"][1] == TensorShape(224, 224, 3)


def test_resnet_stem_and_head_shapes(resnet):
    shapes = infer_shapes(resnet)
    assert shapes["conv1"] == (TensorShape(224, 224, 3), TensorShape(112, 112, 64))
    assert shapes["pool1"][1] == TensorShape(56, 56, 64)
    assert shapes["gap"] == (TensorShape(7, 7, 2048), TensorShape(1, 1, 2048))
    assert shapes["fc"] == (TensorShape(1, 1, 2048), TensorShape(1, 1, 1000))
    assert resnet.sink == "softmax"


def test_resnet_structure(resnet):
    kinds = [n.layer.kind for n in resnet.nodes]
    assert kinds.count(LayerKind.CONV) == 53
    assert kinds.count(LayerKind.BATCHNORM) == 53
    assert kinds.count(LayerKind.DENSE) == 1
    assert kinds.count(LayerKind.ADD) == 16
    fc = resnet.by_id["fc"].layer
    assert fc.out_channels == 1000 and fc.has_bias


def test_resnet_parameter_count_matches_oracle(resnet):
    _, _, params = resnet50_tally()
    assert params == 25_557_032
    assert parameter_count(resnet) == params


def test_resnet_small_input():
    g = build_resnet50(TensorShape(32, 32, 3), 10)
    shapes = infer_shapes(g)
    assert shapes[g.sink][1].channels == 10
    with pytest.raises(InvalidInput):
        build_resnet50(TensorShape(31, 64, 3), 10)


def test_parameter_count_small_cases():
    g = GraphBuilder(TensorShape(1, 1, 2048))
    g.add("sm", LayerSpec.of("Softmax"), g.add("fc", LayerSpec.dense(1000)))
    assert parameter_count(g.build()) == 2_049_000
    g = GraphBuilder(TensorShape(5, 5, 1))
    g.add("sm", LayerSpec.of("Softmax"), g.add("c", LayerSpec.conv(1, 3)))
    assert parameter_count(g.build()) == 9


def test_parameter_count_additive():
    a, b = tiny(), tiny(extra_relu=True)
    # tiny(): conv 3*3*3*8 + dense (8+1)*10
    assert parameter_count(a) == 216 + 90 == parameter_count(b)


def test_digest_determinism_and_sensitivity(resnet):
    assert canonical_digest(tiny()) == canonical_digest(tiny())
    assert canonical_digest(tiny()) != canonical_digest(tiny(extra_relu=True))
    assert build_resnet50().digest == resnet.digest


def test_digest_ignores_listing_order():
    g = tiny()
    shuffled = ArchitectureGraph(g.input_shape, tuple(reversed(g.nodes)))
    assert shuffled.digest == g.digest
    assert shuffled.to_text() == g.to_text()


def test_text_round_trip(resnet):
    text = resnet.to_text()
    assert text.startswith("input 224x224x3\nconv1 Convolution k=7 s=2 c=64 <- input\n")
    assert "fc Dense c=1000 bias=1 <- gap" in text
    again = loads(text)
    assert again.digest == resnet.digest
    assert again.to_text() == text


@pytest.mark.parametrize("text", [
    "",
    "input 4x4\nsm Softmax <- input\n",
    "input 4x4x1\nsm Softmax\n",
    "input 4x4x1\nc Convolution k=3 q=1 c=2 <- input\nsm Softmax <- c\n",
    "input 4x4x1\nc Bogus <- input\n",
    "input 4x4x1\nc Convolution c=2 <- input\nsm Softmax <- c\n",
])
def test_parse_errors(text):
    with pytest.raises(ArchParseError):
        loads(text)


def test_structural_errors():
    s = TensorShape(8, 8, 1)
    relu, sm = LayerSpec.of("ReLU"), LayerSpec.of("Softmax")
    with pytest.raises(DanglingNode):
        ArchitectureGraph(s, (Node("a", relu, ("ghost",)), Node("sm", sm, ("a",))))
    with pytest.raises(DanglingNode):  # 'b' is a second sink
        ArchitectureGraph(s, (Node("a", relu, (INPUT_ID,)), Node("b", relu, ("a",)), Node("sm", sm, ("a",))))
    with pytest.raises(GraphError):  # cycle a -> b -> a
        ArchitectureGraph(s, (Node("a", LayerSpec.of("Add"), (INPUT_ID, "b")), Node("b", relu, ("a",)),
                              Node("sm", sm, ("b",))))
    with pytest.raises(GraphError):  # sink is not softmax
        ArchitectureGraph(s, (Node("a", relu, (INPUT_ID,)),))
    with pytest.raises(GraphError):  # Add with one input
        ArchitectureGraph(s, (Node("a", LayerSpec.of("Add"), (INPUT_ID,)), Node("sm", sm, ("a",))))


def test_add_shape_mismatch():
    g = GraphBuilder(TensorShape(8, 8, 4))
    a = g.add("a", LayerSpec.conv(4, 1))
    b = g.add("b", LayerSpec.conv(8, 1))
    g.add("sm", LayerSpec.of("Softmax"), g.add("j", LayerSpec.of("Add"), a, b))
    with pytest.raises(ShapeMismatch) as exc:
        infer_shapes(g.build())
    assert exc.value.node_id == "j"


def test_infer_shapes_deterministic(resnet):
    assert infer_shapes(resnet) == infer_shapes(resnet)
    assert infer_shapes(resnet) == infer_shapes(loads(resnet.to_text()))


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 300), w=st.integers(1, 300), c=st.integers(1, 64),
       k=st.sampled_from([1, 3, 5, 7]), s=st.sampled_from([1, 2]), co=st.integers(1, 64))
def test_same_padding_ceil_rule(h, w, c, k, s, co):
    g = GraphBuilder(TensorShape(h, w, c))
    x = g.add("c", LayerSpec.conv(co, k, s))
    g.add("sm", LayerSpec.of("Softmax"), g.add("p", LayerSpec.maxpool(k, s), x))
    shapes = infer_shapes(g.build())
    assert shapes["c"][1] == TensorShape(math.ceil(h / s), math.ceil(w / s), co)
    assert shapes["p"][1] == TensorShape(math.ceil(math.ceil(h / s) / s), math.ceil(math.ceil(w / s) / s), co)
