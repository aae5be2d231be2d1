import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from automl_bench.graph import GraphBuilder, LayerKind, LayerSpec, TensorShape, build_resnet50
from automl_bench.opcount import (IMAGENET, DatasetDescriptor, OpCount, OpWeights, breakdown_rows,
                                  class_breakdown, count_image_bp, count_image_fp, count_layer_bp,
                                  count_layer_fp, count_training_epoch, count_validation_epoch, epoch_ops)

from oracles import resnet50_tally

S = TensorShape


@pytest.fixture(scope="module")
def resnet():
    return build_resnet50()


def dense_graph(cin=2048, cout=1000):
    g = GraphBuilder(S(1, 1, cin))
    g.add("sm", LayerSpec.of("Softmax"), g.add("fc", LayerSpec.dense(cout)))
    return g.build()


def test_weighted_total_formula():
    c = OpCount(macc=3, add=5, div=7, comparison=11, exp=13)
    assert c.weighted_total == 2 * 3 + 5 + 11 + 4 * 7 + 8 * 13
    assert c.weighted(OpWeights(1, 1, 1, 1)) == 39
    assert (c + c) == c * 2 == 2 * c
    with pytest.raises(ValueError):
        OpCount(macc=-1)


def test_dense_fp_and_bp():
    layer = LayerSpec.dense(1000)
    fp = count_layer_fp(layer, S(1, 1, 2048), S(1, 1, 1000))
    bp = count_layer_bp(layer, S(1, 1, 2048), S(1, 1, 1000))
    assert fp == OpCount(macc=2_048_000)
    assert fp.weighted_total == 4_096_000
    assert bp.macc == 6_145_000
    assert bp.weighted_total == 12_290_000
    assert bp.weighted_total / fp.weighted_total == pytest.approx(3.0005, abs=5e-5)


def test_softmax_unit():
    c = count_layer_fp(LayerSpec.of("Softmax"), S(1, 1, 1), S(1, 1, 1))
    assert (c.exp, c.add, c.div) == (1, 1, 1)
    assert c.weighted_total == 13


def test_tiny_conv_bp():
    layer = LayerSpec.conv(1, 1, 1)
    assert count_layer_bp(layer, S(1, 1, 1), S(1, 1, 1)).macc == 3


@pytest.mark.parametrize("kind", ["ReLU", "Add", "BatchNorm", "GlobalAvgPool", "Softmax"])
def test_ignorable_bp(kind):
    assert count_layer_bp(LayerSpec.of(kind), S(7, 7, 64), S(7, 7, 64)) == OpCount()
    assert count_layer_bp(LayerSpec.maxpool(), S(14, 14, 64), S(7, 7, 64)) == OpCount()


def test_table_i_layers():
    assert count_layer_fp(LayerSpec.conv(8, 3), S(10, 10, 4), S(10, 10, 8)).macc == 9 * 4 * 100 * 8
    assert count_layer_fp(LayerSpec.of("BatchNorm"), S(4, 4, 2), S(4, 4, 2)) == OpCount(macc=32, add=32, div=32)
    assert count_layer_fp(LayerSpec.of("ReLU"), S(4, 4, 2), S(4, 4, 2)) == OpCount(comparison=32)
    assert count_layer_fp(LayerSpec.of("Add"), S(4, 4, 2), S(4, 4, 2)) == OpCount(add=32)
    assert count_layer_fp(LayerSpec.maxpool(3, 2), S(4, 4, 2), S(2, 2, 2)) == OpCount(comparison=72)
    assert count_layer_fp(LayerSpec.of("GlobalAvgPool"), S(7, 7, 8), S(1, 1, 8)) == OpCount(add=392, div=8)


def test_empty_graph_is_one_softmax():
    g = GraphBuilder(S(1, 1, 1))
    g.add("sm", LayerSpec.of("Softmax"))
    assert count_image_fp(g.build()).weighted_total == 13
    assert count_image_bp(g.build()).weighted_total == 0


def test_resnet_classes_match_oracle(resnet):
    fp, bp, _ = resnet50_tally()
    got = class_breakdown(resnet)
    for name in fp:
        assert got[name][0].weighted_total == fp[name], name
        assert got[name][1].weighted_total == bp[name], name
    assert count_image_fp(resnet).weighted_total == sum(fp.values()) == 7_806_585_544
    assert count_image_bp(resnet).weighted_total == sum(bp.values()) == 15_482_900_816


def test_dense_only_ratio():
    g = dense_graph()
    fp, bp = count_image_fp(g).weighted_total, count_image_bp(g).weighted_total
    assert bp == 12_290_000
    assert fp == 4_096_000 + 13_000
    ratio = count_layer_bp(LayerSpec.dense(1000), S(1, 1, 2048), S(1, 1, 1000)).weighted_total / 4_096_000
    assert ratio == pytest.approx(3.0005, rel=1e-3)


def test_pool_relu_add_graph_has_no_bp():
    g = GraphBuilder(S(8, 8, 4))
    a = g.add("r", LayerSpec.of("ReLU"))
    b = g.add("p", LayerSpec.maxpool(3, 1), a)
    x = g.add("j", LayerSpec.of("Add"), a, b)
    g.add("sm", LayerSpec.of("Softmax"), g.add("gap", LayerSpec.of("GlobalAvgPool"), x))
    assert count_image_bp(g.build()) == OpCount()


def test_epoch_totals_are_exact_multiples(resnet):
    fp = count_image_fp(resnet)
    bp = count_image_bp(resnet)
    train = count_training_epoch(resnet, IMAGENET)
    assert train == (fp + bp) * 1_281_167
    assert count_validation_epoch(resnet, IMAGENET) == fp * 50_000
    one = DatasetDescriptor(1, 1, S(224, 224, 3))
    assert count_training_epoch(resnet, one) == fp + bp
    double = DatasetDescriptor(1_281_167, 100_000)
    assert count_validation_epoch(resnet, double) == count_validation_epoch(resnet, IMAGENET) * 2
    assert epoch_ops(resnet) == train.weighted_total + fp.weighted_total * 50_000


def test_dataset_descriptor_rejects_zero():
    with pytest.raises(ValueError):
        DatasetDescriptor(10, 0)
    assert not IMAGENET.nonstandard
    assert DatasetDescriptor(10, 10).nonstandard


def test_breakdown_rows(resnet):
    rows = breakdown_rows(resnet, IMAGENET)
    assert [r["layer_class"] for r in rows] == [
        "conv", "dense", "batchnorm", "relu", "maxpool", "avgpool", "add", "softmax", "total"]
    total = rows[-1]
    assert total["total_ops"] == epoch_ops(resnet)
    assert total["fp_ops"] == sum(r["fp_ops"] for r in rows[:-1])


@settings(max_examples=150, deadline=None)
@given(k=st.sampled_from([1, 3, 5, 7]), cin=st.integers(1, 256), cout=st.integers(1, 256),
       h=st.integers(1, 64), w=st.integers(1, 64), s=st.sampled_from([1, 2]))
def test_conv_bp_fp_ratio(k, cin, cout, h, w, s):
    layer = LayerSpec.conv(cout, k, s)
    ins = S(h, w, cin)
    out = S(-(-h // s), -(-w // s), cout)
    fp = count_layer_fp(layer, ins, out).weighted_total
    bp = count_layer_bp(layer, ins, out).weighted_total
    # exact: 2 + 1/(Ho*Wo)
    assert bp * out.height * out.width == fp * (2 * out.height * out.width + 1)
    assert 2 < bp / fp <= 3


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 10_000_000), m=st.integers(1, 50))
def test_training_epoch_linear(n, m):
    g = dense_graph(64, 10)
    a = count_training_epoch(g, DatasetDescriptor(n, 1))
    b = count_training_epoch(g, DatasetDescriptor(n * m, 1))
    assert b == a * m


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(["ReLU", "BatchNorm", "conv", "maxpool"]), c=st.integers(1, 32))
def test_adding_a_layer_never_decreases_counts(kind, c):
    def build(extra):
        g = GraphBuilder(S(16, 16, c))
        x = g.add("c0", LayerSpec.conv(c, 3))
        if extra:
            layer = {"conv": LayerSpec.conv(c, 3), "maxpool": LayerSpec.maxpool(3, 1)}.get(kind) or LayerSpec.of(kind)
            x = g.add("extra", layer, x)
        g.add("sm", LayerSpec.of("Softmax"), g.add("gap", LayerSpec.of("GlobalAvgPool"), x))
        return g.build()

    small, big = build(False), build(True)
    for fn in (count_image_fp, count_image_bp):
        a, b = fn(small), fn(big)
        assert all(getattr(b, f) >= getattr(a, f) for f in ("macc", "add", "div", "comparison", "exp"))
    assert count_image_fp(big).weighted_total > count_image_fp(small).weighted_total
