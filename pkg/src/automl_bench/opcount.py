"""Analytical operation counting for forward and backward passes.

Counts are kept per operation class (MACC, add, div, comparison, exp) as
Python integers, so epoch and cluster totals never overflow.  The weighted
scalar total uses MACC=2, add/sub/mul/cmp=1, div/sqrt=4, exp=8.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import UnsupportedLayer
from .graph import ArchitectureGraph, LayerKind, LayerSpec, TensorShape, infer_shapes


@dataclass(frozen=True)
class OpWeights:
    macc: int = 2
    add_sub_mul_cmp: int = 1
    div_sqrt: int = 4
    special: int = 8


DEFAULT_WEIGHTS = OpWeights()


@dataclass(frozen=True)
class OpCount:
    macc: int = 0
    add: int = 0
    div: int = 0
    comparison: int = 0
    exp: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"OpCount.{f.name} must be non-negative")

    def weighted(self, w: OpWeights = DEFAULT_WEIGHTS) -> int:
        return (w.macc * self.macc + w.add_sub_mul_cmp * (self.add + self.comparison)
                + w.div_sqrt * self.div + w.special * self.exp)

    @property
    def weighted_total(self) -> int:
        return self.weighted(DEFAULT_WEIGHTS)

    def __add__(self, other: "OpCount") -> "OpCount":
        if not isinstance(other, OpCount):
            return NotImplemented
        return OpCount(self.macc + other.macc, self.add + other.add, self.div + other.div,
                       self.comparison + other.comparison, self.exp + other.exp)

    def __mul__(self, k: int) -> "OpCount":
        if not isinstance(k, int):
            return NotImplemented
        return OpCount(self.macc * k, self.add * k, self.div * k, self.comparison * k, self.exp * k)

    __rmul__ = __mul__

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weighted_total"] = self.weighted_total
        return d


ZERO = OpCount()


@dataclass(frozen=True)
class DatasetDescriptor:
    train_images: int = 1_281_167
    val_images: int = 50_000
    image_shape: TensorShape = TensorShape(224, 224, 3)

    def __post_init__(self):
        for name in ("train_images", "val_images"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"DatasetDescriptor.{name} must be a positive integer, got {v!r}")

    @property
    def nonstandard(self) -> bool:
        return self != IMAGENET


IMAGENET = DatasetDescriptor()


def count_layer_fp(layer: LayerSpec, in_shape: TensorShape, out_shape: TensorShape) -> OpCount:
    """Forward-pass counts of one layer for one image."""
    kind = layer.kind
    ho_wo_co = out_shape.size
    if kind is LayerKind.CONV:
        k = layer.kernel_size
        return OpCount(macc=k * k * in_shape.channels * ho_wo_co)
    if kind is LayerKind.DENSE:
        return OpCount(macc=in_shape.size * layer.out_channels)
    if kind is LayerKind.BATCHNORM:
        n = in_shape.size
        return OpCount(macc=n, add=n, div=n)
    if kind is LayerKind.RELU:
        return OpCount(comparison=ho_wo_co)
    if kind is LayerKind.ADD:
        return OpCount(add=ho_wo_co)
    if kind is LayerKind.MAXPOOL:
        k = layer.kernel_size
        return OpCount(comparison=k * k * ho_wo_co)
    if kind is LayerKind.GLOBALAVGPOOL:
        return OpCount(add=in_shape.size, div=in_shape.channels)
    if kind is LayerKind.SOFTMAX:
        # on a flattened vector this is C_o
        return OpCount(exp=ho_wo_co, add=ho_wo_co, div=ho_wo_co)
    raise UnsupportedLayer(f"no forward formula for layer kind {kind!r}")


def count_layer_bp(layer: LayerSpec, in_shape: TensorShape, out_shape: TensorShape) -> OpCount:
    """Backward-pass counts (gradients plus parameter update) of one layer for one image.

    Only convolution and dense layers contribute; everything else is zero.
    """
    kind = layer.kind
    if kind is LayerKind.CONV:
        k = layer.kernel_size
        params = k * k * in_shape.channels * layer.out_channels
        return OpCount(macc=2 * params * out_shape.height * out_shape.width + params)
    if kind is LayerKind.DENSE:
        cin = in_shape.size
        cout = layer.out_channels
        return OpCount(macc=2 * cin * cout + (cin + int(layer.has_bias)) * cout)
    if isinstance(kind, LayerKind):
        return ZERO
    raise UnsupportedLayer(f"no backward formula for layer kind {kind!r}")


def _sum(graph: ArchitectureGraph, fn) -> OpCount:
    shapes = infer_shapes(graph)
    total = ZERO
    for node in graph.nodes:
        total = total + fn(node.layer, *shapes[node.id])
    return total


def count_image_fp(graph: ArchitectureGraph) -> OpCount:
    return _sum(graph, count_layer_fp)


def count_image_bp(graph: ArchitectureGraph) -> OpCount:
    return _sum(graph, count_layer_bp)


def count_training_epoch(graph: ArchitectureGraph, data: DatasetDescriptor = IMAGENET) -> OpCount:
    """FP + BP over every training image; batch size does not enter."""
    return (count_image_fp(graph) + count_image_bp(graph)) * data.train_images


def count_validation_epoch(graph: ArchitectureGraph, data: DatasetDescriptor = IMAGENET) -> OpCount:
    return count_image_fp(graph) * data.val_images


def epoch_ops(graph: ArchitectureGraph, data: DatasetDescriptor = IMAGENET) -> int:
    """Weighted ops one epoch contributes to the benchmark score.

    Validation passes are included; flipping that accounting choice only
    needs this function changed.
    """
    return count_training_epoch(graph, data).weighted_total + count_validation_epoch(graph, data).weighted_total


LAYER_CLASSES = {
    LayerKind.CONV: "conv",
    LayerKind.DENSE: "dense",
    LayerKind.BATCHNORM: "batchnorm",
    LayerKind.RELU: "relu",
    LayerKind.MAXPOOL: "maxpool",
    LayerKind.GLOBALAVGPOOL: "avgpool",
    LayerKind.ADD: "add",
    LayerKind.SOFTMAX: "softmax",
}


def class_breakdown(graph: ArchitectureGraph) -> dict[str, tuple[OpCount, OpCount]]:
    """Per-image ``(fp, bp)`` subtotals keyed by layer class, in fixed class order."""
    out = {name: (ZERO, ZERO) for name in LAYER_CLASSES.values()}
    shapes = infer_shapes(graph)
    for node in graph.nodes:
        name = LAYER_CLASSES[node.layer.kind]
        fp, bp = out[name]
        ins, outs = shapes[node.id]
        out[name] = (fp + count_layer_fp(node.layer, ins, outs), bp + count_layer_bp(node.layer, ins, outs))
    return out


def breakdown_rows(graph: ArchitectureGraph, data: DatasetDescriptor | None = None) -> list[dict]:
    """Rows for the ``count`` CSV: layer_class, fp_ops, bp_ops, bp_fp_ratio, total_ops.

    With ``data`` the rows are per epoch: fp_ops covers training and
    validation images, bp_ops training images only.  Without it, per image.
    """
    rows = []
    fp_total = bp_total = 0
    for name, (fp, bp) in class_breakdown(graph).items():
        fpw, bpw = fp.weighted_total, bp.weighted_total
        if data is not None:
            fpw *= data.train_images + data.val_images
            bpw *= data.train_images
        fp_total += fpw
        bp_total += bpw
        rows.append(_row(name, fpw, bpw))
    rows.append(_row("total", fp_total, bp_total))
    return rows


def _row(name, fp, bp):
    return {
        "layer_class": name,
        "fp_ops": fp,
        "bp_ops": bp,
        "bp_fp_ratio": round(bp / fp, 6) if fp else 0.0,
        "total_ops": fp + bp,
    }
