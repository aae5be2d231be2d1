"""Symbolic layer graphs: shapes, parameters, serialization and the ResNet-50 seed.

An :class:`ArchitectureGraph` is an immutable DAG of :class:`LayerSpec` nodes fed
by a single reserved ``input`` pseudo-node.  Nothing here carries weights; the
graph exists so the op counter can evaluate per-layer formulas and so the
search can mutate structures.

Text format (one node per line, canonical topological order)::

    input 224x224x3
    conv1 Convolution k=7 s=2 c=64 <- input
    bn1 BatchNorm <- conv1
    ...
"""
from __future__ import annotations

import hashlib
import heapq
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, NamedTuple

from .errors import ArchParseError, DanglingNode, GraphError, InvalidInput, ShapeMismatch

INPUT_ID = "input"
_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class LayerKind(str, Enum):
    CONV = "Convolution"
    DENSE = "Dense"
    BATCHNORM = "BatchNorm"
    RELU = "ReLU"
    ADD = "Add"
    MAXPOOL = "MaxPool"
    GLOBALAVGPOOL = "GlobalAvgPool"
    SOFTMAX = "Softmax"


_KERNEL_KINDS = {LayerKind.CONV, LayerKind.MAXPOOL}
_CHANNEL_KINDS = {LayerKind.CONV, LayerKind.DENSE}


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"TensorShape.{name} must be a positive integer, got {v!r}")

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels

    @classmethod
    def parse(cls, text: str) -> "TensorShape":
        """Parse ``HxWxC`` (e.g. ``224x224x3``)."""
        parts = text.strip().lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"bad shape {text!r}, expected HxWxC")
        try:
            h, w, c = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"bad shape {text!r}, expected HxWxC") from None
        return cls(h, w, c)

    def __str__(self):
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel_size: int | None = None
    stride: int | None = None
    out_channels: int | None = None
    has_bias: bool = False

    def __post_init__(self):
        kind = LayerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if (self.kernel_size is not None) != (kind in _KERNEL_KINDS):
            raise GraphError(f"kernel_size must be set iff kind is Convolution/MaxPool ({kind.value})")
        if (self.out_channels is not None) != (kind in _CHANNEL_KINDS):
            raise GraphError(f"out_channels must be set iff kind is Convolution/Dense ({kind.value})")
        if kind in _KERNEL_KINDS:
            if self.stride is None:
                object.__setattr__(self, "stride", 1)
            if self.kernel_size < 1 or self.stride < 1:
                raise GraphError("kernel_size and stride must be positive")
        elif self.stride is not None:
            raise GraphError(f"stride is only meaningful for Convolution/MaxPool ({kind.value})")
        if self.out_channels is not None and self.out_channels < 1:
            raise GraphError("out_channels must be positive")
        if self.has_bias and kind is not LayerKind.DENSE:
            raise GraphError("only Dense layers carry a bias")

    # convenience constructors
    @classmethod
    def conv(cls, out_channels, kernel_size=3, stride=1):
        return cls(LayerKind.CONV, kernel_size=kernel_size, stride=stride, out_channels=out_channels)

    @classmethod
    def dense(cls, out_channels, bias=True):
        return cls(LayerKind.DENSE, out_channels=out_channels, has_bias=bias)

    @classmethod
    def maxpool(cls, kernel_size=3, stride=2):
        return cls(LayerKind.MAXPOOL, kernel_size=kernel_size, stride=stride)

    @classmethod
    def of(cls, kind):
        return cls(LayerKind(kind))

    def tokens(self) -> list[str]:
        out = [self.kind.value]
        if self.kernel_size is not None:
            out.append(f"k={self.kernel_size}")
            out.append(f"s={self.stride}")
        if self.out_channels is not None:
            out.append(f"c={self.out_channels}")
        if self.kind is LayerKind.DENSE:
            out.append(f"bias={int(self.has_bias)}")
        return out


class Node(NamedTuple):
    id: str
    layer: LayerSpec
    inputs: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class ArchitectureGraph:
    """Immutable layer DAG.

    Structural invariants (unique ids, arity, acyclicity, single Softmax sink)
    are checked on construction.  Shape consistency is checked by
    :func:`infer_shapes`, which morph repair relies on being separate.
    """

    input_shape: TensorShape
    nodes: tuple[Node, ...]
    _order: tuple[str, ...] = field(init=False, repr=False)
    digest: str = field(init=False)

    def __post_init__(self):
        nodes = tuple(Node(n[0], n[1], tuple(n[2])) for n in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "_order", _validate(nodes))
        object.__setattr__(self, "digest", hashlib.sha256(self.to_text().encode()).hexdigest()[:20])

    def __eq__(self, other):
        if not isinstance(other, ArchitectureGraph):
            return NotImplemented
        return self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    def __len__(self):
        return len(self.nodes)

    @cached_property
    def by_id(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @property
    def order(self) -> tuple[str, ...]:
        """Node ids in canonical topological order (ties broken by id)."""
        return self._order

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    @cached_property
    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {INPUT_ID: []}
        for nid in self._order:
            succ.setdefault(nid, [])
        for nid in self._order:
            for src in self.by_id[nid].inputs:
                succ[src].append(nid)
        return succ

    @property
    def sink(self) -> str:
        return self._order[-1]

    def ordered_nodes(self) -> Iterable[Node]:
        by_id = self.by_id
        return (by_id[i] for i in self._order)

    def to_text(self) -> str:
        lines = [f"input {self.input_shape}"]
        by_id = {n.id: n for n in self.nodes}
        for nid in self._order:
            n = by_id[nid]
            lines.append(" ".join([n.id, *n.layer.tokens(), "<-", ",".join(n.inputs)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureGraph":
        return loads(text)


def _validate(nodes: tuple[Node, ...]) -> tuple[str, ...]:
    ids = set()
    for n in nodes:
        if n.id == INPUT_ID or not _ID_RE.match(n.id):
            raise GraphError(f"invalid node id {n.id!r}")
        if n.id in ids:
            raise GraphError(f"duplicate node id {n.id!r}")
        ids.add(n.id)
    if not nodes:
        raise GraphError("graph has no nodes")

    indeg = {}
    succ: dict[str, list[str]] = {INPUT_ID: []}
    for n in nodes:
        succ.setdefault(n.id, [])
    for n in nodes:
        want = 2 if n.layer.kind is LayerKind.ADD else 1
        if len(n.inputs) != want:
            raise GraphError(f"{n.layer.kind.value} node {n.id!r} needs {want} input(s), has {len(n.inputs)}")
        for src in n.inputs:
            if src not in succ:
                raise DanglingNode(f"node {n.id!r} references unknown input {src!r}")
            succ[src].append(n.id)
        indeg[n.id] = len(n.inputs)

    # Kahn's algorithm; the heap gives deterministic id tie-breaking
    ready = []
    for dst in succ[INPUT_ID]:
        indeg[dst] -= 1
    for nid, d in indeg.items():
        if d == 0:
            heapq.heappush(ready, nid)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for dst in succ[nid]:
            indeg[dst] -= 1
            if indeg[dst] == 0:
                heapq.heappush(ready, dst)
    if len(order) != len(nodes):
        raise GraphError("graph contains a cycle")

    sinks = [nid for nid in order if not succ[nid]]
    if len(sinks) != 1:
        raise DanglingNode(f"graph must have exactly one sink, found {sinks}")
    sink = sinks[0]
    if {n.id: n for n in nodes}[sink].layer.kind is not LayerKind.SOFTMAX:
        raise GraphError(f"sink {sink!r} is not a Softmax layer")
    return tuple(order)


def _out_shape(layer: LayerSpec, ins: list[TensorShape], nid: str) -> TensorShape:
    x = ins[0]
    kind = layer.kind
    if kind in _KERNEL_KINDS:
        s = layer.stride
        c = layer.out_channels if kind is LayerKind.CONV else x.channels
        # "same" padding
        return TensorShape(-(-x.height // s), -(-x.width // s), c)
    if kind is LayerKind.DENSE:
        return TensorShape(1, 1, layer.out_channels)
    if kind is LayerKind.GLOBALAVGPOOL:
        return TensorShape(1, 1, x.channels)
    if kind is LayerKind.ADD:
        if ins[0] != ins[1]:
            raise ShapeMismatch(f"Add node {nid!r} joins {ins[0]} and {ins[1]}", node_id=nid)
        return x
    return x


def infer_shapes(graph: ArchitectureGraph) -> dict[str, tuple[TensorShape, TensorShape]]:
    """Map every node id to its ``(input_shape, output_shape)``.

    Convolution and MaxPool use "same" padding, so spatial sizes become
    ``ceil(size / stride)``.  For Add nodes the reported input is the first
    branch.  Raises :class:`ShapeMismatch` when Add branches disagree.
    """
    cache = graph.__dict__.get("_shapes")
    if cache is not None:
        return dict(cache)
    outs = {INPUT_ID: graph.input_shape}
    result = {}
    by_id = graph.by_id
    for nid in graph.order:
        node = by_id[nid]
        ins = [outs[i] for i in node.inputs]
        out = _out_shape(node.layer, ins, nid)
        outs[nid] = out
        result[nid] = (ins[0], out)
    graph.__dict__["_shapes"] = result
    return dict(result)


def parameter_count(graph: ArchitectureGraph) -> int:
    """Trainable parameters: conv K*K*Ci*Co, dense (Ci+1)*Co, batch norm 2*Ci."""
    shapes = infer_shapes(graph)
    total = 0
    for node in graph.nodes:
        layer = node.layer
        cin = shapes[node.id][0]
        if layer.kind is LayerKind.CONV:
            total += layer.kernel_size**2 * cin.channels * layer.out_channels
        elif layer.kind is LayerKind.DENSE:
            total += (cin.size + int(layer.has_bias)) * layer.out_channels
        elif layer.kind is LayerKind.BATCHNORM:
            total += 2 * cin.channels
    return total


def canonical_digest(graph: ArchitectureGraph) -> str:
    return graph.digest


def dumps(graph: ArchitectureGraph) -> str:
    return graph.to_text()


def loads(text: str) -> ArchitectureGraph:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("input "):
        raise ArchParseError("architecture text must start with 'input HxWxC'")
    try:
        shape = TensorShape.parse(lines[0].split(None, 1)[1])
    except ValueError as exc:
        raise ArchParseError(str(exc)) from None
    nodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        head, sep, preds = line.partition("<-")
        toks = head.split()
        if not sep or len(toks) < 2 or not preds.strip():
            raise ArchParseError(f"line {lineno}: expected '<id> <kind> [k=..] [s=..] [c=..] [bias=..] <- <inputs>'")
        nid, kind, *attrs = toks
        kw = {}
        for a in attrs:
            key, eq, val = a.partition("=")
            if not eq or key not in ("k", "s", "c", "bias"):
                raise ArchParseError(f"line {lineno}: unknown attribute {a!r}")
            try:
                kw[key] = int(val)
            except ValueError:
                raise ArchParseError(f"line {lineno}: non-integer value in {a!r}") from None
        try:
            layer = LayerSpec(
                LayerKind(kind),
                kernel_size=kw.get("k"),
                stride=kw.get("s") if "k" in kw else None,
                out_channels=kw.get("c"),
                has_bias=bool(kw.get("bias", 0)),
            )
        except ValueError:
            raise ArchParseError(f"line {lineno}: unknown layer kind {kind!r}") from None
        except GraphError as exc:
            raise ArchParseError(f"line {lineno}: {exc}") from None
        nodes.append(Node(nid, layer, tuple(p.strip() for p in preds.split(","))))
    return ArchitectureGraph(shape, tuple(nodes))


def load(path) -> ArchitectureGraph:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(graph: ArchitectureGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph.to_text())


class GraphBuilder:
    """Append-only helper for writing graphs in code."""

    def __init__(self, input_shape: TensorShape):
        self.input_shape = input_shape
        self.nodes: list[Node] = []

    def add(self, nid: str, layer: LayerSpec, *inputs: str) -> str:
        self.nodes.append(Node(nid, layer, tuple(inputs) or (INPUT_ID,)))
        return nid

    def build(self) -> ArchitectureGraph:
        return ArchitectureGraph(self.input_shape, tuple(self.nodes))


RESNET50_STAGES = ((3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048))


def build_resnet50(input_shape: TensorShape | None = None, num_classes: int = 1000) -> ArchitectureGraph:
    """Classic ResNet-50 v1 (downsampling stride on the first 1x1 conv of a stage).

    Stem 7x7/2 conv, BN, ReLU, 3x3/2 max-pool; bottleneck stages of (3, 4, 6, 3)
    blocks with projection shortcuts on each stage's first block; global
    average pool, dense with bias, softmax.
    """
    if input_shape is None:
        input_shape = TensorShape(224, 224, 3)
    if input_shape.height < 32 or input_shape.width < 32:
        raise InvalidInput(f"ResNet-50 needs spatial dims >= 32, got {input_shape}")
    if num_classes < 1:
        raise InvalidInput("num_classes must be positive")

    g = GraphBuilder(input_shape)
    x = g.add("conv1", LayerSpec.conv(64, 7, 2))
    x = g.add("bn1", LayerSpec.of("BatchNorm"), x)
    x = g.add("relu1", LayerSpec.of("ReLU"), x)
    x = g.add("pool1", LayerSpec.maxpool(3, 2), x)
    for si, (blocks, mid, out) in enumerate(RESNET50_STAGES, start=2):
        for bi in range(1, blocks + 1):
            p = f"s{si}b{bi}"
            stride = 2 if (bi == 1 and si > 2) else 1
            shortcut = x
            y = x
            for ci, (c, k, s) in enumerate(((mid, 1, stride), (mid, 3, 1), (out, 1, 1)), start=1):
                y = g.add(f"{p}.conv{ci}", LayerSpec.conv(c, k, s), y)
                y = g.add(f"{p}.bn{ci}", LayerSpec.of("BatchNorm"), y)
                if ci < 3:
                    y = g.add(f"{p}.relu{ci}", LayerSpec.of("ReLU"), y)
            if bi == 1:
                shortcut = g.add(f"{p}.proj", LayerSpec.conv(out, 1, stride), shortcut)
                shortcut = g.add(f"{p}.projbn", LayerSpec.of("BatchNorm"), shortcut)
            y = g.add(f"{p}.add", LayerSpec.of("Add"), y, shortcut)
            x = g.add(f"{p}.relu3", LayerSpec.of("ReLU"), y)
    x = g.add("gap", LayerSpec.of("GlobalAvgPool"), x)
    x = g.add("fc", LayerSpec.dense(num_classes), x)
    g.add("softmax", LayerSpec.of("Softmax"), x)
    return g.build()
