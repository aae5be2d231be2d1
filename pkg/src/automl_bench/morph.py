"""Network-morphism search: structural edits and candidate proposal.

Morphs only grow a network (deepen, widen, add a skip) or change a conv's
kernel; the input shape and the Softmax width are preserved.  Nodes inserted
here get ids ``m<N>.<role>`` so later stages can tell them apart from the
seed architecture.
"""
from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from statistics import NormalDist
from typing import Iterable, Sequence

from . import graph as G
from .errors import ExhaustedSearch, GraphError, InapplicableAction, ShapeMismatch, ShapeRepairFailure
from .graph import ArchitectureGraph, LayerKind, LayerSpec, Node, infer_shapes, parameter_count
from .hpo import KERNEL_SIZES, HyperParams
from .opcount import OpCount

_MORPH_ID = re.compile(r"^m(\d+)\.")
MORPH_CONV_ID = re.compile(r"^m\d+\.conv$")
WIDEN_FACTOR = 2
MAX_ATTEMPTS = 1000


class MorphKind(str, Enum):
    DEEPEN = "DeepenBlock"
    WIDEN = "Widen"
    CHANGE_KERNEL = "ChangeKernel"
    ADD_SKIP = "AddSkip"


@dataclass(frozen=True)
class MorphAction:
    kind: MorphKind
    target_node: str
    parameter: int = 0

    def __post_init__(self):
        kind = MorphKind(self.kind)
        object.__setattr__(self, "kind", kind)
        p = self.parameter
        if kind is MorphKind.WIDEN:
            if p in (0, None):
                object.__setattr__(self, "parameter", WIDEN_FACTOR)
            elif p != WIDEN_FACTOR:
                raise InapplicableAction(f"Widen factor is fixed at {WIDEN_FACTOR}")
        elif kind is MorphKind.DEEPEN:
            if p in (0, None):
                object.__setattr__(self, "parameter", 3)
            elif p not in KERNEL_SIZES:
                raise InapplicableAction(f"DeepenBlock kernel must be one of {KERNEL_SIZES}")
        elif kind is MorphKind.CHANGE_KERNEL:
            if p not in KERNEL_SIZES:
                raise InapplicableAction(f"ChangeKernel size must be one of {KERNEL_SIZES}")
        elif kind is MorphKind.ADD_SKIP and (p is None or p < 1):
            raise InapplicableAction("AddSkip span must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "MorphAction":
        """Parse ``Kind:node[:param]``, e.g. ``Widen:s2b1.conv2``."""
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad morph action {text!r}, expected Kind:node[:param]")
        kinds = {k.value.lower(): k for k in MorphKind}
        kind = kinds.get(parts[0].lower())
        if kind is None:
            raise ValueError(f"unknown morph kind {parts[0]!r}; choose from {[k.value for k in MorphKind]}")
        param = int(parts[2]) if len(parts) == 3 else 0
        return cls(kind, parts[1], param)

    def __str__(self):
        return f"{self.kind.value}:{self.target_node}:{self.parameter}"


@dataclass(frozen=True)
class ArchFeatures:
    node_count: int
    param_count: int
    kernel_hist: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, graph: ArchitectureGraph) -> "ArchFeatures":
        hist = Counter(n.layer.kernel_size for n in graph.nodes if n.layer.kind is LayerKind.CONV)
        return cls(len(graph.nodes), parameter_count(graph), tuple(sorted(hist.items())))


@dataclass(frozen=True)
class HistoryRecord:
    digest: str
    architecture_ref: str
    hyperparams: HyperParams
    best_error: float
    per_image_ops: OpCount
    epochs_run: int
    wall_seconds: float
    replica_id: int = 0
    completed_at: float = 0.0
    features: ArchFeatures | None = field(default=None, compare=False)
    graph: ArchitectureGraph | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.best_error < 1.0:
            raise ValueError(f"best_error must lie in (0, 1), got {self.best_error}")
        if self.epochs_run < 0 or self.wall_seconds < 0:
            raise ValueError("epochs_run and wall_seconds must be non-negative")

    def load_graph(self) -> ArchitectureGraph:
        if self.graph is not None:
            return self.graph
        return G.load(self.architecture_ref)

    def arch_features(self) -> ArchFeatures:
        if self.features is not None:
            return self.features
        return ArchFeatures.of(self.load_graph())


# -- graph surgery -----------------------------------------------------------

def _next_index(graph: ArchitectureGraph) -> int:
    idx = [int(m.group(1)) for n in graph.nodes if (m := _MORPH_ID.match(n.id))]
    return max(idx, default=0) + 1


def _insert_after(graph: ArchitectureGraph, target: str, new: list[Node]) -> ArchitectureGraph:
    """Splice a chain of new nodes after ``target``; its consumers read the chain's end."""
    tail = new[-1].id
    fresh = {n.id for n in new}
    nodes = []
    for n in graph.nodes:
        if n.id not in fresh and target in n.inputs:
            n = n._replace(inputs=tuple(tail if i == target else i for i in n.inputs))
        nodes.append(n)
        if n.id == target:
            nodes.extend(new)
    return ArchitectureGraph(graph.input_shape, tuple(nodes))


def _feature_nodes(graph: ArchitectureGraph) -> list[str]:
    """Ids upstream of the classifier head, in canonical order."""
    head = set()
    for nid in graph.order:
        node = graph.by_id[nid]
        if node.layer.kind in (LayerKind.GLOBALAVGPOOL, LayerKind.DENSE, LayerKind.SOFTMAX) or any(
            i in head for i in node.inputs
        ):
            head.add(nid)
    return [nid for nid in graph.order if nid not in head]


def _require(graph: ArchitectureGraph, nid: str) -> Node:
    node = graph.by_id.get(nid)
    if node is None:
        raise InapplicableAction(f"no node {nid!r} in graph")
    return node


def _deepen(graph, action):
    target = action.target_node
    if target not in _feature_nodes(graph):
        raise InapplicableAction(f"DeepenBlock needs a feature-extractor node, got {target!r}")
    channels = infer_shapes(graph)[target][1].channels
    m = f"m{_next_index(graph)}"
    new = [
        Node(f"{m}.conv", LayerSpec.conv(channels, action.parameter, 1), (target,)),
        Node(f"{m}.bn", LayerSpec.of("BatchNorm"), (f"{m}.conv",)),
        Node(f"{m}.relu", LayerSpec.of("ReLU"), (f"{m}.bn",)),
    ]
    return _insert_after(graph, target, new)


def _replace_layer(graph, nid, layer):
    return ArchitectureGraph(
        graph.input_shape, tuple(n._replace(layer=layer) if n.id == nid else n for n in graph.nodes)
    )


def _change_kernel(graph, action):
    node = _require(graph, action.target_node)
    if node.layer.kind is not LayerKind.CONV:
        raise InapplicableAction(f"ChangeKernel needs a Convolution, {node.id!r} is {node.layer.kind.value}")
    if node.layer.kernel_size == action.parameter:
        raise InapplicableAction(f"{node.id!r} already has kernel {action.parameter}")
    layer = LayerSpec.conv(node.layer.out_channels, action.parameter, node.layer.stride)
    return _replace_layer(graph, node.id, layer)


def _project_into(graph, add_id, branch, channels, m):
    """Route ``branch`` through a new 1x1 conv before it reaches ``add_id``."""
    proj = Node(f"{m}.proj", LayerSpec.conv(channels, 1, 1), (branch,))
    nodes = []
    for n in graph.nodes:
        if n.id == add_id:
            n = n._replace(inputs=tuple(proj.id if i == branch else i for i in n.inputs))
            nodes.append(proj)
        nodes.append(n)
    return ArchitectureGraph(graph.input_shape, tuple(nodes))


def _widen(graph, action):
    node = _require(graph, action.target_node)
    if node.layer.kind is not LayerKind.CONV:
        raise InapplicableAction(f"Widen needs a Convolution, {node.id!r} is {node.layer.kind.value}")
    layer = LayerSpec.conv(node.layer.out_channels * WIDEN_FACTOR, node.layer.kernel_size, node.layer.stride)
    g = _replace_layer(graph, node.id, layer)
    # residual joins downstream now disagree on channels; project the wide side back
    for _ in range(len(g.nodes) + 1):
        try:
            infer_shapes(g)
            return g
        except ShapeMismatch as exc:
            add = g.by_id[exc.node_id]
            g = _repair_add(g, add)
    raise ShapeRepairFailure("Widen repair did not converge")


def _repair_add(g, add):
    shapes = _partial_shapes(g, add.id)
    a, b = add.inputs
    sa, sb = shapes[a], shapes[b]
    if (sa.height, sa.width) != (sb.height, sb.width):
        raise ShapeRepairFailure(f"Add {add.id!r} joins spatially different tensors {sa} and {sb}")
    wide, narrow = (a, sb) if sa.channels > sb.channels else (b, sa)
    return _project_into(g, add.id, wide, narrow.channels, f"m{_next_index(g)}")


def _partial_shapes(g, stop):
    outs = {G.INPUT_ID: g.input_shape}
    for nid in g.order:
        if nid == stop:
            break
        node = g.by_id[nid]
        outs[nid] = G._out_shape(node.layer, [outs[i] for i in node.inputs], nid)
    return outs


def _add_skip(graph, action):
    target = action.target_node
    feats = _feature_nodes(graph)
    if target not in feats:
        raise InapplicableAction(f"AddSkip needs a feature-extractor node, got {target!r}")
    order = list(graph.order)
    pos = order.index(target) - action.parameter
    if pos < 0:
        raise InapplicableAction(f"AddSkip span {action.parameter} reaches before the input")
    start = order[pos]
    shapes = infer_shapes(graph)
    s_out, t_out = shapes[start][1], shapes[target][1]
    if (s_out.height, s_out.width) != (t_out.height, t_out.width):
        raise ShapeRepairFailure(f"skip {start!r} -> {target!r} joins {s_out} and {t_out}")
    m = f"m{_next_index(graph)}"
    new = []
    src = start
    if s_out.channels != t_out.channels:
        new.append(Node(f"{m}.proj", LayerSpec.conv(t_out.channels, 1, 1), (start,)))
        src = f"{m}.proj"
    new.append(Node(f"{m}.add", LayerSpec.of("Add"), (target, src)))
    # projection sits before the Add in node order; the Add is the chain tail
    return _insert_after(graph, target, new)


_DISPATCH = {
    MorphKind.DEEPEN: _deepen,
    MorphKind.WIDEN: _widen,
    MorphKind.CHANGE_KERNEL: _change_kernel,
    MorphKind.ADD_SKIP: _add_skip,
}


def apply_morph(graph: ArchitectureGraph, action: MorphAction) -> ArchitectureGraph:
    """Return a new graph with ``action`` applied; ``graph`` is untouched."""
    _require(graph, action.target_node)
    out = _DISPATCH[action.kind](graph, action)
    try:
        infer_shapes(out)
    except ShapeMismatch as exc:
        raise ShapeRepairFailure(str(exc)) from exc
    except GraphError as exc:  # pragma: no cover - surgery keeps structure valid
        raise ShapeRepairFailure(str(exc)) from exc
    return out


def random_action(graph: ArchitectureGraph, rng: random.Random) -> MorphAction:
    kind = rng.choice(list(MorphKind))
    feats = _feature_nodes(graph)
    if not feats:
        raise InapplicableAction("graph has no feature-extractor nodes to morph")
    if kind in (MorphKind.WIDEN, MorphKind.CHANGE_KERNEL):
        convs = [nid for nid in feats if graph.by_id[nid].layer.kind is LayerKind.CONV]
        if not convs:
            raise InapplicableAction(f"{kind.value} needs a convolution")
        target = rng.choice(convs)
        if kind is MorphKind.WIDEN:
            return MorphAction(kind, target, WIDEN_FACTOR)
        current = graph.by_id[target].layer.kernel_size
        return MorphAction(kind, target, rng.choice([k for k in KERNEL_SIZES if k != current]))
    target = rng.choice(feats)
    if kind is MorphKind.DEEPEN:
        return MorphAction(kind, target, rng.choice(KERNEL_SIZES))
    return MorphAction(kind, target, rng.randint(2, 8))


# -- search ------------------------------------------------------------------

def best_record(history: Sequence[HistoryRecord]) -> HistoryRecord | None:
    """Lowest best_error; ties go to the earliest completion (then list order)."""
    if not history:
        return None
    return min(enumerate(history), key=lambda ir: (ir[1].best_error, ir[1].completed_at, ir[0]))[1]


def propose_candidates(
    history: Sequence[HistoryRecord],
    base: ArchitectureGraph,
    n: int,
    rng_seed: int,
    exclude: Iterable[str] = (),
    max_attempts: int = MAX_ATTEMPTS,
) -> list[ArchitectureGraph]:
    """``n`` distinct novel graphs, each 1-3 random morphs away from the best parent.

    The parent is the best history record's architecture, or ``base`` while
    history is empty.  Digests already in history or in ``exclude`` are
    skipped.  Raises :class:`ExhaustedSearch` after ``max_attempts`` tries.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    best = best_record(history)
    parent = base if best is None else best.load_graph()
    seen = {r.digest for r in history} | set(exclude)
    rng = random.Random(rng_seed)
    out: list[ArchitectureGraph] = []
    attempts = 0
    while len(out) < n:
        if attempts >= max_attempts:
            raise ExhaustedSearch(f"found {len(out)} of {n} novel candidates in {max_attempts} attempts")
        attempts += 1
        g = parent
        try:
            for _ in range(rng.choice((1, 2, 3))):
                g = apply_morph(g, random_action(g, rng))
        except (InapplicableAction, ShapeRepairFailure):
            continue
        if g.digest in seen:
            continue
        seen.add(g.digest)
        out.append(g)
    return out


DISTANCE_WEIGHTS = (1.0, 1.0, 0.5)
PRIOR_STD = 0.1
_NORMAL = NormalDist()


def feature_distance(a: ArchFeatures, b: ArchFeatures) -> float:
    w_nodes, w_params, w_kernels = DISTANCE_WEIGHTS
    d_nodes = abs(a.node_count - b.node_count)
    d_params = abs(a.param_count - b.param_count) / max(a.param_count, b.param_count, 1)
    ha, hb = dict(a.kernel_hist), dict(b.kernel_hist)
    d_kernels = sum(abs(ha.get(k, 0) - hb.get(k, 0)) for k in set(ha) | set(hb))
    return w_nodes * d_nodes + w_params * d_params + w_kernels * d_kernels


def surrogate(history: Sequence[HistoryRecord], candidate: ArchitectureGraph) -> tuple[float, float]:
    """Inverse-distance-weighted mean error and an uncertainty that grows with distance.

    A candidate at distance zero from some records takes their mean error
    with zero uncertainty.
    """
    feats = ArchFeatures.of(candidate)
    dists = [(feature_distance(feats, r.arch_features()), r.best_error) for r in history]
    exact = [e for d, e in dists if d == 0.0]
    if exact:
        return sum(exact) / len(exact), 0.0
    weights = [1.0 / d for d, _ in dists]
    wsum = sum(weights)
    mean = sum(w * e for w, (_, e) in zip(weights, dists)) / wsum
    var = sum(w * (e - mean) ** 2 for w, (_, e) in zip(weights, dists)) / wsum
    d_min = min(d for d, _ in dists)
    sigma = (math.sqrt(var) + PRIOR_STD) * (1.0 - math.exp(-d_min))
    return mean, sigma


def acquisition_score(history: Sequence[HistoryRecord], candidate: ArchitectureGraph) -> float:
    """Expected improvement over the best recorded error; 0 with no history."""
    if not history:
        return 0.0
    best = min(r.best_error for r in history)
    mean, sigma = surrogate(history, candidate)
    gain = best - mean
    if sigma == 0.0:
        return max(0.0, gain)
    z = gain / sigma
    return gain * _NORMAL.cdf(z) + sigma * _NORMAL.pdf(z)


def with_morph_kernel(graph: ArchitectureGraph, kernel_size: int) -> ArchitectureGraph:
    """Set the kernel of every DeepenBlock-inserted conv; seed convs keep theirs."""
    changed = False
    nodes = []
    for n in graph.nodes:
        if MORPH_CONV_ID.match(n.id) and n.layer.kernel_size != kernel_size:
            n = n._replace(layer=LayerSpec.conv(n.layer.out_channels, kernel_size, n.layer.stride))
            changed = True
        nodes.append(n)
    return ArchitectureGraph(graph.input_shape, tuple(nodes)) if changed else graph
