"""Computation-graph data model.

A :class:`CompGraph` is an immutable DAG of typed layer nodes. Parametric
nodes (convolutions, transitions, fully-connected heads) cost one unit on a
gradient path; every other node only routes tensors and costs nothing.

Normalization and activation are folded into the parametric node that
precedes them, so a "layer" here is conv + norm + activation.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Optional, Sequence


class Kind(str, Enum):
    CONV = "Conv"
    FC = "FullyConnected"
    TRANSITION = "Transition"
    ADD = "Add"
    MASKED_ADD = "MaskedAdd"
    CONCAT = "Concat"
    SPLIT = "Split"
    IDENTITY = "Identity"
    STOP_GRAD = "StopGrad"
    INPUT = "Input"
    LOSS = "Loss"

    @property
    def parametric(self) -> bool:
        return self in PARAMETRIC


PARAMETRIC = frozenset({Kind.CONV, Kind.FC, Kind.TRANSITION})
AGGREGATORS = frozenset({Kind.ADD, Kind.MASKED_ADD})


class EdgeTag(str, Enum):
    DATA = "data"
    IDENTITY = "identity"
    CROSS_STAGE = "cross-stage"


Mask = Optional[tuple]  # per-channel 0/1 bits over the source's channels; None = all ones


@dataclass(frozen=True)
class Node:
    id: int
    kind: Kind
    out_channels: int
    kernel: int = 1
    stride: int = 1
    # MaskedAdd only: one mask per inbound edge, in edge order.
    masks: tuple = ()
    # Split only: half-open channel range [lo, hi) of the input.
    split: Optional[tuple] = None
    stage_id: int = 0
    block_id: Optional[int] = None
    role: str = ""

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def label(self) -> str:
        return f"{self.kind.value} {self.out_channels}"


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    tag: EdgeTag = EdgeTag.DATA


class GraphError(ValueError):
    """Structural problem with a graph; ``violations`` lists each one."""

    def __init__(self, message: str, violations=()):
        super().__init__(message)
        self.violations = list(violations) or [message]


def mask_bits(mask: Mask, channels: int) -> int:
    """Integer bitmask of the channels ``mask`` lets through."""
    full = (1 << channels) - 1
    if mask is None:
        return full
    bits = 0
    for i, b in enumerate(mask[:channels]):
        if b:
            bits |= 1 << i
    return bits


def bits_to_mask(bits: int, channels: int) -> tuple:
    return tuple((bits >> i) & 1 for i in range(channels))


@dataclass(frozen=True)
class CompGraph:
    nodes: tuple  # tuple[Node, ...], ascending id
    edges: tuple  # tuple[Edge, ...]; inbound order per node is significant

    @cached_property
    def by_id(self) -> dict:
        return {n.id: n for n in self.nodes}

    def node(self, nid: int) -> Node:
        return self.by_id[nid]

    @cached_property
    def _in(self) -> dict:
        inbound = defaultdict(list)
        for e in self.edges:
            inbound[e.dst].append(e)
        return inbound

    @cached_property
    def _out(self) -> dict:
        outbound = defaultdict(list)
        for e in self.edges:
            outbound[e.src].append(e)
        return outbound

    def in_edges(self, nid: int) -> list:
        return self._in.get(nid, [])

    def out_edges(self, nid: int) -> list:
        return self._out.get(nid, [])

    def preds(self, nid: int) -> list:
        return [e.src for e in self.in_edges(nid)]

    def succs(self, nid: int) -> list:
        return [e.dst for e in self.out_edges(nid)]

    def in_channels(self, nid: int) -> tuple:
        return tuple(self.by_id[e.src].out_channels for e in self.in_edges(nid))

    @property
    def input_id(self) -> int:
        return next(n.id for n in self.nodes if n.kind is Kind.INPUT)

    @property
    def loss_id(self) -> int:
        return next(n.id for n in self.nodes if n.kind is Kind.LOSS)

    @property
    def layers(self) -> list:
        """Ids of parametric nodes, ascending."""
        return [n.id for n in self.nodes if n.parametric]

    def count(self, kind: Kind) -> int:
        return sum(1 for n in self.nodes if n.kind is kind)

    @cached_property
    def spatial_scale(self) -> dict:
        """Cumulative downsampling factor of every node's output."""
        scale = {}
        for nid in topo_order(self):
            node = self.by_id[nid]
            ins = [scale[p] for p in self.preds(nid)]
            base = max(ins) if ins else 1
            scale[nid] = base * (node.stride if node.parametric else 1)
        return scale

    def canonical(self) -> str:
        """Id-independent text form: nodes renumbered in topological order."""
        order = topo_order(self)
        rank = {nid: i for i, nid in enumerate(order)}
        lines = []
        for nid in order:
            n = self.by_id[nid]
            ins = ",".join(f"{rank[e.src]}:{e.tag.value}" for e in self.in_edges(nid))
            masks = ";".join("*" if m is None else "".join(map(str, m)) for m in n.masks)
            lines.append(
                f"{rank[nid]} {n.kind.value} c={n.out_channels} k={n.kernel} s={n.stride} "
                f"split={n.split} masks={masks} stage={n.stage_id} role={n.role} in=[{ins}]"
            )
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        """Git-style blob hash of :meth:`canonical`."""
        data = self.canonical().encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

    def to_dot(self) -> str:
        lines = ["digraph G {"]
        for n in self.nodes:
            lines.append(f'  n{n.id} [label="{n.label()}"];')
        for e in sorted(self.edges, key=lambda e: (e.src, e.dst)):
            style = "solid" if e.tag is EdgeTag.DATA else "dashed"
            lines.append(f"  n{e.src} -> n{e.dst} [style={style}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass
class ValidationResult:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _order_or_none(graph: CompGraph) -> Optional[list]:
    indeg = {n.id: 0 for n in graph.nodes}
    for e in graph.edges:
        if e.dst in indeg:
            indeg[e.dst] += 1
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for e in graph.out_edges(nid):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, e.dst)
    return order if len(order) == len(indeg) else None


def topo_order(graph: CompGraph) -> list:
    """Kahn's algorithm, smallest ready id first."""
    order = _order_or_none(graph)
    if order is None:
        raise GraphError("graph contains a cycle")
    return order


_ARITY = {
    Kind.INPUT: (0, 0),
    Kind.CONV: (1, 1),
    Kind.TRANSITION: (1, 1),
    Kind.FC: (1, 1),
    Kind.SPLIT: (1, 1),
    Kind.IDENTITY: (1, 1),
    Kind.STOP_GRAD: (1, 1),
    Kind.LOSS: (1, 1),
    Kind.ADD: (2, None),
    Kind.MASKED_ADD: (2, None),
    Kind.CONCAT: (1, None),
}


def validate(graph: CompGraph) -> ValidationResult:
    v = []
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        v.append("duplicate node id")
    known = set(ids)
    for e in graph.edges:
        if e.src not in known or e.dst not in known:
            v.append(f"edge n{e.src} -> n{e.dst} references unknown node")
    if v:
        return ValidationResult(v)

    n_in = graph.count(Kind.INPUT)
    n_loss = graph.count(Kind.LOSS)
    if n_in != 1:
        v.append(f"expected exactly one Input, found {n_in}")
    if n_loss != 1:
        v.append(f"expected exactly one Loss, found {n_loss}")

    order = _order_or_none(graph)
    if order is None:
        v.append("cycle")

    for n in graph.nodes:
        k = len(graph.in_edges(n.id))
        lo, hi = _ARITY[n.kind]
        if k < lo or (hi is not None and k > hi):
            v.append(f"bad arity at {n.kind.value} n{n.id}: {k} inbound edges")
            continue
        if n.parametric and n.out_channels <= 0:
            v.append(f"non-positive out_channels at n{n.id}")
        ins = graph.in_channels(n.id)
        if n.kind is Kind.ADD and len(set(ins)) > 1:
            v.append(f"channel mismatch at Add n{n.id}: {list(ins)}")
        elif n.kind is Kind.MASKED_ADD:
            if len(n.masks) != k:
                v.append(f"mask count mismatch at MaskedAdd n{n.id}")
            else:
                for c, m in zip(ins, n.masks):
                    if m is not None and len(m) != c:
                        v.append(f"mask length mismatch at MaskedAdd n{n.id}")
            if ins and n.out_channels != ins[0]:
                v.append(f"channel mismatch at MaskedAdd n{n.id}")
        elif n.kind is Kind.CONCAT and n.out_channels != sum(ins):
            v.append(f"channel mismatch at Concat n{n.id}")
        elif n.kind is Kind.SPLIT:
            if n.split is None or not (0 <= n.split[0] < n.split[1] <= ins[0]):
                v.append(f"dangling Split range at n{n.id}: {n.split} of {ins[0]}")
            elif n.out_channels != n.split[1] - n.split[0]:
                v.append(f"channel mismatch at Split n{n.id}")
        elif n.kind in (Kind.IDENTITY, Kind.STOP_GRAD, Kind.LOSS) and ins:
            if n.out_channels != ins[0]:
                v.append(f"channel mismatch at {n.kind.value} n{n.id}")
        elif n.kind is Kind.ADD and ins and n.out_channels != ins[0]:
            v.append(f"channel mismatch at Add n{n.id}")

    if order is not None and n_in == 1 and n_loss == 1:
        reach = _reachable(graph, graph.input_id, forward=True)
        for n in graph.nodes:
            if n.id not in reach:
                v.append(f"unreachable node n{n.id}")
        back = _reachable(graph, graph.loss_id, forward=False)
        for n in graph.nodes:
            if n.id not in back:
                v.append(f"Loss unreachable from n{n.id}")
    return ValidationResult(v)


def _reachable(graph: CompGraph, start: int, forward: bool) -> set:
    seen = {start}
    stack = [start]
    while stack:
        nid = stack.pop()
        nxt = graph.succs(nid) if forward else graph.preds(nid)
        for m in nxt:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


class GraphBuilder:
    """Mutable staging area for a graph; ids are dense in insertion order.

    Also used to edit an existing graph (``GraphBuilder.from_graph``); edited
    graphs keep the ids of surviving nodes so per-layer results stay comparable.
    """

    def __init__(self):
        self.nodes: dict = {}
        self.edges: list = []
        self._next = 0

    @classmethod
    def from_graph(cls, graph: CompGraph) -> "GraphBuilder":
        b = cls()
        b.nodes = {n.id: n for n in graph.nodes}
        b.edges = list(graph.edges)
        b._next = max(b.nodes) + 1 if b.nodes else 0
        return b

    def add(
        self,
        kind: Kind,
        inputs: Sequence = (),
        out_channels: Optional[int] = None,
        tags: Optional[Sequence] = None,
        **attrs,
    ) -> int:
        """Append a node fed by ``inputs`` (ids, in order) and return its id.

        Routing nodes infer ``out_channels`` from their inputs.
        """
        nid = self._next
        self._next += 1
        tags = list(tags) if tags is not None else [EdgeTag.DATA] * len(inputs)
        if out_channels is None:
            out_channels = self._infer(kind, [self.nodes[i].out_channels for i in inputs], attrs)
        self.nodes[nid] = Node(nid, kind, out_channels, **attrs)
        for src, tag in zip(inputs, tags):
            self.edges.append(Edge(src, nid, tag))
        return nid

    @staticmethod
    def _infer(kind: Kind, ins: list, attrs: dict) -> int:
        if kind is Kind.CONCAT:
            return sum(ins)
        if kind is Kind.SPLIT:
            lo, hi = attrs["split"]
            return hi - lo
        if kind is Kind.INPUT:
            raise GraphError("Input needs explicit out_channels")
        if kind.parametric:
            raise GraphError(f"{kind.value} needs explicit out_channels")
        return ins[0]

    def in_edges(self, nid: int) -> list:
        return [e for e in self.edges if e.dst == nid]

    def out_edges(self, nid: int) -> list:
        return [e for e in self.edges if e.src == nid]

    def remove_node(self, nid: int) -> None:
        del self.nodes[nid]
        self.edges = [e for e in self.edges if e.src != nid and e.dst != nid]

    def replace_edge(self, old: Edge, new: Iterable) -> None:
        """Swap ``old`` for ``new`` edges in place, keeping inbound order."""
        i = self.edges.index(old)
        self.edges[i : i + 1] = list(new)

    def update(self, nid: int, **changes) -> None:
        self.nodes[nid] = replace(self.nodes[nid], **changes)

    def build(self, reinfer: bool = False) -> CompGraph:
        g = CompGraph(tuple(sorted(self.nodes.values(), key=lambda n: n.id)), tuple(self.edges))
        if reinfer:
            g = reinfer_channels(g)
        return g


def _resize(mask: Mask, channels: int) -> Mask:
    if mask is None or len(mask) == channels:
        return mask
    return tuple(mask[:channels]) + (0,) * max(0, channels - len(mask))


def reinfer_channels(graph: CompGraph) -> CompGraph:
    """Recompute routing-node widths after parametric widths changed.

    MaskedAdd masks are truncated or zero-padded to the new input widths.
    """
    order = _order_or_none(graph)
    if order is None:
        return graph
    out = {}
    nodes = {}
    for nid in order:
        n = graph.by_id[nid]
        ins = [out[e.src] for e in graph.in_edges(nid)]
        if n.kind is Kind.CONCAT:
            n = replace(n, out_channels=sum(ins))
        elif n.kind is Kind.MASKED_ADD:
            masks = tuple(_resize(m, c) for m, c in zip(n.masks, ins))
            n = replace(n, out_channels=ins[0], masks=masks)
        elif n.kind in (Kind.ADD, Kind.IDENTITY, Kind.STOP_GRAD, Kind.LOSS) and ins:
            n = replace(n, out_channels=ins[0])
        out[nid] = n.out_channels
        nodes[nid] = n
    return CompGraph(tuple(sorted(nodes.values(), key=lambda n: n.id)), graph.edges)


def _effective_mask(graph: CompGraph, agg: Node, k: int) -> int:
    """Bits of input ``k`` of aggregation node ``agg`` that reach its output."""
    e = graph.in_edges(agg.id)[k]
    c_in = graph.by_id[e.src].out_channels
    width = min(c_in, agg.out_channels)
    m = agg.masks[k] if agg.kind is Kind.MASKED_ADD else None
    return mask_bits(m, c_in) & ((1 << width) - 1)


def unfold(graph: CompGraph) -> CompGraph:
    """Flatten cascaded residual aggregations by associativity.

    Whenever an Add/MaskedAdd receives the output of another Add/MaskedAdd
    through an identity edge (possibly via Identity nodes), that edge is
    replaced by the upstream node's own inbound edges with masks composed.
    Aggregations left without consumers are dropped.
    """
    b = GraphBuilder.from_graph(graph)
    for nid in topo_order(graph):
        if nid not in b.nodes or b.nodes[nid].kind not in AGGREGATORS:
            continue
        changed = True
        while changed:
            changed = False
            g = b.build()
            agg = g.by_id[nid]
            for k, e in enumerate(g.in_edges(nid)):
                if e.tag is not EdgeTag.IDENTITY:
                    continue
                src = g.by_id[e.src]
                outer = _effective_mask(g, agg, k)
                via = []
                while src.kind is Kind.IDENTITY:
                    via.append(src.id)
                    src = g.by_id[g.in_edges(src.id)[0].src]
                if src.kind not in AGGREGATORS:
                    continue
                new_edges, new_masks = [], []
                for j, ue in enumerate(g.in_edges(src.id)):
                    c = g.by_id[ue.src].out_channels
                    bits = _effective_mask(g, src, j) & outer
                    new_edges.append(Edge(ue.src, nid, ue.tag))
                    new_masks.append(None if bits == (1 << c) - 1 else bits_to_mask(bits, c))
                old_masks = list(agg.masks) if agg.kind is Kind.MASKED_ADD else [None] * len(g.in_edges(nid))
                masks = old_masks[:k] + new_masks + old_masks[k + 1 :]
                b.replace_edge(e, new_edges)
                widths = {b.nodes[x.src].out_channels for x in b.in_edges(nid)}
                # unequal widths need the asymmetric (masked) form even when unmasked
                if any(m is not None for m in masks) or len(widths) > 1:
                    b.update(nid, kind=Kind.MASKED_ADD, masks=tuple(masks))
                else:
                    b.update(nid, kind=Kind.ADD, masks=())
                for dead in [*via, src.id]:
                    if dead in b.nodes and not b.out_edges(dead):
                        b.remove_node(dead)
                changed = True
                break
    return b.build()
