"""Static gradient-path analysis.

Gradient is propagated backwards from the Loss node as channel-tracked
states ``(node, channel bitmask) -> {path lengths}``. A path's length is the
number of parametric nodes on it, counting the receiving layer itself, so in
a PlainNet the layer next to the loss has timestamp 1. Routing nodes are
free; StopGrad and fully masked channels cut a path.

A gradient *source* of a layer is the node right after it on the path
(the outdegree side) together with the layer's output channels that carry
gradient along that edge. Layers whose channels see different sources are
split into channel groups, and a *combination* is a distinct
``(channel group, timestamp, source set)`` triple.

Everything is computed by one dynamic-programming pass over the reversed
graph, so no path is ever enumerated.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .graph import CompGraph, Kind, mask_bits, topo_order


class GradSource(NamedTuple):
    node: int
    channels: int  # bitmask over the receiving layer's output channels


def bit_ranges(bits: int) -> list:
    """``0b1110011`` -> ``[[0, 2], [4, 7]]`` (half-open ranges)."""
    out, i = [], 0
    while bits >> i:
        if (bits >> i) & 1:
            j = i
            while (bits >> j) & 1:
                j += 1
            out.append([i, j])
            i = j
        else:
            i += 1
    return out


def pass_back(graph: CompGraph, nid: int, k: int, bits: int) -> int:
    """Channels of inbound ``k`` of ``nid`` that receive gradient when ``bits``
    of ``nid``'s output carry gradient. Routing nodes only."""
    node = graph.node(nid)
    e = graph.in_edges(nid)[k]
    c_in = graph.node(e.src).out_channels
    full = (1 << c_in) - 1
    kind = node.kind
    if kind is Kind.STOP_GRAD:
        return 0
    if kind in (Kind.IDENTITY, Kind.LOSS):
        return bits & full
    if kind is Kind.SPLIT:
        return (bits << node.split[0]) & full
    if kind is Kind.CONCAT:
        off = sum(graph.node(x.src).out_channels for x in graph.in_edges(nid)[:k])
        return (bits >> off) & full
    if kind is Kind.ADD:
        return bits & full
    if kind is Kind.MASKED_ADD:
        width = min(c_in, node.out_channels)
        return bits & mask_bits(node.masks[k], c_in) & ((1 << width) - 1)
    raise ValueError(f"pass_back called on {kind.value}")


def _propagate(graph: CompGraph) -> dict:
    """Per parametric layer, the set of ``(timestamp, source node, channel bits)``."""
    arrive: dict = defaultdict(lambda: defaultdict(set))
    contrib: dict = {nid: set() for nid in graph.layers}
    loss = graph.loss_id

    def push(v: int, k: int, bits: int, lengths) -> None:
        u = graph.in_edges(v)[k].src
        if not bits or not lengths:
            return
        arrive[u][bits] |= lengths
        if graph.node(u).parametric:
            contrib[u].update((l + 1, v, bits) for l in lengths)

    for v in reversed(topo_order(graph)):
        node = graph.node(v)
        if v == loss:
            c = graph.node(graph.in_edges(v)[0].src).out_channels
            push(v, 0, (1 << c) - 1, {0})
            continue
        states = arrive.get(v)
        if not states:
            continue
        if node.parametric:
            lengths = {l + 1 for ls in states.values() for l in ls}
            c = graph.node(graph.in_edges(v)[0].src).out_channels
            push(v, 0, (1 << c) - 1, lengths)
            continue
        if node.kind is Kind.INPUT:
            continue
        for k in range(len(graph.in_edges(v))):
            for bits, lengths in states.items():
                push(v, k, pass_back(graph, v, k, bits), lengths)
    return contrib


@dataclass
class LayerReport:
    timestamps: frozenset
    sources: dict  # timestamp -> frozenset[GradSource]
    combinations: int
    shortest_path: Optional[int]
    longest_path: Optional[int]
    aggregated_features: int

    def pairs(self) -> set:
        return {(t, s) for t, ss in self.sources.items() for s in ss}


@dataclass
class GradPathReport:
    layers: dict = field(default_factory=dict)  # node id -> LayerReport
    max_shortest_path: int = 0
    longest_path: int = 0
    total_combinations: int = 0

    def to_json(self) -> str:
        layers = {}
        for nid in sorted(self.layers):
            r = self.layers[nid]
            layers[str(nid)] = {
                "timestamps": sorted(r.timestamps),
                "sources": {
                    str(t): [
                        {"node": s.node, "channels": bit_ranges(s.channels)}
                        for s in sorted(r.sources[t])
                    ]
                    for t in sorted(r.sources)
                },
                "combinations": r.combinations,
                "shortest_path": r.shortest_path,
                "longest_path": r.longest_path,
                "aggregated_features": r.aggregated_features,
            }
        doc = {
            "max_shortest_path": self.max_shortest_path,
            "longest_path": self.longest_path,
            "total_combinations": self.total_combinations,
            "layers": layers,
        }
        return json.dumps(doc, indent=2) + "\n"


def _count_combinations(contrib: set, channels: int) -> int:
    groups: dict = defaultdict(set)
    for ch in range(channels):
        sig = frozenset(x for x in contrib if (x[2] >> ch) & 1)
        if sig:
            groups[sig].add(ch)
    total = 0
    for sig in groups:
        total += len({t for t, _, _ in sig})
    return total


def timestamps(graph: CompGraph) -> dict:
    """Layer id -> set of gradient path lengths from the loss."""
    return {nid: frozenset(t for t, _, _ in c) for nid, c in _propagate(graph).items()}


def sources(graph: CompGraph, t: int) -> dict:
    """Layer id -> sources delivering gradient at timestamp ``t``.

    Layers that receive nothing at ``t`` are omitted; the map is empty when
    ``t`` occurs nowhere.
    """
    out = {}
    for nid, c in _propagate(graph).items():
        here = frozenset(GradSource(v, b) for tt, v, b in c if tt == t)
        if here:
            out[nid] = here
    return out


def shortest_longest(graph: CompGraph) -> tuple:
    ts = timestamps(graph)
    lo = {nid: (min(t) if t else None) for nid, t in ts.items()}
    hi = {nid: (max(t) if t else None) for nid, t in ts.items()}
    return lo, hi


def aggregated_features(graph: CompGraph) -> dict:
    """Layer id -> number of distinct earlier outputs (layers or the input)
    merged through routing nodes into that layer's input."""
    out = {}
    for nid in graph.layers:
        seen, found = set(), set()
        stack = list(graph.preds(nid))
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            n = graph.node(u)
            if n.parametric or n.kind is Kind.INPUT:
                found.add(u)
            else:
                stack.extend(graph.preds(u))
        out[nid] = len(found)
    return out


def analyze(graph: CompGraph) -> GradPathReport:
    contrib = _propagate(graph)
    feats = aggregated_features(graph)
    report = GradPathReport()
    for nid in graph.layers:
        c = contrib[nid]
        ts = frozenset(t for t, _, _ in c)
        srcs: dict = defaultdict(set)
        for t, v, b in c:
            srcs[t].add(GradSource(v, b))
        report.layers[nid] = LayerReport(
            timestamps=ts,
            sources={t: frozenset(s) for t, s in sorted(srcs.items())},
            combinations=_count_combinations(c, graph.node(nid).out_channels),
            shortest_path=min(ts) if ts else None,
            longest_path=max(ts) if ts else None,
            aggregated_features=feats[nid],
        )
    reached = [r for r in report.layers.values() if r.timestamps]
    report.max_shortest_path = max((r.shortest_path for r in reached), default=0)
    report.longest_path = max((r.longest_path for r in reached), default=0)
    report.total_combinations = sum(r.combinations for r in report.layers.values())
    return report


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def duplication_overlap(report: GradPathReport, order=None, all_pairs: bool = False) -> dict:
    """Jaccard overlap of ``(timestamp, source)`` sets between layers.

    By default only adjacent layers of ``order`` (default: ascending id) are
    compared; ``all_pairs`` compares every pair.
    """
    ids = list(order) if order is not None else sorted(report.layers)
    ids = [i for i in ids if i in report.layers]
    pairs = {i: report.layers[i].pairs() for i in ids}
    if all_pairs:
        keys = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1 :]]
    else:
        keys = list(zip(ids, ids[1:]))
    return {(a, b): jaccard(pairs[a], pairs[b]) for a, b in keys}


def overlap_at(report: GradPathReport, a: int, b: int, t: int) -> float:
    """Overlap of the two layers' sources at one shared timestamp."""
    sa = report.layers[a].sources.get(t, frozenset())
    sb = report.layers[b].sources.get(t, frozenset())
    return jaccard(set(sa), set(sb))


def mean_overlap(report: GradPathReport, order=None, all_pairs: bool = True) -> float:
    """Summary overlap. Adjacent layers never share a successor in a chain of
    blocks, so the adjacent-only mean is identically zero; all pairs is the
    default."""
    vals = list(duplication_overlap(report, order, all_pairs=all_pairs).values())
    return sum(vals) / len(vals) if vals else 0.0
