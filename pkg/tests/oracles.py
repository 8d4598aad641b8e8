"""Independent reference implementations used by the tests.

``enumerate_paths`` walks every backward path from the Loss explicitly,
carrying the set of live channels as a Python ``set`` (no bitmasks, no
memoisation), so it shares no code with the dynamic program under test.
"""

from __future__ import annotations

import random
from collections import defaultdict

from gradpath.graph import CompGraph, EdgeTag, GraphBuilder, Kind

PARAMETRIC = (Kind.CONV, Kind.FC, Kind.TRANSITION)


def _mask_list(graph, node, k, c_in):
    m = node.masks[k]
    return [1] * c_in if m is None else list(m)


def _back(graph: CompGraph, nid: int, k: int, chans: set) -> set:
    node = graph.node(nid)
    edges = graph.in_edges(nid)
    c_in = graph.node(edges[k].src).out_channels
    kind = node.kind
    if kind is Kind.STOP_GRAD:
        return set()
    if kind in (Kind.IDENTITY, Kind.LOSS, Kind.ADD):
        return {c for c in chans if c < c_in}
    if kind is Kind.SPLIT:
        return {c + node.split[0] for c in chans}
    if kind is Kind.CONCAT:
        off = sum(graph.node(e.src).out_channels for e in edges[:k])
        return {c - off for c in chans if off <= c < off + c_in}
    if kind is Kind.MASKED_ADD:
        mask = _mask_list(graph, node, k, c_in)
        return {c for c in chans if c < min(c_in, node.out_channels) and mask[c]}
    raise AssertionError(kind)


def enumerate_paths(graph: CompGraph) -> list:
    """Every backward gradient path as ``(layer, length, successor, channels)``.

    ``channels`` is the frozenset of the layer's output channels the path
    carries into ``successor``.
    """
    out = []
    loss = graph.loss_id

    def walk(v: int, chans: set, length: int, on_path: frozenset):
        node = graph.node(v)
        if node.kind is Kind.INPUT:
            return
        for k, e in enumerate(graph.in_edges(v)):
            u = e.src
            if u in on_path:
                continue
            got = _back(graph, v, k, chans) if not graph.node(v).parametric else set(chans)
            if not got:
                continue
            un = graph.node(u)
            if un.kind in PARAMETRIC:
                out.append((u, length + 1, v, frozenset(got)))
                width = graph.node(graph.in_edges(u)[0].src).out_channels
                walk(u, set(range(width)), length + 1, on_path | {u})
            else:
                walk(u, got, length, on_path | {u})

    c = graph.node(graph.in_edges(loss)[0].src).out_channels
    walk(loss, set(range(c)), 0, frozenset({loss}))
    return out


def brute_force(graph: CompGraph) -> dict:
    """Per layer: timestamps, sources (t -> {(succ, bitmask)}), shortest, longest."""
    per = {nid: defaultdict(set) for nid in graph.layers}
    for layer, t, succ, chans in enumerate_paths(graph):
        bits = sum(1 << c for c in chans)
        per[layer][t].add((succ, bits))
    res = {}
    for nid, by_t in per.items():
        ts = frozenset(by_t)
        res[nid] = {
            "timestamps": ts,
            "sources": {t: frozenset(s) for t, s in by_t.items()},
            "shortest": min(ts) if ts else None,
            "longest": max(ts) if ts else None,
        }
    return res


def random_graph(rng: random.Random, max_layers: int = 14, stop_grad: bool = True) -> CompGraph:
    """Random valid DAG mixing every node kind; open ends are concatenated into the loss."""
    b = GraphBuilder()
    avail = [b.add(Kind.INPUT, [], out_channels=rng.randint(1, 4))]
    width = {avail[0]: b.nodes[avail[0]].out_channels}
    used = set()
    layers = 0
    target = rng.randint(1, max_layers)
    steps = 0
    while layers < target and steps < 200:
        steps += 1
        op = rng.choice(["conv", "conv", "conv", "add", "masked", "concat", "split",
                         "identity", "stop"] if stop_grad else
                        ["conv", "conv", "conv", "add", "masked", "concat", "split", "identity"])
        src = rng.choice(avail)
        if op == "conv":
            kind = rng.choice([Kind.CONV, Kind.CONV, Kind.TRANSITION])
            nid = b.add(kind, [src], out_channels=rng.randint(1, 4))
            layers += 1
            ins = [src]
        elif op == "add":
            same = [a for a in avail if width[a] == width[src] and a != src]
            if not same:
                continue
            others = rng.sample(same, min(len(same), rng.randint(1, 2)))
            tags = [rng.choice([EdgeTag.DATA, EdgeTag.IDENTITY]) for _ in range(1 + len(others))]
            ins = [src] + others
            nid = b.add(Kind.ADD, ins, tags=tags)
        elif op == "masked":
            other = rng.choice(avail)
            if other == src:
                continue
            ins = [src, other]
            masks = tuple(
                None if rng.random() < 0.3 else tuple(rng.randint(0, 1) for _ in range(width[x]))
                for x in ins
            )
            tags = [EdgeTag.DATA, rng.choice([EdgeTag.DATA, EdgeTag.IDENTITY])]
            nid = b.add(Kind.MASKED_ADD, ins, tags=tags, masks=masks)
        elif op == "concat":
            other = rng.choice(avail)
            ins = [src] if other == src else [src, other]
            nid = b.add(Kind.CONCAT, ins)
        elif op == "split":
            c = width[src]
            lo = rng.randint(0, c - 1)
            hi = rng.randint(lo + 1, c)
            ins = [src]
            nid = b.add(Kind.SPLIT, ins, split=(lo, hi))
        elif op == "identity":
            ins = [src]
            nid = b.add(Kind.IDENTITY, ins)
        else:
            ins = [src]
            nid = b.add(Kind.STOP_GRAD, ins)
        used.update(ins)
        avail.append(nid)
        width[nid] = b.nodes[nid].out_channels
    sinks = [a for a in avail if a not in used]
    head = sinks[0] if len(sinks) == 1 else b.add(Kind.CONCAT, sinks)
    b.add(Kind.LOSS, [head])
    return b.build()
