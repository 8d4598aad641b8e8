"""Architecture builders and graph-level design transforms.

Every builder emits nodes tagged with ``stage_id``, ``block_id`` and a
``role`` ("stem", "down", "block", "osa_transition", "head", ...). The
transforms (:func:`apply_csp`, :func:`replan_elan`, :func:`insert_stop_grad`)
locate structure through those tags.
"""

from __future__ import annotations

import math

from .archspec import ArchSpec, CSPConfig, ElanStack, Family, SpecError
from .graph import (
    AGGREGATORS,
    CompGraph,
    Edge,
    EdgeTag,
    GraphBuilder,
    GraphError,
    Kind,
    reinfer_channels,
    topo_order,
    validate,
)

DARKNET53_DEPTH = (1, 2, 8, 8, 4)

ID = EdgeTag.IDENTITY
BLOCK_ROLES = frozenset({"block", "osa_transition", "elan_transition"})


class _Net:
    """Thin helper over GraphBuilder that tracks the current stage/block."""

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.g = GraphBuilder()
        self.stage = 0
        self.block = -1
        self.x = self.g.add(Kind.INPUT, out_channels=spec.input_shape[0], role="input")

    def new_block(self) -> int:
        self.block += 1
        return self.block

    def conv(self, x, c, k=3, s=1, role="block", kind=Kind.CONV, block=True) -> int:
        return self.g.add(kind, [x], c, kernel=k, stride=s, stage_id=self.stage,
                          block_id=self.block if block else None, role=role)

    def op(self, kind, inputs, tags=None, role="block", block=True, **attrs) -> int:
        return self.g.add(kind, list(inputs), tags=tags, stage_id=self.stage,
                          block_id=self.block if block else None, role=role, **attrs)

    def width(self, s: int) -> int:
        return self.spec.base_channels * 2**s

    def enter_stage(self, s: int, x: int, stem: bool = True) -> int:
        """Stage entry: stem conv for stage 0, stride-2 widening conv after."""
        self.stage = s
        if s == 0:
            return self.conv(x, self.width(0), role="stem", block=False) if stem else x
        return self.conv(x, self.width(s), k=3, s=2, role="down", block=False)

    def finish(self, x: int) -> CompGraph:
        self.stage = self.spec.stages - 1
        if self.spec.num_classes:
            x = self.conv(x, self.spec.num_classes, k=1, kind=Kind.FC, role="head", block=False)
        self.g.add(Kind.LOSS, [x], role="loss")
        return self.g.build()


def _prn_mask(c: int, ratio: float) -> tuple:
    keep = math.floor(c * ratio)
    return (1,) * keep + (0,) * (c - keep)


def _plain(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.x
    for s, depth in enumerate(spec.depth):
        n.stage = s
        for i in range(depth):
            n.new_block()
            x = n.conv(x, n.width(s), s=2 if (s > 0 and i == 0) else 1)
    return n.finish(x)


def _residual(spec: ArchSpec, masked: bool) -> CompGraph:
    n = _Net(spec)
    x = n.x
    for s, depth in enumerate(spec.depth):
        x = n.enter_stage(s, x)
        c = n.width(s)
        for _ in range(depth):
            n.new_block()
            h = n.conv(x, c)
            h = n.conv(h, c)
            if masked:
                x = n.op(Kind.MASKED_ADD, [h, x], tags=[EdgeTag.DATA, ID],
                         masks=(None, _prn_mask(c, spec.prn_mask_ratio)))
            else:
                x = n.op(Kind.ADD, [h, x], tags=[EdgeTag.DATA, ID])
    return n.finish(x)


def _darknet53(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.conv(n.x, spec.base_channels, role="stem", block=False)
    for s, depth in enumerate(spec.depth):
        n.stage = s
        c = spec.base_channels * 2 ** (s + 1)
        x = n.conv(x, c, k=3, s=2, role="down", block=False)
        for _ in range(depth):
            n.new_block()
            h = n.conv(x, c // 2, k=1)
            h = n.conv(h, c, k=3)
            x = n.op(Kind.ADD, [h, x], tags=[EdgeTag.DATA, ID])
    return n.finish(x)


def _densenet(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.x
    growth = spec.base_channels
    for s, depth in enumerate(spec.depth):
        x = n.enter_stage(s, x)
        feats = [x]
        for _ in range(depth):
            n.new_block()
            inp = feats[0] if len(feats) == 1 else n.op(Kind.CONCAT, feats)
            feats.append(n.conv(inp, growth))
        n.new_block()
        x = n.op(Kind.CONCAT, feats)
    return n.finish(x)


def _sparsenet(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.x
    for s, depth in enumerate(spec.depth):
        outs = [n.enter_stage(s, x)]
        c = n.width(s)
        for l in range(1, depth + 1):
            n.new_block()
            srcs = []
            k = 0
            while l - 2**k >= 0:
                srcs.append(outs[l - 2**k])
                k += 1
            if len(srcs) == 1:
                inp = srcs[0]
            else:
                inp = n.op(Kind.ADD, srcs, tags=[EdgeTag.DATA] + [ID] * (len(srcs) - 1))
            outs.append(n.conv(inp, c))
        x = outs[-1]
    return n.finish(x)


def _vovnet(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.x
    growth = spec.base_channels
    for s, depth in enumerate(spec.depth):
        x = n.enter_stage(s, x)
        for _ in range(depth):
            n.new_block()
            feats = [x]
            h = x
            for _ in range(spec.osa_layers):
                h = n.conv(h, growth)
                feats.append(h)
            cat = n.op(Kind.CONCAT, feats)
            x = n.conv(cat, n.width(s), k=1, kind=Kind.TRANSITION, role="osa_transition")
    return n.finish(x)


def _elan(spec: ArchSpec) -> CompGraph:
    n = _Net(spec)
    x = n.x
    stack = spec.elan_stack or ElanStack()
    for s, depth in enumerate(spec.depth):
        x = n.enter_stage(s, x)
        c = n.width(s)
        half = max(1, c // 2)
        for _ in range(depth):
            n.new_block()
            cross = n.conv(x, half, k=1)
            h = n.conv(x, half, k=1)
            feats = [cross, h]
            for _ in range(stack.a):
                h = n.conv(n.conv(h, half), half)
                feats.append(h)
            cat = n.op(Kind.CONCAT, feats)
            x = n.conv(cat, c, k=1, kind=Kind.TRANSITION, role="elan_transition")
    return n.finish(x)


_BUILDERS = {
    Family.PLAIN: _plain,
    Family.RESNET: lambda s: _residual(s, masked=False),
    Family.PRN: lambda s: _residual(s, masked=True),
    Family.DARKNET53: _darknet53,
    Family.DENSENET: _densenet,
    Family.SPARSENET: _sparsenet,
    Family.VOVNET: _vovnet,
    Family.ELAN: _elan,
}


def build(spec: ArchSpec) -> CompGraph:
    """Build the graph for ``spec``; raises :class:`SpecError` on bad channel splits."""
    g = _BUILDERS[spec.family](spec)
    if spec.family is Family.VOVNET and spec.replan:
        g = replan_elan(g)
    if spec.csp is not None:
        for s in range(spec.stages):
            # the published CSPDarknet53 keeps its first stage at full width
            expand = spec.family is Family.DARKNET53 and spec.csp.split == "conv" and s == 0
            try:
                g = apply_csp(g, s, spec.csp.split_ratio, spec.csp.fusion,
                              split=spec.csp.split, expand=expand)
            except GraphError as exc:
                raise SpecError(str(exc)) from None
    if spec.stop_grad != "off":
        g = insert_stop_grad(g, spec.stop_grad)
    result = validate(g)
    if not result.ok:
        raise GraphError("; ".join(result.violations), result.violations)
    return g


def build_vovnet(spec: ArchSpec) -> CompGraph:
    return build(spec.with_(family=Family.VOVNET))


def split_channels(c: int, ratio: float) -> tuple:
    """(cross, block) widths: floor for the cross-stage part, the rest for the block."""
    cross = math.floor(c * ratio)
    part = c - cross
    if cross <= 0 or part <= 0:
        raise GraphError(f"split ratio {ratio} of {c} channels leaves an empty partition")
    return cross, part


def stage_blocks(graph: CompGraph, stage_id: int) -> set:
    """Nodes of the stage's computational blocks (entry conv and CSP plumbing excluded)."""
    return {n.id for n in graph.nodes if n.stage_id == stage_id and n.role in BLOCK_ROLES}


def apply_csp(graph: CompGraph, stage_id: int, split_ratio: float, fusion: str,
              split: str = "slice", expand: bool = False) -> CompGraph:
    """Cross-stage-partial rewrite of one stage.

    With ``split="slice"`` the stage entry is partitioned by channel slicing:
    the leading ``cross`` channels bypass the stage through a cross-stage
    edge, the rest run through the computational blocks. ``split="conv"``
    produces the two groups with 1x1 partial transitions instead. Block
    outputs that feed residual aggregations are narrowed to the block part;
    inner widths are left alone. ``expand`` (conv split only) keeps both
    groups at full width.
    """
    if fusion not in ("both", "first", "last", "none"):
        raise GraphError(f"unknown fusion {fusion!r}")
    blocks = stage_blocks(graph, stage_id)
    if not blocks:
        raise GraphError(f"stage {stage_id} has no computational blocks")
    entry_edges = [e for e in graph.edges if e.dst in blocks and e.src not in blocks]
    exit_edges = [e for e in graph.edges if e.src in blocks and e.dst not in blocks]
    entries = {e.src for e in entry_edges}
    exits = {e.src for e in exit_edges}
    if len(entries) != 1 or len(exits) != 1:
        raise GraphError(f"stage {stage_id} does not begin and end at single nodes")
    entry, last = entries.pop(), exits.pop()
    c = graph.node(entry).out_channels
    cross, part = (c, c) if expand else split_channels(c, split_ratio)
    exit_width = graph.node(last).out_channels

    b = GraphBuilder.from_graph(graph)
    kw = dict(stage_id=stage_id, block_id=None)
    if split == "conv":
        split_b = b.add(Kind.TRANSITION, [entry], part, role="csp_partial", **kw)
        split_c = b.add(Kind.TRANSITION, [entry], cross, role="csp_partial", **kw)
    else:
        split_b = b.add(Kind.SPLIT, [entry], split=(cross, c), role="csp_split", **kw)
        split_c = b.add(Kind.SPLIT, [entry], split=(0, cross), role="csp_split", **kw)
    for e in entry_edges:
        b.replace_edge(e, [Edge(split_b, e.dst, e.tag)])
    for e in graph.edges:
        src = graph.node(e.src)
        if e.src in blocks and src.parametric and e.dst in blocks:
            if graph.node(e.dst).kind in AGGREGATORS and src.out_channels == c and not expand:
                b.update(e.src, out_channels=part)
    tmp = reinfer_channels(b.build())
    tail_width = tmp.node(last).out_channels

    x = last
    if fusion in ("both", "last"):
        x = b.add(Kind.TRANSITION, [x], tail_width, role="csp_transition", **kw)
    x = b.add(Kind.CONCAT, [x, split_c], tags=[EdgeTag.DATA, EdgeTag.CROSS_STAGE],
              out_channels=tail_width + cross, role="csp_concat", **kw)
    if fusion in ("both", "first"):
        x = b.add(Kind.TRANSITION, [x], exit_width, role="csp_transition", **kw)
    for e in exit_edges:
        b.replace_edge(e, [Edge(x, e.dst, e.tag)])
    return b.build(reinfer=True)


def replan_elan(graph: CompGraph) -> CompGraph:
    """Drop every OSA transition except the last one of each stage."""
    b = GraphBuilder.from_graph(graph)
    per_stage: dict = {}
    for n in graph.nodes:
        if n.role == "osa_transition":
            per_stage.setdefault(n.stage_id, []).append(n.id)
    order = {nid: i for i, nid in enumerate(topo_order(graph))}
    for ts in per_stage.values():
        ts.sort(key=order.__getitem__)
        for t in ts[:-1]:
            src = graph.in_edges(t)[0].src
            for e in b.out_edges(t):
                b.replace_edge(e, [Edge(src, e.dst, e.tag)])
            b.remove_node(t)
    return b.build(reinfer=True)


def insert_stop_grad(graph: CompGraph, mode: str) -> CompGraph:
    """Cut gradient flow on identity connections or into computational blocks.

    ``on_identity`` puts a StopGrad on each identity edge into a residual
    aggregation. ``on_block`` puts one on each computational-block output
    edge feeding the aggregation, so gradient only travels the identity
    chain and the block layers receive none.
    """
    if mode not in ("on_identity", "on_block"):
        raise ValueError(f"unknown stop-gradient mode {mode!r}")
    targets = []
    for n in graph.nodes:
        if n.kind not in AGGREGATORS:
            continue
        ins = graph.in_edges(n.id)
        if not any(e.tag is EdgeTag.IDENTITY for e in ins):
            continue
        want_identity = mode == "on_identity"
        targets.extend(e for e in ins if (e.tag is EdgeTag.IDENTITY) == want_identity)
    if not targets:
        raise GraphError("graph has no residual structure to cut")
    b = GraphBuilder.from_graph(graph)
    for e in dict.fromkeys(targets):
        dst = graph.node(e.dst)
        sg = b.add(Kind.STOP_GRAD, [e.src], tags=[e.tag], stage_id=dst.stage_id,
                   block_id=dst.block_id, role="stop_grad")
        b.replace_edge(e, [Edge(sg, e.dst, e.tag)])
    return b.build()


def darknet53_spec(csp: bool = False, fusion: str = "both", size: int = 256,
                   split: str = "conv") -> ArchSpec:
    return ArchSpec(
        family=Family.DARKNET53,
        depth=DARKNET53_DEPTH,
        base_channels=32,
        input_shape=(3, size, size),
        num_classes=1000,
        csp=CSPConfig(0.5, fusion, split) if csp else None,
    )
