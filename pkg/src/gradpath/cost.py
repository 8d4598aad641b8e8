"""Closed-form resource accounting.

Conventions: one multiply-accumulate is two FLOPs; bias, normalization,
activation and element-wise routing ops are free; ``params`` counts weights
only (bias is reported separately). Memory peak is the largest
input-plus-output feature-map size over parametric nodes, in elements, at
batch size 1. Fully-connected heads global-average-pool their input first.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .graph import CompGraph, Kind, topo_order


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NodeCost:
    id: int
    kind: str
    flops: int
    params: int
    bias: int
    in_elems: int
    out_elems: int
    mac: int


@dataclass
class CostReport:
    flops: int = 0
    params: int = 0
    memory_peak: int = 0
    mac: int = 0
    nodes: dict = field(default_factory=dict)  # id -> NodeCost

    def subset(self, ids) -> "CostReport":
        """Totals restricted to ``ids`` (peak recomputed over the subset)."""
        sub = [self.nodes[i] for i in ids if i in self.nodes]
        return _total(sub)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "kind", "flops", "params", "in_elems", "out_elems"])
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            w.writerow([n.id, n.kind, n.flops, n.params, n.in_elems, n.out_elems])
        w.writerow(["total", "", self.flops, self.params, "", ""])
        return buf.getvalue()


def _total(nodes) -> CostReport:
    rep = CostReport(nodes={n.id: n for n in nodes})
    for n in nodes:
        rep.flops += n.flops
        rep.params += n.params
        rep.mac += n.mac
        if n.params:
            rep.memory_peak = max(rep.memory_peak, n.in_elems + n.out_elems)
    return rep


def conv_mac(h: int, w: int, c_in: int, c_out: int, k: int = 1) -> int:
    """Memory traffic of a k x k conv on an h x w output: maps plus weights."""
    return h * w * (c_in + c_out) + k * k * c_in * c_out


def cost(graph: CompGraph, input_shape) -> CostReport:
    c0, h0, w0 = input_shape
    if graph.node(graph.input_id).out_channels != c0:
        raise ShapeError(f"input has {c0} channels, graph expects "
                         f"{graph.node(graph.input_id).out_channels}")
    hw = {}
    out = []
    for nid in topo_order(graph):
        n = graph.node(nid)
        preds = graph.preds(nid)
        if n.kind is Kind.INPUT:
            hw[nid] = (h0, w0)
            continue
        h, w = hw[preds[0]]
        if len({hw[p] for p in preds}) > 1:
            raise ShapeError(f"spatial mismatch at {n.kind.value} n{nid}")
        c_in = graph.node(preds[0]).out_channels
        in_elems = c_in * h * w
        if n.kind in (Kind.CONV, Kind.TRANSITION):
            if h % n.stride or w % n.stride:
                raise ShapeError(f"{h}x{w} not divisible by stride {n.stride} at n{nid}")
            ho, wo = h // n.stride, w // n.stride
            weights = n.kernel * n.kernel * c_in * n.out_channels
            out.append(NodeCost(nid, n.kind.value, 2 * weights * ho * wo, weights,
                                n.out_channels, in_elems, n.out_channels * ho * wo,
                                conv_mac(ho, wo, c_in, n.out_channels, n.kernel)))
            hw[nid] = (ho, wo)
        elif n.kind is Kind.FC:
            weights = c_in * n.out_channels
            out.append(NodeCost(nid, n.kind.value, 2 * weights, weights, n.out_channels,
                                in_elems, n.out_channels, conv_mac(1, 1, c_in, n.out_channels)))
            hw[nid] = (1, 1)
        else:
            ins = sum(graph.node(p).out_channels for p in preds) * h * w
            out.append(NodeCost(nid, n.kind.value, 0, 0, 0, ins, n.out_channels * h * w, 0))
            hw[nid] = (h, w)
    return _total(out)


@dataclass(frozen=True)
class CostRatio:
    flops_ratio: float
    params_ratio: float
    peak_ratio: float
    mac_ratio: float


def compare(a: CompGraph, b: CompGraph, input_shape) -> CostRatio:
    """Ratios ``b / a``."""
    ca, cb = cost(a, input_shape), cost(b, input_shape)
    return CostRatio(cb.flops / ca.flops, cb.params / ca.params,
                     cb.memory_peak / ca.memory_peak, cb.mac / ca.mac)


def mac_optimality_check(c_in: int, c_out: int, fixed_flops: int, kernel: int = 1,
                         hw: tuple = (1, 1)) -> bool:
    """True when ``(c_in, c_out)`` minimizes MAC among all integer channel pairs
    with the same ``kernel**2 * c_in * c_out`` budget ``fixed_flops``."""
    k2 = kernel * kernel
    if c_in <= 0 or c_out <= 0 or k2 * c_in * c_out != fixed_flops:
        return False
    prod = c_in * c_out
    h, w = hw
    mine = conv_mac(h, w, c_in, c_out, kernel)
    best = min(conv_mac(h, w, a, prod // a, kernel) for a in range(1, prod + 1) if prod % a == 0)
    return mine <= best
