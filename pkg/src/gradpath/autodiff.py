"""Reverse-mode differentiation over a CompGraph, float64 throughout.

Forward execution records one tape entry per node; backward walks the tape
in exact reverse. Gradients travel as *bundles* keyed by hop count (the
number of parametric nodes already traversed from the loss). Plain backward
keeps everything under hop 0; traced backward increments the key at every
parametric node, which splits each layer's gradient into per-timestamp
contributions whose sum is the ordinary gradient.

Conv, Transition: conv (zero "same" padding) + bias + tanh.
FullyConnected: global average pool + affine, no activation.
Loss: softmax cross-entropy on pooled input if labels are given, otherwise
half the mean (over the batch) squared norm of its input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import CompGraph, Kind, mask_bits, topo_order


class Value:
    """Dense (n, c, h, w) float64 tensor."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"expected a 4-d (n, c, h, w) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite entries in Value")
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Value":
        """Wrap an internal result without the finiteness check, so callers
        can report divergence themselves."""
        v = cls.__new__(cls)
        v.data = arr
        return v

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(shape={self.shape})"


def init_params(graph: CompGraph, seed: int = 0) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

    Draws happen in topological order of parametric nodes, so graphs with the
    same sequence of parametric shapes get identical parameters.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for nid in topo_order(graph):
        n = graph.node(nid)
        if not n.parametric:
            continue
        c_in = graph.in_channels(nid)[0]
        if n.kind is Kind.FC:
            shape = (n.out_channels, c_in)
            fan_in = c_in
        else:
            shape = (n.out_channels, c_in, n.kernel, n.kernel)
            fan_in = c_in * n.kernel * n.kernel
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        b = rng.uniform(-bound, bound, size=n.out_channels)
        params[nid] = {"w": w, "b": b}
    return params


def _im2col(xp, k, ho, wo, stride):
    """(n, c, H, W) padded input -> (n, ho, wo, c * k * k) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(n, c * k * k, ho * wo).transpose(0, 2, 1)


def _conv_fwd(x, w, b, stride):
    k = w.shape[2]
    p = k // 2
    n, c, h, wd = x.shape
    ho, wo = h // stride, wd // stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, ho, wo, stride)
    z = cols @ w.reshape(w.shape[0], -1).T + b  # (n, ho*wo, o)
    y = np.ascontiguousarray(np.tanh(z).transpose(0, 2, 1)).reshape(n, w.shape[0], ho, wo)
    return y, cols


def _conv_bwd(gy, y, cols, w, stride, x_shape):
    k = w.shape[2]
    p = k // 2
    n, c, h, wd = x_shape
    o, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    gz = (gy * (1.0 - y * y)).reshape(n, o, ho * wo)
    gb = gz.sum(axis=(0, 2))
    gw = np.einsum("nop,npq->oq", gz, cols, optimize=True).reshape(w.shape)
    gcols = (gz.transpose(0, 2, 1) @ w.reshape(o, -1)).transpose(0, 2, 1)
    gcols = gcols.reshape(n, c, k, k, ho, wo)
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, :, i, j]
    gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    return gw, gb, gx


def _mask_vec(mask, c_in: int, width: int) -> Optional[np.ndarray]:
    if mask is None and c_in == width:
        return None
    bits = mask_bits(mask, c_in)
    return np.array([(bits >> i) & 1 for i in range(width)], dtype=np.float64)


@dataclass
class Tape:
    graph: CompGraph
    params: dict
    entries: list = field(default_factory=list)  # (node id, cache) in forward order
    labels: Optional[np.ndarray] = None


@dataclass
class ForwardResult:
    output: Value  # the tensor fed to the Loss node
    loss: float
    tape: Tape
    values: dict = field(default_factory=dict, repr=False)  # node id -> output array


def forward(graph: CompGraph, params: dict, x: Value, labels=None,
            frozen: Optional[dict] = None) -> ForwardResult:
    """Execute ``graph``. ``frozen`` maps node ids to arrays that replace those
    nodes' outputs (used to hold StopGrad values fixed under perturbation)."""
    if not isinstance(x, Value):
        x = Value(x)
    expected = graph.node(graph.input_id).out_channels
    if x.shape[1] != expected:
        raise ValueError(f"input has {x.shape[1]} channels, graph expects {expected}")
    tape = Tape(graph, params, labels=None if labels is None else np.asarray(labels))
    vals: dict = {}
    loss = 0.0
    out_val = None
    for nid in topo_order(graph):
        n = graph.node(nid)
        ins = [vals[p] for p in graph.preds(nid)]
        cache = None
        if n.kind is Kind.INPUT:
            y = x.data
        elif n.kind in (Kind.CONV, Kind.TRANSITION):
            pw = params[nid]
            if ins[0].shape[2] % n.stride or ins[0].shape[3] % n.stride:
                raise ValueError(f"spatial size not divisible by stride at n{nid}")
            if pw["w"].shape[1] != ins[0].shape[1]:
                raise ValueError(f"weight shape mismatch at n{nid}")
            y, cols = _conv_fwd(ins[0], pw["w"], pw["b"], n.stride)
            cache = (cols, y, ins[0].shape)
        elif n.kind is Kind.FC:
            pooled = ins[0].mean(axis=(2, 3))
            y = (pooled @ params[nid]["w"].T + params[nid]["b"])[:, :, None, None]
            cache = (pooled, ins[0].shape)
        elif n.kind is Kind.ADD:
            y = ins[0]
            for t in ins[1:]:
                y = y + t
        elif n.kind is Kind.MASKED_ADD:
            width = n.out_channels
            y = None
            vecs = []
            for t, m in zip(ins, n.masks):
                vec = _mask_vec(m, t.shape[1], width)
                vecs.append(vec)
                if vec is None:
                    term = t
                else:
                    term = np.zeros((t.shape[0], width) + t.shape[2:])
                    cw = min(width, t.shape[1])
                    term[:, :cw] = t[:, :cw] * vec[:cw, None, None]
                y = term if y is None else y + term
            cache = vecs
        elif n.kind is Kind.CONCAT:
            y = np.concatenate(ins, axis=1)
        elif n.kind is Kind.SPLIT:
            lo, hi = n.split
            y = ins[0][:, lo:hi]
        elif n.kind in (Kind.IDENTITY, Kind.STOP_GRAD):
            y = ins[0]
        elif n.kind is Kind.LOSS:
            out_val = ins[0]
            loss, probs = _loss_fwd(ins[0], tape.labels)
            cache = (ins[0], probs)
            y = None
        else:  # pragma: no cover
            raise ValueError(n.kind)
        if frozen is not None and nid in frozen:
            y = frozen[nid]
        vals[nid] = y
        tape.entries.append((nid, cache))
    return ForwardResult(Value.wrap(out_val), float(loss), tape, vals)


def _loss_fwd(x, labels):
    # contiguous copy: the reduction order must not depend on memory layout
    x = np.ascontiguousarray(x)
    n = x.shape[0]
    if labels is None:
        return 0.5 * float(np.sum(x * x)) / n, None
    logits = x.mean(axis=(2, 3))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    return loss, np.exp(logp)


def _loss_bwd(x, labels, probs):
    n = x.shape[0]
    if labels is None:
        return x / n
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n
    hw = x.shape[2] * x.shape[3]
    return np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy()


def _accumulate(grads: dict, nid: int, hop: int, arr) -> None:
    bundle = grads.setdefault(nid, {})
    if hop in bundle:
        bundle[hop] = bundle[hop] + arr
    else:
        bundle[hop] = arr


@dataclass
class BackwardResult:
    grads: dict  # node id -> {"w": array, "b": array}
    trace: dict  # node id -> set of timestamps with nonzero contributions
    magnitude: dict  # node id -> {timestamp: L2 norm of that contribution}


def backward(tape: Tape, trace: bool = False) -> BackwardResult:
    graph = tape.graph
    params = tape.params
    grads: dict = {}
    out_grads = {nid: {"w": np.zeros_like(p["w"]), "b": np.zeros_like(p["b"])}
                 for nid, p in params.items() if nid in graph.by_id}
    arrivals = {nid: set() for nid in graph.layers}
    magnitude = {nid: {} for nid in graph.layers}
    step = 1 if trace else 0
    for nid, cache in reversed(tape.entries):
        n = graph.node(nid)
        preds = graph.preds(nid)
        if n.kind is Kind.LOSS:
            x, probs = cache
            _accumulate(grads, preds[0], 0, _loss_bwd(x, tape.labels, probs))
            continue
        bundle = grads.pop(nid, None)
        if not bundle or n.kind in (Kind.INPUT, Kind.STOP_GRAD):
            continue
        for hop, g in sorted(bundle.items()):
            if n.kind in (Kind.CONV, Kind.TRANSITION):
                cols, y, x_shape = cache
                gw, gb, gx = _conv_bwd(g, y, cols, params[nid]["w"], n.stride, x_shape)
            elif n.kind is Kind.FC:
                pooled, x_shape = cache
                g2 = g[:, :, 0, 0]
                gw, gb = g2.T @ pooled, g2.sum(axis=0)
                gp = g2 @ params[nid]["w"]
                gx = np.broadcast_to((gp / (x_shape[2] * x_shape[3]))[:, :, None, None],
                                     x_shape).copy()
            else:
                _route_back(graph, n, preds, cache, g, hop, grads)
                continue
            og = out_grads[nid]
            og["w"] += gw
            og["b"] += gb
            if trace and (np.any(gw != 0.0) or np.any(gb != 0.0)):
                arrivals[nid].add(hop + 1)
                magnitude[nid][hop + 1] = float(np.sqrt(np.sum(gw * gw) + np.sum(gb * gb)))
            _accumulate(grads, preds[0], hop + step, gx)
    return BackwardResult(out_grads, arrivals, magnitude)


def _route_back(graph, n, preds, cache, g, hop, grads) -> None:
    if n.kind in (Kind.ADD, Kind.IDENTITY):
        for p in preds:
            _accumulate(grads, p, hop, g)
    elif n.kind is Kind.MASKED_ADD:
        for p, vec in zip(preds, cache):
            c_in = graph.node(p).out_channels
            if vec is None:
                _accumulate(grads, p, hop, g)
                continue
            gi = np.zeros((g.shape[0], c_in) + g.shape[2:])
            cw = min(c_in, g.shape[1])
            gi[:, :cw] = g[:, :cw] * vec[:cw, None, None]
            _accumulate(grads, p, hop, gi)
    elif n.kind is Kind.CONCAT:
        off = 0
        for p in preds:
            c = graph.node(p).out_channels
            _accumulate(grads, p, hop, g[:, off : off + c])
            off += c
    elif n.kind is Kind.SPLIT:
        lo, hi = n.split
        c_in = graph.node(preds[0]).out_channels
        gi = np.zeros((g.shape[0], c_in) + g.shape[2:])
        gi[:, lo:hi] = g
        _accumulate(grads, preds[0], hop, gi)
    else:  # pragma: no cover
        raise ValueError(n.kind)


def run(graph: CompGraph, params: dict, x, labels=None, trace: bool = False):
    """Forward then backward; returns ``(ForwardResult, BackwardResult)``."""
    fwd = forward(graph, params, x, labels)
    return fwd, backward(fwd.tape, trace=trace)


def loss_and_grads(graph: CompGraph, params: dict, x, labels=None):
    fwd, bwd = run(graph, params, x, labels)
    return fwd.loss, bwd.grads


def arrival_trace(graph: CompGraph, params: dict, x, labels=None) -> dict:
    """Layer id -> timestamps at which a nonzero gradient contribution arrived."""
    _, bwd = run(graph, params, x, labels, trace=True)
    return {nid: frozenset(ts) for nid, ts in bwd.trace.items()}


def redrawn_arrival_trace(graph: CompGraph, seed: int = 0, batch: int = 2,
                          size: int = 8, draws: int = 2) -> dict:
    """Union of traces over ``draws`` independent (params, input) draws.

    An accidental exact cancellation does not survive a re-draw, whereas a
    structural zero (mask, stop-gradient) shows up in every draw.
    """
    c = graph.node(graph.input_id).out_channels
    total: dict = {}
    for k in range(draws):
        params = init_params(graph, seed + k)
        rng = np.random.default_rng(10_000 + seed + k)
        x = Value(rng.standard_normal((batch, c, size, size)))
        for nid, ts in arrival_trace(graph, params, x).items():
            total[nid] = total.get(nid, frozenset()) | ts
    return total


def finite_difference_check(graph: CompGraph, params: dict, x, labels=None,
                            step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error of analytic vs central-difference gradients.

    StopGrad outputs are frozen at their unperturbed values, so the numerical
    derivative is the one the cut gradient is supposed to equal.
    """
    fwd, bwd = run(graph, params, x, labels)
    grads = bwd.grads
    frozen = _stop_grad_values(fwd)
    worst = 0.0
    for nid, p in params.items():
        for key in ("w", "b"):
            arr = p[key]
            flat = arr.reshape(-1)
            ana = grads[nid][key].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                lp = forward(graph, params, x, labels, frozen).loss
                flat[i] = old - step
                lm = forward(graph, params, x, labels, frozen).loss
                flat[i] = old
                num = (lp - lm) / (2 * step)
                denom = max(abs(num), abs(ana[i]), floor)
                worst = max(worst, abs(num - ana[i]) / denom)
    return worst


def _stop_grad_values(fwd: ForwardResult) -> Optional[dict]:
    graph = fwd.tape.graph
    ids = [n.id for n in graph.nodes if n.kind is Kind.STOP_GRAD]
    return {nid: fwd.values[nid] for nid in ids} or None


SNAPSHOT_MAGIC = b"GPPS"
SNAPSHOT_VERSION = 1


def save_params(path, params: dict) -> None:
    """Binary snapshot: magic, u16 version, u32 node count, then per node
    u32 id, u64 element count and that many little-endian float64 values
    (weights then bias, C order)."""
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(params)))
        for nid in sorted(params):
            flat = np.concatenate([params[nid]["w"].ravel(), params[nid]["b"].ravel()])
            fh.write(struct.pack("<IQ", nid, flat.size))
            fh.write(flat.astype("<f8").tobytes())


def load_params(path, graph: CompGraph) -> dict:
    template = init_params(graph, 0)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a parameter snapshot")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = 10
    params = {}
    for _ in range(count):
        nid, size = struct.unpack_from("<IQ", data, off)
        off += 12
        flat = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64)
        off += 8 * size
        t = template[nid]
        nw = t["w"].size
        if size != nw + t["b"].size:
            raise ValueError(f"snapshot size mismatch for node {nid}")
        params[nid] = {"w": flat[:nw].reshape(t["w"].shape), "b": flat[nw:].copy()}
    return params
