from fractions import Fraction

import pytest

from gradpath.analysis import shortest_longest
from gradpath.archspec import ArchSpec, CSPConfig, ElanStack, Family, SpecError
from gradpath.cost import cost
from gradpath.graph import EdgeTag, GraphError, Kind, validate
from gradpath.zoo import (apply_csp, build, darknet53_spec, insert_stop_grad, replan_elan,
                          split_channels, stage_blocks)


@pytest.mark.parametrize("family", list(Family))
def test_every_family_builds_and_validates(family):
    g = build(ArchSpec(family, depth=(2, 2), base_channels=4))
    assert validate(g).ok


def test_plain_chain():
    g = build(ArchSpec(Family.PLAIN, depth=(4,)))
    assert g.count(Kind.CONV) == 4 and g.count(Kind.ADD) == 0


def test_prn_full_mask_is_resnet_topology():
    prn = build(ArchSpec(Family.PRN, depth=(3,), prn_mask_ratio=1.0))
    res = build(ArchSpec(Family.RESNET, depth=(3,)))
    assert [(n.kind, n.out_channels) for n in prn.nodes if n.kind is not Kind.MASKED_ADD] == \
           [(n.kind, n.out_channels) for n in res.nodes if n.kind is not Kind.ADD]
    assert {(e.src, e.dst, e.tag) for e in prn.edges} == {(e.src, e.dst, e.tag) for e in res.edges}
    for n in prn.nodes:
        if n.kind is Kind.MASKED_ADD:
            assert all(m is None or set(m) == {1} for m in n.masks)


def test_csp_fusion_none_split_ranges():
    g = build(ArchSpec(Family.RESNET, depth=(2,), base_channels=64, csp=CSPConfig(0.5, "none")))
    splits = sorted(n.split for n in g.nodes if n.kind is Kind.SPLIT)
    assert splits == [(0, 32), (32, 64)]
    concat = [n for n in g.nodes if n.role == "csp_concat"]
    assert len(concat) == 1 and concat[0].out_channels == 64
    assert any(e.tag is EdgeTag.CROSS_STAGE for e in g.in_edges(concat[0].id))


@pytest.mark.parametrize("fusion, added", [("both", 2), ("first", 1), ("last", 1), ("none", 0)])
def test_csp_transition_counts(fusion, added):
    base = ArchSpec(Family.RESNET, depth=(2,), base_channels=8)
    g0 = build(base)
    g = build(base.with_(csp=CSPConfig(0.5, fusion)))
    assert g.count(Kind.TRANSITION) - g0.count(Kind.TRANSITION) == added


def test_csp_order_first_vs_last():
    base = ArchSpec(Family.RESNET, depth=(2,), base_channels=8)
    first = build(base.with_(csp=CSPConfig(0.5, "first")))
    last = build(base.with_(csp=CSPConfig(0.5, "last")))
    concat = next(n.id for n in first.nodes if n.role == "csp_concat")
    assert first.node(first.succs(concat)[0]).kind is Kind.TRANSITION
    concat = next(n.id for n in last.nodes if n.role == "csp_concat")
    assert any(last.node(p).kind is Kind.TRANSITION for p in last.preds(concat))


def test_split_channels_floor_and_rejection():
    assert split_channels(10, 0.25) == (2, 8)
    with pytest.raises(GraphError):
        split_channels(3, 0.2)
    with pytest.raises(SpecError):
        build(ArchSpec(Family.RESNET, depth=(1,), base_channels=1, csp=CSPConfig(0.5)))


def test_replan_removes_all_but_last_transition():
    spec = ArchSpec(Family.VOVNET, depth=(3,), osa_layers=2)
    g, r = build(spec), build(spec.with_(replan=True))
    assert g.count(Kind.TRANSITION) - r.count(Kind.TRANSITION) == 2
    assert replan_elan(g) == r


def test_elan_stack_count_sets_conv_count():
    g1 = build(ArchSpec(Family.ELAN, depth=(1,), base_channels=4, elan_stack=ElanStack(1, 1)))
    g3 = build(ArchSpec(Family.ELAN, depth=(1,), base_channels=4, elan_stack=ElanStack(3, 1)))
    assert g3.count(Kind.CONV) - g1.count(Kind.CONV) == 4


def test_stop_grad_placements():
    base = ArchSpec(Family.RESNET, depth=(3,), base_channels=4)
    ident = build(base.with_(stop_grad="on_identity"))
    block = build(base.with_(stop_grad="on_block"))
    for g, want in ((ident, EdgeTag.IDENTITY), (block, EdgeTag.DATA)):
        for n in g.nodes:
            if n.kind is Kind.ADD:
                for e in g.in_edges(n.id):
                    is_stop = g.node(e.src).kind is Kind.STOP_GRAD
                    assert is_stop == (e.tag is want)
    with pytest.raises(GraphError):
        insert_stop_grad(build(ArchSpec(Family.DENSENET, depth=(3,))), "on_block")


def test_stop_grad_on_identity_is_plain_structure():
    lo, hi = shortest_longest(build(ArchSpec(Family.RESNET, depth=(3,), stop_grad="on_identity")))
    assert lo == hi


def test_darknet53_totals():
    rep = cost(build(darknet53_spec()), (3, 256, 256))
    assert rep.flops == 18_570_231_808
    assert rep.params == 41_573_216


def _csp_darknet53_closed_form():
    """Layer list of the published CSPDarknet53 written out by hand:
    (kernel, c_in, c_out, output side)."""
    layers = [(3, 3, 32, 256)]
    for s, d in enumerate((1, 2, 8, 8, 4)):
        c, hw = 64 * 2**s, 256 // 2 ** (s + 1)
        p = c if s == 0 else c // 2
        mid = c // 2 if s == 0 else p
        layers += [(3, c // 2, c, hw), (1, c, p, hw), (1, c, p, hw)]
        layers += [(1, p, mid, hw), (3, mid, p, hw)] * d
        layers += [(1, p, p, hw), (1, 2 * p, c, hw)]
    weights = sum(k * k * a * b for k, a, b, _ in layers) + 1024 * 1000
    flops = sum(2 * k * k * a * b * h * h for k, a, b, h in layers) + 2 * 1024 * 1000
    return flops, weights


def test_darknet53_csp_totals_match_published_layout():
    rep = cost(build(darknet53_spec(csp=True)), (3, 256, 256))
    flops, weights = _csp_darknet53_closed_form()
    assert (rep.flops, rep.params) == (flops, weights) == (13_067_304_960, 27_605_856)


def _block_costs(spec, stage):
    g = build(spec)
    rep = cost(g, spec.input_shape)
    return rep.subset(sorted(i for i in stage_blocks(g, stage) if g.node(i).parametric))


@pytest.mark.parametrize("split", ["slice", "conv"])
@pytest.mark.parametrize("fusion", ["both", "first", "last", "none"])
def test_darknet_block_halving_exact(split, fusion):
    base = ArchSpec(Family.DARKNET53, depth=(1, 2), base_channels=8, input_shape=(3, 32, 32))
    a = _block_costs(base, 1)
    b = _block_costs(base.with_(csp=CSPConfig(0.5, fusion, split)), 1)
    assert Fraction(b.flops, a.flops) == Fraction(1, 2)
    assert Fraction(b.params, a.params) == Fraction(1, 2)
    assert Fraction(b.memory_peak, a.memory_peak) == Fraction(2, 3)


def test_csp_partial_conv_split():
    g = build(ArchSpec(Family.RESNET, depth=(2,), base_channels=8, csp=CSPConfig(0.5, "both", "conv")))
    partial = [n for n in g.nodes if n.role == "csp_partial"]
    assert len(partial) == 2 and all(n.kind is Kind.TRANSITION for n in partial)
    assert sorted(n.out_channels for n in partial) == [4, 4]


def test_apply_csp_matches_spec_driven_build():
    g = build(ArchSpec(Family.RESNET, depth=(2,), base_channels=8))
    once = apply_csp(g, 0, 0.5, "both")
    assert validate(once).ok
    assert once == build(ArchSpec(Family.RESNET, depth=(2,), base_channels=8, csp=CSPConfig()))


def test_prn_partial_mask_channels():
    g = build(ArchSpec(Family.PRN, depth=(1,), base_channels=8, prn_mask_ratio=0.5))
    madd = next(n for n in g.nodes if n.kind is Kind.MASKED_ADD)
    assert madd.masks == (None, (1, 1, 1, 1, 0, 0, 0, 0))
