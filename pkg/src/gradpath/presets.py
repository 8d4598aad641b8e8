"""Named specs for the standard comparisons, usable as ``preset:<name>``.

Single presets resolve to one :class:`ArchSpec`; group presets resolve to
an ordered ``{variant: ArchSpec}`` map (the CLI trains every variant).
"""

from __future__ import annotations

from .archspec import ArchSpec, CSPConfig, ElanStack, Family
from .zoo import darknet53_spec

SCALING_DEPTHS = (8, 16, 32, 64)
SCALING_FAMILIES = {
    "plainnet": Family.PLAIN,
    "resnet": Family.RESNET,
    "densenet": Family.DENSENET,
    "sparsenet": Family.SPARSENET,
    "prn": Family.PRN,
}

# training presets run on the 8x8 downsampled synthetic task with 4 classes
_TOY = dict(base_channels=8, input_shape=(3, 8, 8), num_classes=4)


def _scaling(family: Family, depth: int) -> ArchSpec:
    # one stage of `depth` layers (PlainNet, DenseNet, SparseNet) or blocks
    return ArchSpec(family, depth=(depth,), base_channels=8)


def _single() -> dict:
    out = {
        "darknet53": darknet53_spec(),
        "darknet53-csp": darknet53_spec(csp=True),
        "darknet53-csp-slice": darknet53_spec(csp=True, split="slice"),
        "resnet-csp-both": ArchSpec(Family.RESNET, depth=(3,), base_channels=8,
                                    csp=CSPConfig(0.5, "both")),
        "resnet-csp-first": ArchSpec(Family.RESNET, depth=(3,), base_channels=8,
                                     csp=CSPConfig(0.5, "first")),
        "resnet-csp-last": ArchSpec(Family.RESNET, depth=(3,), base_channels=8,
                                    csp=CSPConfig(0.5, "last")),
        "resnet-csp-none": ArchSpec(Family.RESNET, depth=(3,), base_channels=8,
                                    csp=CSPConfig(0.5, "none")),
        "elan": ArchSpec(Family.ELAN, depth=(4,), base_channels=8, elan_stack=ElanStack(2, 1)),
    }
    for name, fam in SCALING_FAMILIES.items():
        for d in SCALING_DEPTHS:
            out[f"depth-{name}-{d}"] = _scaling(fam, d)
    for mode in ("off", "on_identity", "on_block"):
        out[f"resnet-stopgrad-{mode}"] = ArchSpec(Family.RESNET, depth=(3,), stop_grad=mode, **_TOY)
    out["vovnet-deep"] = ArchSpec(Family.VOVNET, depth=(12,), osa_layers=2, **_TOY)
    out["vovnet-deep-replanned"] = out["vovnet-deep"].with_(replan=True)
    return out


def _groups() -> dict:
    s = _single()
    return {
        "stopgrad-ablation": {m: s[f"resnet-stopgrad-{m}"] for m in ("off", "on_identity", "on_block")},
        "vovnet-planning": {"stacked": s["vovnet-deep"], "replanned": s["vovnet-deep-replanned"]},
        "csp-fusion": {f: s[f"resnet-csp-{f}"] for f in ("both", "first", "last", "none")},
    }


SINGLE = _single()
GROUPS = _groups()


def names() -> list:
    return sorted(SINGLE) + sorted(GROUPS)


def resolve(name: str) -> dict:
    """``{variant: spec}``; single presets map their own name to the spec."""
    if name in SINGLE:
        return {name: SINGLE[name]}
    if name in GROUPS:
        return dict(GROUPS[name])
    raise KeyError(name)
