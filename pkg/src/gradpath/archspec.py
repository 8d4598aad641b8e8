"""Declarative architecture descriptions and their key-value text format.

One field per line, ``key = value``; ``#`` starts a comment. Lists are
comma-separated. Optional groups use dotted keys::

    family = ResNet
    depth = 4, 4
    base_channels = 16
    csp.split_ratio = 0.5
    csp.fusion = both
    input_shape = 3, 32, 32

Floats are written with ``repr`` so ``dumps(loads(text))`` is stable and
``loads(dumps(spec)) == spec`` holds bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional


class Family(str, Enum):
    PLAIN = "PlainNet"
    RESNET = "ResNet"
    PRN = "PRN"
    DENSENET = "DenseNet"
    SPARSENET = "SparseNet"
    VOVNET = "VoVNet"
    DARKNET53 = "Darknet53"
    ELAN = "ELAN"


FUSIONS = ("both", "first", "last", "none")
STOP_MODES = ("off", "on_identity", "on_block")
SPLITS = ("slice", "conv")


class SpecError(ValueError):
    """Invalid field values or malformed spec text.

    ``line`` is the 1-based line number for parse errors, else ``None``.
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CSPConfig:
    split_ratio: float = 0.5
    fusion: str = "both"
    # "slice": partition channels directly; "conv": two 1x1 partial transitions
    split: str = "slice"


@dataclass(frozen=True)
class ElanStack:
    a: int = 2
    b: int = 1


@dataclass(frozen=True)
class ArchSpec:
    family: Family
    depth: tuple = (4,)
    base_channels: int = 16
    stages: Optional[int] = None
    prn_mask_ratio: float = 0.5
    csp: Optional[CSPConfig] = None
    elan_stack: Optional[ElanStack] = None
    stop_grad: str = "off"
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 0
    osa_layers: int = 5
    replan: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        depth = tuple(int(d) for d in self.depth)
        if self.stages is None:
            object.__setattr__(self, "stages", len(depth))
        if len(depth) == 1 and self.stages > 1:
            depth = depth * self.stages
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        self.check()

    def check(self) -> None:
        if self.stages < 1 or len(self.depth) != self.stages:
            raise SpecError(f"depth has {len(self.depth)} entries for {self.stages} stages")
        if any(d < 1 for d in self.depth):
            raise SpecError("depth must be >= 1 per stage")
        if self.base_channels < 1:
            raise SpecError("base_channels must be positive")
        if not 0.0 <= self.prn_mask_ratio <= 1.0:
            raise SpecError("prn_mask_ratio must lie in [0, 1]")
        if self.csp is not None:
            if not 0.0 < self.csp.split_ratio < 1.0:
                raise SpecError("csp.split_ratio must lie in (0, 1)")
            if self.csp.fusion not in FUSIONS:
                raise SpecError(f"csp.fusion must be one of {FUSIONS}")
            if self.csp.split not in SPLITS:
                raise SpecError(f"csp.split must be one of {SPLITS}")
        if self.elan_stack is not None and (self.elan_stack.a < 1 or self.elan_stack.b < 1):
            raise SpecError("elan_stack counts must be >= 1")
        if self.stop_grad not in STOP_MODES:
            raise SpecError(f"stop_grad must be one of {STOP_MODES}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError("input_shape must be three positive ints (c, h, w)")
        if self.num_classes < 0 or self.osa_layers < 1:
            raise SpecError("num_classes must be >= 0 and osa_layers >= 1")

    def with_(self, **changes) -> "ArchSpec":
        return replace(self, **changes)


def _fmt(value) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def dumps(spec: ArchSpec) -> str:
    lines = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        if f.name in ("csp", "elan_stack"):
            if value is not None:
                for sub in fields(value):
                    lines.append(f"{f.name}.{sub.name} = {_fmt(getattr(value, sub.name))}")
            continue
        lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SCALARS = {
    "family": Family,
    "depth": _ints,
    "base_channels": int,
    "stages": int,
    "prn_mask_ratio": float,
    "stop_grad": str,
    "input_shape": _ints,
    "num_classes": int,
    "osa_layers": int,
    "replan": _bool,
}
_GROUPS = {
    "csp": (CSPConfig, {"split_ratio": float, "fusion": str, "split": str}),
    "elan_stack": (ElanStack, {"a": int, "b": int}),
}


def loads(text: str) -> ArchSpec:
    values: dict = {}
    groups: dict = {}
    seen_at: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen_at:
            raise SpecError(f"duplicate key {key!r} (first on line {seen_at[key]})", lineno)
        seen_at[key] = lineno
        try:
            if "." in key:
                group, sub = key.split(".", 1)
                if group not in _GROUPS or sub not in _GROUPS[group][1]:
                    raise KeyError(key)
                groups.setdefault(group, {})[sub] = _GROUPS[group][1][sub](value)
            else:
                values[key] = _SCALARS[key](value)
        except KeyError:
            raise SpecError(f"unknown key {key!r}", lineno) from None
        except ValueError as exc:
            raise SpecError(f"bad value for {key!r}: {exc}", lineno) from None
    if "family" not in values:
        raise SpecError("missing required key 'family'", len(text.splitlines()) or 1)
    if "stages" not in values and "depth" in values:
        values["stages"] = len(values["depth"])
    for group, kwargs in groups.items():
        values[group] = _GROUPS[group][0](**kwargs)
    try:
        return ArchSpec(**values)
    except SpecError as exc:
        key = _blame(str(exc))
        raise SpecError(str(exc), seen_at.get(key, 1)) from None


def _blame(message: str) -> str:
    for key in list(_SCALARS) + ["csp.split_ratio", "csp.fusion", "elan_stack.a"]:
        if message.startswith(key.split(".")[-1]) or message.startswith(key):
            return key
    return "depth" if "depth" in message else "family"


def load(path) -> ArchSpec:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
