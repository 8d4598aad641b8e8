"""``gradpath`` command line.

Exit codes: 0 success, 2 input error (bad spec, file, shape or flag),
3 graph validation failure, 4 training divergence.

Outputs are written atomically (temp file + rename). Relative default
outputs go to ``$GRADPATH_OUT`` (default: the current directory). Every
invocation that writes files also writes a run manifest listing each output
with its sha256 digest; manifests carry no timestamps, so identical
invocations produce identical manifests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

from . import __version__, presets
from .analysis import analyze
from .archspec import ArchSpec, SpecError, dumps, load
from .cost import ShapeError, compare, cost
from .graph import GraphError, unfold
from .train import TrainConfig, generate, load_image_folder, manifest, train
from .zoo import build

OUT_ENV = "GRADPATH_OUT"
EXIT_OK, EXIT_INPUT, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3, 4


class InputError(Exception):
    pass


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def atomic_write(path, data) -> str:
    """Write ``data`` (str or bytes) via temp + rename; returns its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(raw).hexdigest()


class Run:
    """Collects outputs of one invocation and writes its manifest."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out_dir = out_dir
        self.outputs: dict = {}
        self.specs: dict = {}
        self.extra: dict = {}

    def write(self, path, data) -> None:
        self.outputs[str(path)] = atomic_write(path, data)

    def manifest(self) -> dict:
        return {
            "tool_version": __version__,
            "subcommand": self.command,
            "specs": self.specs,
            **self.extra,
            "outputs": dict(sorted(self.outputs.items())),
        }

    def finish(self) -> None:
        if not self.outputs:
            return
        doc = json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"
        tag = hashlib.sha256(doc.encode()).hexdigest()[:12]
        atomic_write(self.out_dir / f"manifest-{self.command}-{tag}.json", doc)


def read_specs(ref: str) -> dict:
    """``{variant: ArchSpec}`` for a spec file path or ``preset:<name>``."""
    if ref.startswith("preset:"):
        name = ref.split(":", 1)[1]
        try:
            return presets.resolve(name)
        except KeyError:
            raise InputError(f"unknown preset {name!r}; known: {', '.join(presets.names())}") from None
    try:
        return {Path(ref).stem: load(ref)}
    except OSError as exc:
        raise InputError(f"{ref}: {exc.strerror}") from None
    except SpecError as exc:
        raise InputError(f"{ref}: {exc}") from None


def read_spec(ref: str) -> ArchSpec:
    specs = read_specs(ref)
    if len(specs) != 1:
        raise InputError(f"{ref} names {len(specs)} specs; this command takes one")
    return next(iter(specs.values()))


def build_checked(spec: ArchSpec):
    try:
        return build(spec)
    except SpecError as exc:
        raise InputError(str(exc)) from None


def parse_shape(text):
    if text is None:
        return None
    try:
        shape = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"bad --input-shape {text!r}: expected c,h,w") from None
    if len(shape) != 3 or min(shape) < 1:
        raise InputError(f"bad --input-shape {text!r}: expected three positive ints")
    return shape


def parse_seeds(text: str) -> list:
    try:
        seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"bad --seeds {text!r}: expected comma-separated ints") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise InputError("--seeds must list distinct ints")
    return seeds


def _out_path(arg, run: Run, default_name: str):
    return Path(arg) if arg else run.out_dir / default_name


# -- subcommands ------------------------------------------------------------


def cmd_build(args, run: Run) -> int:
    spec = read_spec(args.spec)
    g = build_checked(spec)
    run.specs["spec"] = dumps(spec)
    summary = {
        "nodes": len(g.nodes),
        "edges": len(g.edges),
        "layers": len(g.layers),
        "content_hash": g.content_hash(),
    }
    if args.canonical:
        run.write(args.canonical, g.canonical())
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_export(args, run: Run) -> int:
    spec = read_spec(args.spec)
    g = build_checked(spec)
    if args.unfold:
        g = unfold(g)
    run.specs["spec"] = dumps(spec)
    run.write(_out_path(args.dot, run, "graph.dot"), g.to_dot())
    return EXIT_OK


def cmd_analyze(args, run: Run) -> int:
    spec = read_spec(args.spec)
    g = build_checked(spec)
    run.specs["spec"] = dumps(spec)
    report = analyze(g)
    text = report.to_json()
    if args.json:
        run.write(args.json, text)
    else:
        sys.stdout.write(text)
    if args.dot:
        run.write(args.dot, g.to_dot())
    if args.unfold_dump:
        run.write(args.unfold_dump, unfold(g).canonical())
    return EXIT_OK


def cmd_cost(args, run: Run) -> int:
    spec = read_spec(args.spec)
    shape = parse_shape(args.input_shape) or spec.input_shape
    g = build_checked(spec)
    run.specs["spec"] = dumps(spec)
    run.extra["input_shape"] = list(shape)
    try:
        rep = cost(g, shape)
    except ShapeError as exc:
        raise InputError(str(exc)) from None
    if args.csv:
        run.write(args.csv, rep.to_csv())
    print(json.dumps({"flops": rep.flops, "params": rep.params,
                      "memory_peak": rep.memory_peak, "mac": rep.mac}, sort_keys=True))
    return EXIT_OK


def cmd_compare(args, run: Run) -> int:
    a, b = read_spec(args.spec_a), read_spec(args.spec_b)
    shape = parse_shape(args.input_shape) or a.input_shape
    ga, gb = build_checked(a), build_checked(b)
    run.specs.update(a=dumps(a), b=dumps(b))
    run.extra["input_shape"] = list(shape)
    try:
        ratio = compare(ga, gb, shape)
    except ShapeError as exc:
        raise InputError(str(exc)) from None
    text = json.dumps(asdict(ratio), indent=2, sort_keys=True) + "\n"
    if args.json:
        run.write(args.json, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig(epochs=10, batch_size=32, lr=0.02, momentum=0.9, downsample=4)
    try:
        with open(path, encoding="utf-8") as fh:
            return TrainConfig.from_json(fh.read())
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_train(args, run: Run) -> int:
    specs = read_specs(args.spec)
    seeds = parse_seeds(args.seeds)
    config = _load_config(args.config)
    out_dir = Path(args.out) if args.out else run.out_dir
    run.out_dir = out_dir
    diverged = []
    runs = []
    folder = None
    if args.image_folder:
        try:
            folder = load_image_folder(args.image_folder)
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.image_folder}: {exc}") from None
    if folder is None and not args.samples >= args.classes >= 2:
        raise InputError("need --samples >= --classes >= 2")
    for seed in seeds:
        data = folder if folder is not None else generate(seed, args.samples, args.classes)
        side = data.images.shape[2] // config.downsample
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        for variant, spec in specs.items():
            if spec.num_classes not in (0, data.k):
                raise InputError(f"spec has num_classes={spec.num_classes}, data has {data.k}")
            spec = spec.with_(num_classes=data.k, input_shape=(3, side, side))
            g = build_checked(spec)
            res = train(g, data, cfg)
            name = f"{variant}-seed{seed}.csv"
            run.write(out_dir / name, res.to_csv())
            runs.append({**manifest(spec, cfg, seed, g), "variant": variant,
                         "status": res.status, "curve": name})
            if res.status != "ok":
                diverged.append(f"{variant} seed {seed}")
            run.specs[variant] = dumps(spec)
    run.extra["seeds"] = seeds
    run.extra["runs"] = runs
    if diverged:
        print("diverged: " + ", ".join(diverged), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_presets(args, run: Run) -> int:
    for name in presets.names():
        print(name)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradpath", description="Gradient-path analysis and cost tooling.")
    p.add_argument("--version", action="version", version=f"gradpath {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", help="build and validate a spec")
    s.add_argument("spec")
    s.add_argument("--canonical", help="write the canonical graph text here")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("export", help="write the graph as Graphviz DOT")
    s.add_argument("spec")
    s.add_argument("--dot", help="output path (default $GRADPATH_OUT/graph.dot)")
    s.add_argument("--unfold", action="store_true", help="export the unfolded graph")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("analyze", help="gradient timestamps, sources and path lengths")
    s.add_argument("spec")
    s.add_argument("--json", help="report path (default: stdout)")
    s.add_argument("--dot", help="also write the graph as DOT")
    s.add_argument("--unfold-dump", help="write the unfolded graph's canonical text")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("cost", help="FLOPs, params, memory peak and MAC")
    s.add_argument("spec")
    s.add_argument("--input-shape", help="c,h,w (default: the spec's input_shape)")
    s.add_argument("--csv", help="per-node cost table path")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("compare", help="cost ratios of spec B over spec A")
    s.add_argument("spec_a")
    s.add_argument("spec_b")
    s.add_argument("--input-shape", help="c,h,w (default: spec A's input_shape)")
    s.add_argument("--json", help="ratio JSON path (default: stdout)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("train", help="train on the synthetic task, one curve per seed")
    s.add_argument("spec")
    s.add_argument("--config", help="TrainConfig JSON file")
    s.add_argument("--seeds", default="1")
    s.add_argument("--out", help="output directory (default $GRADPATH_OUT)")
    s.add_argument("--samples", type=int, default=600)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--image-folder", help="train on root/<class>/<image> instead")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("presets", help="list preset names")
    s.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        run = Run(args.command, default_out())
        code = args.func(args, run)
        run.finish()
        return code
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GraphError as exc:
        print("invalid graph:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
