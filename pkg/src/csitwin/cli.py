"""Command-line interface: ``csitwin scene|dataset|exp ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .channel import SystemConfig
from .pipeline import DatasetError, generate_dataset, load_dataset, save_dataset, split
from .scene import SceneError, builtin_scene, derive_twin_scene, load_scene, save_scene

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _scene_arg(value: str):
    if value.startswith("builtin:"):
        return builtin_scene(value.split(":", 1)[1])
    return load_scene(value)


def cmd_scene_validate(args):
    scene = load_scene(args.file)
    grid = scene.service_grid
    print(f"{args.file}: ok ({scene.name}, {len(scene.buildings)} buildings, "
          f"{len(scene.foliage)} foliage volumes, {grid.size} grid points)")
    return EXIT_OK


def cmd_scene_derive_twin(args):
    twin = derive_twin_scene(load_scene(args.file))
    save_scene(twin, args.output)
    print(f"wrote {args.output} ({twin.name})")
    return EXIT_OK


def cmd_scene_builtin(args):
    save_scene(builtin_scene(args.name), args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_dataset_generate(args):
    scene = _scene_arg(args.scene)
    cfg = SystemConfig(num_antennas=scene.bs.num_antennas)
    ds = generate_dataset(scene, cfg, args.seed, args.count)
    save_dataset(ds, args.output)
    print(f"wrote {args.output}: {len(ds)} {ds.scenario} samples of shape {ds.shape}")
    return EXIT_OK


def cmd_dataset_split(args):
    src = Path(args.file)
    ds = load_dataset(src)
    tr, te = split(ds, args.frac, args.seed)
    train_out = Path(args.train_out or src.with_suffix(".train.csid"))
    test_out = Path(args.test_out or src.with_suffix(".test.csid"))
    meta = {"split_seed": args.seed, "train_fraction": args.frac, "parent": src.name}
    save_dataset(dataclasses.replace(tr, split_seed=args.seed), train_out, meta)
    save_dataset(dataclasses.replace(te, split_seed=args.seed), test_out, meta)
    print(f"wrote {train_out} ({len(tr)}) and {test_out} ({len(te)})")
    return EXIT_OK


def _spec(args):
    spec = experiments.load_spec(args.spec)
    if getattr(args, "out", None):
        spec = dataclasses.replace(spec, output_dir=args.out)
    return spec


def _run_exp(args, which):
    spec = _spec(args)
    _, checks, files = experiments.run(spec, which, getattr(args, "replicates", None))
    for f in files:
        print(f"wrote {f}")
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def cmd_exp_init(args):
    d = experiments.spec_to_dict(experiments.ExperimentSpec())
    Path(args.output).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_exp_audit(args):
    problems = experiments.audit(_spec(args))
    for p in problems:
        print(p)
    print("audit ok" if not problems else f"{len(problems)} mismatches")
    return EXIT_OK if not problems else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csitwin", description="Digital-twin CSI compression lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="group", required=True)

    sc = sub.add_parser("scene", help="scene files").add_subparsers(dest="cmd", required=True)
    p = sc.add_parser("validate")
    p.add_argument("file")
    p.set_defaults(func=cmd_scene_validate)
    p = sc.add_parser("derive-twin")
    p.add_argument("file")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_scene_derive_twin)
    p = sc.add_parser("builtin", help="write a built-in scene (target, target-twin, baseline)")
    p.add_argument("name")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_scene_builtin)

    ds = sub.add_parser("dataset", help="CSI datasets").add_subparsers(dest="cmd", required=True)
    p = ds.add_parser("generate")
    p.add_argument("--scene", required=True, help="scene file or builtin:<name>")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_dataset_generate)
    p = ds.add_parser("split")
    p.add_argument("file")
    p.add_argument("--frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-out")
    p.add_argument("--test-out")
    p.set_defaults(func=cmd_dataset_split)

    ex = sub.add_parser("exp", help="experiments").add_subparsers(dest="cmd", required=True)
    for name, which in (("direct-gen", ("direct",)), ("refine", ("refine",)),
                        ("corr-cdf", ("cdf",)), ("all", ("direct", "refine", "cdf"))):
        p = ex.add_parser(name)
        p.add_argument("--spec", required=True)
        p.add_argument("--replicates", type=int)
        p.add_argument("--out", help="override the spec output directory")
        p.set_defaults(func=lambda a, w=which: _run_exp(a, w))
    p = ex.add_parser("init-spec", help="write the default experiment spec")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_exp_init)
    p = ex.add_parser("audit", help="recompute direct-generalisation NMSE from checkpoints")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_exp_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SceneError, DatasetError, experiments.SpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
