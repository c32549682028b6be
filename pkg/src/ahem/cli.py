"""Command-line entry point.

Subcommands: gen-data, train, eval, augment-preview, profile.  Every
run is reproducible from its flags and files alone; seeds are explicit
(never time-based).  Exit status: 0 success, 1 usage error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, imaging, model as model_mod, trainer

__all__ = ["main", "dispatch"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ahem", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render a synthetic multi-domain corpus")
    p.add_argument("--spec", required=True, help="synthetic spec file (key=value)")
    p.add_argument("--out", required=True, help="output dataset root")

    p = sub.add_parser("train", help="train a model on a dataset tree")
    p.add_argument("--config", required=True, help="training config file (key=value)")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--policy", choices=sorted(imaging.POLICY_PRESETS),
                   help="override the config augmentation policy")
    p.add_argument("--mode", choices=trainer.MODES, help="override the config mode")

    p = sub.add_parser("eval", help="single-shot CMC evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="held-out dataset root")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--probe-ids", type=int, required=True)
    p.add_argument("--gallery-ids", type=int, required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--ranks", default="1,5,10", help="comma-separated rank list")
    p.add_argument("--domain", help="domain name when the root holds several")

    p = sub.add_parser("augment-preview",
                       help="write augmented copies of one image plus a parameter log")
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--policy", required=True, choices=sorted(imaging.POLICY_PRESETS))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("profile", help="multiply-add count of an architecture")
    p.add_argument("--arch", required=True,
                   help="arch file, or one of: reference, mobilenetv2-1.0, "
                        "mobilenetv2-0.75")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)

    return parser


def _cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise FileNotFoundError(f"spec file not found: {spec_path}")
    spec = data_mod.parse_synthetic_spec(spec_path.read_text())
    root = data_mod.generate_synthetic(spec, args.out)
    print(f"wrote {spec.domains} domain(s) x {spec.identities_per_domain} "
          f"identities x {spec.images_per_identity} images to {root}")
    return 0


def _cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    config = trainer.parse_config(config_path.read_text())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy is not None:
        overrides["policy"] = args.policy
    if args.mode is not None:
        overrides["mode"] = args.mode
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    records, ckpt, metrics = trainer.train(config, args.data, args.out)
    if records:
        print(f"trained {len(records)} iterations; final L_total "
              f"{records[-1].l_total:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    return 0


def _parse_ranks(raw: str):
    try:
        ranks = tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError as exc:
        raise UsageError(f"--ranks expects comma-separated integers, got {raw!r}") from exc
    if not ranks or any(k < 1 for k in ranks):
        raise UsageError(f"--ranks must be positive integers, got {raw!r}")
    return ranks


def _cmd_eval(args) -> int:
    ranks = _parse_ranks(args.ranks)
    net = model_mod.load_checkpoint(args.checkpoint)
    datasets = data_mod.load_dataset(args.data)
    if args.domain is not None:
        matching = [ds for ds in datasets if ds.name == args.domain]
        if not matching:
            raise ValueError(
                f"domain {args.domain!r} not found under {args.data}; "
                f"available: {[ds.name for ds in datasets]}")
        dataset = matching[0]
    elif len(datasets) == 1:
        dataset = datasets[0]
    else:
        raise UsageError(
            f"--domain is required: {args.data} holds {len(datasets)} domains")

    protocol = evaluation.EvalProtocol(
        probe_id_count=args.probe_ids,
        gallery_id_count=args.gallery_ids,
        trials=args.trials,
        seed=args.seed,
    )
    store = data_mod.ImageStore(*net.input_size)
    avg, trials = evaluation.run_trials(net, dataset, protocol, store, ranks=ranks)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial", "rank", "accuracy"])
    for t, curve in enumerate(trials):
        for k, acc in zip(curve.ranks, curve.accuracies):
            writer.writerow([t, k, repr(acc)])
    for k, acc in zip(avg.ranks, avg.accuracies):
        writer.writerow(["avg", k, repr(acc)])
    Path(args.out).write_text(buf.getvalue())

    for k, acc in zip(avg.ranks, avg.accuracies):
        print(f"rank-{k} {acc:.4f}")
    print(f"csv: {args.out}")
    return 0


def _cmd_augment_preview(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    image = imaging.read_ppm(args.image)
    policy = imaging.POLICY_PRESETS[args.policy]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    log_lines = []
    for i in range(args.count):
        params = imaging.sample_augmentation(policy, rng)
        augmented = imaging.apply_augmentation(image, params)
        name = f"aug_{i:03d}.ppm"
        imaging.write_ppm(out / name, augmented)
        log_lines.append(
            f"{name} offsets={params.offsets} flip={params.flip} "
            f"degrees={params.degrees!r} hue_shift={params.hue_shift!r} "
            f"sat_scale={params.sat_scale!r} val_scale={params.val_scale!r}")
    (out / "params.txt").write_text("\n".join(log_lines) + "\n")
    print(f"wrote {args.count} augmented image(s) and params.txt to {out}")
    return 0


_NAMED_ARCHS = {
    "reference": model_mod.reference_arch,
    "mobilenetv2-1.0": lambda: model_mod.mobilenet_v2_arch(1.0),
    "mobilenetv2-0.75": lambda: model_mod.mobilenet_v2_arch(0.75),
}


def _cmd_profile(args) -> int:
    if args.arch in _NAMED_ARCHS:
        arch = _NAMED_ARCHS[args.arch]()
    else:
        arch_path = Path(args.arch)
        if not arch_path.is_file():
            raise FileNotFoundError(
                f"--arch is neither a file nor one of {sorted(_NAMED_ARCHS)}: "
                f"{args.arch}")
        arch = model_mod.ArchSpec.from_lines(arch_path.read_text().splitlines())
    total = model_mod.count_madds(arch, args.height, args.width)
    for spec in arch.layers:
        part = model_mod.count_madds(model_mod.ArchSpec((spec,)), *_entry_shape(
            arch, spec, args.height, args.width))
        print(f"{spec.to_line():<40} {part:>15,}")
    print(f"{'total':<40} {total:>15,}")
    return 0


def _entry_shape(arch, target, h, w):
    """Input (h, w, c) seen by `target` inside `arch` (first occurrence)."""
    c = 3
    for spec in arch.layers:
        if spec is target:
            return h, w, c
        if spec.kind in ("conv", "dwconv"):
            h = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
            c = spec.out_ch
        elif spec.kind == "fc":
            h, w, c = 1, 1, spec.out_ch
        elif spec.kind == "gap":
            h, w = 1, 1
    return h, w, c


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "augment-preview": _cmd_augment_preview,
    "profile": _cmd_profile,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("ahem: a subcommand is required", file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, data_mod.DatasetError) as exc:
        print(f"ahem: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
