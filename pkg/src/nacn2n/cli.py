"""Command-line interface.

Every subcommand accepts ``--config FILE`` plus dotted overrides such as
``--train.epochs=8``, and ``--dry-run`` to print the resolved configuration
and exit without touching the filesystem. Exit codes: 0 on success, 1 for
usage or configuration problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import CheckpointError, ConfigError, NacError
from .experiments import (
    ABLATION_VARIANTS,
    ExperimentPlan,
    _emit_results,
    build_dataset,
    run_plan,
    tabulate_methods,
)
from .imaging import ImageGrid, load_image, save_image
from .metrics import evaluate
from .models import build_chain, load_chain, read_container, save_chain
from .noise import corrupt, stream_for
from .pairs import build_pairs, save_manifest
from .phantoms import make_phantoms
from .reporting import save_panel_figure
from .training import checkpoint_load, checkpoint_save, resume_training, train

IMAGE_SUFFIXES = (".raw", ".png")


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_dir(directory) -> list[ImageGrid]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    images = []
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
            images.append(load_image(path, id=path.stem))
    return images


def _save_images(images: list[ImageGrid], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for img in images:
        save_image(img, directory / f"{img.id}.raw")


def _load_any_chain(path):
    manifest, _ = read_container(path)
    if manifest.get("format") == "trainer-checkpoint":
        chain, _, _, _, _ = checkpoint_load(path)
        return chain
    chain, _ = load_chain(path)
    return chain


def cmd_corrupt(args, cfg) -> int:
    images = _load_dir(args.input)
    if not images:
        raise ConfigError(f"no images found in {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    copies = args.copies if args.copies is not None else cfg.data.copies
    seed = cfg.experiment.master_seed
    count = 0
    for img in images:
        for copy in range(copies):
            noisy = corrupt(img, cfg.noise, stream_for(seed, img.id, copy))
            save_image(noisy, out_dir / f"{img.id}.copy{copy}.raw")
            count += 1
    pairset = build_pairs(
        images, cfg.noise, copies=copies, mode=cfg.data.mode, master_seed=seed
    )
    source_paths = {img.id: str(Path(args.input) / f"{img.id}.raw") for img in images}
    for img in images:
        for suffix in IMAGE_SUFFIXES:
            candidate = Path(args.input) / f"{img.id}{suffix}"
            if candidate.exists():
                source_paths[img.id] = str(candidate)
                break
    save_manifest(pairset, out_dir / "manifest.json", source_paths)
    print(f"wrote {count} corrupted grids and manifest.json to {out_dir}")
    return 0


def cmd_phantoms(args, cfg) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = make_phantoms(
        args.count,
        size=args.size,
        seed=cfg.experiment.master_seed,
        group_size=args.group_size,
    )
    _save_images(images, out_dir)
    manifest = {
        "sources": [
            {"path": f"{img.id}.raw", "id": img.id, "group": img.group}
            for img in images
        ]
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(images)} phantom grids and manifest.json to {out_dir}")
    return 0


def cmd_build_dataset(args, cfg) -> int:
    dataset = build_dataset(cfg.data, cfg.noise, cfg.experiment.master_seed)
    out_dir = Path(args.out)
    _save_images(dataset.train_observed, out_dir / "train_observed")
    _save_images(dataset.train_clean, out_dir / "train_clean")
    _save_images(dataset.test_observed, out_dir / "test_observed")
    _save_images(dataset.test_clean, out_dir / "test_clean")
    summary = {
        "counts": dataset.summary(),
        "noise": cfg.noise.to_dict(),
        "data": cfg.data.to_dict(),
        "master_seed": cfg.experiment.master_seed,
        "train_ids": [img.id for img in dataset.train_observed],
        "test_ids": [img.id for img in dataset.test_observed],
    }
    (out_dir / "dataset.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(
        f"wrote {len(dataset.train_observed)} train / {len(dataset.test_observed)} test "
        f"images to {out_dir}"
    )
    return 0


def cmd_train(args, cfg) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg.data, cfg.noise, cfg.experiment.master_seed)
    pairs = build_pairs(
        dataset.train_observed,
        cfg.noise,
        copies=cfg.data.copies,
        mode=cfg.data.mode,
        master_seed=cfg.experiment.master_seed,
    )
    log_path = out_dir / "train_log.csv"
    if args.resume:
        result = resume_training(
            args.resume, pairs, log_path=log_path, checkpoint_dir=out_dir
        )
    else:
        log_path.unlink(missing_ok=True)
        chain = build_chain(
            cfg.model, cfg.experiment.chain_length, init_seed=cfg.experiment.master_seed
        )
        result = train(chain, pairs, cfg.train, log_path=log_path, checkpoint_dir=out_dir)
    save_chain(result.chain, out_dir / "model.ckpt", training_step=len(result.history))
    if result.optimizer is not None:
        checkpoint_save(
            result.chain,
            result.optimizer,
            result.config.epochs,
            result.history,
            result.config,
            out_dir / "trainer.ckpt",
        )
    (out_dir / "history.json").write_text(
        json.dumps(result.history, indent=2, sort_keys=True)
    )
    last = result.history[-1] if result.history else None
    if last:
        print(
            f"trained {len(result.history)} epoch(s); final loss {last['loss']:.6e}; "
            f"checkpoints in {out_dir}"
        )
    else:
        print(f"no epochs run; checkpoints in {out_dir}")
    return 0


def cmd_eval(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    chain = _load_any_chain(ckpt)
    dataset = build_dataset(cfg.data, cfg.noise, cfg.experiment.master_seed)
    report = evaluate(chain, dataset.test_observed, dataset.test_clean)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "per_image.csv")
    report.to_json(out_dir / "per_image.json")
    from .models import apply_chain

    inp, ref = dataset.test_observed[0], dataset.test_clean[0]
    out, _ = apply_chain(chain, inp)
    agg = report.aggregate
    save_panel_figure(
        out_dir / "panels.png",
        [
            (f"input {agg['baseline_psnr_mean']:.2f} dB", inp),
            (f"denoised {agg['psnr_mean']:.2f} dB", out),
            ("reference", ref),
        ],
    )
    print(
        f"PSNR {agg['psnr_mean']:.3f} dB (input {agg['baseline_psnr_mean']:.3f}), "
        f"SSIM {agg['ssim_mean']:.4f} (input {agg['baseline_ssim_mean']:.4f}); "
        f"report in {out_dir}"
    )
    return 0


def _parse_values(raw: str | None) -> tuple:
    if not raw:
        return ()
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def cmd_sweep(args, cfg) -> int:
    values = _parse_values(args.values) or cfg.experiment.axis_values
    plan = cfg.to_plan(
        name=args.name or f"sweep_{args.axis}",
        axis=args.axis,
        axis_values=values,
        output_dir=args.out or cfg.experiment.output_dir,
    )
    result = run_plan(plan)
    print(
        f"{len(result['rows'])} row(s) -> {result['paths']['csv']} "
        f"and {result['paths']['json']}"
    )
    return 0


def cmd_ablate(args, cfg) -> int:
    values = _parse_values(args.variants) or ABLATION_VARIANTS
    plan = cfg.to_plan(
        name=args.name or "ablations",
        axis="ablation",
        axis_values=values,
        output_dir=args.out or cfg.experiment.output_dir,
    )
    result = run_plan(plan)
    print(
        f"{len(result['rows'])} row(s) -> {result['paths']['csv']} "
        f"and {result['paths']['json']}"
    )
    return 0


def cmd_tabulate(args, cfg) -> int:
    references = _load_dir(args.references)
    if not references:
        raise ConfigError(f"no reference images found in {args.references}")
    inputs = _load_dir(args.inputs)
    ref_ids = {img.id for img in references}
    input_ids = {img.id for img in inputs}
    if ref_ids != input_ids:
        raise ConfigError(
            "reference and input directories disagree on image ids: "
            f"{sorted(ref_ids ^ input_ids)}"
        )
    by_id = {img.id: img for img in inputs}
    inputs = [by_id[img.id] for img in references]

    ours = None
    if args.ours:
        ours_images = {img.id: img for img in _load_dir(args.ours)}
        missing = [img.id for img in references if img.id not in ours_images]
        if missing:
            raise ConfigError(f"our outputs in {args.ours} miss ids: {missing}")
        ours = [ours_images[img.id] for img in references]

    external = {}
    for token in args.method or []:
        if "=" not in token:
            raise ConfigError(f"--method must look like name=dir, got '{token}'")
        method, directory = token.split("=", 1)
        external[method] = directory

    result = tabulate_methods(references, inputs, ours, external, args.out)
    print(f"{len(result['rows'])} method row(s) -> {result['paths']['csv']}")
    return 0


def cmd_report(args, cfg) -> int:
    results_path = Path(args.results)
    if not results_path.exists():
        raise ConfigError(f"results file not found: {results_path}")
    payload = json.loads(results_path.read_text())
    rows = payload.get("rows", [])
    if not rows:
        raise ConfigError(f"{results_path} holds no result rows")
    metadata = payload.get("metadata", {})
    if "plan" not in metadata:
        raise ConfigError(f"{results_path} lacks plan metadata; cannot re-render")
    plan = ExperimentPlan.from_dict(metadata["plan"])
    if args.out:
        plan = dataclasses.replace(plan, output_dir=args.out)
    result = _emit_results(plan, rows)
    print(f"re-rendered {len(rows)} row(s) -> {result['paths']['csv']}")
    return 0


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="print the resolved config and exit without writing anything",
    )

    parser = _Parser(prog="nacn2n", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("corrupt", parents=[common], help="write corrupted copies of images")
    p.add_argument("--input", required=True, help="directory of source images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--copies", type=int, default=None)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("phantoms", parents=[common], help="generate synthetic clean images")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--group-size", type=int, default=None)
    p.set_defaults(func=cmd_phantoms)

    p = sub.add_parser(
        "build-dataset", parents=[common], help="materialize the train/test split to disk"
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train a chain on noisy pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="trainer checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="run a one-axis experiment sweep")
    p.add_argument(
        "--axis",
        required=True,
        choices=["backbone", "module_count", "gaussian_variance"],
    )
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--name", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", parents=[common], help="run noise/pairing ablations")
    p.add_argument("--variants", default=None, help="comma-separated variant names")
    p.add_argument("--name", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("tabulate", parents=[common], help="compare methods on a shared test set")
    p.add_argument("--references", required=True, help="directory of clean references")
    p.add_argument("--inputs", required=True, help="directory of noisy inputs")
    p.add_argument("--ours", default=None, help="directory of this package's outputs")
    p.add_argument(
        "--method",
        action="append",
        default=None,
        help="name=dir of an external method's outputs; repeatable",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tabulate)

    p = sub.add_parser(
        "report", parents=[common], help="re-render tables and figures from results.json"
    )
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    overrides = []
    for token in extras:
        body = token[2:] if token.startswith("--") else token
        if token.startswith("--") and "=" in body and "." in body.split("=", 1)[0]:
            overrides.append(body)
        else:
            parser.error(f"unrecognized argument: {token}")
    if not getattr(args, "command", None):
        parser.error("a subcommand is required")
    try:
        cfg, log_lines = load_config(getattr(args, "config", None), overrides)
        for line in log_lines:
            print(line, file=sys.stderr)
        if getattr(args, "dry_run", False):
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NacError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
