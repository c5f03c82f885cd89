"""Command-line entry point: ``mde <command> [options]``.

Every command writes ``manifest.json`` into its output directory before
doing any work. ``mde replay`` re-runs a manifest, which reproduces the
original outputs apart from timestamps.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, decode_json, read_archive
from .config import coerce, format_config, load_config
from .dataio import (SYNTHETIC_KINDS, ImageDataset, ParseError, load_manifest, read_png, resize,
                     synthetic_dataset, write_png_grid)
from .maskgen import (HNS_TASKS, OCCLUSIONS, TASKS, ParameterError, analytic_stats, make_mask,
                      mask_statistics, occlusion_template, parse_task)
from .metrics import MetricError, evaluate_completion, psnr, ssim
from .models import ConfigError
from .trainer import (CsvLog, TrainConfig, Trainer, TrainingError, complete, load_generator,
                      training_images)
from .verify import case_names, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

MATRIX_TASKS = ("i", "ri", "col", "re", "rec")


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    artifacts: dict[str, str]
    argv: list[str]
    tool_version: str = __version__
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read manifest {path}: {e}") from e
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _start(args, command: str, seed: int, config: dict, artifacts: dict[str, Path]) -> Path:
    out = Path(args.out)
    RunManifest(command, seed, config, {k: str(v) for k, v in artifacts.items()},
                list(args.argv)).write(out)
    return out


def _args_config(args) -> dict:
    skip = {"func", "argv", "out"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------- train

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def resolve_train_config(args) -> TrainConfig:
    """Config file values, then flag overrides, then ``--hns`` resolution."""
    values = load_config(args.config) if args.config else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if args.hns in ("on", "off"):
        values["use_hns"] = args.hns == "on"
    elif args.hns == "auto" or "use_hns" not in values:
        values["use_hns"] = parse_task(values.get("task", TrainConfig.task))[0] in HNS_TASKS
    config = TrainConfig.from_dict(values)
    config.validate()
    return config


def _sample_grid(trainer: Trainer, images: np.ndarray, path: Path) -> None:
    """Rows of mask | masked input | completion | ground truth."""
    c = trainer.config
    # a private rng keeps the training stream untouched by sampling
    batch = make_mask(c.task, np.random.default_rng(c.seed + 1), c.s, c.image_size,
                      c.image_size, len(images))
    masked = batch.mask * images
    done = trainer.complete(masked)
    tiles = np.stack([batch.mask, masked, done, images], axis=1)
    write_png_grid(tiles.reshape(-1, *images.shape[1:]), 4, path, pad=1)


def cmd_train(args) -> int:
    overrides_given = args.config or any(
        getattr(args, f.name, None) is not None for f in fields(TrainConfig)) or args.hns
    if args.resume and overrides_given:
        raise ConfigError("--resume continues with the checkpoint's stored config; "
                          "drop the config file and flags")
    out = Path(args.out)
    artifacts = {"log": out / "train.csv", "config": out / "config.txt",
                 "checkpoint": out / "final.mde", "checkpoints": out / "checkpoints",
                 "samples": out / "samples"}
    if args.resume:
        records, _, _ = read_archive(args.resume)
        if "__config__" not in records:
            raise CheckpointError(f"{args.resume}: no config snapshot")
        config = TrainConfig.from_dict(decode_json(records["__config__"]))
        config.validate()
    else:
        config = resolve_train_config(args)
    _start(args, "train", config.seed, {**config.as_dict(), "resume": args.resume}, artifacts)
    text = format_config(config)
    artifacts["config"].write_text(text)
    print(text, end="")

    images = training_images(config)
    trainer = Trainer.load(args.resume, images) if args.resume else Trainer(config, images)
    preview = images[:8]
    artifacts["samples"].mkdir(exist_ok=True)
    if config.checkpoint_interval:
        artifacts["checkpoints"].mkdir(exist_ok=True)

    def on_step(t: Trainer, row) -> None:
        n = t.step_count
        if config.checkpoint_interval and n % config.checkpoint_interval == 0:
            t.save(artifacts["checkpoints"] / f"step_{n:06d}.mde")
        if config.sample_interval and n % config.sample_interval == 0:
            _sample_grid(t, preview, artifacts["samples"] / f"step_{n:06d}.png")

    with CsvLog(artifacts["log"], append=bool(args.resume)) as log:
        trainer.run(log=log, on_step=on_step)
    trainer.save(artifacts["checkpoint"])
    _sample_grid(trainer, preview, artifacts["samples"] / "final.png")
    print(f"trained {trainer.step_count} steps; checkpoint {artifacts['checkpoint']}")
    return EXIT_OK


# ------------------------------------------------------------ inputs for G

def _input_images(args, size: int) -> np.ndarray:
    if args.input:
        path = Path(args.input)
        ds = (ImageDataset(read_png(path)[None], str(path)) if path.suffix.lower() == ".png"
              else load_manifest(path))
        images = ds.images
    else:
        images = synthetic_dataset(args.synthetic, args.n, size, args.data_seed).images
    h, w = images.shape[2:]
    if (w, h) != (size, size):
        if not args.resize:
            raise ConfigError(f"inputs are {w}x{h} but the checkpoint expects {size}x{size}; "
                              "pass --resize to rescale them")
        images = np.clip(np.stack([resize(im, size, size) for im in images]), 0, 1)
    return images.astype(np.float32)


def _task_and_ratio(args, config: TrainConfig) -> tuple[str, float]:
    return (args.task or config.task), (args.s if args.s is not None else config.s)


def cmd_complete(args) -> int:
    if args.samples < 1:
        raise ConfigError("--samples must be at least 1")
    out = Path(args.out)
    artifacts = {"metrics": out / "metrics.csv", "grid": out / "completions.png",
                 "images": out / "completions"}
    _start(args, "complete", args.seed, _args_config(args), artifacts)
    gen, config = load_generator(args.checkpoint)
    task, S = _task_and_ratio(args, config)
    images = _input_images(args, config.image_size)
    rng = np.random.default_rng(args.seed)
    artifacts["images"].mkdir(exist_ok=True)
    rows, tiles = [], [[im] for im in images]
    for k in range(args.samples):
        batch = make_mask(task, rng, S, config.image_size, config.image_size, len(images))
        done = complete(gen, batch.mask * images)
        for i, (c, t, m) in enumerate(zip(done, images, batch.mask)):
            r = evaluate_completion(c[None], t[None], m[None])
            rows.append((i, k, f"{r.psnr_full:.4f}", f"{r.psnr_masked_region:.4f}", f"{r.ssim:.6f}"))
            tiles[i].append(c)
            write_png_grid(c[None], 1, artifacts["images"] / f"image{i:03d}_sample{k}.png")
    header = ("image", "sample", "psnr", "psnr_masked", "ssim")
    _write_csv(artifacts["metrics"], header, rows)
    write_png_grid(np.stack([t for row in tiles for t in row]), args.samples + 1,
                   artifacts["grid"], pad=1)
    print(_table(header, rows))
    return EXIT_OK


def cmd_resample(args) -> int:
    if args.steps < 1:
        raise ConfigError("--steps must be at least 1")
    out = Path(args.out)
    artifacts = {"grid": out / "resample.png"}
    _start(args, "resample", args.seed, _args_config(args), artifacts)
    gen, config = load_generator(args.checkpoint)
    task, S = _task_and_ratio(args, config)
    x = _input_images(args, config.image_size)
    rng = np.random.default_rng(args.seed)
    sequence = [x]
    for _ in range(args.steps):
        batch = make_mask(task, rng, S, config.image_size, config.image_size, len(x))
        x = complete(gen, batch.mask * x)
        sequence.append(x)
    tiles = np.stack(sequence, axis=1)
    write_png_grid(tiles.reshape(-1, *tiles.shape[2:]), args.steps + 1, artifacts["grid"], pad=1)
    print(f"wrote {tiles.shape[0]} sequences of {args.steps + 1} images to {artifacts['grid']}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval

def occlusion_report(gen, images: np.ndarray) -> list[tuple[str, float, float]]:
    """Whole-image pSNR and SSIM of completions under each occlusion template."""
    n, _, h, w = images.shape
    rows = []
    for name in OCCLUSIONS:
        mask = occlusion_template(name, w, h, n).mask
        done = complete(gen, mask * images)
        rows.append((name, float(np.mean([psnr(c, t) for c, t in zip(done, images)])),
                     float(np.mean([ssim(c, t) for c, t in zip(done, images)]))))
    return rows


def task_matrix(models, images_for, tasks, S, seed: int):
    """``(train_task, test_task, psnr, ssim)`` for every model and test task."""
    rows = []
    for label, gen, config in models:
        images = images_for(config.image_size)
        ratio = S if S is not None else config.s
        for test in tasks:
            rng = np.random.default_rng(seed)
            batch = make_mask(test, rng, ratio, config.image_size, config.image_size, len(images))
            done = complete(gen, batch.mask * images)
            r = evaluate_completion(done, images, batch.mask)
            rows.append((label, test, r.psnr_full, r.ssim))
    return rows


def cmd_eval(args) -> int:
    out = Path(args.out)
    artifacts = {"report": out / "report.csv", "table": out / "report.txt"}
    _start(args, "eval", args.seed, _args_config(args), artifacts)
    for p in args.checkpoint:
        if not Path(p).is_file():
            raise CheckpointError(f"checkpoint not found: {p}")
    if args.protocol == "occlusions":
        if len(args.checkpoint) != 1:
            raise ConfigError("the occlusions protocol evaluates exactly one checkpoint")
        gen, config = load_generator(args.checkpoint[0])
        rows = occlusion_report(gen, _input_images(args, config.image_size))
        header = ("occlusion", "psnr", "ssim")
        body = [(name, f"{p:.4f}", f"{s:.6f}") for name, p, s in rows]
        _write_csv(artifacts["report"], header, body)
        table = _table(header, body)
    else:
        tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
        for t in tasks:
            parse_task(t)
        models = []
        for p in args.checkpoint:
            gen, config = load_generator(p)
            label = config.task if args.label_by_task else Path(p).stem
            models.append((label, gen, config))
        rows = task_matrix(models, lambda size: _input_images(args, size), tasks, args.s, args.seed)
        header = ("train_task", "test_task", "psnr", "ssim")
        _write_csv(artifacts["report"], header,
                   [(a, b, f"{p:.4f}", f"{s:.6f}") for a, b, p, s in rows])
        cells = {(a, b): f"{p:.2f}/{s:.3f}" for a, b, p, s in rows}
        labels = list(dict.fromkeys(a for a, *_ in rows))
        table = _table(("train \\ test", *tasks), [(a, *(cells[a, t] for t in tasks)) for a in labels])
    artifacts["table"].write_text(table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- mask-stats

def cmd_mask_stats(args) -> int:
    task = args.task
    if args.k is not None:
        if parse_task(task)[0] != "col":
            raise ConfigError("--k applies only to the col task")
        task = f"col{args.k}"
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    out = Path(args.out)
    artifacts = {"report": out / "mask_stats.csv"}
    _start(args, "mask-stats", args.seed, _args_config(args), artifacts)
    stats = mask_statistics(task, np.random.default_rng(args.seed), args.s, args.size,
                            args.size, args.n)
    a_drop, a_corr = analytic_stats(task, args.s)
    header = ("quantity", "empirical", "analytic")
    body = [("dropped", f"{stats.dropped:.6f}", f"{a_drop:.6f}"),
            ("corrupted", f"{stats.corrupted:.6f}", f"{a_corr:.6f}"),
            ("masked_entries", f"{stats.masked_entries:.6f}", "")]
    _write_csv(artifacts["report"], header, body)
    print(f"task={task} S={args.s} size={args.size}x{args.size} n={args.n}")
    print(_table(header, body))
    return EXIT_OK


# ----------------------------------------------------------------- grad-check

def cmd_grad_check(args) -> int:
    names = [n.strip() for n in args.cases.split(",")] if args.cases else case_names()
    unknown = set(names) - set(case_names())
    if unknown:
        raise ConfigError(f"unknown grad-check cases: {', '.join(sorted(unknown))}")
    out = Path(args.out)
    artifacts = {"report": out / "grad_check.csv"}
    _start(args, "grad-check", 0, _args_config(args), artifacts)
    results = run_suite(names, tolerance=args.tolerance, step=args.step,
                        max_entries=args.max_entries)
    header = ("case", "status", "max_rel_error", "entries", "shrunk", "seconds")
    body = [(r.name, "PASS" if r.passed else "FAIL", f"{r.report.max_error:.3e}",
             sum(r.report.checked.values()), sum(r.report.shrunk.values()), f"{r.seconds:.2f}")
            for r in results]
    _write_csv(artifacts["report"], header, body)
    print(_table(header, body))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name}: {', '.join(r.report.failures())}", file=sys.stderr)
    if failed:
        raise VerificationFailed(f"{len(failed)} of {len(results)} cases failed")
    print(f"all {len(results)} cases passed at tolerance {args.tolerance:g}")
    return EXIT_OK


# --------------------------------------------------------------------- replay

def cmd_replay(args) -> int:
    manifest = RunManifest.load(args.manifest)
    argv = list(manifest.argv)
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


# --------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--out", default=str(Path("runs") / name),
                   help="output directory (default: runs/%(prog)s)")


def _inputs(p: argparse.ArgumentParser, many_checkpoints: bool = False) -> None:
    p.add_argument("--checkpoint", required=True, nargs="+" if many_checkpoints else None)
    p.add_argument("--input", help="a PNG file or a manifest listing PNG paths")
    p.add_argument("--synthetic", default="blobs", choices=SYNTHETIC_KINDS,
                   help="synthetic source used when --input is absent")
    p.add_argument("--n", type=int, default=8, help="number of synthetic images")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--resize", action="store_true", help="rescale inputs to the model size")
    p.add_argument("--task", choices=TASKS, help="mask family (default: the training task)")
    p.add_argument("--s", type=float, help="masking ratio (default: the training ratio)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mde", description="Missing Data Encoder toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    _common(p, "train")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--hns", choices=("auto", "on", "off"),
                   help="hide-and-seek term; auto enables it for re and rec")
    for f in fields(TrainConfig):
        if f.name == "use_hns":
            continue
        p.add_argument(_flag(f.name), dest=f.name, default=None,
                       type=lambda text, key=f.name: coerce(key, text),
                       help=f"default: {f.default}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", help="complete masked images with a trained generator")
    _common(p, "complete")
    _inputs(p)
    p.add_argument("--samples", type=int, default=1, help="independent masks per input")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("resample", help="iteratively re-mask and complete")
    _common(p, "resample")
    _inputs(p)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("eval", help="task-matrix or occlusion evaluation")
    _common(p, "eval")
    _inputs(p, many_checkpoints=True)
    p.add_argument("--protocol", choices=("task-matrix", "occlusions"), required=True)
    p.add_argument("--tasks", default=",".join(MATRIX_TASKS), help="test tasks for task-matrix")
    p.add_argument("--label-by-task", action="store_true",
                   help="label matrix rows by training task instead of checkpoint name")
    p.set_defaults(func=cmd_eval, n=64)

    p = sub.add_parser("mask-stats", help="empirical and analytic corruption fractions")
    _common(p, "mask-stats")
    p.add_argument("--task", default="rec", choices=TASKS)
    p.add_argument("--s", type=float, default=0.1)
    p.add_argument("--k", type=int, choices=(1, 2), help="visible channels for col")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask_stats)

    p = sub.add_parser("grad-check", help="finite-difference check of every primitive and loss")
    _common(p, "grad-check")
    p.add_argument("--cases", help="comma-separated subset of cases")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=12,
                   help="coordinates checked per parameter")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory for the re-run")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    # the manifest records the command line without the output directory so
    # a replay can redirect it
    args.argv = _strip_out(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (TrainingError, CheckpointError, ParseError, MetricError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


if __name__ == "__main__":
    sys.exit(main())
