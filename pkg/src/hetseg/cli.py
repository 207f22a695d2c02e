"""Command-line entry point: ``hetseg <command> [options]``.

Exit status is 0 on success, 2 for invalid configs or arguments and 1 for
failures while running.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import analysis, metrics, pipeline, pnm
from .exceptions import ConfigError, HsegError, MetricError, SpecError
from .zoo import ModelConfig, build_model, load_weights, save_weights

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _read_model(path) -> ModelConfig:
    return ModelConfig.from_dict(_read_json(path))


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _scenario(spec: str):
    """A path, or the name of a shipped scenario (``m1_vs_m4``)."""
    if os.path.exists(spec):
        return pipeline.read_scenario(spec)
    name = Path(spec).stem
    try:
        return pipeline.shipped_scenario(name)
    except FileNotFoundError:
        raise ConfigError(f"no scenario file or shipped scenario named {spec!r}") from None


def _suite(spec: str | None):
    if spec is None or not os.path.exists(spec):
        from importlib.resources import files

        name = Path(spec or "table1.json").stem
        res = files("hetseg").joinpath("data", f"{name}.json")
        if not res.is_file():
            raise ConfigError(f"no suite file or shipped suite named {spec!r}")
        return analysis.load_suite(json.loads(res.read_text()))
    return analysis.load_suite(_read_json(spec))


# ---------------------------------------------------------------------------
# commands


def cmd_build(args) -> int:
    cfg = _read_model(args.model)
    if args.seed is not None:
        cfg = ModelConfig(**{**cfg.to_dict(), "seed": args.seed})
    g = build_model(cfg)
    if args.weights:
        with open(args.weights, "wb") as fh:
            save_weights(g.weights, fh)
    _emit(g.summary(), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _read_model(args.model)
    if args.resolution is not None:
        cfg = ModelConfig(**{**cfg.to_dict(), "resolution": args.resolution})
    report = analysis.analyze(build_model(cfg, with_weights=False), cfg.resolution)
    _emit(report.to_csv() + analysis.FOOTER, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    _emit(analysis.ablation_report(_suite(args.suite), args.format), args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import segment

    cfg = _read_model(args.model)
    with open(args.weights, "rb") as fh:
        weights = load_weights(fh)
    img = pnm.read(args.input)
    prob = segment(cfg, weights, img, layout=args.layout, fuse=args.fuse)
    pnm.write(args.out, pnm.mask_to_u8(prob))
    return EXIT_OK


def _mask_files(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() == ".pgm"}


def cmd_eval(args) -> int:
    preds, gts = _mask_files(args.pred), _mask_files(args.gt)
    if not gts:
        raise ConfigError(f"no .pgm ground-truth masks in {args.gt}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ConfigError(f"no prediction for {len(missing)} ground-truth masks, e.g. {missing[0]!r}")
    names = sorted(gts)
    pairs = [(pnm.read_mask(preds[n]), pnm.read_mask(gts[n], binary=True)) for n in names]
    report = metrics.evaluate(pairs, names, threshold=args.threshold, tolerance_px=args.tolerance)
    _emit(report.to_text(), args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    sc = _scenario(args.scenario)
    if args.sweep:
        if len(sc.configs) != 1 and not args.config:
            raise ConfigError("--sweep on a multi-config scenario needs --config NAME")
        cfg = sc.by_name(args.config) if args.config else sc.configs[0]
        values = [v for v in (args.values or "").split(",") if v]
        if not values:
            raise ConfigError("--sweep needs --values a,b,...")
        table = pipeline.sweep(cfg, args.sweep, values)
    elif len(sc.configs) == 1:
        r = pipeline.simulate(sc.configs[0], args.n_frames)
        header = ["config", *pipeline.REPORT_COLUMNS]
        table = pipeline.Table(header, [[r.name or "config", *pipeline._report_cells(r)]])
    else:
        table = pipeline.compare(sc.configs, args.n_frames)
    text = table.to_csv() if args.format == "csv" else table.to_text()
    if sc.comment and args.format == "text":
        text += f"# {sc.comment}\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .training import train_toy

    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    result = train_toy(steps=args.steps, lr=args.lr, seed=args.seed)
    lines = [f"steps {args.steps}", f"seed {args.seed}",
             f"loss_first {result.losses[0]:.6f}", f"loss_last {result.losses[-1]:.6f}",
             f"miou {result.miou:.6f}"]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, fn, help_, out_help="write the report here instead of stdout", out_required=False):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", help=out_help, required=out_required)
        return p

    p = command("build", cmd_build, "build a model, print its graph summary and save its weights")
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--weights", help="weight file to write")
    p.add_argument("--seed", type=int, help="override the config's seed")

    p = command("analyze", cmd_analyze, "per-node parameter and MAC counts as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", type=int, help="override the config's input resolution")

    p = command("ablate", cmd_ablate, "cost table over a suite of model configs")
    p.add_argument("--suite", help="suite JSON (default: the shipped table1 suite)")
    p.add_argument("--format", choices=("csv", "text"), default="csv")

    p = command("infer", cmd_infer, "segment one PGM/PPM image into a PGM mask",
                out_help="mask PGM to write", out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True, help="8-bit PGM or PPM image")
    p.add_argument("--layout", choices=("reference", "packed"), default="reference")
    p.add_argument("--fuse", action="store_true", help="fuse sibling 1x1 convolutions first")

    p = command("eval", cmd_eval, "mIoU, J mean and F mean over matching PGM masks")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--tolerance", type=int, help="boundary tolerance in pixels")

    p = command("pipeline", cmd_pipeline, "simulate a pipeline scenario")
    p.add_argument("--scenario", default="m1_vs_m4", help="scenario JSON or shipped scenario name")
    p.add_argument("--n-frames", type=int, help="override every config's frame count")
    p.add_argument("--sweep", help="parameter to sweep: " + ", ".join(pipeline.SWEEP_PARAMETERS))
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--config", help="config to sweep in a multi-config scenario")
    p.add_argument("--format", choices=("csv", "text"), default="text")

    p = command("train-toy", cmd_train_toy, "train a pointwise net on synthetic disks")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=2.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, SpecError, MetricError, KeyError, FileNotFoundError) as exc:
        print(f"hetseg {args.command}: error: {_message(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (HsegError, OSError) as exc:
        print(f"hetseg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _message(exc: BaseException) -> str:
    if isinstance(exc, KeyError):
        return f"unknown name {exc.args[0]!r}"
    if isinstance(exc, FileNotFoundError):
        return f"no such file: {exc.filename}"
    return str(exc)


if __name__ == "__main__":
    sys.exit(main())
