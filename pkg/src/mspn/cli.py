"""Command-line entry point: ``mspn <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure, 4 a check exceeded its threshold.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checks, datagen, io
from .engine import ParamSet
from .engine.params import atomic_write_bytes
from .errors import ConfigError, ContractError, DataError, MspnError, NumericError
from .objectives import compute_metrics
from .pipeline import init_params, refine
from .trainer import MDE_SEED_OFFSET, evaluate_holefill, evaluate_sweep, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3, 4

log = logging.getLogger("mspn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _config(args) -> io.RunConfig:
    return io.load_config(args.config) if args.config else io.RunConfig()


def _params(cfg: io.RunConfig, override: str | None) -> ParamSet:
    path = override or cfg.paths.get("params")
    if path is None:
        raise ConfigError("no parameters given (set paths.params in the config or pass --params)")
    return ParamSet.load(path)


def _output_dir(cfg: io.RunConfig, override: str | None) -> Path:
    out = override or cfg.paths.get("output_dir")
    if out is None:
        raise ConfigError("no output directory given (set paths.output_dir or pass --out)")
    return io.ensure_dir(out)


def cmd_synth(args) -> int:
    out = io.ensure_dir(args.out)
    for i in range(args.n):
        seed = args.seed + i
        scene = datagen.gen_scene(seed, args.h, args.w, args.complexity)
        d0 = datagen.simulate_mde(scene.gt_depth, seed + MDE_SEED_OFFSET, args.severity)
        spec = datagen.SamplerSpec(kind=args.sampler, s=args.s, n_lines=args.lines, seed=seed)
        sparse, _ = datagen.apply_sampler(scene.gt_depth, spec)
        scene_dir = io.ensure_dir(out / f"scene_{i:04d}")
        io.write_pfm(scene_dir / "image.pfm", scene.image)
        io.write_pfm(scene_dir / "gt.pfm", scene.gt_depth)
        io.write_pfm(scene_dir / "init_depth.pfm", d0)
        io.write_sparse_csv(scene_dir / "sparse.csv", sparse)
    print(f"wrote {args.n} scene(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _output_dir(cfg, args.out)
    params = init_params(cfg.model, seed=cfg.seed)
    result = train(
        cfg.train,
        cfg.model,
        params=params,
        resume_from=args.resume,
        checkpoint_dir=out / "checkpoint",
    )
    result.params.save(out / "params.bin")
    atomic_write_bytes(out / "loss_log.csv", result.log_csv().encode())
    for epoch, loss in enumerate(result.epoch_losses):
        print(f"epoch {epoch} mean loss {loss!r}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _config(args)
    params = _params(cfg, args.params)
    image_path = args.image or cfg.paths.get("image")
    sparse_path = args.sparse or cfg.paths.get("sparse")
    init_path = args.init_depth or cfg.paths.get("init_depth")
    if image_path is None or sparse_path is None:
        raise ConfigError("refine needs --image and --sparse")
    image = io.read_pfm(image_path)
    if image.ndim != 3:
        raise DataError(f"{image_path}: expected a three-channel image")
    sparse = io.read_sparse_csv(sparse_path, image.shape[1:])
    if cfg.mode == "ordinary":
        d0 = None
    else:
        if init_path is None:
            raise ConfigError(f"mode '{cfg.mode}' needs --init-depth")
        d0 = io.read_pfm(init_path)
    pred, diag = refine(image, sparse, d0, params, cfg.refine, cfg.model.guidance)
    for warning in diag.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    out = Path(args.out)
    io.write_pfm(out, pred.data)
    report = {
        "schedule": None if diag.schedule is None else dataclasses.asdict(diag.schedule),
        "coverage": diag.coverage,
        "warnings": diag.warnings,
    }
    gt_path = args.gt or cfg.paths.get("gt")
    if gt_path is not None:
        gt = io.read_pfm(gt_path)
        report["metrics"] = compute_metrics(pred.data, gt, cfg.units).as_dict()
        if args.error_map:
            io.write_error_map(args.error_map, pred.data, gt)
    elif args.error_map:
        raise ConfigError("--error-map needs ground truth (--gt)")
    atomic_write_bytes(out.with_suffix(".json"), (json.dumps(report, indent=2) + "\n").encode())
    return EXIT_OK


def _parse_levels(text: str) -> list[int]:
    try:
        levels = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"levels must be comma-separated integers, got '{text}'") from None
    if not levels or any(v < 0 for v in levels):
        raise ConfigError(f"levels must be non-negative integers, got '{text}'")
    return levels


def cmd_sweep(args) -> int:
    cfg = _config(args)
    levels = _parse_levels(args.levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"sparsity levels must be strictly increasing, got {levels}")
    params = _params(cfg, args.params)
    if cfg.mode == "holefill":
        result = evaluate_holefill(params, args.scenes, cfg.seed, cfg.train, cfg.model, cfg.units)
        text = (
            f"hole rmse model {result.model.rmse!r} baseline {result.baseline.rmse!r} "
            f"wins {result.wins}/{len(result.model_rmse)}\n"
        )
        table = None
    else:
        result = evaluate_sweep(params, levels, args.scenes, cfg.seed, cfg.train, cfg.model, cfg.refine, cfg.units)
        text, table = result.table(), result.csv()
    sys.stdout.write(text)
    out = args.out or cfg.paths.get("output_dir")
    if out is not None:
        out = io.ensure_dir(out)
        atomic_write_bytes(out / "sweep.txt", text.encode())
        if table is not None:
            atomic_write_bytes(out / "sweep.csv", table.encode())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.gradcheck_components(args.scale, seed=args.seed)
    failed = False
    for name, err in results.items():
        ok = err < checks.GRADCHECK_THRESHOLD
        failed |= not ok
        print(f"{name:16s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_THRESHOLD if failed else EXIT_OK


def cmd_selftest(args) -> int:
    failed = False
    for name, (value, ok) in checks.selftest(seed=args.seed).items():
        failed |= not ok
        print(f"{name:28s} {value:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_THRESHOLD if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mspn", description="Sparsity-adaptive depth refinement with masked spatial propagation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic scene fixtures")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--complexity", type=int, default=2)
    p.add_argument("--severity", type=float, default=1.0)
    p.add_argument("--sampler", choices=("points", "lines", "hole"), default="points")
    p.add_argument("--s", type=int, default=50, help="number of sparse points")
    p.add_argument("--lines", type=int, default=4, help="number of scan lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint and loss log")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine one depth map")
    p.add_argument("--config")
    p.add_argument("--params")
    p.add_argument("--image")
    p.add_argument("--sparse")
    p.add_argument("--init-depth")
    p.add_argument("--gt")
    p.add_argument("--error-map", help="PNG path for a grayscale error image (needs --gt)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sweep", help="evaluate over sparsity levels")
    p.add_argument("--config")
    p.add_argument("--params")
    p.add_argument("--levels", default="10,50,100,500")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="compare tape gradients to finite differences")
    p.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="oracle, dilation and normalization checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, MspnError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
