"""Command-line front end: ``textdet <command> [options]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, failed
check), 2 I/O error (missing or unreadable files).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .anchors import format_anchor_dump, generate_default_boxes
from .config import ConfigError, DetectorConfig, load_config
from .geometry import Detection, read_boxes, write_boxes
from .weights import WeightFileError

log = logging.getLogger("textdet")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textdet", description="Single-shot oriented word detector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--rotation", type=float, default=None, help="max |theta| in radians")
    _add_seed(p)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default="desk", help="builtin name (desk, full, tiny) or JSON path")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--no-attention", action="store_true", help="train the attention-free baseline")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    _add_seed(p)

    p = sub.add_parser("detect", help="detect words in PPM images")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--config", default=None, help="defaults to WEIGHTS.config.json, then desk")
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory (default: next to each image)")
    p.add_argument("--emit-attention", action="store_true", help="also write the text attention map as PGM")
    p.add_argument("--emit-overlay", action="store_true", help="also write a PNG overlay")
    _add_seed(p)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--det", required=True, help="directory of NNNN.det.txt files")
    p.add_argument("--gt", required=True, help="directory of NNNN.boxes.txt files")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--rotated-iou", action="store_true", help="match with oriented-polygon IoU")
    p.add_argument("--report", default=None, help="per-image CSV; a PNG figure is written beside it")
    _add_seed(p)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per check")
    _add_seed(p)

    p = sub.add_parser("anchors", help="dump the default boxes of a config")
    p.add_argument("--config", default="full")
    p.add_argument("--summary", action="store_true", help="layer headers only")
    _add_seed(p)
    return parser


def _config(name) -> DetectorConfig:
    return load_config(name)


def cmd_gen_data(args) -> int:
    from .scene import SceneConfig, generate_scenes, write_dataset

    if args.count < 1 or args.size < 16:
        raise ConfigError("--count must be >= 1 and --size >= 16")
    kw = {"size": args.size}
    if args.rotation is not None:
        kw["rotation"] = args.rotation
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    stems = write_dataset(args.out, generate_scenes(seeds, SceneConfig(**kw)))
    print(f"wrote {len(stems)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .detector import Trainer
    from .plots import plot_loss, write_loss_csv
    from .scene import read_dataset
    from .weights import save_weights

    cfg = _config(args.config)
    changes = {}
    if args.no_attention:
        changes["attention.enabled"] = False
    if args.no_augment:
        changes["augment.enabled"] = False
    if changes:
        cfg = cfg.replace(**changes)
    if args.steps < 1:
        raise ConfigError("--steps must be positive")
    samples = read_dataset(args.data)
    bad = [s.name for s in samples if s.size != cfg.input_size]
    if bad:
        raise ConfigError(f"images {bad[:3]} do not match the config input size {cfg.input_size}")
    trainer = Trainer(cfg, samples, seed=args.seed)
    for _ in trainer.run(args.steps, log_every=args.log_every):
        pass
    out = Path(args.out)
    save_weights(trainer.params, out)
    cfg.save(f"{out}.config.json")
    csv_path = out.with_suffix(".loss.csv")
    write_loss_csv(csv_path, trainer.history)
    plot_loss(trainer.history, csv_path.with_suffix(".png"))
    last = trainer.history[-1]
    print(f"step {last.step + 1} loss {last.total:.4f} -> {out}")
    return EXIT_OK


def _stem(path: Path) -> str:
    return path.name[:-4] if path.name.endswith(".ppm") else path.stem


def cmd_detect(args) -> int:
    from .detector import check_params, detect, init_params_shapes
    from .scene import read_ppm, write_pgm
    from .weights import load_weights

    weights = Path(args.weights)
    if args.config:
        cfg = _config(args.config)
    elif Path(f"{weights}.config.json").exists():
        cfg = _config(f"{weights}.config.json")
    else:
        cfg = _config("desk")
    for name, v in (("--conf", args.conf), ("--nms", args.nms)):
        if v is not None and not 0.0 < v < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1)")
    params = load_weights(weights, template={k: np.empty(s) for k, s in init_params_shapes(cfg).items()})
    params = params.astype(cfg.dtype)
    check_params(params, cfg)
    anchors = generate_default_boxes(cfg.anchor_specs(), cfg.input_size)
    for img_path in map(Path, args.image):
        image = read_ppm(img_path)
        if image.shape[1:] != (cfg.input_size, cfg.input_size):
            raise ConfigError(f"{img_path}: image is {image.shape[2]}x{image.shape[1]}, config expects {cfg.input_size}")
        dets, alpha = detect(image, params, cfg, args.conf, args.nms, anchors=anchors, return_attention=True)
        out_dir = Path(args.out) if args.out else img_path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = out_dir / _stem(img_path)
        write_boxes(f"{stem}.det.txt", dets)
        if args.emit_attention:
            if alpha is None:
                raise ConfigError("--emit-attention needs a config with attention enabled")
            write_pgm(f"{stem}.attention.pgm", alpha * 255.0)
        if args.emit_overlay:
            from .plots import plot_detections

            plot_detections(image, dets, f"{stem}.overlay.png", attention=alpha if args.emit_attention else None)
        print(f"{img_path}: {len(dets)} detections -> {stem}.det.txt")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_detections, write_report

    if not 0.0 < args.iou < 1.0:
        raise ConfigError("--iou must lie in (0, 1)")
    gt_dir, det_dir = Path(args.gt), Path(args.det)
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"ground-truth directory {gt_dir} not found")
    if not det_dir.is_dir():
        raise FileNotFoundError(f"detection directory {det_dir} not found")
    stems = sorted(p.name[: -len(".boxes.txt")] for p in gt_dir.glob("*.boxes.txt"))
    if not stems:
        raise FileNotFoundError(f"no .boxes.txt files in {gt_dir}")
    gts, dets = [], []
    for stem in stems:
        gts.append([b for b, _ in read_boxes(gt_dir / f"{stem}.boxes.txt")])
        det_path = det_dir / f"{stem}.det.txt"
        rows = read_boxes(det_path) if det_path.exists() else []
        dets.append([Detection(b, 1.0 if s is None else s) for b, s in rows])
    report = evaluate_detections(dets, gts, args.iou, rotated=args.rotated_iou)
    print(report.line())
    if args.report:
        from .plots import plot_eval

        write_report(args.report, report, stems)
        plot_eval(report, Path(args.report).with_suffix(".png"), stems)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    if args.seeds < 1:
        raise ConfigError("--seeds must be positive")
    results = run_suite(range(args.seed, args.seed + args.seeds))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    ok = all(r.passed for r in results)
    tol = {r.name: r.tolerance for r in results}
    for name, err in worst.items():
        print(f"{'PASS' if err < tol[name] else 'FAIL'} {name:24s} max rel err {err:.3e} (tol {tol[name]:g})")
    print("all checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_anchors(args) -> int:
    cfg = _config(args.config)
    specs = cfg.anchor_specs()
    sys.stdout.write(format_anchor_dump(generate_default_boxes(specs, cfg.input_size), specs, summary=args.summary))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "anchors": cmd_anchors,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, WeightFileError) as exc:
        print(f"textdet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"textdet: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
