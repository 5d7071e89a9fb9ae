"""Command-line interface.

Exit codes: 0 ok, 1 generic failure, 2 model problem, 3 input problem,
4 no face found, 5 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import fixtures
from .bench import (PRECISIONS, emit_report, format_report, load_detection_set, load_ground_truth,
                    pr_curve)
from .config import Config, load_config
from .detect import detections_to_json
from .errors import ConfigError, FacepipeError, InvalidInputError, NoFaceError
from .imageio import read_image, write_image
from .infer import calibrate, quantize_model, write_model
from .pipeline import (FacePipeline, bench_detect, bench_embed, bench_pipeline,
                       load_or_fixture)
from .recognize import Gallery
from .tensor import letterbox, normalize_to_tensor

log = logging.getLogger("facepipe")

EXIT_OK, EXIT_GENERIC, EXIT_MODEL, EXIT_INPUT, EXIT_NO_FACE, EXIT_USAGE = range(6)


class UsageError(ConfigError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_faces(text: str) -> List[int]:
    """'4' -> [4]; '1..5' -> [1..5]; '1,2,4' -> [1, 2, 4]."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            if hi < lo:
                raise ValueError
            counts = list(range(lo, hi + 1))
        else:
            counts = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad face count spec {text!r}")
    if any(k < 0 for k in counts):
        raise argparse.ArgumentTypeError("face counts must be non-negative")
    return counts


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _model_flags(p, detector=True, embedder=True):
    p.add_argument("--config", help="INI config file; flags override it")
    if detector:
        p.add_argument("--conf", type=float, help="detection confidence threshold")
        p.add_argument("--iou", type=float, help="NMS IoU threshold")
    if embedder:
        p.add_argument("--det-model", help="detector FTM file (default: built-in fixture)")
        p.add_argument("--embed-model", help="embedder FTM file (default: built-in fixture)")
        p.add_argument("--precision", choices=PRECISIONS)
        p.add_argument("--no-align", action="store_true",
                       help="feed stretched box crops instead of aligned faces")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="facepipe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="detect faces and write Detection JSON")
    p.add_argument("--model", action="append",
                   help="detector head FTM file; repeat for multi-head detectors")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output JSON path (default: stdout)")
    p.add_argument("--dump-aligned", metavar="DIR", help="also write aligned 112x112 crops")
    _model_flags(p, embedder=False)

    p = sub.add_parser("enroll", help="enroll the top-scoring face of an image")
    p.add_argument("--gallery", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--name")
    p.add_argument("--input", required=True)
    _model_flags(p)

    p = sub.add_parser("identify", help="identify every face in an image")
    p.add_argument("--gallery", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float)
    _model_flags(p)

    p = sub.add_parser("remove", help="remove an identity from a gallery")
    p.add_argument("--gallery", required=True)
    p.add_argument("--id", required=True)

    p = sub.add_parser("bench", help="latency/FPS benchmark on synthetic frames")
    p.add_argument("--mode", choices=("detect", "embed", "pipeline"), default="embed")
    p.add_argument("--faces", type=parse_faces, default=[1], help="K, LO..HI, or a,b,c")
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--report", help="report path (default: stdout, CSV)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figure next to --report")
    _model_flags(p)

    p = sub.add_parser("eval-ap", help="average precision of detections against ground truth")
    p.add_argument("--detections", required=True, nargs="+", help="Detection JSON file(s)")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--difficulty", choices=("easy", "hard", "all"), default="all")
    p.add_argument("--plot", help="write the PR curve to this PNG")

    p = sub.add_parser("quantize", help="calibrate and write an int8 copy of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calib", nargs="*", default=[],
                   help="calibration images (default: synthetic aligned faces)")

    p = sub.add_parser("fixtures", help="write fixture models, frames, and ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=640)
    return parser


# ----------------------------------------------------------------------------
# config assembly
# ----------------------------------------------------------------------------

def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    cfg = cfg.override("detector", conf_thresh=getattr(args, "conf", None),
                       iou_thresh=getattr(args, "iou", None) if args.command != "eval-ap" else None,
                       model_path=getattr(args, "det_model", None))
    align = False if getattr(args, "no_align", False) else None
    cfg = cfg.override("embedder", model_path=getattr(args, "embed_model", None),
                       precision=getattr(args, "precision", None), align=align)
    cfg = cfg.override("verify", threshold=getattr(args, "threshold", None))
    cfg = cfg.override("bench", frames=getattr(args, "frames", None),
                       warmup=getattr(args, "warmup", None))
    return cfg.validate()


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True)


def _write_text(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text + "\n")
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_detect(args) -> int:
    cfg = _config(args)
    paths = args.model or [None]
    heads = [load_or_fixture(p, "detector", cfg) for p in paths]
    img = read_image(args.input)
    pipe = FacePipeline(heads if len(heads) > 1 else heads[0], None, cfg)
    dets = pipe.detect(img)
    _write_text(args.out, _dumps(detections_to_json(dets, args.input, img.width, img.height)))
    if args.dump_aligned:
        out_dir = Path(args.dump_aligned)
        suffix = ".png" if _have_pillow() else ".ppm"
        for k, det in enumerate(dets):
            write_image(pipe.crop(img, det), out_dir / f"{Path(args.input).stem}_face{k}{suffix}")
    return EXIT_OK


def _have_pillow() -> bool:
    try:
        import PIL  # noqa: F401
    except ImportError:
        return False
    return True


def _load_gallery(path) -> Gallery:
    if not Path(path).exists():
        return Gallery()
    try:
        return Gallery.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"cannot read gallery {path}: {exc}") from exc


def cmd_enroll(args) -> int:
    cfg = _config(args)
    pipe = FacePipeline.from_config(cfg)
    img = read_image(args.input)
    gallery = _load_gallery(args.gallery)
    dets = pipe.detect(img)
    if not dets:
        raise NoFaceError("no face found")
    if len(dets) > 1:
        log.warning("%d faces found; enrolling the highest-scoring one", len(dets))
    top = dets[0]  # NMS output is already in rank order
    emb = pipe.embed(pipe.crop(img, top))
    gallery = gallery.enroll(args.id, args.name or args.id, emb)
    gallery.save(args.gallery)
    sys.stdout.write(_dumps({"id": args.id, "box": list(top.box), "score": top.score,
                             "embeddings": len(gallery.get(args.id).embeddings)}) + "\n")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _config(args)
    pipe = FacePipeline.from_config(cfg)
    img = read_image(args.input)
    gallery = _load_gallery(args.gallery)
    results = pipe.process(img, gallery)
    if not results:
        raise NoFaceError("no face found")
    for k, (det, match) in enumerate(results):
        doc = {"face": k, "box": list(det.box), "score": det.score}
        doc.update(match.to_json())
        sys.stdout.write(_dumps(doc) + "\n")
    return EXIT_OK


def cmd_remove(args) -> int:
    gallery = _load_gallery(args.gallery).remove(args.id)
    gallery.save(args.gallery)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.report is None and not args.no_plot:
        args.no_plot = True
    pipe = FacePipeline.from_config(cfg)
    frames, warmup = cfg.bench.frames, cfg.bench.warmup
    if args.mode == "embed":
        reports = bench_embed(pipe, args.faces, frames, warmup)
    elif args.mode == "detect":
        reports = [bench_detect(pipe, k, frames, warmup, cfg.embedder.precision)
                   for k in args.faces]
    else:
        reports = [bench_pipeline(pipe, k, frames, warmup) for k in args.faces]
    if args.report is None:
        sys.stdout.write(format_report(reports, args.format))
        return EXIT_OK
    emit_report(reports, args.format, args.report)
    if not args.no_plot:
        from .plotting import figure_path, plot_sweep
        plot_sweep(reports, figure_path(args.report),
                   title=f"{args.mode} latency and throughput")
    return EXIT_OK


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {what} {path}: {exc}") from exc


def _match_image_keys(dets, gt):
    """Detection files record the path given to ``detect``; ground truth
    usually names bare files. Keys without an exact match fall back to their
    file name when that is unambiguous."""
    by_name = {}
    for key in gt:
        by_name.setdefault(Path(key).name, []).append(key)
    out = {}
    for img, items in dets.items():
        key = img
        if img not in gt and len(by_name.get(Path(img).name, [])) == 1:
            key = by_name[Path(img).name][0]
        out.setdefault(key, []).extend(items)
    return out


def cmd_eval_ap(args) -> int:
    if not 0.0 < args.iou < 1.0:
        raise UsageError("--iou must lie in (0, 1)")
    gt_doc = _read_json(args.ground_truth, "ground truth")
    det_docs = [_read_json(p, "detections") for p in args.detections]
    dets = {}
    for doc in det_docs:
        for img, items in load_detection_set(doc).items():
            dets.setdefault(img, []).extend(items)
    counted, ignored = load_ground_truth(gt_doc, args.difficulty)
    dets = _match_image_keys(dets, counted)
    curve = pr_curve(dets, counted, args.iou, ignored)
    sys.stdout.write(_dumps({"ap": curve.ap}) + "\n")
    if args.plot:
        from .plotting import plot_pr
        plot_pr(curve, args.plot, label=args.difficulty)
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = load_or_fixture(args.model, "embedder", Config())
    if args.calib:
        _, _, h, w = model.input_shape
        samples = [normalize_to_tensor(letterbox(read_image(p), w, h)[0]) for p in args.calib]
    elif model.input_shape[2:] == (112, 112):
        samples = [normalize_to_tensor(f) for f in
                   fixtures.aligned_faces(16, start=fixtures.REFERENCE_IDENTITIES + 1000)]
    else:
        size = model.input_shape[2]
        samples = [normalize_to_tensor(fixtures.synthetic_frame(k, size)[0]) for k in range(1, 5)]
    write_model(quantize_model(model, calibrate(model, samples)), args.out)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    if args.size <= 0 or args.size % 32:
        raise UsageError("--size must be a positive multiple of 32")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det = fixtures.make_detector(args.size)
    emb = fixtures.make_embedder()
    write_model(det, out / "detector.ftm")
    write_model(emb, out / "embedder.ftm")
    write_model(fixtures.calibrated_embedder(emb), out / "embedder_i8.ftm")
    images = []
    for k in (1, 3, 5):
        img, boxes = fixtures.synthetic_frame(k, args.size, identities=range(10 * k, 11 * k))
        name = f"frame_{k}faces.ppm"
        write_image(img, out / name)
        images.append({"image": name, "boxes": [list(b) for b in boxes],
                       "difficulty": ["easy"] * len(boxes)})
    write_image(fixtures.synthetic_frame(0, args.size)[0], out / "blank.ppm")
    (out / "ground_truth.json").write_text(_dumps({"images": images}) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "detect": cmd_detect,
    "enroll": cmd_enroll,
    "identify": cmd_identify,
    "remove": cmd_remove,
    "bench": cmd_bench,
    "eval-ap": cmd_eval_ap,
    "quantize": cmd_quantize,
    "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FacepipeError as exc:
        sys.stderr.write(f"facepipe {args.command}: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"facepipe {args.command}: {exc}\n")
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
