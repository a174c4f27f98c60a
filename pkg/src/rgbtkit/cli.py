"""Command-line entry point.

Every subcommand prints its resolved configuration as one canonical JSON
line before doing any work. Exit codes: 0 success, 1 usage error, 2 data
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile

import numpy as np

from . import __version__
from .evaluation import EvalConfig, ShiftSweepConfig, evaluate_modality, shift_sweep, shift_vector
from .feature_mining import ConvWeights, mine_features
from .geometry import BoundingBox
from .homography import augment, translation_homography, warp_image
from .io.formats import image_to_planes, planes_to_image, read_pnm, read_tensor, write_pnm, write_tensor
from .io.records import (DataError, GtRecord, ManifestEntry, ModalityDetections, PairedDetections,
                         canonical, iter_jsonl, parse_paired, read_annotations, read_detections, read_gt, read_manifest,
                         write_jsonl)
from .io.synth import SynthConfig, synth_fixture, write_fixture
from .nms import NmsConfig, decoupled_nms, fuse_group, pairwise_nms
from .pairing import PairingConfig, PersonGroup, mean_pair_shift, pair_annotations

log = logging.getLogger("rgbtkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_levels(text: str) -> tuple[int, ...]:
    """``-10:10`` (inclusive range) or a comma list such as ``-5,0,5``."""
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}, use LO:HI or a comma list") from None


def parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_pair(text: str) -> tuple[float, float]:
    try:
        dx, dy = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DX,DY, got {text!r}") from None
    return (dx, dy)


def _config(cls, *args, **kwargs):
    try:
        return cls(*args, **kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _print_config(command: str, config: dict):
    print(canonical({"command": command, "config": config}))


def _fmt(x: float) -> str:
    return repr(float(x))


# -- subcommands --------------------------------------------------------------

def _pair_files(rgb_path, thermal_path, cfg: PairingConfig, strict: bool) -> list[GtRecord]:
    by_id: dict[str, dict[str, list[BoundingBox]]] = {}
    for path, modality in ((rgb_path, "rgb"), (thermal_path, "thermal")):
        for rec in read_annotations(path, strict=strict):
            if rec.modality != modality:
                raise DataError(f"{path}: record {rec.image_id!r} has modality {rec.modality!r}")
            by_id.setdefault(rec.image_id, {"rgb": [], "thermal": []})[modality].extend(rec.boxes)
    return [GtRecord(i, pair_annotations(v["rgb"], v["thermal"], cfg)) for i, v in by_id.items()]


def _pairing_config(args) -> PairingConfig:
    return _config(PairingConfig, args.cost, args.gate_distance, args.gate_iou)


def cmd_pair_gt(args):
    cfg = _pairing_config(args)
    _print_config("pair-gt", {"rgb": args.rgb, "thermal": args.thermal, "out": args.out,
                              "cost": cfg.cost, "gate_distance": cfg.gate_distance,
                              "gate_iou": cfg.gate_iou})
    records = _pair_files(args.rgb, args.thermal, cfg, args.strict)
    write_jsonl(args.out, records)
    meta = {"cost": cfg.cost, "gate_distance": cfg.gate_distance, "gate_iou": cfg.gate_iou,
            "n_images": len(records),
            "n_paired": sum(g.paired for r in records for g in r.groups),
            "n_unpaired": sum(not g.paired for r in records for g in r.groups)}
    with open(args.out + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical(meta) + "\n")
    print(f"paired={meta['n_paired']} unpaired={meta['n_unpaired']}")


def cmd_nms(args):
    cfg = _config(NmsConfig, args.iou_thr, args.tau, args.score_floor)
    _print_config("nms", {"dets": args.dets, "out": args.out, "mode": args.mode,
                          "iou_threshold": cfg.iou_threshold, "tau": cfg.tau,
                          "score_floor": cfg.score_floor, "enclosing": args.enclosing})
    out = []
    for rec in iter_jsonl(args.dets, parse_paired, strict=args.strict):
        if args.mode == "decoupled":
            rgb, thermal = decoupled_nms(rec.pairs, cfg)
            out.append(ModalityDetections(rec.image_id, "rgb", rgb))
            out.append(ModalityDetections(rec.image_id, "thermal", thermal))
        else:
            kept = pairwise_nms(rec.pairs, cfg)
            enclosing = {}
            if args.enclosing == "geometric":
                enclosing = {p.anchor_id: p.enclosing() for p in kept}
            elif args.enclosing == "fused":
                originals = {p.anchor_id: p for p in rec.pairs}
                enclosing = {p.anchor_id: fuse_group(originals[p.anchor_id], cfg.tau).box for p in kept}
            out.append(PairedDetections(rec.image_id, kept, enclosing))
    write_jsonl(args.out, out)
    print(f"images={len({r.image_id for r in out})} kept="
          f"{sum(len(r.pairs) if isinstance(r, PairedDetections) else len(r.boxes) for r in out)}")


def _eval_config(args) -> EvalConfig:
    return _config(EvalConfig, iou_threshold=args.iou, mr_floor=args.mr_floor, min_height=args.min_height)


def _image_subset(args):
    if args.tag is None:
        return None
    if args.manifest is None:
        raise UsageError("--tag requires --manifest")
    return [e.image_id for e in read_manifest(args.manifest, strict=args.strict) if e.tag == args.tag]


def write_curve_csv(path, curve):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fppi,miss_rate\n")
        for f, m in curve.points:
            fh.write(f"{_fmt(f)},{_fmt(m)}\n")
        fh.write(f"mr_floor,{_fmt(curve.mr_floor)}\n")
        fh.write(f"lamr,{_fmt(curve.lamr)}\n")


def cmd_eval(args):
    cfg = _eval_config(args)
    _print_config("eval", {"dets": args.dets, "gt": args.gt, "modality": args.modality,
                           "out": args.out, "iou_threshold": cfg.iou_threshold,
                           "fppi_range": [cfg.fppi_min, cfg.fppi_max],
                           "n_ref_points": cfg.n_ref_points, "mr_floor": cfg.mr_floor,
                           "min_height": cfg.min_height, "tag": args.tag})
    curve = evaluate_modality(read_detections(args.dets, strict=args.strict),
                              read_gt(args.gt, strict=args.strict), args.modality, cfg,
                              image_ids=_image_subset(args))
    if args.out:
        write_curve_csv(args.out, curve)
    print(f"lamr={_fmt(curve.lamr)} mr_floor={_fmt(curve.mr_floor)} "
          f"images={curve.n_images} gt={curve.n_gt}")


def _shift_image_file(src: str, dst: str, dx: int, dy: int):
    planes = image_to_planes(read_pnm(src))
    write_pnm(dst, planes_to_image(warp_image(planes, translation_homography(dx, dy))))


def _command_provider(args, manifest, root, workdir):
    """Detections for one shift: shift thermal images, run the detector command."""
    def provide(direction, level):
        dx, dy = shift_vector(direction, level)
        tag = f"{direction}_{level}"
        cfg_dir = os.path.join(workdir, tag)
        os.makedirs(os.path.join(cfg_dir, "thermal"), exist_ok=True)
        lines = []
        for e in manifest:
            src = os.path.join(root, e.thermal_path)
            dst = os.path.join(cfg_dir, "thermal", os.path.basename(e.thermal_path))
            _shift_image_file(src, dst, dx, dy)
            lines.append(canonical({"image_id": e.image_id, "rgb_path": os.path.join(root, e.rgb_path),
                                    "thermal_path": dst, "tag": e.tag, "width": e.width,
                                    "height": e.height}))
        shifted_manifest = os.path.join(cfg_dir, "manifest.jsonl")
        with open(shifted_manifest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        out = os.path.join(cfg_dir, "detections.jsonl")
        cmd = args.detector_command.format(manifest=shlex.quote(shifted_manifest), out=shlex.quote(out),
                                           direction=direction, level=level, dx=dx, dy=dy)
        proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True)
        if proc.returncode != 0:
            raise DataError(f"detector command failed for direction {direction} level {level}: "
                            f"{proc.stderr.strip()}")
        return read_detections(out, strict=args.strict)
    return provide


def _dir_provider(args):
    def provide(direction, level):
        path = os.path.join(args.dets_dir, f"{direction}_{level}.jsonl")
        if not os.path.exists(path):
            raise DataError(f"missing detections for direction {direction} level {level}: {path}")
        return read_detections(path, strict=args.strict)
    return provide


def write_sweep_csv(path, sweep_cfg, result):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("direction,level,mr\n")
        for d in sweep_cfg.directions:
            for lv in sweep_cfg.levels:
                fh.write(f"{d},{lv},{_fmt(result.mr[(d, lv)])}\n")
        fh.write("direction,rho\n")
        for d in sweep_cfg.directions:
            fh.write(f"{d},{_fmt(result.rho[d])}\n")


def cmd_shift_sweep(args):
    if (args.dets_dir is None) == (args.detector_command is None):
        raise UsageError("give exactly one of --dets-dir or --detector-command")
    bound = max([10] + [abs(v) for v in args.levels]) if args.allow_large else 10
    sweep = _config(ShiftSweepConfig, args.directions, args.levels, args.exclude_zero, max_level=bound)
    cfg = _eval_config(args)
    _print_config("shift-sweep", {"gt": args.gt, "manifest": args.manifest, "dets_dir": args.dets_dir,
                                  "detector_command": args.detector_command,
                                  "directions": list(sweep.directions), "levels": list(sweep.levels),
                                  "exclude_zero": sweep.exclude_zero, "modality": sweep.modality,
                                  "iou_threshold": cfg.iou_threshold, "mr_floor": cfg.mr_floor,
                                  "min_height": cfg.min_height, "out": args.out})
    manifest = read_manifest(args.manifest, strict=args.strict)
    sizes = {e.image_id: (e.width, e.height) for e in manifest}
    gt = read_gt(args.gt, strict=args.strict)
    if args.dets_dir is not None:
        provider = _dir_provider(args)
        result = shift_sweep(gt, provider, sweep, cfg, sizes)
    else:
        root = os.path.dirname(os.path.abspath(args.manifest))
        if args.workdir:
            os.makedirs(args.workdir, exist_ok=True)
            result = shift_sweep(gt, _command_provider(args, manifest, root, args.workdir), sweep, cfg, sizes)
        else:
            with tempfile.TemporaryDirectory() as tmp:
                result = shift_sweep(gt, _command_provider(args, manifest, root, tmp), sweep, cfg, sizes)
    if args.out:
        write_sweep_csv(args.out, sweep, result)
    for d in sweep.directions:
        print(f"direction={d} rho={_fmt(result.rho[d])}")


def cmd_homography_aug(args):
    _print_config("homography-aug", {"manifest": args.manifest, "gt": args.gt, "out_dir": args.out_dir,
                                     "alpha": args.alpha, "seed": args.seed})
    manifest = read_manifest(args.manifest, strict=args.strict)
    gt = {r.image_id: r for r in read_gt(args.gt, strict=args.strict)}
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.join(args.out_dir, "thermal"), exist_ok=True)
    new_manifest, new_gt, mats = [], [], []
    for idx, e in enumerate(manifest):
        planes = image_to_planes(read_pnm(os.path.join(root, e.thermal_path)))
        rec = gt.get(e.image_id, GtRecord(e.image_id, []))
        t_boxes = [g.t_box for g in rec.groups if g.t_box is not None]
        warped, boxes, lam = augment(planes, t_boxes, args.alpha, args.seed, idx)
        rel = os.path.join("thermal", os.path.basename(e.thermal_path))
        write_pnm(os.path.join(args.out_dir, rel), planes_to_image(warped))
        moved = iter(boxes)
        groups = []
        for g in rec.groups:
            t = next(moved) if g.t_box is not None else None
            if g.rgb_box is not None or t is not None:
                groups.append(PersonGroup(g.person_id, g.rgb_box, t))
        new_gt.append(GtRecord(e.image_id, groups))
        rgb_rel = os.path.relpath(os.path.join(root, e.rgb_path), args.out_dir)
        new_manifest.append(ManifestEntry(e.image_id, rgb_rel, rel, e.tag, e.width, e.height))
        mats.append({"image_id": e.image_id, "homography": lam.matrix.tolist()})
    write_jsonl(os.path.join(args.out_dir, "manifest.jsonl"), new_manifest)
    write_jsonl(os.path.join(args.out_dir, "gt.jsonl"), new_gt)
    with open(os.path.join(args.out_dir, "homographies.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for m in mats:
            fh.write(canonical(m) + "\n")
    print(f"images={len(new_manifest)}")


def _read_proposals(path, shape):
    n, _, h, w = shape
    if path.endswith(".cmft"):
        props = read_tensor(path).astype(np.float64)
        if props.shape != (n, 4, h, w):
            raise DataError(f"{path}: proposal tensor {props.shape}, expected {(n, 4, h, w)}")
        return props
    props = np.full((n, 4, h, w), np.nan)
    for rec in iter_jsonl(path, lambda o, strict, where: (o, where)):
        obj, where = rec
        try:
            b = BoundingBox.from_list(obj["box"])
            props[int(obj.get("batch", 0)), :, int(obj["j"]), int(obj["i"])] = b.to_list()
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise DataError(f"{where}: bad proposal record ({e})") from None
    missing = int(np.isnan(props[:, 0]).sum())
    if missing:
        raise DataError(f"{path}: {missing} of {n * h * w} cells have no proposal")
    return props


def cmd_mine(args):
    _print_config("mine", {"features": args.features, "proposals": args.proposals,
                           "weights": args.weights, "bias": args.bias, "offsets": args.offsets,
                           "stride": args.stride, "groups": args.groups, "out": args.out})
    f = read_tensor(args.features).astype(np.float64)
    if f.ndim != 4:
        raise DataError(f"{args.features}: features must be rank 4, got {f.shape}")
    weight = read_tensor(args.weights)
    bias = read_tensor(args.bias) if args.bias else None
    w = ConvWeights(weight, bias)
    k2 = w.kernel_size ** 2
    if args.offsets:
        raw = read_tensor(args.offsets).astype(np.float64)
    else:
        raw = np.zeros((f.shape[0], args.groups * 2 * k2, f.shape[2], f.shape[3]))
    props = _read_proposals(args.proposals, f.shape)
    out = mine_features(f, raw, props, w, args.stride)
    write_tensor(args.out, out)
    print(f"output shape={list(out.shape)}")


def cmd_synth(args):
    cfg = _config(SynthConfig, n_images=args.n_images, n_persons=args.n_persons,
                  shift_model=args.shift_model, shift=args.shift, alpha=args.alpha,
                  miss_rate=args.miss_rate, fp_per_image=args.fp_per_image,
                  unpaired_rate=args.unpaired_rate, box_noise=args.box_noise, seed=args.seed,
                  width=args.width, height=args.height)
    _print_config("synth", {"out_dir": args.out_dir, "images": args.images,
                            **{k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in cfg.__dict__.items()}})
    fx = synth_fixture(cfg)
    write_fixture(fx, args.out_dir, images=args.images)
    print(f"images={cfg.n_images} persons={sum(len(r.groups) for r in fx.gt)}")


def cmd_stats(args):
    if (args.gt is None) == (args.rgb is None or args.thermal is None):
        raise UsageError("give --gt, or both --rgb and --thermal annotations")
    cfg = _pairing_config(args)
    _print_config("stats", {"stat": args.stat, "gt": args.gt, "rgb": args.rgb, "thermal": args.thermal,
                            "cost": cfg.cost, "gate_distance": cfg.gate_distance,
                            "gate_iou": cfg.gate_iou})
    records = read_gt(args.gt, strict=args.strict) if args.gt else \
        _pair_files(args.rgb, args.thermal, cfg, args.strict)
    groups = [g for r in records for g in r.groups]
    shift = mean_pair_shift(groups)
    print(f"mean_shift={_fmt(shift)} paired={sum(g.paired for g in groups)}")


# -- parser -------------------------------------------------------------------

def _eval_args(p):
    p.add_argument("--iou", type=float, default=0.5, help="matching IoU threshold")
    p.add_argument("--mr-floor", type=float, default=1e-4)
    p.add_argument("--min-height", type=float, default=None, help="drop GT shorter than this (px)")


def _pairing_args(p):
    p.add_argument("--cost", choices=("center_distance", "one_minus_iou"), default="center_distance")
    p.add_argument("--gate-distance", type=float, default=50.0)
    p.add_argument("--gate-iou", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgbtkit", description="RGB-T detection post-processing and evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--strict", action="store_true", help="reject unknown JSONL fields")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pair-gt", help="pair per-modality annotations into groups")
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--out", required=True)
    _pairing_args(p)
    p.set_defaults(func=cmd_pair_gt)

    p = sub.add_parser("nms", help="decoupled or pair-wise NMS over paired detections")
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("pairwise", "decoupled"), default="pairwise")
    p.add_argument("--iou-thr", type=float, default=0.65)
    p.add_argument("--tau", type=float, default=0.45)
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--enclosing", choices=("none", "geometric", "fused"), default="none",
                   help="add an enclosing box per survivor (pairwise mode)")
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("eval", help="miss-rate curve and LAMR for one modality")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--modality", choices=("rgb", "thermal", "enclosing"), required=True)
    p.add_argument("--out", help="curve CSV path")
    p.add_argument("--manifest")
    p.add_argument("--tag", choices=("day", "night", "unknown"))
    _eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shift-sweep", help="thermal miss rate under injected shifts")
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dets-dir", help="directory of DIRECTION_LEVEL.jsonl detection files")
    p.add_argument("--detector-command",
                   help="command template with {manifest} {out} {direction} {level} {dx} {dy}")
    p.add_argument("--workdir", help="keep shifted images here instead of a temp dir")
    p.add_argument("--directions", type=parse_ints, default=(0, 45, 90, 135))
    p.add_argument("--levels", type=parse_levels, default=tuple(range(-10, 11)))
    p.add_argument("--exclude-zero", action="store_true")
    p.add_argument("--allow-large", action="store_true", help="permit levels beyond +-10")
    p.add_argument("--out", help="sweep CSV path")
    _eval_args(p)
    p.set_defaults(func=cmd_shift_sweep)

    p = sub.add_parser("homography-aug", help="corner-jitter warp of thermal images and GT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_homography_aug)

    p = sub.add_parser("mine", help="proposal-guided deformable feature mining")
    p.add_argument("--features", required=True)
    p.add_argument("--proposals", required=True, help="JSONL {batch,i,j,box} per cell or (N,4,H,W) .cmft")
    p.add_argument("--weights", required=True)
    p.add_argument("--bias")
    p.add_argument("--offsets", help="raw offset logits (N, G*2K^2, H, W); zeros if omitted")
    p.add_argument("--stride", type=float, default=8.0)
    p.add_argument("--groups", type=int, default=4, help="offset groups when --offsets is omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("synth", help="write a synthetic fixture")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--n-persons", type=int, default=5)
    p.add_argument("--shift-model", choices=("translation", "homography"), default="translation")
    p.add_argument("--shift", type=parse_pair, default=(5.0, 0.0), help="DX,DY for translation")
    p.add_argument("--alpha", type=float, default=10.0, help="corner jitter bound for homography")
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--fp-per-image", type=float, default=0.0)
    p.add_argument("--unpaired-rate", type=float, default=0.0)
    p.add_argument("--box-noise", type=float, default=0.02)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", action="store_true", help="also render PPM/PGM images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("stat", choices=("mean-shift",))
    p.add_argument("--gt", help="paired GT groups")
    p.add_argument("--rgb", help="RGB annotations, paired on the fly with --thermal")
    p.add_argument("--thermal")
    _pairing_args(p)
    p.set_defaults(func=cmd_stats)
    return parser


def _glue_negative_values(argv: list[str]) -> list[str]:
    # argparse reads "-10:10" as an option; bind it to its flag explicitly
    out, it = [], iter(argv)
    for a in it:
        if a == "--levels":
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    try:
        args.func(args)
    except UsageError as e:
        print(f"rgbtkit: error: {e}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"rgbtkit: data error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
