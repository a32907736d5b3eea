"""Command-line entry point: ``ppskit <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import codec, losses, metrics
from .codec import CodecError
from .jops import CONSTRAINED, MODES, AssemblyConfig, assemble_pps, head_forward
from .matcher import MatchCostWeights, match_queries
from .merging import PartSemanticMap, merge
from .model import (LabelMap, SegmentSetError, check_label_map, label_map_from_segments,
                    segments_from_label_map, validate_pps)
from .render import encode_png, render
from .synth import PerturbParams, SceneParams, generate_scene, perturb
from .taxonomy import TaxonomyError, load_taxonomy_file

log = logging.getLogger("ppskit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(Exception):
    """Invalid input data; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _unit_float(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} not in [0, 1]")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{v} is negative")
    return v


def _workers(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("worker count must be >= 1")
    return v


def _write_text(path: str | Path, text: str) -> None:
    codec.atomic_write_bytes(path, text.encode())


def _taxonomy(args):
    return load_taxonomy_file(args.taxonomy)


# -- evaluate ----------------------------------------------------------------

def pair_files(pred_dir: Path, gt_dir: Path, manifest: Path | None = None) -> list[tuple[str, Path, Path]]:
    """Pair prediction and ground-truth files by stem (or via a manifest)."""
    if manifest is not None:
        doc = yaml.safe_load(Path(manifest).read_text()) or {}
        pairs = [(e["name"], pred_dir / e["pred"], gt_dir / e["gt"]) for e in doc.get("pairs", [])]
    else:
        preds = {p.stem: p for p in sorted(pred_dir.glob("*.ppsm"))}
        gts = {p.stem: p for p in sorted(gt_dir.glob("*.ppsm"))}
        for stem in sorted(set(preds) ^ set(gts)):
            side = "ground truth" if stem in preds else "prediction"
            raise DataError(f"{stem}.ppsm: missing {side} counterpart")
        pairs = [(s, preds[s], gts[s]) for s in sorted(preds)]
    for name, p, g in pairs:
        for f in (p, g):
            if not f.exists():
                raise DataError(f"{name}: missing file {f}")
    return pairs


@dataclass(frozen=True)
class _LoadPair:
    taxonomy: object

    def __call__(self, item):
        name, p, g = item
        pred, gt = codec.read_ppsm(p), codec.read_ppsm(g)
        if pred.pixels.shape != gt.pixels.shape:
            raise metrics.StreamMismatchError(
                f"{name}: canvas mismatch, prediction {pred.pixels.shape} vs ground truth {gt.pixels.shape}")
        for label, m in (("prediction", pred), ("ground truth", gt)):
            problems = check_label_map(m, self.taxonomy)
            if problems:
                raise SegmentSetError(f"{name} ({label}): {problems[0]}")
        return pred, gt


def evaluate_dirs(pred_dir, gt_dir, t, strict=False, workers=1, manifest=None) -> metrics.EvalReport:
    pairs = pair_files(Path(pred_dir), Path(gt_dir), manifest)
    stats = metrics.accumulate(pairs, t, strict, workers, load=_LoadPair(t))
    return metrics.build_report(stats, t, strict)


def report_json(report: metrics.EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def cmd_evaluate(args) -> int:
    t = _taxonomy(args)
    report = evaluate_dirs(args.pred_dir, args.gt_dir, t, args.strict_ioup, args.workers, args.manifest)
    sys.stdout.write(report.to_text())
    if args.out:
        _write_text(args.out, report_json(report))
    return EXIT_OK


def cmd_bench(args) -> int:
    t = _taxonomy(args)
    corpus = Path(args.corpus)
    results = []
    reference = None
    for w in args.workers:
        start = time.perf_counter()
        report = evaluate_dirs(corpus / "pred", corpus / "gt", t, args.strict_ioup, w)
        elapsed = time.perf_counter() - start
        text = report_json(report)
        reference = reference or text
        rate = report.num_images / elapsed if elapsed > 0 else 0.0
        results.append({"workers": w, "images": report.num_images, "seconds": elapsed,
                        "images_per_second": rate, "identical": text == reference})
        print(f"workers={w:<3} images={report.num_images:<6} {rate:9.2f} img/s  "
              f"identical={'yes' if text == reference else 'NO'}")
    if args.out:
        _write_text(args.out, json.dumps(results, indent=2) + "\n")
    return EXIT_OK if all(r["identical"] for r in results) else EXIT_INTERNAL


# -- other subcommands -------------------------------------------------------

def cmd_validate(args) -> int:
    t = _taxonomy(args)
    bad = 0
    for f in args.files:
        m = codec.read_ppsm(f)
        problems = check_label_map(m, t)
        if not problems:
            problems = [str(v) for v in validate_pps(segments_from_label_map(m, t), t)]
        status = "ok" if not problems else f"{len(problems)} problem(s)"
        print(f"{f}: {status}")
        for p in problems:
            print(f"  {p}")
        bad += bool(problems)
    return EXIT_DATA if bad else EXIT_OK


def cmd_synth(args) -> int:
    t = _taxonomy(args)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    q = PerturbParams(args.erosion, args.dilation, args.drop_prob, args.split_prob, args.relabel_prob)
    entries = []
    for i in range(args.count):
        seed = (args.seed + i) & ((1 << 64) - 1)
        gt = generate_scene(SceneParams(t, args.height, args.width, max_objects=args.max_objects, seed=seed))
        pred = perturb(gt, PerturbParams(q.erosion, q.dilation, q.drop_prob, q.split_prob, q.relabel_prob,
                                         seed=seed ^ 0x5DEECE66D), t)
        name = f"{i:06d}"
        codec.write_ppsm(out / "gt" / f"{name}.ppsm", label_map_from_segments(gt, t))
        codec.write_ppsm(out / "pred" / f"{name}.ppsm", label_map_from_segments(pred, t))
        entries.append({"name": name, "gt": f"{name}.ppsm", "pred": f"{name}.ppsm", "seed": seed})
    manifest = {"taxonomy": t.name, "height": args.height, "width": args.width, "pairs": entries}
    _write_text(out / "manifest.yaml", yaml.safe_dump(manifest, sort_keys=False))
    print(f"wrote {args.count} scene pairs to {out}")
    return EXIT_OK


def _load_predictions(path, t, mode):
    doc = codec.read_qprd(path)
    if doc["num_classes"] != t.num_object_classes or doc["num_parts"] != t.num_part_classes:
        raise DataError(f"{path}: class counts do not match taxonomy {t.name!r}")
    if "predictions" in doc:
        return doc["predictions"]
    return head_forward(doc["bundle"], doc["weights"], t, mode)


def cmd_assemble(args) -> int:
    t = _taxonomy(args)
    preds = _load_predictions(args.qprd, t, args.mode)
    cfg = AssemblyConfig(args.class_threshold, args.overlap_threshold, args.mode)
    pps = assemble_pps(preds, t, cfg)
    codec.write_ppsm(args.out, label_map_from_segments(pps, t))
    print(f"{len(pps.segments)} segments written to {args.out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    t = _taxonomy(args)
    panoptic = codec.read_ppsm(args.panoptic)
    parts = PartSemanticMap.from_label_map(codec.read_ppsm(args.parts))
    parts.check(t)
    objects = segments_from_label_map(panoptic, t)
    merged = merge(objects, parts, t)
    codec.write_ppsm(args.out, label_map_from_segments(merged, t))
    return EXIT_OK


def cmd_match(args) -> int:
    t = _taxonomy(args)
    preds = _load_predictions(args.qprd, t, args.mode)
    gt = segments_from_label_map(codec.read_ppsm(args.gt), t)
    a = match_queries(preds, gt.segments, MatchCostWeights(args.w_class, args.w_ce_mask, args.w_dice))
    doc = {
        "cost": a.cost,
        "pairs": [{"query": q, "target": g, "class": gt.segments[g].object_class,
                   "instance": gt.segments[g].instance_index} for q, g in a.pairs],
        "unmatched_queries": list(a.unmatched_predictions),
    }
    text = yaml.safe_dump(doc, sort_keys=False)
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
    return EXIT_OK


def gradient_check(kind: str, rng: np.random.Generator, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients on one random instance."""
    if kind == "dice":
        x = rng.uniform(0.05, 0.95, (8, 8))
        g = rng.random((8, 8)) < 0.5
        f = lambda z: losses.dice_loss(z, g)  # noqa: E731
    elif kind == "bce":
        x = rng.normal(0, 2, (8, 8))
        g = rng.random((8, 8)) < 0.5
        f = lambda z: losses.bce_mask_loss(z, g)  # noqa: E731
    elif kind == "class_ce":
        x = rng.normal(0, 2, 6)
        c = int(rng.integers(0, 6))
        f = lambda z: losses.class_ce_loss(z, c)  # noqa: E731
    else:
        raise ValueError(kind)
    analytic = f(x).gradient
    numeric = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        numeric[idx] = (f(hi).value - f(lo).value) / (2 * step)
    scale = max(np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def cmd_loss_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True
    print(f"{'loss':<10}{'instances':>10}{'max rel err':>14}  result")
    for kind in ("dice", "bce", "class_ce"):
        worst = max(gradient_check(kind, rng) for _ in range(args.instances))
        passed = worst <= args.tolerance
        ok &= passed
        print(f"{kind:<10}{args.instances:>10}{worst:>14.3e}  {'PASS' if passed else 'FAIL'}")
    w = losses.LossWeights(args.lambda_obj, args.lambda_pt)
    print(f"total loss weights: lambda_obj={w.lambda_obj} lambda_pt={w.lambda_pt}")
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_render(args) -> int:
    m = codec.read_ppsm(args.ppsm)
    codec.atomic_write_bytes(args.out, encode_png(render(m)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppskit", description="Part-aware panoptic segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def taxonomy_arg(sp):
        sp.add_argument("--taxonomy", required=True,
                        help="taxonomy file, or a bundled name (cityscapes_pp, pascal_pp, pascal_pp_107)")

    def assembly_args(sp):
        sp.add_argument("--mode", choices=MODES, default=CONSTRAINED)
        sp.add_argument("--class-threshold", type=_unit_float, default=0.8)
        sp.add_argument("--overlap-threshold", type=_unit_float, default=0.8)

    sp = sub.add_parser("validate", help="check PPSM files against a taxonomy")
    taxonomy_arg(sp)
    sp.add_argument("files", nargs="+")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("synth", help="write synthetic ground-truth/prediction pairs")
    taxonomy_arg(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--max-objects", type=int, default=6)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--erosion", type=int, default=0)
    sp.add_argument("--dilation", type=int, default=0)
    sp.add_argument("--drop-prob", type=_unit_float, default=0.0)
    sp.add_argument("--split-prob", type=_unit_float, default=0.0)
    sp.add_argument("--relabel-prob", type=_unit_float, default=0.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("assemble", help="assemble a QPRD prediction bundle into a PPSM map")
    taxonomy_arg(sp)
    assembly_args(sp)
    sp.add_argument("qprd")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_assemble)

    sp = sub.add_parser("merge", help="merge a panoptic PPSM with a part PPSM")
    taxonomy_arg(sp)
    sp.add_argument("panoptic")
    sp.add_argument("parts")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("match", help="print the query/ground-truth assignment")
    taxonomy_arg(sp)
    assembly_args(sp)
    sp.add_argument("qprd")
    sp.add_argument("gt")
    sp.add_argument("--w-class", type=_nonneg_float, default=2.0)
    sp.add_argument("--w-ce-mask", type=_nonneg_float, default=5.0)
    sp.add_argument("--w-dice", type=_nonneg_float, default=5.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("loss-check", help="finite-difference check of loss gradients")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lambda-obj", type=_nonneg_float, default=1.0)
    sp.add_argument("--lambda-pt", type=_nonneg_float, default=1.0)
    sp.set_defaults(func=cmd_loss_check)

    sp = sub.add_parser("evaluate", help="PartPQ/PartSQ/PQ/mIoU over two directories of PPSM files")
    taxonomy_arg(sp)
    sp.add_argument("pred_dir")
    sp.add_argument("gt_dir")
    sp.add_argument("--manifest", type=Path)
    sp.add_argument("--strict-ioup", action="store_true")
    sp.add_argument("--workers", type=_workers, default=1)
    sp.add_argument("--out", help="write the machine-readable report here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("render", help="colorize a PPSM map as PNG")
    sp.add_argument("ppsm")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("bench", help="evaluation throughput across worker counts")
    taxonomy_arg(sp)
    sp.add_argument("corpus", help="directory with pred/ and gt/ subdirectories")
    sp.add_argument("--workers", type=_workers, nargs="+", default=[1])
    sp.add_argument("--strict-ioup", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


_DATA_ERRORS = (DataError, CodecError, TaxonomyError, SegmentSetError, metrics.StreamMismatchError,
                FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
