"""Command-line entry point.

Subcommands: slice, convert, eval, infer, bench, selftest.  Exit codes:
0 ok, 1 selftest failure, 2 I/O error, 3 parse error, 4 schema error,
5 detector failure.  Every command writes a run manifest next to its
outputs and writes output files atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, dota, encoder, metrics, selftest, slicing, ssm
from .errors import ConversionError, DetectorError, ParseError

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_IO = 2
EXIT_PARSE = 3
EXIT_SCHEMA = 4
EXIT_DETECTOR = 5


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _max_workers():
    try:
        return max(1, int(os.environ.get("SOAR_THREADS", "1")))
    except ValueError:
        return 1


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_write_image(path: Path, array: np.ndarray):
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(array).save(tmp, format="PNG")
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, command: str, args: dict, timings: dict):
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: str(v) for k, v in args.items()},
        "seed": args.get("seed"),
        "timings_s": timings,
    }
    _atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _load_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise CliError(EXIT_IO, f"cannot read image {path}")
    try:
        img = Image.open(path)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {path}: {exc}")


# ---------------------------------------------------------------------------
# slice


def cmd_slice(args) -> int:
    t0 = time.perf_counter()
    src = Path(args.input)
    out_dir = Path(args.out)
    if not src.exists():
        raise CliError(EXIT_IO, f"input {src} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    images = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not images:
        raise CliError(EXIT_IO, f"no .png images under {src}")
    plans = {}
    for img_path in images:
        image = _load_image(img_path)
        h, w = image.shape[:2]
        plan = slicing.plan_slices(w, h, args.slice_w, args.slice_h, args.overlap)
        for (x, y, rw, rh) in plan.rects:
            patch = image[y:y + rh, x:x + rw]
            _atomic_write_image(out_dir / f"{img_path.stem}_{x}_{y}_{rw}_{rh}.png", patch)
        plans[img_path.name] = {
            "source_w": w, "source_h": h,
            "rects": [list(r) for r in plan.rects],
        }
    _atomic_write_text(out_dir / "plan.json", json.dumps(plans, indent=2) + "\n")
    _write_manifest(out_dir, "slice", vars(args), {"total": time.perf_counter() - t0})
    print(f"wrote {sum(len(p['rects']) for p in plans.values())} patches to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convert


def cmd_convert(args) -> int:
    if args.what != "dota2coco":
        raise CliError(EXIT_IO, f"unknown conversion {args.what!r}")
    t0 = time.perf_counter()
    images_dir = Path(args.images)
    labels_dir = Path(args.labels)
    out_path = Path(args.out)
    if not images_dir.is_dir() or not labels_dir.is_dir():
        raise CliError(EXIT_IO, "--images and --labels must be directories")
    label_files = sorted(labels_dir.glob("*.txt"))
    images = []
    anns = []
    for lf in label_files:
        img_path = images_dir / (lf.stem + ".png")
        if not img_path.is_file():
            raise CliError(EXIT_IO, f"no image for annotation file {lf.name}")
        with Image.open(img_path) as im:
            w, h = im.size
        try:
            parsed = dota.parse_dota(lf.read_text(encoding="utf-8"))
        except ParseError as exc:
            raise CliError(EXIT_PARSE, f"{lf}: {exc}")
        images.append((img_path.name, w, h))
        anns.append(parsed)
    try:
        dataset = dota.dota_to_coco(images, anns)
    except ConversionError as exc:
        raise CliError(EXIT_PARSE, str(exc))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out_path, dota.coco_to_json(dataset) + "\n")
    _write_manifest(out_path.parent, "convert", vars(args),
                    {"total": time.perf_counter() - t0})
    print(f"wrote {out_path}: {len(dataset['images'])} images, "
          f"{len(dataset['annotations'])} annotations")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_preds(path: Path):
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read predictions {path}: {exc}")
    if not isinstance(raw, list):
        raise CliError(EXIT_SCHEMA, "predictions must be a JSON array")
    preds = {}
    for i, d in enumerate(raw):
        try:
            det = slicing.Detection(class_id=int(d["class_id"]),
                                    score=float(d["score"]),
                                    bbox=tuple(float(v) for v in d["bbox"]))
            preds.setdefault(int(d["image_id"]), []).append(det)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(EXIT_SCHEMA, f"prediction {i} malformed: {exc}")
    return preds


def _load_coco_gt(path: Path):
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read ground truth {path}: {exc}")
    try:
        names = [c["name"] for c in sorted(raw["categories"], key=lambda c: c["id"])]
        id_to_index = {c["id"]: i for i, c in
                       enumerate(sorted(raw["categories"], key=lambda c: c["id"]))}
        gts = {}
        for a in raw["annotations"]:
            x, y, w, h = a["bbox"]
            gts.setdefault(int(a["image_id"]), []).append(metrics.GroundTruth(
                class_id=id_to_index[a["category_id"]],
                bbox=(x, y, x + w, y + h),
                difficult=bool(a.get("difficult", 0))))
        image_ids = [img["id"] for img in raw["images"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_SCHEMA, f"ground truth is not COCO-shaped: {exc}")
    return names, gts, image_ids


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    preds_by_img = _load_preds(Path(args.pred))
    names, gts_by_img, image_ids = _load_coco_gt(Path(args.gt))
    all_preds = [p for i in image_ids for p in preds_by_img.get(i, [])]
    all_gts = [g for i in image_ids for g in gts_by_img.get(i, [])]
    # pooled evaluation over all images (boxes are image-local; matching is
    # done per image, then counts are pooled)
    tp = fp = fn = 0
    pooled_cm = np.zeros((len(names) + 1, len(names) + 1), dtype=np.int64)
    for i in image_ids:
        ms = metrics.match_detections(preds_by_img.get(i, []), gts_by_img.get(i, []),
                                      args.iou)
        tp += len(ms.pairs)
        fp += len(ms.false_positives)
        fn += len(ms.false_negatives)
        cm = metrics.confusion_matrix(preds_by_img.get(i, []), gts_by_img.get(i, []),
                                      args.iou, names)
        pooled_cm += cm.counts
    p, r, f1 = metrics.precision_recall_f1(tp, fp, fn)
    cm = metrics.ConfusionMatrix(counts=pooled_cm, class_names=tuple(names))
    if pooled_cm.sum() > 0:
        oa, miou, kc = metrics.accuracy_iou_kappa(cm)
    else:
        oa = miou = kc = 0.0
    report = {
        "precision": round(p, 2), "recall": round(r, 2), "f1": round(f1, 2),
        "overall_accuracy": round(oa, 2), "iou": round(miou, 2),
        "kappa": round(kc, 2),
        "counts": {"tp": tp, "fp": fp, "fn": fn},
    }
    if args.per_class:
        report["per_class"] = {}
        for c, name in enumerate(names):
            rep = metrics.evaluate([q for q in all_preds if q.class_id == c],
                                   [g for g in all_gts if g.class_id == c],
                                   args.iou, names)
            report["per_class"][name] = {"precision": rep.precision,
                                         "recall": rep.recall, "f1": rep.f1}
    if args.size_buckets:
        rep = metrics.evaluate(all_preds, all_gts, args.iou, names,
                               size_buckets=True)
        report["per_size"] = {k: {"precision": v[0], "recall": v[1], "f1": v[2]}
                              for k, v in rep.per_size.items()}

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(out_dir / "report.json", json.dumps(report, indent=2) + "\n")

    rows_txt = ["," + ",".join(names + ["background"])]
    for r_i, row_name in enumerate(names + ["background"]):
        rows_txt.append(row_name + "," + ",".join(str(int(v)) for v in pooled_cm[r_i]))
    _atomic_write_text(out_dir / "confusion_matrix.csv", "\n".join(rows_txt) + "\n")

    curve_rows, pr_env = metrics.pr_f1_curves(all_preds, all_gts, args.iou)
    lines = ["threshold,precision,recall,f1"]
    lines += [f"{t:.6f},{pp:.4f},{rr:.4f},{ff:.4f}" for t, pp, rr, ff in curve_rows]
    _atomic_write_text(out_dir / "curves.csv", "\n".join(lines) + "\n")
    lines = ["recall,precision"]
    lines += [f"{rr:.4f},{pp:.4f}" for rr, pp in pr_env]
    _atomic_write_text(out_dir / "pr_curve.csv", "\n".join(lines) + "\n")

    _write_manifest(out_dir, "eval", vars(args), {"total": time.perf_counter() - t0})
    print(json.dumps(report, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


class ExternalDetector:
    """Detector subprocess speaking newline-delimited JSON on stdio.

    Request per patch: {"id", "width", "height", "channels", "dtype",
    "pixels": base64 of the raw row-major buffer}.  Response:
    {"id", "detections": [{"class_id", "score", "bbox": [x0,y0,x1,y1]}]}.
    """

    def __init__(self, command: str):
        try:
            self.proc = subprocess.Popen(command.split(), stdin=subprocess.PIPE,
                                         stdout=subprocess.PIPE, text=True)
        except OSError as exc:
            raise DetectorError(f"cannot start detector {command!r}: {exc}")
        self._next_id = 0

    def detect(self, patch: np.ndarray):
        arr = np.ascontiguousarray(patch)
        req = {
            "id": self._next_id,
            "width": arr.shape[1],
            "height": arr.shape[0],
            "channels": 1 if arr.ndim == 2 else arr.shape[2],
            "dtype": str(arr.dtype),
            "pixels": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
        self._next_id += 1
        try:
            self.proc.stdin.write(json.dumps(req) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise DetectorError(f"detector process died: {exc}")
        if not line:
            raise DetectorError("detector closed its output stream")
        try:
            resp = json.loads(line)
            if resp["id"] != req["id"]:
                raise ValueError(f"response id {resp['id']} != request id {req['id']}")
            return [slicing.Detection(class_id=int(d["class_id"]),
                                      score=float(d["score"]),
                                      bbox=tuple(float(v) for v in d["bbox"]))
                    for d in resp["detections"]]
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise DetectorError(f"detector protocol violation: {exc}")

    def close(self):
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    image = _load_image(Path(args.image))
    config = slicing.SliceConfig(height_range=(args.slice_h, args.slice_h),
                                 width_range=(args.slice_w, args.slice_w),
                                 overlap_ratio=args.overlap, seed=args.seed)
    closer = None
    if args.detector == "mock-oracle":
        if not args.gt:
            raise CliError(EXIT_IO, "--detector mock-oracle requires --gt")
        names, gts_by_img, image_ids = _load_coco_gt(Path(args.gt))
        gt_boxes = [slicing.Detection(class_id=g.class_id, score=1.0, bbox=g.bbox)
                    for i in image_ids for g in gts_by_img.get(i, [])]
        detector = slicing.MockOracleDetector(image, gt_boxes, jitter=args.jitter,
                                              seed=args.seed)
    elif args.detector.startswith("exec:"):
        detector = ExternalDetector(args.detector[len("exec:"):])
        closer = detector
    else:
        raise CliError(EXIT_IO, f"unknown detector {args.detector!r}")

    try:
        dets = slicing.sliced_inference(image, detector, config,
                                        iou_threshold=args.iou,
                                        max_workers=_max_workers())
    except DetectorError as exc:
        raise CliError(EXIT_DETECTOR, str(exc))
    finally:
        if closer is not None:
            try:
                closer.close()
            except Exception:
                pass

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = [{"image_id": 1, "class_id": d.class_id, "score": d.score,
                "bbox": list(d.bbox)} for d in dets]
    _atomic_write_text(out_path, json.dumps(payload, indent=2) + "\n")
    _write_manifest(out_path.parent, "infer", vars(args),
                    {"total": time.perf_counter() - t0})
    print(f"{len(dets)} detections -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    print(f"{'M':>8} {'N':>4} {'ch':>4} {'time_s':>10} {'elems/s':>12} {'scan_GFLOP':>11}")
    for size_spec in args.sizes.split(","):
        M, N, C = (int(v) for v in size_spec.split("x"))
        sel = ssm.SelectiveParams(E=-rng.uniform(0.1, 2.0, N),
                                  delta=rng.uniform(0.05, 0.5, M),
                                  F=rng.normal(0.0, 1.0, (M, N)),
                                  G=rng.normal(0.0, 1.0, (M, N)))
        u = rng.normal(0.0, 1.0, M)
        z0 = np.zeros(N)
        t0 = time.perf_counter()
        for _ in range(C):
            ssm.selective_scan(sel, u, z0)
        dt = time.perf_counter() - t0
        flops = 2.0 * encoder.scan_macs(M, C, N) / 1e9
        rate = M * C / dt if dt > 0 else float("inf")
        print(f"{M:>8} {N:>4} {C:>4} {dt:>10.4f} {rate:>12.0f} {flops:>11.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    if args.force_fail:
        selftest._FORCE_FAIL = args.force_fail
    if args.family == "info":
        suites = [s for s in selftest.SUITES if s[0] == "info_bottleneck"]
    else:
        suites = selftest.SUITES
    saved = selftest.SUITES
    try:
        selftest.SUITES = suites
        ok, results = selftest.run_all(verbose_print=print)
    finally:
        selftest.SUITES = saved
        selftest._FORCE_FAIL = None
    if not ok:
        failed = ", ".join(name for name, good, _, _ in results if not good)
        print(f"FAILED: {failed}", file=sys.stderr)
        return EXIT_SELFTEST
    print("all suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="aerodet",
                                description="Aerial small-object detection toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("slice", help="cut images into overlapping patches")
    sp.add_argument("--input", required=True, help="PNG file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--slice-w", type=int, default=512)
    sp.add_argument("--slice-h", type=int, default=512)
    sp.add_argument("--overlap", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_slice)

    cp = sub.add_parser("convert", help="dataset conversion")
    cp.add_argument("what", choices=["dota2coco"])
    cp.add_argument("--images", required=True)
    cp.add_argument("--labels", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--seed", type=int, default=0)
    cp.set_defaults(fn=cmd_convert)

    ep = sub.add_parser("eval", help="evaluate predictions against COCO ground truth")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--iou", type=float, default=0.5)
    ep.add_argument("--per-class", action="store_true")
    ep.add_argument("--size-buckets", action="store_true")
    ep.add_argument("--out-dir", default="eval_out")
    ep.add_argument("--seed", type=int, default=0)
    ep.set_defaults(fn=cmd_eval)

    ip = sub.add_parser("infer", help="sliced inference over a pluggable detector")
    ip.add_argument("--image", required=True)
    ip.add_argument("--detector", required=True,
                    help="'mock-oracle' (with --gt) or 'exec:<command>'")
    ip.add_argument("--gt", help="COCO JSON for the mock oracle")
    ip.add_argument("--out", default="detections.json")
    ip.add_argument("--slice-w", type=int, default=512)
    ip.add_argument("--slice-h", type=int, default=512)
    ip.add_argument("--overlap", type=float, default=0.25)
    ip.add_argument("--iou", type=float, default=0.5)
    ip.add_argument("--jitter", type=float, default=0.0)
    ip.add_argument("--seed", type=int, default=0)
    ip.set_defaults(fn=cmd_infer)

    bp = sub.add_parser("bench", help="time the selective scan")
    bp.add_argument("--sizes", default="1x4x1,1024x8x16",
                    help="comma list of MxNxchannels")
    bp.add_argument("--seed", type=int, default=0)
    bp.set_defaults(fn=cmd_bench)

    tp = sub.add_parser("selftest", help="run every acceptance suite")
    tp.add_argument("family", nargs="?", choices=["info"],
                    help="run only one suite family")
    tp.add_argument("--force-fail", help=argparse.SUPPRESS)  # test hook
    tp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DetectorError as exc:
        print(f"detector error: {exc}", file=sys.stderr)
        return EXIT_DETECTOR
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
