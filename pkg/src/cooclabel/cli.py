"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.

Any option can also come from ``--config FILE``, a plain ``key = value``
text file (``#`` comments, keys spelled like the long option with
underscores, e.g. ``rho_co = 0.3``). Command-line flags win over the file,
the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Sequence

from cooclabel.cooccurrence import build_cooccurrence, export_csv, load_matrix, save_matrix, top_pairs
from cooclabel.dataset import (
    load_annotations,
    load_detections,
    load_images,
    save_annotations,
    save_detections,
    write_json,
)
from cooclabel.errors import PipelineError
from cooclabel.evaluate import IOU_SWEEP, evaluate, scored_from_detections, scored_from_pseudolabels
from cooclabel.merge import ID_POLICIES, MergePlan, merge
from cooclabel.pseudolabel import FilterConfig, load_pseudolabels, pseudolabel_dataset, save_pseudolabels
from cooclabel.simulate import NoiseModel, make_scene_dataset, save_truth_links, simulate, subset

logger = logging.getLogger("cooclabel")

DEFAULTS: dict[str, Any] = {
    "threads": 1,
    "top_k": 10,
    "smoothing": 0.0,
    "orientation": "row",
    "rho": 0.5,
    "rho_co": 0.3,
    "context_threshold": None,
    "nms_iou": 0.5,
    "no_cooccur": False,
    "no_nms": False,
    "id_policy": "auto",
    "exclude_empty": False,
    "strict_coco": False,
    "method": "coco101",
    "max_dets": None,
    "seed": 0,
    "p_detect": 0.9,
    "box_jitter": 0.05,
    "logit_scale": 4.0,
    "fp_rate": 1.0,
    "contextual_fp": True,
    "n_images": 400,
    "labeled_fraction": 0.5,
    "rhos": "0.5,0.7",
    "rho_cos": "0.1,0.2,0.3,0.4",
    "base_rho": 0.5,
}


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _read_config(path: str) -> dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string("[pipeline]\n" + Path(path).read_text())
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return dict(parser["pipeline"])


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill unset options from the config file, then from DEFAULTS."""
    file_values = _read_config(args.config) if args.config else {}
    actions = {a.dest: a for a in parser._actions}
    unknown = set(file_values) - set(actions)
    if unknown:
        logger.warning("config keys not used by this command: %s", ", ".join(sorted(unknown)))
    for dest, action in actions.items():
        if dest in ("help", "config", "print_config", "func"):
            continue
        if getattr(args, dest, None) is not None:
            continue
        if dest in file_values:
            raw = file_values[dest]
            if action.nargs == 0:
                value: Any = _bool(raw)
            else:
                value = action.type(raw) if action.type else raw
            setattr(args, dest, value)
        elif dest in DEFAULTS:
            setattr(args, dest, DEFAULTS[dest])
    return args


def _require_inputs(*paths: str | None) -> None:
    for path in paths:
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"input path not found: {path}")


def _filter_config(args: argparse.Namespace) -> FilterConfig:
    return FilterConfig(
        rho=args.rho,
        rho_co=args.rho_co,
        use_cooccurrence=not args.no_cooccur,
        context_threshold=args.context_threshold,
        nms_iou=args.nms_iou,
        nms_enabled=not args.no_nms,
    )


def cmd_build_cooccur(args: argparse.Namespace) -> int:
    _require_inputs(args.annotations)
    dataset = load_annotations(args.annotations)
    if not dataset.annotations:
        print("warning: dataset has no annotations; matrix is all zeros", file=sys.stderr)
    matrix = build_cooccurrence(dataset, args.smoothing, args.orientation, args.threads)
    save_matrix(matrix, args.out)
    if args.csv:
        export_csv(matrix, args.csv, dataset.category_names())
    names = dataset.category_names()
    print(f"co-occurrence matrix: {matrix.n} classes, {matrix.n_images} images, fingerprint {matrix.fingerprint}")
    for x, z, raw, norm in top_pairs(matrix, args.top_k):
        print(f"  p({names[x]}|{names[z]}) = {raw:.4f}  normalized {norm:.4f}")
    return 0


def cmd_pseudolabel(args: argparse.Namespace) -> int:
    _require_inputs(args.detections, args.images, args.categories_from, args.matrix)
    images = load_images(args.images)
    dataset = load_annotations(args.categories_from) if args.categories_from else None
    category_ids = dataset.category_ids if dataset is not None else None
    detections = load_detections(args.detections, images=images, category_ids=category_ids)
    config = _filter_config(args)
    matrix = load_matrix(args.matrix) if config.use_cooccurrence else None
    labels, report = pseudolabel_dataset(detections, matrix, config, args.threads)
    save_pseudolabels(labels, args.out, detections.category_ids, config, detections.source_tag)
    if args.report:
        write_json(report.to_dict(), args.report)
    totals = report.totals()
    print(
        f"{len(labels)} pseudo-labels from {report.n_detections} detections on {report.n_images} images "
        f"(below rho {totals['below_rho']}, below rho_co {totals['below_rho_co']}, suppressed {totals['suppressed']})"
    )
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    _require_inputs(args.base, args.images, args.labels)
    base = load_annotations(args.base)
    labels, header = load_pseudolabels(args.labels)
    plan = MergePlan(base, load_images(args.images), labels, args.id_policy, tuple(header["category_ids"]))
    merged, report = merge(plan, include_empty_images=not args.exclude_empty)
    save_annotations(merged, args.out, strict_coco=args.strict_coco)
    if args.report:
        write_json(report.to_dict(), args.report)
    print(
        f"merged {report.per_source['pseudo']} pseudo-labels into {report.per_source['human']} annotations; "
        f"{report.images_added} images added"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    if (args.labels is None) == (args.detections is None):
        raise UsageError("pass exactly one of --labels or --detections")
    _require_inputs(args.ground_truth, args.labels, args.detections)
    truth = load_annotations(args.ground_truth)
    if args.labels:
        labels, header = load_pseudolabels(args.labels)
        if tuple(header["category_ids"]) != truth.category_ids:
            raise PipelineError("pseudo-label category ids differ from the ground truth")
        records = scored_from_pseudolabels(labels)
    else:
        records = scored_from_detections(load_detections(args.detections, truth))
    report = evaluate(records, truth, IOU_SWEEP, args.method, args.max_dets, threads=args.threads)
    write_json(report.to_dict(), args.out)
    if args.csv:
        report.write_csv(args.csv)
    print(
        f"mAP[.50:.95] {report.map_sweep:.4f}  mAP@.50 {report.map_50:.4f}  "
        f"precision {report.pseudo_precision:.4f}  recall {report.pseudo_recall:.4f}"
    )
    return 0


def _noise_model(args: argparse.Namespace) -> NoiseModel:
    confusion = None
    if args.confusion:
        _require_inputs(args.confusion)
        confusion = json.loads(Path(args.confusion).read_text())
    return NoiseModel(
        seed=args.seed,
        p_detect=args.p_detect,
        box_jitter=args.box_jitter,
        logit_scale=args.logit_scale,
        confusion=confusion,
        fp_rate=args.fp_rate,
        contextual_fp=args.contextual_fp,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    _require_inputs(args.annotations)
    dataset = load_annotations(args.annotations)
    detections = simulate(dataset, _noise_model(args), args.threads)
    save_detections(detections, args.out)
    if args.truth:
        save_truth_links(detections, args.truth)
    fps = sum(link is None for link in detections.truth_links)
    print(f"simulated {len(detections)} detections ({fps} false positives) on {len(dataset.images)} images")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = make_scene_dataset(args.n_images, seed=args.seed)
    n_labeled = int(round(args.labeled_fraction * len(dataset.images)))
    ids = [im.id for im in dataset.images]
    save_annotations(subset(dataset, ids[:n_labeled]), args.labeled_out)
    save_annotations(subset(dataset, ids[n_labeled:]), args.unlabeled_out)
    print(f"wrote {n_labeled} labeled and {len(ids) - n_labeled} held-out images")
    return 0


def report_rows(
    detections: Any,
    matrix: Any,
    truth: Any,
    rhos: Sequence[float],
    rho_cos: Sequence[float],
    base_rho: float,
    threads: int = 1,
) -> list[dict[str, Any]]:
    """Pseudo-label quality for the raw detector and each threshold regime."""
    rows = []
    raw = evaluate(scored_from_detections(detections), truth, threads=threads)
    rows.append({"regime": "detector, no filtering", "accepted": len(detections), "eval": raw})
    regimes = [(f"rho={r:g}", FilterConfig(rho=r, rho_co=min(r, 0.3), use_cooccurrence=False)) for r in rhos]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        regimes += [
            (f"rho={base_rho:g}, rho_co={c:g}", FilterConfig(rho=base_rho, rho_co=c, use_cooccurrence=True))
            for c in rho_cos
        ]
    for name, config in regimes:
        labels, _ = pseudolabel_dataset(detections, matrix if config.use_cooccurrence else None, config, threads)
        result = evaluate(scored_from_pseudolabels(labels), truth, threads=threads)
        rows.append({"regime": name, "accepted": len(labels), "eval": result})
    return rows


def format_report(rows: Sequence[dict[str, Any]]) -> str:
    header = f"{'regime':<28} {'accepted':>8} {'precision':>9} {'recall':>7} {'mAP':>7} {'mAP50':>7}"
    lines = [header, "-" * len(header)]
    for row in rows:
        ev = row["eval"]
        lines.append(
            f"{row['regime']:<28} {row['accepted']:>8d} {ev.pseudo_precision:>9.4f} {ev.pseudo_recall:>7.4f} "
            f"{ev.map_sweep:>7.4f} {ev.map_50:>7.4f}"
        )
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    _require_inputs(args.ground_truth, args.detections, args.matrix)
    truth = load_annotations(args.ground_truth)
    detections = load_detections(args.detections, truth)
    matrix = load_matrix(args.matrix)
    rows = report_rows(detections, matrix, truth, _floats(args.rhos), _floats(args.rho_cos), args.base_rho, args.threads)
    print(format_report(rows))
    if args.out:
        write_json(
            [{"regime": r["regime"], "accepted": r["accepted"], **r["eval"].to_dict()} for r in rows],
            args.out,
        )
    return 0


def _filter_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, help="confidence threshold (default 0.5)")
    p.add_argument("--rho-co", type=float, help="co-occurrence rescored threshold (default 0.3)")
    p.add_argument("--context-threshold", type=float, help="bar for context membership (default: rho)")
    p.add_argument("--nms-iou", type=float, help="duplicate suppression IoU (default 0.5)")
    p.add_argument("--no-cooccur", action="store_true", default=None, help="confidence rule only")
    p.add_argument("--no-nms", action="store_true", default=None, help="disable duplicate suppression")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cooclabel", description="Co-occurrence filtered pseudo-labeling pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable[[argparse.Namespace], int], help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--print-config", action="store_true", help="print the effective configuration")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        return p

    p = add("build-cooccur", cmd_build_cooccur, "build the class co-occurrence matrix")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--smoothing", type=float)
    p.add_argument("--orientation", choices=("row", "column"))
    p.add_argument("--top-k", type=int)

    p = add("pseudolabel", cmd_pseudolabel, "filter detections into pseudo-labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--images", required=True, help="unlabeled images (annotation file or image array)")
    p.add_argument("--categories-from", help="annotation file defining the category ids")
    p.add_argument("--matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _filter_options(p)

    p = add("merge", cmd_merge, "merge pseudo-labels into the base dataset")
    p.add_argument("--base", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--id-policy", choices=ID_POLICIES)
    p.add_argument("--exclude-empty", action="store_true", default=None)
    p.add_argument("--strict-coco", action="store_true", default=None)

    p = add("evaluate", cmd_evaluate, "score detections or pseudo-labels against ground truth")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--labels")
    p.add_argument("--detections")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--method", choices=("coco101", "voc11"))
    p.add_argument("--max-dets", type=int)

    p = add("simulate", cmd_simulate, "synthetic detections from ground truth")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="hidden-truth sidecar output")
    p.add_argument("--seed", type=int)
    p.add_argument("--p-detect", type=float)
    p.add_argument("--box-jitter", type=float)
    p.add_argument("--logit-scale", type=float)
    p.add_argument("--fp-rate", type=float)
    p.add_argument("--confusion", help="JSON file with an n x n row-stochastic matrix")
    p.add_argument("--contextual-fp", dest="contextual_fp", action="store_true", default=None)
    p.add_argument("--no-contextual-fp", dest="contextual_fp", action="store_false")

    p = add("synth", cmd_synth, "generate a scene-structured synthetic dataset")
    p.add_argument("--n-images", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--labeled-out", required=True)
    p.add_argument("--unlabeled-out", required=True)

    p = add("report", cmd_report, "compare threshold regimes in one table")
    p.add_argument("--ground-truth", required=True, help="held-out truth for the detected images")
    p.add_argument("--detections", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--rhos", help="comma-separated confidence thresholds (default 0.5,0.7)")
    p.add_argument("--rho-cos", help="comma-separated rho_co values (default 0.1,0.2,0.3,0.4)")
    p.add_argument("--base-rho", type=float)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        rho_co_given = getattr(args, "rho_co", None) is not None
        args = _resolve(args, sub)
        if args.command == "pseudolabel" and args.matrix is None:
            if rho_co_given:
                sub.error("--rho-co requires --matrix")
            if not args.no_cooccur:
                sub.error("co-occurrence filtering requires --matrix (or pass --no-cooccur)")
        if args.threads < 1:
            sub.error("--threads must be at least 1")
        if args.print_config:
            effective = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
            print(json.dumps(effective, indent=2))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
