"""``attrnet`` command line.

Exit status: 0 on success, 2 on usage errors (argparse), 1 on data errors.
JSON output uses sorted keys; every command that draws random numbers
requires ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import sys
from pathlib import Path

import numpy as np

from . import io as fmt
from .interweave import benchmark_sharing, interweaved_forward, write_report_csv
from .layers import ConfigError, Network, PatchGrid, ReLU, patch_forward_oracle
from .localize import ProposalParams, localize_cascade
from .losses import LOSS_KINDS, toy_sgd_train
from .metrics import DetectionRecord, recall_at_fppi
from .pipeline import Models, predict_image
from .predict import group_attributes, svm_train
from .synthetic import REFERENCE_GRID, fully_connected, reference_image_side, reference_network
from .tensor import Rect, ShapeError

DATA_ERRORS = (fmt.FormatError, ShapeError, ConfigError, ValueError, IndexError, OSError)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _load_input(path: str) -> np.ndarray:
    """LTEN tensor or binary PGM/PPM, chosen by the file's magic bytes."""
    data = Path(path).read_bytes()
    if data[:4] == fmt.TENSOR_MAGIC:
        return fmt.tensor_from_bytes(data)
    return fmt.image_from_bytes(data)


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_text(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_label_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if i == 0:
                    continue  # header
                raise ValueError(f"{path}: non-numeric label on line {i + 1}") from None
    if not rows:
        raise ValueError(f"{path}: no labels")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows have different column counts")
    return np.array(rows)


def _grid(args) -> PatchGrid:
    return PatchGrid(args.cells, args.cell_size, args.patch_stride)


# -- subcommands ---------------------------------------------------------------------


def cmd_infer(args) -> int:
    net = fmt.load_network(args.net)
    x = _load_input(args.input)
    if tuple(x.shape) != net.input_shape:
        raise ShapeError(f"input {tuple(x.shape)} does not match network input {net.input_shape}")
    out = net.forward(x).reshape(1, -1)
    fmt.save_tensor(args.out, out)
    return 0


def cmd_extract(args) -> int:
    net = fmt.load_network(args.net)
    image = _load_input(args.input)
    grid = _grid(args)
    run = patch_forward_oracle if args.oracle else interweaved_forward
    feats = run(image, net, grid, threads=args.threads)
    fmt.save_tensor(args.out, np.stack([f.reshape(-1) for f in feats]))
    return 0


def cmd_bench(args) -> int:
    net = reference_network(args.seed)
    sizes = [reference_image_side(n) for n in args.patches_per_side]
    reports = benchmark_sharing(sizes, net, REFERENCE_GRID, args.repetitions, args.seed)
    buf = _stdio.StringIO()
    write_report_csv(reports, buf)
    _write_text(buf.getvalue(), args.out)
    return 0


def _localize_one(path, net_o, net_s, thr, p1, p2, dump_dir):
    image = _load_input(path)
    res = localize_cascade(image, net_o, net_s, thr, p1, p2)
    if dump_dir:
        stem = Path(path).stem
        for i, m in enumerate(res.maps, 1):
            fmt.save_tensor(Path(dump_dir) / f"{stem}.stage{i}.lten", m.map)
    dets = [] if res.window is None else [{"rect": res.window.rect.as_list(), "score": res.window.score}]
    _, h, w = image.shape
    return {"detections": dets, "height": h, "width": w}


def cmd_localize(args) -> int:
    net_o, net_s = fmt.load_network(args.net_o), fmt.load_network(args.net_s)
    thr = fmt.load_threshold(args.threshold)
    p1 = ProposalParams(args.scales, args.stride, args.max_windows)
    p2 = ProposalParams(args.scales_s or args.scales, args.stride, args.max_windows)
    if args.dump_maps:
        Path(args.dump_maps).mkdir(parents=True, exist_ok=True)
    images = {Path(p).name: _localize_one(p, net_o, net_s, thr, p1, p2, args.dump_maps) for p in args.images}
    _write_json({"images": images}, args.out)
    return 0


def cmd_train_toy(args) -> int:
    x = fmt.load_tensor(args.features)
    x = x.reshape(len(x), -1).astype(np.float64)
    labels = _read_label_csv(args.labels)
    if len(labels) != len(x):
        raise ShapeError(f"{len(x)} feature rows for {len(labels)} label rows")
    if args.loss == "cross_entropy":
        y = labels
        outputs = labels.shape[1]
    else:
        if labels.shape[1] != 1:
            raise ValueError("softmax and combined losses take one class-id column")
        y = labels[:, 0].astype(np.int64)
        if np.any(y < 0):
            raise ValueError("class ids must be non-negative")
        outputs = int(y.max()) + 1
    if args.net:
        net = fmt.load_network(args.net)
    else:
        rng = np.random.default_rng(args.seed)
        d = x.shape[1]
        net = Network(
            [fully_connected(rng, d, args.hidden), ReLU(), fully_connected(rng, args.hidden, outputs)],
            (d,),
            feature_layer=0 if args.loss == "combined" else None,
        )
    trained, trace = toy_sgd_train(net, x, y, args.loss, args.lr, args.steps, args.seed, args.batch_size)
    fmt.save_network(args.out, trained)
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, v in enumerate(trace):
        writer.writerow([i, repr(float(v))])
    _write_text(buf.getvalue(), args.trace)
    return 0


def cmd_svm_train(args) -> int:
    x = fmt.load_tensor(args.features)
    x = x.reshape(len(x), -1)
    y = _read_label_csv(args.labels)
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} feature rows for {len(y)} label rows")
    model = svm_train(x, y, args.C, args.epochs, args.seed)
    fmt.save_svm(args.out, model)
    return 0


def cmd_svm_predict(args) -> int:
    model = fmt.load_svm(args.model)
    x = fmt.load_tensor(args.features)
    scores = model.decision(x.reshape(len(x), -1))
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"attr{a}" for a in range(model.attributes)])
    for row in scores:
        writer.writerow([repr(float(v)) for v in row])
    _write_text(buf.getvalue(), args.out)
    return 0


def cmd_group(args) -> int:
    model = fmt.load_svm(args.model)
    groups = group_attributes(model.weights.T, args.k, args.seed)
    _write_json(
        {
            "k": groups.k,
            "labels": groups.labels.tolist(),
            "clusters": groups.members(),
            "inertia": groups.inertia[-1],
        },
        args.out,
    )
    return 0


def _records(detections: dict, truth: dict) -> list[DetectionRecord]:
    recs = []
    for name, t in sorted(truth["images"].items()):
        dets = detections["images"].get(name, {"detections": []})
        if isinstance(dets, dict):
            dets = dets.get("detections", [])
        recs.append(
            DetectionRecord(
                [(Rect(*d["rect"]), float(d["score"])) for d in dets],
                [Rect(*r) for r in t["rects"]],
                t.get("height"),
                t.get("width"),
            )
        )
    return recs


def cmd_eval(args) -> int:
    detections = json.loads(Path(args.detections).read_text())
    truth = json.loads(Path(args.truth).read_text())
    recs = _records(detections, truth)
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iou_min", "fppi", "recall", "images", "truths", "detections"])
    for iou_min in args.iou:
        for fppi in args.fppi:
            writer.writerow(
                [
                    iou_min,
                    fppi,
                    f"{recall_at_fppi(recs, iou_min, fppi):.6f}",
                    len(recs),
                    sum(len(r.truths) for r in recs),
                    sum(len(r.detections) for r in recs),
                ]
            )
    _write_text(buf.getvalue(), args.out)
    return 0


def cmd_pipeline(args) -> int:
    models = Models.load(fmt.load_config(args.config))
    out = {}
    for path in args.images:
        image = _load_input(path)
        out[Path(path).name] = predict_image(image, models, args.threads, args.oracle).as_json()
    _write_json({"images": out}, args.out)
    return 0


# -- parser --------------------------------------------------------------------------


def _add_grid(p):
    p.add_argument("--cells", type=_positive, required=True, help="cells per patch side")
    p.add_argument("--cell-size", type=_positive, required=True, help="cell side in pixels")
    p.add_argument("--patch-stride", type=_positive, default=None, help="patch step (default: cell size)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrnet", description="Face attribute inference toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("infer", help="run a network on one input of its exact input shape")
    p.add_argument("--net", required=True)
    p.add_argument("--input", required=True, help="LTEN tensor or PGM/PPM image")
    p.add_argument("--out", required=True, help="LTEN feature output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("extract", help="features of every patch of an image in one pass")
    p.add_argument("--net", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="LTEN (patches x features)")
    _add_grid(p)
    p.add_argument("--oracle", action="store_true", help="use the patch-by-patch reference path")
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", help="MAC counts and timings of one-pass vs per-patch extraction")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--patches-per-side", type=_ints, default=(1, 2, 3, 4, 5))
    p.add_argument("--repetitions", type=_positive, default=5)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("localize", help="two-stage window localization")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--net-o", required=True, help="coarse LNET")
    p.add_argument("--net-s", required=True, help="fine LNET")
    p.add_argument("--threshold", required=True, help="threshold file")
    p.add_argument("--scales", type=_floats, default=(0.3, 0.5, 0.7, 1.0))
    p.add_argument("--scales-s", type=_floats, default=None, help="second-stage scales (default: --scales)")
    p.add_argument("--stride", type=_positive, default=1)
    p.add_argument("--max-windows", type=_positive, default=500)
    p.add_argument("--dump-maps", help="directory for per-stage response maps (LTEN)")
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("train-toy", help="SGD on an FC/ReLU network")
    p.add_argument("--features", required=True, help="LTEN (samples x dims)")
    p.add_argument("--labels", required=True, help="CSV: 0/1 per attribute, or one class-id column")
    p.add_argument("--loss", choices=LOSS_KINDS, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--steps", type=_positive, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--batch-size", type=_positive, default=None, help="default: full batch")
    p.add_argument("--hidden", type=_positive, default=16)
    p.add_argument("--net", help="initial LNET (default: seeded two-layer net)")
    p.add_argument("--out", required=True, help="trained LNET")
    p.add_argument("--trace", help="loss-trace CSV (default stdout)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("svm", help="linear SVMs on feature vectors")
    svm_sub = p.add_subparsers(dest="mode", metavar="MODE")
    svm_sub.required = True
    q = svm_sub.add_parser("train")
    q.add_argument("--features", required=True)
    q.add_argument("--labels", required=True, help="CSV of +1/-1, one column per attribute")
    q.add_argument("--C", type=float, default=1.0)
    q.add_argument("--epochs", type=_positive, default=50)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True, help="LSVM model")
    q.set_defaults(func=cmd_svm_train)
    q = svm_sub.add_parser("predict")
    q.add_argument("--model", required=True)
    q.add_argument("--features", required=True)
    q.add_argument("--out", help="CSV path (default stdout)")
    q.set_defaults(func=cmd_svm_predict)

    p = sub.add_parser("group", help="k-means over attribute weight vectors")
    p.add_argument("--model", required=True, help="LSVM model")
    p.add_argument("--k", type=_positive, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("eval", help="recall at a false-positives-per-image budget")
    p.add_argument("--detections", required=True, help="JSON from `localize`")
    p.add_argument("--truth", required=True, help="ground-truth JSON")
    p.add_argument("--iou", type=_floats, default=(0.5,))
    p.add_argument("--fppi", type=_floats, default=(0.1,))
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="localize, crop and predict attributes end to end")
    p.add_argument("--config", required=True, help="key=value pipeline config")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--oracle", action="store_true", help="per-patch reference path for features")
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "patch_stride", 0) is None:
        args.patch_stride = 0
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        print(f"attrnet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
