"""Command-line entry point.

Run directory layout written by ``train``::

    <out>/config.yaml          effective configuration
    <out>/checkpoints/         epoch_NNNN.rqf and last.rqf
    <out>/logs.csv             per-step losses and learning rate
    <out>/epochs.csv           per-epoch mAP, similar-query ratios, query counts
    <out>/summary.csv          final metrics
    <out>/plots/loss.svg       loss curve
    <out>/.lock                present while a process owns the directory

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import base64
import io
import os
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import config as rconfig
from .attention import AttentionConfig, bench_attention, bench_csv
from .data import (DatasetNotFound, SyntheticSpec, load_image, read_dataset,
                   synthesize_dataset)
from .decoder import RQModel
from .diagnostics import RunLog, compare_sdq, emit_curves, similarity_table
from .evaluation import (EvalConfig, GroundTruth, evaluate_map, format_prediction_dump,
                         write_results)
from .geometry import corners_array
from .nn.checkpoint import atomic_write
from .training import SDQ_THRESHOLDS, Trainer, load_model, predict_image


class RunLocked(RuntimeError):
    pass


def _write_text(path: str, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


@contextmanager
def _thread_limit():
    n = os.environ.get("RQF_THREADS")
    if not n:
        yield
        return
    try:
        k = int(n)
    except ValueError:
        raise ValueError(f"RQF_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(k, 1)):
        yield


@contextmanager
def _lock(run_dir: str):
    path = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"run directory {run_dir!r} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.unlink(path)


def _load_spec(name: str) -> SyntheticSpec:
    if os.path.isfile(name):
        import yaml
        with open(name, encoding="utf-8") as f:
            return SyntheticSpec.from_dict(yaml.safe_load(f) or {})
    return SyntheticSpec.preset(name)


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = _load_spec(args.spec)
    synthesize_dataset(args.out, args.count, args.seed, spec, split=args.split)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _epoch_metrics(model, test, eval_cfg) -> dict:
    preds = {s.id: predict_image(model, s.image) for s in test}
    rep = evaluate_map(preds, {s.id: GroundTruth.from_sample(s) for s in test}, eval_cfg,
                       model.cfg.num_classes)
    sim = similarity_table(model, test)
    return {"map": rep["map"], **{f"ratio_{t:g}": sim[t] for t in SDQ_THRESHOLDS},
            "queries_selective": sim["n_selective"], "queries_distinct": sim["n_distinct"]}


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "data.train": args.train_data, "data.test": args.test_data,
                 "train.epochs": args.epochs, "train.lr": args.lr,
                 "train.batch_size": args.batch_size, "data.eval_limit": args.eval_limit,
                 "model.sdq": None if args.sdq is None else args.sdq == "on"}
    cfg = rconfig.build_config(args.config, overrides)
    if not cfg["data"]["train"]:
        raise rconfig.ConfigError("data.train", "no training dataset given")
    model_cfg = rconfig.model_cfg(cfg)
    tcfg = rconfig.train_cfg(cfg)
    tcfg.seed = cfg["seed"]
    eval_cfg = rconfig.eval_cfg(cfg)
    train, classes = read_dataset(cfg["data"]["train"])
    if len(classes) != model_cfg.num_classes:
        raise rconfig.ConfigError("model.num_classes",
                                  f"{model_cfg.num_classes} but the dataset has {len(classes)}")
    extra = {"classes": list(classes)}
    test = []
    if cfg["data"]["test"]:
        test, _ = read_dataset(cfg["data"]["test"], cfg["data"]["eval_limit"])

    out = args.out
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out, "plots"), exist_ok=True)
    with _lock(out):
        _write_text(os.path.join(out, "config.yaml"), rconfig.dump(cfg))
        model = RQModel(model_cfg, seed=cfg["seed"])
        trainer = Trainer(model, tcfg)
        log = RunLog()
        last = os.path.join(out, "checkpoints", "last.rqf")
        if os.path.exists(last):
            if not args.resume:
                raise RuntimeError(f"{out!r} already holds a run; pass --resume to continue it")
            from .nn import checkpoint
            tensors, meta = checkpoint.load(last)
            trainer.load_state(tensors, meta)
            steps_csv = os.path.join(out, "logs.csv")
            epochs_csv = os.path.join(out, "epochs.csv")
            if os.path.exists(steps_csv):
                with open(steps_csv, encoding="utf-8") as f:
                    st = f.read()
                et = ""
                if os.path.exists(epochs_csv):
                    with open(epochs_csv, encoding="utf-8") as f:
                        et = f.read()
                log = RunLog.from_csv(st, et)
                log.steps = [r for r in log.steps if r["step"] < trainer.step]
                log.epochs = [r for r in log.epochs if r["epoch"] < trainer.epoch]
            print(f"resuming at epoch {trainer.epoch} step {trainer.step}")
        while trainer.epoch < tcfg.epochs:
            t0 = time.perf_counter()
            for s in trainer.train_epoch(train):
                log.add_step(**vars(s))
            row = {"epoch": trainer.epoch - 1, "map": float("nan")}
            if test:
                row.update(_epoch_metrics(model, test, eval_cfg))
            row["wall_s"] = round(time.perf_counter() - t0, 3)
            log.add_epoch(**row)
            trainer.save(os.path.join(out, "checkpoints", f"epoch_{trainer.epoch:04d}.rqf"), extra)
            trainer.save(last, extra)
            _write_text(os.path.join(out, "logs.csv"), log.steps_csv())
            _write_text(os.path.join(out, "epochs.csv"), log.epochs_csv())
            print(f"epoch {trainer.epoch}/{tcfg.epochs} step {trainer.step} "
                  f"loss {np.mean([r['loss'] for r in log.steps[-trainer.total_steps(len(train)) // max(tcfg.epochs, 1):]]):.4f}"
                  + (f" map {row['map']:.4f}" if test else ""), flush=True)
        if trainer.epoch == 0 or not log.steps:
            print("nothing to train (epochs=0)")
            trainer.save(last, extra)
            return 0
        _, svg = emit_curves(log)
        _write_text(os.path.join(out, "plots", "loss.svg"), svg)
        final = log.epochs[-1] if log.epochs else {}
        summary = {"epochs": trainer.epoch, "steps": trainer.step,
                   "loss": float(np.mean([r["loss"] for r in log.steps[-50:]])),
                   "map": final.get("map", float("nan")),
                   "ratio_0.95": final.get("ratio_0.95", float("nan"))}
        _write_text(os.path.join(out, "summary.csv"),
                    ",".join(summary) + "\n" + ",".join(f"{v:.6g}" if isinstance(v, float)
                                                       else str(v) for v in summary.values()) + "\n")
        print("summary " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                    for k, v in summary.items()))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    samples, classes = read_dataset(args.dataset, args.limit)
    cfg = EvalConfig(iou_threshold=args.iou, interpolation=args.interpolation)
    preds = {s.id: predict_image(model, s.image) for s in samples}
    rep = evaluate_map(preds, {s.id: GroundTruth.from_sample(s) for s in samples}, cfg,
                       model.cfg.num_classes)
    for c, ap in rep["ap"].items():
        print(f"{classes[c]:>10s} AP {ap:.4f}")
    print(f"map={rep['map']:.4f}")
    if args.out:
        write_results(args.out, rep, classes, {"images": len(samples), "iou": args.iou,
                                               "interpolation": args.interpolation})
    if args.dump:
        _write_text(args.dump, format_prediction_dump(preds))
    return 0


def cmd_sdq_stats(args) -> int:
    a, _ = load_model(args.checkpoint_a)
    b, _ = load_model(args.checkpoint_b)
    samples, _ = read_dataset(args.dataset, args.limit)
    _, text = compare_sdq(a, b, samples)
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
    return 0


def cmd_bench(args) -> int:
    try:
        n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}") from None
    cfg = AttentionConfig(heads=args.heads, pool=args.pool, channels=args.channels,
                          sampling=args.sampling)
    text = bench_csv(bench_attention(n_list, cfg, repeats=args.repeats, seed=args.seed))
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
    return 0


CLASS_COLOURS = ("#e6194b", "#ffe119", "#4363d8", "#3cb44b", "#f032e6", "#42d4f4", "#f58231",
                 "#911eb4")


def render_svg(image: np.ndarray, boxes, scores, labels, classes=None) -> str:
    """SVG with the image embedded as PNG and one polygon per detection."""
    from PIL import Image
    H, W = image.shape[:2]
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)).save(buf, "PNG")
    data = base64.b64encode(buf.getvalue()).decode("ascii")
    parts = ['<?xml version="1.0" encoding="UTF-8"?>',
             f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'xmlns:xlink="http://www.w3.org/1999/xlink" version="1.1" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}">',
             f'<image x="0" y="0" width="{W}" height="{H}" xlink:href="data:image/png;base64,{data}"/>']
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    for b, s, l in zip(boxes, scores, labels):
        c = corners_array(b)[0]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in c)
        col = CLASS_COLOURS[int(l) % len(CLASS_COLOURS)]
        name = classes[int(l)] if classes is not None else str(int(l))
        parts.append(f'<polygon points="{pts}" fill="none" stroke="{col}" stroke-width="1"/>')
        parts.append(f'<text x="{c[:, 0].min():.2f}" y="{c[:, 1].min() - 1:.2f}" font-size="8" '
                     f'fill="{col}">{name} {float(s):.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(args) -> int:
    model, meta = load_model(args.checkpoint)
    img = load_image(args.image)
    H, W = img.shape[:2]
    ph, pw = -H % 16, -W % 16
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0))) if ph or pw else img
    det = predict_image(model, padded, args.top_k)
    keep = det.scores >= args.score_threshold
    svg = render_svg(img, det.boxes[keep], det.scores[keep], det.labels[keep],
                     meta.get("classes"))
    _write_text(args.out, svg)
    print(f"{int(keep.sum())} detections -> {args.out}")
    return 0


# -- parser ----------------------------------------------------------------

class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rqdet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--count", type=int, required=True, help="number of scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", default="standard",
                   help="preset (standard, scattered, dense, single) or YAML file")
    s.add_argument("--split", default=None, help="split name stored in the manifest")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--config", default=None, help="YAML run configuration")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--train-data", default=None)
    s.add_argument("--test-data", default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--eval-limit", type=int, default=None, help="test images scored per epoch")
    s.add_argument("--sdq", choices=("on", "off"), default=None)
    s.add_argument("--resume", action="store_true", help="continue from checkpoints/last.rqf")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mAP of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--interpolation", choices=("11point", "all"), default="11point")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--out", default=None, help="JSON results file")
    s.add_argument("--dump", default=None, help="plain-text prediction dump")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sdq-stats", help="similar-query ratios of two checkpoints")
    s.add_argument("--checkpoint-a", required=True)
    s.add_argument("--checkpoint-b", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--out", default=None, help="CSV file")
    s.set_defaults(func=cmd_sdq_stats)

    s = sub.add_parser("bench", help="time the rotated RoI attention operator")
    s.add_argument("--n-list", default="100,200")
    s.add_argument("--heads", type=int, default=8)
    s.add_argument("--pool", type=int, default=7)
    s.add_argument("--channels", type=int, default=256)
    s.add_argument("--sampling", type=int, default=4)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="CSV file")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("render", help="SVG overlay of detections")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--score-threshold", type=float, default=0.3)
    s.add_argument("--top-k", type=int, default=100)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, rconfig.ConfigError) as e:
        print(f"rqdet {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (DatasetNotFound, RunLocked, OSError, ValueError,
            KeyError, RuntimeError) as e:
        print(f"rqdet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
