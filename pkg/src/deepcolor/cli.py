"""Command line: train, predict, eval, sweep, gen-data, render.

Every command exits 0 on success. On failure it prints one line to stderr,
``error: CODE: message``, and exits with status 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as C
from . import dataset as D
from . import imageio as IO
from . import metrics as M
from . import postprocess as P
from . import train as TR
from .config import RunConfig, format_kv
from .sweep import sweep as run_sweep
from .synth import SceneConfig

log = logging.getLogger("deepcolor")


class UsageError(ValueError):
    code = "E_USAGE"


def _error_code(exc: BaseException) -> str:
    code = getattr(exc, "code", None)
    if isinstance(code, str):
        return code
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "E_IO"
    return "E_VALUE"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in (
        "seed", "iters", "lr", "lr_min", "margin", "mu", "colors", "batch", "tau", "rho", "merge_metric",
        "connectivity", "background_weight", "depth", "base_channels", "patch", "checkpoint_every")}
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config, overrides)
    else:
        cfg = RunConfig().with_overrides(overrides)
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _post_config(args, ckpt_cfg: dict, grid: bool = False) -> P.PostConfig:
    """PostConfig from flags, falling back to the run config stored in the checkpoint.

    With ``grid`` the tau/rho flags are sweep lists and do not override anything.
    """
    base = RunConfig.from_dict({k: v for k, v in ckpt_cfg.items() if k in RunConfig.__dataclass_fields__})
    if getattr(args, "config", None):
        base = RunConfig.load(args.config)
    single = {} if grid else {"tau": getattr(args, "tau", None), "rho": getattr(args, "rho", None)}
    cfg = base.with_overrides({**single, "merge_metric": getattr(args, "merge_metric", None),
                               "connectivity": getattr(args, "connectivity", None)})
    return cfg.validate().post()


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    scene = SceneConfig(kind=args.kind, height=args.height, width=args.width, kmin=args.kmin, kmax=args.kmax,
                        size_min=args.size_min, size_max=args.size_max, max_overlap=args.max_overlap,
                        min_gap=args.min_gap, touch=args.touch, noise=args.noise, channels=args.channels,
                        seed=args.seed or 0)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    out = _out_dir(args)
    names = D.generate_to(out, scene, args.count)
    print(f"wrote {len(names)} {scene.kind} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_dir = args.train or cfg.train_dir
    if not train_dir:
        raise UsageError("no training data: pass --train DIR or set train_dir in the config")
    samples = D.load_samples(train_dir)
    out = _out_dir(args)
    resume = C.load(args.resume) if args.resume else None
    trainer = TR.Trainer(cfg, samples, resume=resume)
    (out / "run.cfg").write_text(format_kv(cfg.to_dict()))
    loss_log = TR.LossLog(out / "loss.csv", cfg.colors)
    ckpt_path = out / "checkpoint.bin"
    remaining = cfg.iters - trainer.iteration
    t0 = time.time()

    def on_step(rec: TR.StepRecord) -> None:
        loss_log.append(rec)
        if cfg.checkpoint_every and rec.iteration % cfg.checkpoint_every == 0:
            trainer.save(ckpt_path)
        if not args.quiet and (rec.iteration % 50 == 0 or rec.iteration == cfg.iters):
            print(f"iter {rec.iteration:6d}  loss {rec.loss:10.4f}  {time.time() - t0:7.1f}s", flush=True)

    trainer.run(max(remaining, 0), on_step)
    trainer.save(ckpt_path)
    it, losses, counts = TR.read_loss_log(out / "loss.csv")
    from . import plotting
    plotting.loss_curve(out / "loss.png", it, losses)
    plotting.color_usage(out / "color_usage.png", it, counts)
    print(f"checkpoint: {ckpt_path}")
    return 0


def _predict(ckpt: C.Checkpoint, images: Sequence[np.ndarray], batch: int) -> list[np.ndarray]:
    return TR.predict_probs(ckpt.params, list(images), batch)


def cmd_predict(args) -> int:
    ckpt = C.load(args.checkpoint)
    post = _post_config(args, ckpt.run_config)
    names, images, _ = D.load(args.images, require_labels=False)
    out = _out_dir(args)
    (out / "labels").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    probs = _predict(ckpt, images, args.batch or 8)
    with (out / "confidences.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "instance", "color", "size", "confidence"])
        for name, img, y in zip(names, images, probs):
            inst = P.segment(y, post)
            IO.write_labels(out / "labels" / f"{name}.pgm", inst.to_label_map())
            IO.write_png(out / "overlays" / f"{name}.png", IO.render_overlay(img, inst))
            for k, i in enumerate(inst, start=1):
                w.writerow([name, k, i.color, i.size, f"{i.confidence:.6f}"])
    print(f"predicted {len(names)} images (tau={post.tau}, rho={post.rho:g}) -> {out}")
    return 0


def _read_confidences(path: Path) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    with path.open() as f:
        for row in csv.DictReader(f):
            out.setdefault(row["image"], {})[int(row["instance"])] = float(row["confidence"])
    return out


def cmd_eval(args) -> int:
    gt = D.label_files(args.gt)
    pred = D.label_files(args.pred)
    if not gt:
        raise D.DatasetError(f"{args.gt}: no ground-truth label maps")
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise D.DatasetError(f"{args.pred}: no prediction for {len(missing)} image(s), first {missing[0]!r}")
    names = sorted(gt)
    pred_maps = [IO.read_labels(pred[n]) for n in names]
    gt_maps = [IO.read_labels(gt[n]) for n in names]
    conf_file = Path(args.pred) / "confidences.csv"
    confidences = None
    if conf_file.exists():
        table = _read_confidences(conf_file)
        confidences = []
        for n, p in zip(names, pred_maps):
            ids = np.unique(p)
            confidences.append([table.get(n, {}).get(int(k), 1.0) for k in ids[ids > 0]])
    rep = M.evaluate(pred_maps, gt_maps, confidences, names)
    out = _out_dir(args)
    with (out / "eval.tsv").open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["image", "sbd", "abs_dic", "fg_iou"])
        for row in zip(rep.names, rep.sbd, rep.dic, rep.fg_iou):
            w.writerow([row[0], f"{row[1]:.6f}", row[2], f"{row[3]:.6f}"])
    summary = rep.summary()
    (out / "eval_summary.txt").write_text(format_kv({k: (f"{v:.6f}" if isinstance(v, float) else v)
                                                     for k, v in summary.items()}))
    from . import plotting
    plotting.sbd_histogram(out / "sbd_hist.png", rep.sbd)
    print(f"{'image':<12}{'SBD':>8}{'|DiC|':>7}{'FG-IoU':>8}")
    for n, s, d, fg in zip(rep.names, rep.sbd, rep.dic, rep.fg_iou):
        print(f"{n:<12}{s:8.4f}{d:7d}{fg:8.4f}")
    print(f"{'mean':<12}{rep.mean_sbd:8.4f}{rep.mean_abs_dic:7.2f}{rep.mean_fg_iou:8.4f}   AP50 {rep.ap50:.4f}")
    return 0


def cmd_sweep(args) -> int:
    ckpt = C.load(args.checkpoint)
    base = _post_config(args, ckpt.run_config, grid=True)
    names, images, gts = D.load(args.val)
    taus = _floats(args.tau) if args.tau else [0, 5, 10, 20, 40, 80]
    rhos = _floats(args.rho) if args.rho else [0, 1, 2, 4, 8]
    if any(t < 0 for t in taus) or any(r < 0 for r in rhos):
        raise UsageError("tau and rho grid values must be >= 0")
    probs = _predict(ckpt, images, args.batch or 8)
    res = run_sweep(probs, gts, taus, rhos, base.connectivity, base.merge_metric)
    out = _out_dir(args)
    with (out / "sweep.tsv").open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["tau", "rho", "mean_sbd", "mean_abs_dic", "mean_count"])
        for t, r, s, d, c in res.rows():
            w.writerow([f"{t:g}", f"{r:g}", f"{s:.6f}", f"{d:.4f}", f"{c:.4f}"])
    (out / "sweep_best.txt").write_text(format_kv({
        "tau": f"{res.best[0]:g}", "rho": f"{res.best[1]:g}", "mean_sbd": f"{res.best_sbd:.6f}",
        "sbd_at_rho0": f"{res.best_for_rho(0.0):.6f}" if 0.0 in res.rhos else "nan",
        "images": len(names)}))
    from . import plotting
    plotting.sweep_heatmap(out / "sweep_heatmap.png", res.taus, res.rhos, res.mean_sbd, res.best)
    print(f"best tau={res.best[0]:g} rho={res.best[1]:g} mean SBD {res.best_sbd:.4f} "
          f"({len(res.taus)}x{len(res.rhos)} grid, {len(names)} images)")
    return 0


def cmd_render(args) -> int:
    files = D.image_files(args.images)
    labels = D.label_files(args.labels or args.images)
    out = _out_dir(args)
    n = 0
    for f in files:
        if f.stem not in labels:
            raise D.DatasetError(f"{f}: no matching label map")
        img = IO.read_image(f)
        lab = IO.read_labels(labels[f.stem])
        IO.write_png(out / f"{f.stem}.png", IO.render_overlay(img, lab, alpha=args.alpha))
        n += 1
    print(f"rendered {n} overlays to {out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    post = argparse.ArgumentParser(add_help=False)
    post.add_argument("--merge-metric", choices=["min_set_distance", "hausdorff"])
    post.add_argument("--connectivity", type=int, choices=[4, 8])
    post.add_argument("--batch", type=int, help="inference batch size")

    p = argparse.ArgumentParser(prog="deepcolor", description="Instance segmentation by deep coloring.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a coloring network")
    t.add_argument("--train", help="training dataset directory")
    t.add_argument("--iters", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-min", type=float, help="cosine-decay the learning rate to this value")
    t.add_argument("--margin", type=float)
    t.add_argument("--mu", type=float)
    t.add_argument("--colors", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--background-weight", type=float)
    t.add_argument("--patch", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common, post], help="segment images with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--images", required=True, help="dataset root or directory of images")
    pr.add_argument("--tau", type=int)
    pr.add_argument("--rho", type=float)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", parents=[common], help="score predicted label maps")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", parents=[common, post], help="grid-search tau and rho on cached predictions")
    sw.add_argument("--checkpoint", required=True)
    sw.add_argument("--val", required=True, help="validation dataset directory")
    sw.add_argument("--tau", help="comma-separated tau grid")
    sw.add_argument("--rho", help="comma-separated rho grid")
    sw.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--kind", choices=["blobs", "rods", "occluded"], default="blobs")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--kmin", type=int, default=3)
    g.add_argument("--kmax", type=int, default=8)
    g.add_argument("--size-min", type=float, default=4.0)
    g.add_argument("--size-max", type=float, default=10.0)
    g.add_argument("--max-overlap", type=float, default=0.3)
    g.add_argument("--min-gap", type=float, default=0.0)
    g.add_argument("--touch", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--channels", type=int, choices=[1, 3], default=1)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("render", parents=[common], help="draw label maps over images as PNG")
    r.add_argument("--images", required=True)
    r.add_argument("--labels", help="label directory (default: the dataset's labels/)")
    r.add_argument("--alpha", type=float, default=0.6)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, KeyError, OSError) as e:
        msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
        print(f"error: {_error_code(e)}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
