"""``covdet`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import checks, detect, evaluation, imgproc, net, synth, training

log = logging.getLogger("covdet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--log", default=None, help="also write the run log to this file")


def build_parser():
    parser = _Parser(prog="covdet", description="Learned covariant feature detectors.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic image corpus")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=synth.SynthConfig.count)
    p.add_argument("--side", type=int, default=synth.SynthConfig.side)
    p.add_argument("--shapes", type=int, default=synth.SynthConfig.shapes)
    p.add_argument("--disc-fraction", type=float, default=synth.SynthConfig.disc_fraction, help="share of discs; 0 gives polygons only")
    p.add_argument("--min-radius", type=float, default=synth.SynthConfig.min_radius, help="shape radius, fraction of the cell")
    p.add_argument("--max-radius", type=float, default=synth.SynthConfig.max_radius)
    p.add_argument("--pairs", type=int, default=0, help="also write this many affine scene pairs to OUT/pairs")
    p.add_argument("--scene-grid", type=_positive_int, default=6, help="pair scenes tile GRID x GRID training cells")

    p = sub.add_parser("harvest", help="collect informative 57x57 crops")
    _common(p)
    p.add_argument("--images", required=True, help="directory of PGM images")
    p.add_argument("--out", required=True, help="output .npz crop store")
    p.add_argument("--per-image", type=int, default=20)

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--config", default=None, help="key=value training config")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of PGM images to harvest from")
    src.add_argument("--crops", help="crop store written by 'harvest'")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--head", choices=net.HEADS, default=None)
    p.add_argument("--preset", choices=sorted(net.PRESETS), default="detnet-micro")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pairs-per-epoch", type=int, default=None)
    p.add_argument("--nuisance", type=float, default=None, help="max nuisance translation (rotation head)")
    p.add_argument("--checkpoints", default=None, help="directory for per-epoch checkpoints")

    p = sub.add_parser("detect", help="detect features in an image")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output detection CSV")
    p.add_argument("--stride", type=int, choices=(1, 2), default=1)
    p.add_argument("--max-detections", type=int, default=None)
    p.add_argument("--orientation-model", default=None)
    p.add_argument("--votes", default=None, help="also dump the vote map as PGM")

    for verb, helptext in (("eval-rep", "repeatability curves"), ("eval-match", "matching-score curves")):
        p = sub.add_parser(verb, help=helptext)
        _common(p)
        p.add_argument("--pairs", required=True, help="pair list file")
        p.add_argument("--detector", choices=("model", "harris", "random"), default="model")
        p.add_argument("--model", default=None)
        p.add_argument("--stride", type=int, choices=(1, 2), default=1)
        p.add_argument("--n-grid", type=_int_list, default=[10, 20, 50, 100])
        p.add_argument("--dist-tol", type=float, default=evaluation.DEFAULT_DIST_TOL)
        p.add_argument("--max-detections", type=int, default=None)
        p.add_argument("--out", required=True, help="output metrics CSV")

    p = sub.add_parser("eval-orient", help="angular error of a rotation-head model")
    _common(p)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of PGM images to harvest from")
    src.add_argument("--crops", help="crop store written by 'harvest'")
    p.add_argument("--nuisance", type=float, default=0.0)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--head", choices=("rotation",), default="rotation")
    p.add_argument("--out", default=None, help="optional CSV with mean and median error")

    p = sub.add_parser("selfcheck", help="run the numerical self-checks")
    _common(p)
    p.add_argument("--quick", action="store_true", help="fewer random cases")
    return parser


# --------------------------------------------------------------------------
# Crop stores
# --------------------------------------------------------------------------


def save_crops(path, store):
    names = np.array([p[0] for p in store.provenance], dtype=str)
    centers = np.array([[p[1], p[2]] for p in store.provenance], dtype=np.int64).reshape(-1, 2)
    with open(path, "wb") as f:
        np.savez_compressed(f, crops=store.crops.astype(np.float32), names=names, centers=centers)


def load_crops(path):
    with np.load(path) as z:
        crops = z["crops"].astype(np.float64)
        prov = [(str(n), int(x), int(y)) for n, (x, y) in zip(z["names"], z["centers"])]
    return training.CropStore(crops, prov)


def _store_from(args, seed):
    if args.crops:
        return load_crops(args.crops)
    return training.harvest_crops(args.images, per_image=getattr(args, "per_image", 20), seed=seed)


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def cmd_synth(args, seed):
    try:
        cfg = synth.SynthConfig(
            count=args.count, side=args.side, shapes=args.shapes, seed=seed,
            disc_fraction=args.disc_fraction, min_radius=args.min_radius, max_radius=args.max_radius,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.pairs < 0:
        raise UsageError("--pairs must be non-negative")
    n = synth.synth_corpus(cfg, args.out)
    log.info("wrote %d images to %s", n, args.out)
    if args.pairs:
        rng = np.random.default_rng([seed, 7])
        pcfg = synth.scene_config(cfg, grid=args.scene_grid, count=args.pairs)
        # pairs live in a subdirectory so harvesting the corpus never sees them
        pair_dir = os.path.join(args.out, "pairs")
        os.makedirs(pair_dir, exist_ok=True)
        entries = []
        for i in range(args.pairs):
            img, _ = synth.render_image(rng, pcfg)
            img_b, h = synth.make_pair(img, rng)
            a, b = f"pair_{i:04d}_a.pgm", f"pair_{i:04d}_b.pgm"
            imgproc.write_pgm(os.path.join(pair_dir, a), img)
            imgproc.write_pgm(os.path.join(pair_dir, b), img_b)
            entries.append((a, b, h))
        evaluation.write_pair_list(os.path.join(pair_dir, "pairs.txt"), entries)
        log.info("wrote %d pairs and %s", args.pairs, os.path.join(pair_dir, "pairs.txt"))


def cmd_harvest(args, seed):
    store = training.harvest_crops(args.images, per_image=args.per_image, seed=seed)
    save_crops(args.out, store)
    log.info("kept %d crops", len(store))


def cmd_train(args, seed):
    overrides = {
        "seed": args.seed,
        "head": args.head,
        "max_epochs": args.epochs,
        "pairs_per_epoch": args.pairs_per_epoch,
        "nuisance_translation_max": args.nuisance,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        cfg = training.load_config(args.config, **overrides)
    else:
        cfg = training.TrainConfig(**overrides)
    log.info("config:\n%s", training.format_config(cfg).rstrip())
    store = _store_from(args, seed)
    tr, va = training.split_validation(store)
    if len(va) == 0:
        tr, va = store, store
        log.warning("too few crops for a held-out split; validating on training crops")
    log.info("crops: %d train, %d validation", len(tr), len(va))
    if args.checkpoints:
        os.makedirs(args.checkpoints, exist_ok=True)
    spec = net.PRESETS[args.preset]()
    t0 = time.perf_counter()

    def progress(rec):
        log.info(
            "epoch %d  train %.5f  val %.5f  lr %g  skipped %d  %.1fs",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.skipped, time.perf_counter() - t0,
        )

    res = training.train(tr, va, spec, cfg, checkpoint_dir=args.checkpoints, progress=progress)
    res.model.metadata["preset"] = args.preset
    res.model.save(args.out)
    log.info("saved %s after %d epochs", args.out, len(res.history))


def _detections_for(args, model, img):
    if args.detector == "harris":
        return evaluation.harris_detect(img, max_detections=args.max_detections)
    return detect.detect(model, img, stride=args.stride, max_detections=args.max_detections)


def cmd_detect(args, seed):
    model = net.Model.load(args.model)
    img = imgproc.read_pgm(args.image)
    omodel = net.Model.load(args.orientation_model) if args.orientation_model else None
    t0 = time.perf_counter()
    field = detect.dense_regress(model, img, args.stride)
    ofield = detect.dense_regress(omodel, img, args.stride) if omodel else None
    dets = detect.detect_from_field(field, max_detections=args.max_detections, orientation_field=ofield)
    detect.write_detections(args.out, dets)
    if args.votes:
        detect.write_vote_map(args.votes, detect.accumulate_votes(field))
    log.info("%d detections in %.2fs", len(dets), time.perf_counter() - t0)


def cmd_eval(args, seed, metric):
    if args.detector == "model" and not args.model:
        raise UsageError("--model is required with --detector model")
    model = net.Model.load(args.model) if args.detector == "model" else None
    pairs = evaluation.load_pairs(args.pairs)
    n_max = max(args.n_grid) if args.n_grid else 0
    dets_a, dets_b = [], []
    for i, pair in enumerate(pairs):
        if args.detector == "random":
            rng = np.random.default_rng([seed, i])
            dets_a.append(evaluation.random_detections(pair.img_a.shape, n_max, seed=rng))
            dets_b.append(evaluation.random_detections(pair.img_b.shape, n_max, seed=rng))
        else:
            dets_a.append(_detections_for(args, model, pair.img_a))
            dets_b.append(_detections_for(args, model, pair.img_b))
    curves = evaluation.build_curves(pairs, dets_a, dets_b, args.n_grid, args.dist_tol, metrics=(metric,))
    evaluation.write_metrics_csv(args.out, curves)
    for (scene, _), curve in sorted(curves.items()):
        log.info("%s %s: %s", scene, metric, ", ".join(f"n={n}: {s:.3f}" for n, s in curve.points))


def cmd_eval_orient(args, seed):
    model = net.Model.load(args.model)
    store = _store_from(args, seed)
    cfg = training.TrainConfig(head="rotation", nuisance_translation_max=args.nuisance, seed=seed)
    batch = training.sample_triplets(store, args.count, cfg, np.random.default_rng([seed, 3]))
    true = np.arctan2(batch.gm[:, 1, 0], batch.gm[:, 0, 0])
    mean, median, skipped = evaluation.angular_error(model, batch.x1, batch.x2, true)
    log.info("angular error: mean %.2f deg, median %.2f deg, skipped %d", mean, median, skipped)
    if args.out:
        with open(args.out, "w", newline="\n") as f:
            f.write("nuisance,mean_deg,median_deg,skipped\n")
            f.write(f"{args.nuisance:g},{mean:.6f},{median:.6f},{skipped}\n")


def cmd_selfcheck(args, seed):
    n = 100 if args.quick else 1000
    seeds = 3 if args.quick else 20
    ok = True
    failures = checks.group_algebra_check(n=n, seed=seed)
    q, qp = checks.upright_affine_witness()
    if q.allclose(qp):
        failures.append("upright-affine complement unexpectedly unique")
    log.info("group algebra: %s", "pass" if not failures else "; ".join(failures))
    ok &= not failures

    spec = net.detnet_micro()
    worst = max(
        checks.network_gradient_check(spec, seed + s, batch=1, max_coords=20).max_rel_error for s in range(seeds)
    )
    log.info("gradient check: max relative error %.2e (%s)", worst, "pass" if worst < 1e-6 else "FAIL")
    ok &= worst < 1e-6
    for head in net.HEADS:
        err = checks.siamese_gradient_check(spec, head, seed, max_coords=10).max_rel_error
        log.info("%s loss gradient: max relative error %.2e (%s)", head, err, "pass" if err < 1e-6 else "FAIL")
        ok &= err < 1e-6

    rng = np.random.default_rng(seed)
    dev = 0.0
    for s in range(3 if args.quick else 10):
        model = net.Model(spec, net.init_params(spec, seed + s))
        img = rng.uniform(0, 255, size=(64, 64))
        a = detect.dense_regress(model, img)
        b = detect.dense_regress_naive(model, img)
        dev = max(dev, float(np.max(np.abs(a.values - b.values))))
    log.info("dense equivalence: max deviation %.2e (%s)", dev, "pass" if dev < 1e-5 else "FAIL")
    ok &= dev < 1e-5
    if not ok:
        raise RuntimeError("self-check failed")


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _setup_logging(path):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fmt = logging.Formatter("%(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    log.addHandler(h)
    if path:
        fh = logging.FileHandler(path, mode="w")
        fh.setFormatter(fmt)
        log.addHandler(fh)
    for name in ("covdet.training",):
        logging.getLogger(name).setLevel(logging.WARNING)


def _check_inputs(args):
    """Reject missing input paths before any work is done."""
    files = ["config", "model", "image", "crops", "orientation_model"]
    if args.verb in ("eval-rep", "eval-match"):
        files.append("pairs")
    for attr in files:
        path = getattr(args, attr, None)
        if path and not os.path.isfile(path):
            raise UsageError(f"--{attr.replace('_', '-')}: no such file: {path}")
    images = getattr(args, "images", None)
    if images and not os.path.isdir(images):
        raise UsageError(f"--images: no such directory: {images}")


def run(argv=None):
    """Run the CLI; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        _check_inputs(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    seed = 0 if args.seed is None else args.seed
    _setup_logging(args.log)
    log.info("covdet %s (seed %d)", args.verb, seed)
    handlers = {
        "synth": cmd_synth,
        "harvest": cmd_harvest,
        "train": cmd_train,
        "detect": cmd_detect,
        "eval-rep": lambda a, s: cmd_eval(a, s, "repeatability"),
        "eval-match": lambda a, s: cmd_eval(a, s, "matching_score"),
        "eval-orient": cmd_eval_orient,
        "selfcheck": cmd_selfcheck,
    }
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                handlers[args.verb](args, seed)
        else:
            handlers[args.verb](args, seed)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as e:
        log.error("error: %s", e)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
