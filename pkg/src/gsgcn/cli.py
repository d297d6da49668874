"""``gsgcn`` command line: gen-data, train, eval, infer, grad-check, ablate.

Exit codes: 0 success, 1 check/acceptance failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("gsgcn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects section.key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _data_file(path: str, split: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.is_file():
        raise UsageError(f"data not found: {p}")
    return p


def _class_names_from(data_path: str) -> tuple[str, ...]:
    m = Path(data_path) / "manifest.json"
    if Path(data_path).is_dir() and m.is_file():
        return tuple(json.loads(m.read_text()).get("class_names", ()))
    return ()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synth import DatasetSpec, generate_dataset

    if not Path(args.spec).is_file():
        raise UsageError(f"spec not found: {args.spec}")
    spec = DatasetSpec.from_file(args.spec)
    manifest = generate_dataset(spec, args.out, args.seed)
    path = Path(args.out) / "manifest.json"
    log.info("wrote %d train / %d eval scenes", manifest["counts"]["train"], manifest["counts"]["eval"])
    print(path)
    return EXIT_OK


def _resolve(args):
    from .config import load_run_config

    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        overrides["train.max_epochs"] = str(args.epochs)
    return load_run_config(args.config, overrides, getattr(args, "preset", None))


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import GSGCN
    from .report import plot_training_curves
    from .skeleton import build_sample_set, load_pose_file
    from .training import EpochRecord, TrainState, stop_at_accuracy, train

    rc = _resolve(args)
    if not rc.class_names:
        rc.class_names = _class_names_from(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(rc.to_ini())
    doc = load_pose_file(_data_file(args.data, "train"))
    cfg = rc.model
    data = build_sample_set(doc, cfg.num_frames, cfg.num_persons, cfg.with_speed, rc.references)
    if data.labels.max() >= cfg.num_classes:
        raise UsageError(f"label {data.labels.max()} outside num_classes={cfg.num_classes}")
    model = GSGCN(cfg)
    if args.resume:
        ck = load_checkpoint(args.resume, cfg)
        state = TrainState(ck.params, ck.epoch, ck.momentum,
                           [EpochRecord(**h) for h in ck.history])
        log.info("resuming from epoch %d", ck.epoch)
    else:
        state = TrainState(model.init_params(rc.seed))
    ckpt = out / "checkpoint.ckpt"
    log_path = out / "train_log.txt"
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(f"# run started {time.strftime('%Y-%m-%dT%H:%M:%S')} samples={len(data)}\n")
    cbs = [stop_at_accuracy(args.target_accuracy)] if args.target_accuracy else []
    state = train(model, data, state.params, rc.train, cbs, state, ckpt, log_path)
    save_checkpoint(state, cfg, rc.train, ckpt)
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,loss,accuracy\n")
        for r in state.history:
            fh.write(f"{r.epoch},{r.lr:.6g},{r.loss:.6f},{r.accuracy:.6f}\n")
    if state.history:
        plot_training_curves(state.history, out / "training_curves.png")
        last = state.history[-1]
        print(f"epochs={state.epoch} final_loss={last.loss:.6f} final_train_accuracy={last.accuracy:.4f}")
    else:
        print(f"epochs={state.epoch} (no training performed)")
    print(ckpt)
    return EXIT_OK


def _predictions(model, params, doc, cfg, references):
    from .skeleton import build_sample_set

    data = build_sample_set(doc, cfg.num_frames, cfg.num_persons, cfg.with_speed, references)
    probs = model.predict_proba(data.inputs, data.distances, data.present, params)
    return data, probs


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import accuracy, confusion_matrix, detections_from_document, frame_map
    from .model import GSGCN
    from .report import plot_confusion, plot_frame_map
    from .skeleton import load_pose_file

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model_config
    metrics = {m.strip() for m in args.metrics.split(",")}
    if not metrics <= {"acc", "fmap"}:
        raise UsageError(f"--metrics takes acc and/or fmap, got {args.metrics!r}")
    data_file = _data_file(args.data, args.split)
    doc = load_pose_file(data_file)
    model = GSGCN(cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    names = list(_class_names_from(args.data)) or [f"class_{i}" for i in range(cfg.num_classes)]
    names += [f"class_{i}" for i in range(len(names), cfg.num_classes)]
    summary: dict = {"checkpoint": str(args.checkpoint), "data": str(data_file)}
    lines = []
    data = probs = None
    if "acc" in metrics:
        data, probs = _predictions(model, ck.params, doc, cfg, args.references)
        pred = probs.argmax(axis=1)
        acc = accuracy(pred, data.labels)
        cm = confusion_matrix(pred, data.labels, cfg.num_classes)
        summary["accuracy"] = acc
        summary["num_samples"] = len(data)
        lines.append(f"accuracy\t{acc:.4f}\t({int(round(acc * len(data)))}/{len(data)})")
        with open(out / "confusion.csv", "w", encoding="utf-8") as fh:
            fh.write("true\\pred," + ",".join(names) + "\n")
            for i, row in enumerate(cm):
                fh.write(names[i] + "," + ",".join(str(v) for v in row) + "\n")
        plot_confusion(cm, names, out / "confusion.png")
    if "fmap" in metrics:
        gts = detections_from_document(doc)
        if args.detections:
            dets = detections_from_document(load_pose_file(_data_file(args.detections, args.split)))
        else:
            if data is None:
                data, probs = _predictions(model, ck.params, doc, cfg, args.references)
            dets = _model_detections(doc, data, probs, cfg.num_frames)
        fm = frame_map(dets, gts).as_dict()
        summary.update(fm)
        for k, v in fm.items():
            lines.append(f"{k}\t{v:.2f}")
        plot_frame_map(fm, out / "frame_map.png")
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _model_detections(doc, data, probs, T):
    """One detection per class for each reference box in each frame of its window."""
    from .metrics import Detection

    tracks = {(t.video_id, t.track_id): t for t in doc.tracks}
    dets = []
    for (vid, tid, start), p in zip(data.refs, probs):
        for f in tracks[(vid, tid)].frames:
            if start <= f.frame_index < start + T:
                for c, s in enumerate(p):
                    dets.append(Detection((vid, f.frame_index), f.bbox, c, float(s)))
    return dets


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import GSGCN
    from .skeleton import assemble_input, distance_tensors, load_pose_file, scene_scale, select_group

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.pose_file).is_file():
        raise UsageError(f"pose file not found: {args.pose_file}")
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model_config
    doc = load_pose_file(args.pose_file)
    cands = [t for t in doc.tracks if t.track_id == args.reference
             and (args.video is None or t.video_id == args.video)]
    if not cands:
        raise UsageError(f"reference track not found: {args.reference}")
    ref = cands[0]
    tracks = [t for t in doc.tracks if t.video_id == ref.video_id]
    start = ref.frames[0].frame_index if args.window is None else args.window
    try:
        g = select_group(ref, tracks, (start, cfg.num_frames), cfg.num_persons)
    except ValueError as exc:
        raise UsageError(f"reference track not found in window: {exc}") from None
    z = assemble_input(g, scene_scale(doc, tracks), cfg.with_speed)
    model = GSGCN(cfg)
    probs = model.predict_proba(z[None], distance_tensors(z)[None], g.present_mask[None], ck.params)[0]
    names = list(args.class_names.split(",")) if args.class_names else []
    names += [f"class_{i}" for i in range(len(names), cfg.num_classes)]
    for c in np.argsort(-probs, kind="stable"):
        print(f"{names[c]}\t{probs[c]:.6f}")
    return EXIT_OK


def grad_check_error(size: str = "micro", precision: str = "float32", epsilon: float | None = None,
                     seed: int = 0, batch: int = 3, max_entries: int | None = 12):
    """Max relative gradient error of the focal loss on the micro model, plus per-parameter maxima.

    BN runs in eval mode with running statistics first calibrated on the check
    batch, so every layer sees normalized activations and biases keep a real
    gradient. ``max_entries`` entries of each parameter are probed.
    """
    from . import autodiff as ad
    from .model import GSGCN, MICRO_CONFIG
    from .training import focal_loss

    if size != "micro":
        raise UsageError("only --size micro is supported")
    cfg = MICRO_CONFIG
    eps = epsilon if epsilon is not None else DEFAULT_EPSILON[precision]
    with ad.precision(precision):
        model = GSGCN(cfg)
        params = model.init_params(seed)
        rng = np.random.default_rng(seed + 1)
        # move masks, biases and BN affine terms off their init values so every path is live
        for name, t in params.tensors.items():
            if name.endswith((".mask", ".beta", ".bias", ".gamma")):
                t.data += rng.uniform(-0.2, 0.2, size=t.shape).astype(t.data.dtype)
        x = rng.normal(0, 1, size=(batch, cfg.num_persons, cfg.in_channels, cfg.num_frames, model.num_joints))
        d = rng.uniform(0, 2, size=(batch, cfg.num_persons, 1, cfg.num_frames // 2, model.num_joints))
        present = np.ones((batch, cfg.num_persons), dtype=bool)
        labels = np.arange(batch) % cfg.num_classes
        for _ in range(80):
            model.forward(x, d, present, params, training=True, update_stats=True)

        def loss_fn():
            r = model.forward(x, d, present, params, training=False)
            return focal_loss(r.probabilities, labels, 2.0)

        report = ad.gradient_report(loss_fn, params.values(), eps, max_entries, seed)
    per = {t.name: err for t, err in report}
    return max(per.values()), per


DEFAULT_EPSILON = {"float32": 1e-3, "float64": 1e-5}
TOLERANCE = {"float32": 1e-2, "float64": 1e-4}


def cmd_grad_check(args) -> int:
    tol = TOLERANCE[args.precision]
    t0 = time.time()
    err, per = grad_check_error(args.size, args.precision, args.epsilon, args.seed,
                                max_entries=args.entries or None)
    worst = max(per, key=per.get)
    print(f"max_relative_error={err:.3e} precision={args.precision} tolerance={tol:g} "
          f"worst_param={worst} seconds={time.time() - t0:.1f}")
    return EXIT_OK if err < tol else EXIT_FAIL


def cmd_ablate(args) -> int:
    from .ablation import VARIANTS, directional_check, run_ablation
    from .report import plot_ablation
    from .skeleton import load_pose_file

    rc = _resolve(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = set(variants) - set(VARIANTS)
    if bad:
        raise UsageError(f"unknown variants {sorted(bad)}; choose from {', '.join(VARIANTS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    train_doc = load_pose_file(_data_file(args.data, "train"))
    eval_doc = load_pose_file(_data_file(args.data, "eval"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(rc.to_ini())
    seeds = [rc.seed + i for i in range(args.seeds)]
    result = run_ablation(train_doc, eval_doc, rc.model, rc.train, seeds, variants, rc.references)
    (out / "ablation.md").write_text(result.markdown())
    (out / "ablation.csv").write_text(result.csv())
    plot_ablation(result, out / "ablation.png")
    print(result.markdown(), end="")
    if args.check_direction:
        ok, msgs = directional_check(result, args.min_margin / 100.0)
        for m in msgs:
            print(m)
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsgcn", description="Group-skeleton action recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic group-action dataset")
    g.add_argument("spec", help="dataset spec (INI with [dataset] and [counts])")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    def run_opts(sp):
        sp.add_argument("--config", default=None, help="INI run config")
        sp.add_argument("--preset", choices=["default", "micro", "small"], default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    t = sub.add_parser("train", help="train a model")
    run_opts(t)
    t.add_argument("--data", required=True, help="dataset directory or pose file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--target-accuracy", type=float, default=None,
                   help="stop once train accuracy reaches this fraction")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--metrics", default="acc")
    e.add_argument("--detections", default=None, help="score this detection file instead of the model")
    e.add_argument("--references", choices=["first", "all"], default="first")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="classify one reference person")
    i.add_argument("checkpoint")
    i.add_argument("pose_file")
    i.add_argument("--reference", type=int, required=True)
    i.add_argument("--window", type=int, default=None, help="first frame of the window")
    i.add_argument("--video", default=None)
    i.add_argument("--class-names", default=None)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("grad-check", help="finite-difference gradient check")
    c.add_argument("--size", default="micro")
    c.add_argument("--precision", choices=["float32", "float64"], default="float32")
    c.add_argument("--epsilon", type=float, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--entries", type=int, default=12, help="entries probed per parameter (0 = all)")
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate", help="component ablation over several seeds")
    run_opts(a)
    a.add_argument("--data", required=True, help="dataset directory with train.jsonl and eval.jsonl")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--variants", default=None)
    a.add_argument("--out", default="ablation_out")
    a.add_argument("--check-direction", action="store_true")
    a.add_argument("--min-margin", type=float, default=0.0, help="accuracy points full must beat M=1 by")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .checkpoint import CheckpointError
    from .skeleton import PoseFormatError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PoseFormatError, CheckpointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
