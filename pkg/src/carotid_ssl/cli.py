"""``carotid-ssl`` command line: synth -> train-loc -> extract-roi -> train-seg -> predict -> evaluate -> report.

Stages only talk through files (manifests, checkpoints, histories).  Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as E
from .config import ConfigError, RunConfig, load_config, resolve_output, write_effective
from .data_core import (
    CLASS_NAMES,
    CLASS_SCHEMES,
    ManifestError,
    load_manifest,
    load_patient,
    load_slices,
    patient_slices,
    save_volume,
    split_patientwise,
)
from .nets import ModelConfig, build_model
from .pipeline import crop_sides, detection_records, localize, segment_slice, write_roi_manifest
from .prior import evaluate_prior
from .synth import PhantomSpec, generate_phantom
from .trainer import (
    TrainConfig,
    Trainer,
    cross_validate,
    foreground_dice,
    hard_pairs,
    load_checkpoint,
    pools_from_manifest,
    predict,
)

log = logging.getLogger("carotid_ssl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.override or [])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    out = args.out or (cfg.output_dir if cfg is not None else None)
    if not out:
        raise UsageError("an output directory is required (--out or output_dir in the config)")
    path = resolve_output(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(args, cfg: Optional[RunConfig] = None):
    ref = getattr(args, "manifest", None) or (cfg.data().manifest if cfg is not None else "")
    if not ref:
        raise UsageError("a manifest is required (--manifest or data.manifest in the config)")
    return load_manifest(ref)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _split(manifest, cfg: RunConfig):
    data = cfg.data()
    return split_patientwise(manifest, data.split, seed=cfg.seed)


def _ids(manifest, keys) -> list[str]:
    keys = set(keys)
    return [p.id for p in manifest.patients if p.split_key in keys]


def _train(cfg: RunConfig, task: str, manifest, out: Path, resume: bool = False) -> Trainer:
    data = cfg.data()
    split = _split(manifest, cfg)
    _write_json(out / "split.json", {"train": split.train, "val": split.val, "test": split.test})
    train, unlabeled = pools_from_manifest(manifest, _ids(manifest, split.train), task, data.class_scheme)
    val = None
    if split.val:
        val, _ = pools_from_manifest(manifest, _ids(manifest, split.val), task, data.class_scheme)
    if resume and (out / "last.pt").exists():
        trainer = Trainer.from_checkpoint(out / "last.pt", out_dir=out)
        # the epoch budget may be raised when resuming; everything else comes from the checkpoint
        trainer.cfg.max_epochs = cfg.trainer(task).max_epochs
    else:
        trainer = Trainer(
            _model_config(cfg, task, data.class_scheme),
            cfg.trainer(task),
            cfg.loss(task),
            cfg.prior(),
            cfg.policy(),
            out_dir=out,
        )
    trainer.fit(train, unlabeled, val)
    E.emit_report(trainer.history, None, out, plots=False)
    return trainer


def _model_config(cfg: RunConfig, task: str, scheme: str) -> ModelConfig:
    mc = cfg.model(task)
    if task == "segmentation":
        wanted = 1 if scheme == "binary" else len(CLASS_NAMES[scheme])
        if "n_classes" not in cfg.section("model") and mc.n_classes != wanted:
            mc = ModelConfig(**{**mc.to_dict(), "n_classes": wanted})
        _check_scheme(mc.n_classes, scheme)
    return mc


def _check_scheme(n_classes: int, scheme: str) -> None:
    expected = len(CLASS_NAMES[scheme])
    if not (n_classes == expected or (scheme == "binary" and n_classes == 1)):
        raise ConfigError(f"data.class_scheme: {scheme!r} needs {expected} classes but the model has {n_classes}")


def _load_model(path: str | Path):
    state = load_checkpoint(path)
    mc = ModelConfig(**state["model_config"])
    model = build_model(mc)
    model.load_state_dict(state["student"])
    model.eval()
    return model, mc, state


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = PhantomSpec(
        n_patients=args.patients,
        slices_per_patient=args.slices,
        image_size=(args.size, args.size),
        distractor_rate=args.distractor_rate,
        labeled_fraction=args.labeled_fraction,
        plaque_probability=args.plaque_probability,
        seed=args.seed,
        volume_format=args.format,
    )
    out = resolve_output(args.out)
    generate_phantom(spec, out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train_loc(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    write_effective(cfg, "localization", out)
    trainer = _train(cfg, "localization", _manifest(args, cfg), out, args.resume)
    print(out / "best.pt", f"best val dice {trainer.best_metric:.4f} at epoch {trainer.best_epoch}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    write_effective(cfg, "segmentation", out)
    manifest = _manifest(args, cfg)
    data = cfg.data()
    if data.k_folds >= 2:
        folds, mean = cross_validate(
            manifest,
            _model_config(cfg, "segmentation", data.class_scheme),
            cfg.trainer("segmentation"),
            k=data.k_folds,
            loss_config=cfg.loss("segmentation"),
            policy=cfg.policy(),
            class_scheme=data.class_scheme,
            n_val=data.n_val,
            out_dir=out,
        )
        _write_json(out / "cv_results.json", {"folds": [vars(f) for f in folds], "mean": mean})
        print(out / "cv_results.json", f"mean dice {mean['dice']:.4f}")
        return EXIT_OK
    trainer = _train(cfg, "segmentation", manifest, out, args.resume)
    print(out / "best.pt", f"best val dice {trainer.best_metric:.4f} at epoch {trainer.best_epoch}")
    return EXIT_OK


def cmd_extract_roi(args) -> int:
    cfg = _config(args)
    data = cfg.data()
    out = _out_dir(args, cfg)
    manifest = _manifest(args, cfg)
    model, mc, state = _load_model(args.checkpoint)
    prior_cfg = cfg.prior()
    size = (data.roi_size, data.roi_size)
    rng = np.random.default_rng(cfg.seed)
    rois, records, reports = [], [], []
    for entry in manifest.patients:
        slices = patient_slices(load_patient(manifest, entry), data.class_scheme)
        imgs = np.stack([s.images for s in slices])
        probs, centers = localize(model, imgs, prior_cfg, data.use_prior_filter)
        for s, p, c in zip(slices, probs, centers):
            sid = f"{s.patient_id}:{s.slice_index}"
            reports.append(f"{sid} {evaluate_prior(p, prior_cfg).to_line()}")
            if s.mask is not None:
                rec = detection_records([sid], [c], [s.mask.labels()], size)[0]
                records.append(rec)
                if not rec.detected:
                    log.warning("detection failed on %s: %s", sid, rec.failure_reason)
            if any(x is None for x in c):
                log.warning("slice %s skipped: a side has no detected vessel", sid)
                continue
            rois.extend(crop_sides(s, c, size, data.roi_max_shift, rng))
    roi_manifest = write_roi_manifest(rois, out, manifest.sequence_names, data.class_scheme)
    (out / "prior_reports.txt").write_text("".join(r + "\n" for r in reports))
    with open(out / "detections.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(vars(r), sort_keys=True) + "\n")
    if records:
        rate, failed = E.detection_rate(records)
        print(f"detection rate {rate:.4f} ({len(failed)}/{len(records)} labeled slices failed)")
    print(out / "manifest.json", f"{len(rois)} ROIs in {len(roi_manifest.patients)} stacks")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    data = cfg.data()
    out = _out_dir(args, cfg)
    manifest = _manifest(args, cfg)
    loc_model, _, _ = _load_model(args.loc_checkpoint)
    seg_model, _, _ = _load_model(args.seg_checkpoint)
    size = (data.roi_size, data.roi_size)
    centers_out = {}
    for entry in manifest.patients:
        slices = patient_slices(load_patient(manifest, entry), data.class_scheme)
        imgs = np.stack([s.images for s in slices])
        _, centers = localize(loc_model, imgs, cfg.prior(), data.use_prior_filter)
        labels = np.stack([segment_slice(seg_model, s, c, size) for s, c in zip(slices, centers)], axis=-1)
        save_volume(labels.astype(np.float32), out / f"{entry.id}_pred.nii")
        centers_out[entry.id] = [list(map(lambda x: None if x is None else list(x), c)) for c in centers]
    _write_json(out / "centers.json", centers_out)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data = cfg.data()
    out = _out_dir(args, cfg)
    model, mc, state = _load_model(args.checkpoint)
    task = state["train_config"]["task"]
    manifest = _manifest(args, cfg)
    scheme = args.class_scheme or data.class_scheme
    if task == "segmentation":
        _check_scheme(mc.n_classes, scheme)
    ids = [p.id for p in manifest.patients]
    if args.split != "all":
        ids = _ids(manifest, getattr(_split(manifest, cfg), args.split))
    pool, _ = pools_from_manifest(manifest, ids, task, scheme)
    if len(pool) == 0:
        raise ValueError("no labeled slices to evaluate")
    probs = predict(model, pool.images)
    pred, gt = hard_pairs(probs, pool.targets)
    names = CLASS_NAMES[scheme] if task == "segmentation" else ["background", "vessel"]
    report = E.aggregate(zip(pred, gt), names)
    result = {
        "task": task,
        "split": args.split,
        "n_slices": report.n_slices,
        "per_class": dict(zip(names, report.per_class)),
        "macro": report.macro,
        "foreground": report.foreground,
        "foreground_dice": foreground_dice(probs, pool.targets),
    }
    if task == "localization":
        labeled = [s for s in load_slices(manifest, ids, scheme) if s.mask is not None]
        sid = [f"{s.patient_id}:{s.slice_index}" for s in labeled]
        labs = [s.mask.labels() for s in labeled]
        for use_filter in (True, False):
            _, centers = localize(model, pool.images, cfg.prior(), use_filter)
            rate, failed = E.detection_rate(detection_records(sid, centers, labs))
            key = "with_prior" if use_filter else "without_prior"
            result[f"detection_rate_{key}"] = rate
            result[f"detection_failures_{key}"] = [vars(f) for f in failed]
    _write_json(out / "metrics.json", result)
    (out / "metrics.csv").write_text(E.metrics_table_csv({args.name: report.row("macro")}))
    print(out / "metrics.json", f"macro dice {report.macro['dice']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    history = E.read_history(run / "history.jsonl")
    metrics = None
    mpath = Path(args.metrics) if args.metrics else run / "metrics.json"
    if mpath.exists():
        m = json.loads(mpath.read_text())
        d = m["macro"]
        metrics = {args.name: [d["dice"], d["iou"], d["precision"], d["recall"]]}
    elif not history:
        raise FileNotFoundError(f"nothing to report in {run}")
    out = resolve_output(args.out) if args.out else run / "report"
    written = E.emit_report(history, metrics, out)
    for p in written:
        print(p)
    return EXIT_OK


def fusion_ablation(cfg: RunConfig, manifest, out: Path) -> dict[str, list[float]]:
    """Train basic/ours x input/bottleneck on one split; returns Table rows keyed by method."""
    data = cfg.data()
    split = _split(manifest, cfg)
    train, unlabeled = pools_from_manifest(manifest, _ids(manifest, split.train), "segmentation", data.class_scheme)
    val, _ = pools_from_manifest(manifest, _ids(manifest, split.val), "segmentation", data.class_scheme)
    test, _ = pools_from_manifest(manifest, _ids(manifest, split.test), "segmentation", data.class_scheme)
    base = _model_config(cfg, "segmentation", data.class_scheme)
    rows = {}
    for arch, arch_name in (("basic", "Basic U-Net"), ("ours", "Our U-Net")):
        for fusion in ("input", "bottleneck"):
            name = f"{arch_name} ({fusion} fusion)"
            mc = ModelConfig(**{**base.to_dict(), "arch": arch, "fusion": fusion})
            trainer = Trainer(mc, cfg.trainer("segmentation"), cfg.loss("segmentation"), policy=cfg.policy(), out_dir=out / f"{arch}_{fusion}")
            trainer.fit(train, unlabeled, val if len(val) else None)
            best = out / f"{arch}_{fusion}" / "best.pt"
            if best.exists():
                trainer.load_state_dict(load_checkpoint(best))
            pred, gt = hard_pairs(predict(trainer.student, test.images), test.targets)
            rows[name] = E.aggregate(zip(pred, gt)).row("macro")
    return rows


def cmd_ablate_fusion(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    write_effective(cfg, "segmentation", out)
    rows = fusion_ablation(cfg, _manifest(args, cfg), out)
    (out / "fusion_table.csv").write_text(E.metrics_table_csv(rows))
    (out / "fusion_table.tex").write_text(E.metrics_table_text(rows))
    print(E.metrics_table_text(rows), end="")
    return EXIT_OK


def cmd_ablate_ssl(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    write_effective(cfg, "segmentation", out)
    manifest = _manifest(args, cfg)
    data = cfg.data()
    split = _split(manifest, cfg)
    train, unlabeled = pools_from_manifest(manifest, _ids(manifest, split.train), "segmentation", data.class_scheme)
    val, _ = pools_from_manifest(manifest, _ids(manifest, split.val), "segmentation", data.class_scheme)
    test, _ = pools_from_manifest(manifest, _ids(manifest, split.test), "segmentation", data.class_scheme)
    mc = _model_config(cfg, "segmentation", data.class_scheme)
    results = {}
    for mode in ("off", "owc", "owc+uncertainty"):
        scores = []
        for seed in range(cfg.seed, cfg.seed + args.seeds):
            tc = TrainConfig(**{**cfg.trainer("segmentation").to_dict(), "ssl_mode": mode, "seed": seed})
            run = out / f"{mode.replace('+', '_')}_seed{seed}"
            trainer = Trainer(mc, tc, cfg.loss("segmentation"), policy=cfg.policy(), out_dir=run)
            trainer.fit(train, unlabeled, val if len(val) else None)
            if (run / "best.pt").exists():
                trainer.load_state_dict(load_checkpoint(run / "best.pt"))
            scores.append(foreground_dice(predict(trainer.student, test.images), test.targets))
        results[mode] = {"per_seed": scores, "mean": float(np.mean(scores))}
    _write_json(out / "ssl_ablation.json", results)
    for mode, r in results.items():
        print(f"{mode}: mean foreground dice {r['mean']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carotid-ssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def with_config(sp, manifest=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (relative paths live under $CAROTID_SSL_OUTPUT)")
        if manifest:
            sp.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
        return sp

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--patients", type=int, default=8)
    s.add_argument("--slices", type=int, default=8)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--distractor-rate", type=float, default=0.0)
    s.add_argument("--labeled-fraction", type=float, default=0.5)
    s.add_argument("--plaque-probability", type=float, default=0.5)
    s.add_argument("--format", choices=("nii", "raw"), default="nii")
    s.set_defaults(func=cmd_synth)

    for name, func in (("train-loc", cmd_train_loc), ("train-seg", cmd_train_seg)):
        s = with_config(sub.add_parser(name, help=f"{name.split('-')[1]} stage training"))
        s.add_argument("--resume", action="store_true", help="continue from last.pt in the output directory")
        s.set_defaults(func=func)

    s = with_config(sub.add_parser("extract-roi", help="localize, filter and crop 64x64 ROIs"))
    s.add_argument("--checkpoint", required=True, help="localization checkpoint")
    s.set_defaults(func=cmd_extract_roi)

    s = with_config(sub.add_parser("predict", help="full two-stage inference to label volumes"))
    s.add_argument("--loc-checkpoint", required=True)
    s.add_argument("--seg-checkpoint", required=True)
    s.set_defaults(func=cmd_predict)

    s = with_config(sub.add_parser("evaluate", help="metrics of a checkpoint on a manifest"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--class-scheme", choices=CLASS_SCHEMES)
    s.add_argument("--name", default="model", help="row label in metrics.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="tables and plots from a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--metrics", help="metrics.json (default: <run>/metrics.json)")
    s.add_argument("--out")
    s.add_argument("--name", default="model")
    s.set_defaults(func=cmd_report)

    s = with_config(sub.add_parser("ablate-fusion", help="basic/ours x input/bottleneck table"))
    s.set_defaults(func=cmd_ablate_fusion)

    s = with_config(sub.add_parser("ablate-ssl", help="off / owc / owc+uncertainty over seeds"))
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(func=cmd_ablate_ssl)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
