"""Command-line entry point: synth, train, crossval, evaluate, cam.

Exit codes: 0 success, 2 usage error, 3 data error, 4 i/o error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import archive, cam, metrics, models, optim, plots, reports, synth
from .data import LABELS, AugmentConfig, Dataset, load_dataset, make_icv_folds, split_train_test, stack_inputs
from .data import write_dataset_manifest
from .errors import ArchiveError, ConfigurationError, DataError, ParameterError, PartitionError
from .errors import UndefinedMetricError, UnsupportedArchitectureError
from .tensor import seeded_rng

log = logging.getLogger("glaucoma_oct")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

MODE_DEFAULTS = {
    "scratch": dict(lr=0.05, epochs=150),
    "vgg16": dict(lr=0.001, epochs=125),
    "vgg19": dict(lr=0.001, epochs=125),
}
BATCH_SIZE = 16
VGG_DROPOUT = 0.4
VGG_FREEZE_THROUGH = 3
DA_FACTOR = 0.2
REDUCED_DIVISOR = 4
REDUCED_SCRATCH_INPUT = (124, 192, 1)
REDUCED_VGG_INPUT = (62, 96, 3)
CONFIG_NAME = "config.txt"
WEIGHTS_NAME = "weights.cwt"


class UsageError(Exception):
    pass


def model_spec_for(mode: str, reduced: bool = False) -> models.ModelSpec:
    if mode == "scratch":
        if reduced:
            return models.build_scratch_cnn(REDUCED_SCRATCH_INPUT, width_divisor=REDUCED_DIVISOR)
        return models.build_scratch_cnn()
    if mode in ("vgg16", "vgg19"):
        shape = REDUCED_VGG_INPUT if reduced else models.VGG_INPUT
        return models.build_vgg(
            int(mode[3:]),
            shape,
            freeze_through_block=VGG_FREEZE_THROUGH,
            width_divisor=REDUCED_DIVISOR if reduced else 1,
            dropout=VGG_DROPOUT,
        )
    raise ConfigurationError(f"unknown mode {mode!r}")


@dataclass
class RunConfig:
    """Fully resolved settings of one training-type run."""

    mode: str
    epochs: int
    batch_size: int
    lr: float
    seed: int
    reduced: bool
    with_da: bool
    da_factor: float
    test_fraction: float
    folds: int
    manifest: str
    out: str
    weights: str | None = None
    class_weights: str | None = None  # "w_glaucoma,w_normal"; None -> from training counts
    threads: int | None = None

    def train_config(self, seed_offset: int = 0) -> optim.TrainConfig:
        cw = None
        if self.class_weights:
            g, n = (float(v) for v in self.class_weights.split(","))
            cw = optim.ClassWeights(g, n)
        return optim.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            class_weights=cw,
            augment=AugmentConfig(self.da_factor) if self.with_da else None,
            seed=self.seed + seed_offset,
        )


# -- argument parsing ---------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


def _add_training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest (sample_id,path,label,patient_id)")
    p.add_argument("--mode", choices=sorted(MODE_DEFAULTS), default="scratch")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=_positive_int, help="default: 150 scratch, 125 vgg")
    p.add_argument("--lr", type=_non_negative_float, help="default: 0.05 scratch, 0.001 vgg")
    p.add_argument("--batch-size", type=_positive_int, default=BATCH_SIZE)
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--reduced", action="store_true", help="desk-scale inputs and 1/4 filter counts")
    p.add_argument("--with-da", action="store_true", help="on-the-fly data augmentation")
    p.add_argument("--da-factor", type=_non_negative_float, default=DA_FACTOR)
    p.add_argument("--test-fraction", type=_fraction, default=0.2)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--class-weights", help="'w_glaucoma,w_normal'; default derived from class counts")
    p.add_argument("--weights", help="initial weight archive (pretrained VGG base)")
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--config", help="resolved config file of an earlier run; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glaucoma-oct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic B-scan corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--glaucoma", type=_positive_int, default=93)
    p.add_argument("--normal", type=_positive_int, default=156)
    p.add_argument("--patients", type=_positive_int, default=40, help="synthetic patients per class")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--reduced", action="store_true", help="124 x 192 images")
    p.add_argument("--noise", type=_non_negative_float)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train on the training split of a manifest")
    _add_training_args(p)

    p = sub.add_parser("crossval", help="internal cross-validation on the training split")
    _add_training_args(p)

    p = sub.add_parser("evaluate", help="score a manifest with a trained archive")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=sorted(MODE_DEFAULTS))
    p.add_argument("--reduced", type=_bool, nargs="?", const=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--config")

    p = sub.add_parser("cam", help="class activation heat maps for selected samples")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-ids", nargs="+", required=True)
    p.add_argument("--classes", nargs="+", choices=LABELS, default=list(LABELS))
    p.add_argument("--mode", choices=sorted(MODE_DEFAULTS))
    p.add_argument("--reduced", type=_bool, nargs="?", const=True)
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--config")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse, letting ``--config FILE`` supply defaults that flags override."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    if config:
        try:
            values = reports.read_config(config)
        except (OSError, ValueError) as e:
            parser.error(f"cannot read --config: {e}")
        for sub in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest: a for a in sub._actions}
            defaults = {}
            for key, value in values.items():
                action = known.get(key)
                if action is None or key in ("config", "help"):
                    continue
                try:
                    if isinstance(action, argparse._StoreTrueAction):
                        defaults[key] = _bool(value)
                    elif action.type is not None:
                        defaults[key] = action.type(value)
                    else:
                        defaults[key] = value
                except (argparse.ArgumentTypeError, ValueError) as e:
                    parser.error(f"--config {key}={value}: {e}")
            sub.set_defaults(**defaults)
            for a in sub._actions:
                if a.dest in defaults:
                    a.required = False
    return parser.parse_args(argv)


# -- commands -----------------------------------------------------------------


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig.reduced(seed=args.seed) if args.reduced else synth.SynthConfig(seed=args.seed)
    if args.noise is not None:
        cfg = synth.SynthConfig(**{**asdict(cfg), "noise": args.noise})
    out = _out_dir(args.out)
    ds, _ = synth.generate_dataset(cfg, args.glaucoma, args.normal, args.patients, out)
    g, n = ds.class_counts()
    reports.write_config(
        out / CONFIG_NAME,
        dict(glaucoma=args.glaucoma, normal=args.normal, patients=args.patients, seed=args.seed,
             reduced=args.reduced, noise=cfg.noise, out=args.out),
    )
    print(f"wrote {len(ds)} samples ({g} glaucoma, {n} normal) at {cfg.height}x{cfg.width} "
          f"from {min(args.patients, g) + min(args.patients, n)} patients to {ds.manifest}")
    return EXIT_OK


def resolve_run(args) -> RunConfig:
    d = MODE_DEFAULTS[args.mode]
    return RunConfig(
        mode=args.mode,
        epochs=args.epochs if args.epochs is not None else d["epochs"],
        batch_size=args.batch_size,
        lr=args.lr if args.lr is not None else d["lr"],
        seed=args.seed,
        reduced=args.reduced,
        with_da=args.with_da,
        da_factor=args.da_factor,
        test_fraction=args.test_fraction,
        folds=args.folds,
        manifest=args.manifest,
        out=args.out,
        weights=args.weights,
        class_weights=args.class_weights,
        threads=args.threads,
    )


def initial_state(run: RunConfig, spec: models.ModelSpec, seed_offset: int = 0) -> models.ModelState:
    rng = seeded_rng(run.seed + seed_offset, 3)
    if run.weights:
        tensors = archive.read_archive(run.weights)
        # Pretrained VGG bases usually come without our top model.
        return models.load_weights(spec, tensors, strict=run.mode == "scratch", rng=rng)
    if run.mode != "scratch":
        log.warning("no --weights given: %s base starts from random initialisation", run.mode)
    return models.init_state(spec, rng)


def _echo(run: RunConfig, spec: models.ModelSpec) -> None:
    extra = f", dropout={VGG_DROPOUT}, frozen blocks 1-{spec.frozen_blocks}" if run.mode != "scratch" else ""
    print(f"mode={run.mode} lr={run.lr:g} epochs={run.epochs} batch={run.batch_size} "
          f"input={'x'.join(map(str, spec.input_shape))}{extra}")


def _split(run: RunConfig, ds: Dataset):
    plan = split_train_test(ds, run.test_fraction, seeded_rng(run.seed, 4))
    return plan, ds.subset(plan.train_ids), ds.subset(plan.test_ids)


def cmd_train(args) -> int:
    run = resolve_run(args)
    spec = model_spec_for(run.mode, run.reduced)
    _echo(run, spec)
    ds = load_dataset(run.manifest)
    plan, train, test = _split(run, ds)
    out = _out_dir(run.out)
    state = initial_state(run, spec)
    state, trace = optim.fit(state, train, run.train_config())
    archive.write_archive(out / WEIGHTS_NAME, models.save_weights(state))
    reports.write_trace_csv(out / "trace.csv", trace)
    plots.plot_trace(trace, out / "trace.png", title=f"{run.mode} training loss")
    write_dataset_manifest(out / "train_manifest.csv", train)
    write_dataset_manifest(out / "test_manifest.csv", test)
    reports.write_config(out / CONFIG_NAME, asdict(run))
    print(f"trained on {len(train)} samples; held out {len(test)} "
          f"(test fraction glaucoma {plan.achieved['glaucoma']:.3f}, normal {plan.achieved['normal']:.3f})")
    print(f"final loss {trace[-1].loss:.5f}; weights -> {out / WEIGHTS_NAME}")
    return EXIT_OK


def _score_and_report(state, ds: Dataset, out: Path, title: str, threshold: float = 0.5):
    scores = optim.predict_dataset(state, ds)
    labels = ds.labels
    notes = []
    report = metrics.basic_metrics(metrics.confusion(labels, scores, threshold))
    curve = auc = None
    try:
        curve, auc = metrics.roc_auc(labels, scores)
    except UndefinedMetricError as e:
        notes.append(f"AUC undefined: {e}")
    report = metrics.MetricReport(**{**report.as_dict(), "auc": auc})
    reports.write_metrics_csv(out / "metrics.csv", report)
    (out / "metrics.txt").write_text(reports.metrics_text(report, title, notes), encoding="utf-8")
    reports.write_scores_csv(out / "scores.csv", ds.ids, [LABELS[y] for y in labels], scores)
    if curve is not None:
        reports.write_roc_csv(out / "roc.csv", curve)
        plots.plot_roc({title: (curve, auc)}, out / "roc.png", title=title)
    return report, curve, auc


def cmd_crossval(args) -> int:
    run = resolve_run(args)
    if run.folds < 2:
        raise UsageError("--folds must be >= 2 for cross-validation")
    spec = model_spec_for(run.mode, run.reduced)
    _echo(run, spec)
    ds = load_dataset(run.manifest)
    _, train, _ = _split(run, ds)
    try:
        plan = make_icv_folds(train, run.folds, seeded_rng(run.seed, 5))
    except PartitionError as e:
        raise PartitionError(f"{e}; generate more patients per class or lower --folds") from e
    out = _out_dir(run.out)
    column = "With DA" if run.with_da else "Without DA"
    fold_reports, curves = [], {}
    for j, fold in enumerate(plan.folds, start=1):
        fdir = _out_dir(str(out / f"fold_{j}"))
        state = initial_state(run, spec, seed_offset=j)
        state, trace = optim.fit(state, train.subset(fold.train_ids), run.train_config(seed_offset=j))
        reports.write_trace_csv(fdir / "trace.csv", trace)
        rep, curve, auc = _score_and_report(state, train.subset(fold.val_ids), fdir, f"fold {j}")
        fold_reports.append(rep)
        if curve is not None:
            curves[f"fold {j}"] = (curve, auc)
        print(f"fold {j}: " + "  ".join(
            f"{metrics.METRIC_LABELS[m]}={reports._fmt(getattr(rep, m), 4)}" for m in metrics.METRIC_NAMES))
    agg = metrics.aggregate_folds(fold_reports)
    reports.write_aggregate(out / "aggregate.csv", out / "aggregate.txt", agg, column)
    if curves:
        plots.plot_roc(curves, out / "rocs.png", title=f"ICV ROC curves ({column})")
    reports.write_config(out / CONFIG_NAME, asdict(run))
    print((out / "aggregate.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _resolve_model(args) -> tuple[models.ModelState, dict]:
    """Load an archive, taking mode/reduced from flags or the config beside it."""
    beside = Path(args.weights).parent / CONFIG_NAME
    cfg = reports.read_config(beside) if beside.exists() else {}
    mode = args.mode or cfg.get("mode")
    if mode is None:
        raise UsageError(f"--mode is required (no {CONFIG_NAME} next to the weights)")
    reduced = args.reduced if args.reduced is not None else _bool(cfg.get("reduced", "false"))
    spec = model_spec_for(mode, reduced)
    state = models.load_weights(spec, archive.read_archive(args.weights), strict=True)
    return state, dict(mode=mode, reduced=reduced)


def cmd_evaluate(args) -> int:
    state, resolved = _resolve_model(args)
    ds = load_dataset(args.manifest)
    out = _out_dir(args.out)
    report, curve, _ = _score_and_report(state, ds, out, f"{resolved['mode']} test", args.threshold)
    reports.write_config(
        out / CONFIG_NAME,
        dict(weights=args.weights, manifest=args.manifest, out=args.out, threshold=args.threshold, **resolved),
    )
    print((out / "metrics.txt").read_text(encoding="utf-8"), end="")
    if curve is not None:
        print(f"roc points: {len(curve.fpr)} -> {out / 'roc.csv'}")
    return EXIT_OK


def cmd_cam(args) -> int:
    state, resolved = _resolve_model(args)
    ds = load_dataset(args.manifest)
    out = _out_dir(args.out)
    missing = [s for s in args.sample_ids if s not in set(ds.ids)]
    if missing:
        raise LookupError(f"unknown sample id(s): {', '.join(missing)}")
    rows = []
    for sid in args.sample_ids:
        s = ds.get(sid)
        x = stack_inputs([s], state.spec.input_shape)[0]
        mask = synth.load_mask(args.manifest, sid)
        for cls_name in args.classes:
            c = cam.compute_cam(state, x, LABELS.index(cls_name), sid)
            c = cam.resize_cam(c, *s.image.shape[:2])
            cam.export_heatmap(c, s, out / f"{sid}_{cls_name}")
            if mask is not None and mask.shape == s.image.shape[:2]:
                hot = c.map[..., 0] >= 0.5
                in_band = float((hot & mask).sum() / hot.sum()) if hot.any() else 0.0
                rows.append(f"{sid},{cls_name},{cam.band_contrast(c.map, mask):.6f},{in_band:.6f}")
    if rows:
        (out / "cam_overlap.csv").write_text(
            "sample_id,class,band_contrast,hot_fraction_in_band\n" + "\n".join(rows) + "\n", encoding="utf-8"
        )
    reports.write_config(
        out / CONFIG_NAME,
        dict(weights=args.weights, manifest=args.manifest, out=args.out,
             sample_ids=" ".join(args.sample_ids), classes=" ".join(args.classes), **resolved),
    )
    print(f"wrote {2 * len(args.sample_ids) * len(args.classes)} heat-map files to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "cam": cmd_cam,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors by exiting with 2
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=getattr(args, "threads", None)):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PartitionError, ArchiveError, ConfigurationError, ParameterError,
            UnsupportedArchitectureError, LookupError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
