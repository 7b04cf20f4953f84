"""Command-line front end: split, train, eval, augment, stats, params."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import augment as aug
from . import data, metrics, model, optim, plotting, stats

log = logging.getLogger("texnet")

PUBLISHED_PARAMS = [("TCNN", "11,900"), ("TCNN Inc", "1,252,392"), ("Inception V3", "23,851,784")]
DTYPES = {"single": np.float32, "double": np.float64}


class CommandError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    return h, w


def _manifest(args) -> data.Manifest:
    source = args.manifest or args.data
    if not source:
        raise CommandError("one of --data or --manifest is required")
    if not Path(source).exists():
        raise CommandError(f"data source not found: {source}")
    m = data.load_manifest(source, verify=getattr(args, "verify_counts", False))
    m = data.filter_magnification(m, args.mag)
    if not len(m):
        raise CommandError(f"no {args.mag}x images found in {source}")
    return m


def _plan(args, manifest) -> data.FoldPlan:
    if args.plan:
        plan = data.FoldPlan.load(args.plan)
        known = set(manifest.patients())
        for k, f in enumerate(plan.folds):
            missing = set(f.train + f.validation + f.test) - known
            if missing:
                raise CommandError(f"plan fold {k} names patients absent from the data: {sorted(missing)[:3]}")
        return plan
    return data.make_folds(manifest, n_folds=args.folds, seed=args.seed)


# -- split -----------------------------------------------------------------------

def cmd_split(args) -> int:
    manifest = _manifest(args)
    plan = data.make_folds(manifest, n_folds=args.folds, seed=args.seed)
    out = Path(args.out)
    target = out / "split.json" if out.suffix != ".json" else out
    target.parent.mkdir(parents=True, exist_ok=True)
    plan.save(target)
    print(f"{'fold':>4} {'train':>6} {'val':>5} {'test':>5} {'train_img':>9} {'val_img':>7} {'test_img':>8}")
    for k, f in enumerate(plan.folds):
        n_img = [len(manifest.select(getattr(f, r))) for r in ("train", "validation", "test")]
        print(f"{k:>4} {len(f.train):>6} {len(f.validation):>5} {len(f.test):>5} "
              f"{n_img[0]:>9} {n_img[1]:>7} {n_img[2]:>8}")
    print(f"wrote {target}")
    return 0


# -- train -------------------------------------------------------------------------

def _activation_bytes(spec, batch, dtype) -> int:
    return sum(int(np.prod(s)) for s in model.trace_shapes(spec)) * batch * np.dtype(dtype).itemsize


def _train_fold(cfg: dict, k: int) -> dict:
    manifest = data.Manifest([data.ImageRecord(**r) for r in cfg["records"]])
    plan = data.FoldPlan.from_dict(cfg["plan"])
    fold = plan.folds[k]
    dtype = DTYPES[cfg["precision"]]
    shape = tuple(cfg["size"])
    spec = model.build(cfg["arch"], (*shape, 3))
    seed = cfg["seed"]

    # augmentation is applied to the training role only
    train_records = manifest.select(fold.train)
    items = aug.augment_dataset(train_records, aug.AugmentConfig(
        cfg["aug"], data.seed_for(seed, "augment", k), allow_any_factor=cfg["allow_any_factor"]))
    train = data.RecordDataset(items, shape=shape, dtype=dtype)
    val = data.RecordDataset.from_records(manifest.select(fold.validation), shape=shape, dtype=dtype)

    store = model.init_parameters(spec, data.seed_for(seed, "init", k), dtype)
    tc = optim.TrainConfig(max_epochs=cfg["epochs"], patience=cfg["patience"], batch_size=cfg["batch"],
                           seed=data.seed_for(seed, "shuffle", k), restore_best=not cfg["keep_last"])
    report = optim.fit(spec, store, train, val, tc)

    fold_dir = Path(cfg["out"]) / f"fold{k}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(fold_dir / "checkpoint.bin", spec, store)
    (fold_dir / "train_report.json").write_text(report.to_json())
    return {"fold": k, "train_items": len(train), "best_epoch": report.best_epoch,
            "stopped_epoch": report.stopped_epoch,
            "best_val_accuracy": max(report.val_accuracy)}


def cmd_train(args) -> int:
    if args.aug not in aug.FACTORS and not args.allow_any_factor:
        raise CommandError(f"--aug {args.aug} is not one of {aug.FACTORS} (use --allow-any-factor)")
    if args.epochs < 1 or not 0 < args.patience < args.epochs:
        raise CommandError("need --epochs >= 1 and 0 < --patience < --epochs")
    manifest = _manifest(args)
    plan = _plan(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "split.json")

    spec = model.build(args.arch, (*args.size, 3))
    need = 3 * _activation_bytes(spec, args.batch, DTYPES[args.precision])
    if need > 8 * 2**30:
        log.warning("%s at %dx%d with batch %d needs roughly %.0f GiB for activations; "
                    "reduce --batch or --size if this machine runs out of memory",
                    args.arch, *args.size, args.batch, need / 2**30)

    cfg = {"records": [vars(r) for r in manifest.records], "plan": plan.to_dict(), "arch": args.arch,
           "size": list(args.size), "precision": args.precision, "seed": args.seed, "aug": args.aug,
           "allow_any_factor": args.allow_any_factor, "epochs": args.epochs, "patience": args.patience,
           "batch": args.batch, "keep_last": args.keep_last, "out": str(out)}
    _write_json(out / "run_config.json", {k: v for k, v in cfg.items() if k != "records"} | {"mag": args.mag})

    folds = range(plan.n_folds)
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                results = list(ex.map(_train_fold, [cfg] * plan.n_folds, folds))
        else:
            results = [_train_fold(cfg, k) for k in folds]
    except MemoryError:
        raise CommandError(
            f"out of memory training {args.arch}; full-resolution TCNN-Inception keeps 350x230 maps with "
            "up to 384 channels per image, so lower --batch (e.g. 2) or train at a reduced --size") from None
    for r in results:
        print(f"fold {r['fold']}: {r['train_items']} train items, best epoch {r['best_epoch']}, "
              f"stopped {r['stopped_epoch']}, val acc {r['best_val_accuracy']:.3f}")
    _write_json(out / "train_summary.json", results)
    return 0


# -- eval ----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    run = Path(args.out)
    run_cfg_path = run / "run_config.json"
    if not run_cfg_path.is_file():
        raise CommandError(f"{run} is not a training output directory (no run_config.json)")
    run_cfg = json.loads(run_cfg_path.read_text())
    plan = data.FoldPlan.load(args.plan or run / "split.json")
    args.mag = run_cfg.get("mag", args.mag)
    manifest = _manifest(args)
    folds = []
    for k, fold in enumerate(plan.folds):
        ckpt = run / f"fold{k}" / "checkpoint.bin"
        if not ckpt.is_file():
            raise CommandError(f"missing checkpoint {ckpt}")
        spec, store = model.load_checkpoint(ckpt)
        # evaluation only ever sees the test role, never augmented
        test = data.RecordDataset.from_records(manifest.select(fold.test), shape=spec.input_shape[:2],
                                               dtype=store.dtype, cache=False)
        preds = optim.evaluate(spec, store, test, args.batch)
        metrics.write_predictions_csv(run / f"fold{k}" / "predictions.csv", preds)
        folds.append(metrics.fold_metrics(preds))
    report = metrics.aggregate_folds(folds, model=run_cfg["arch"], aug_factor=run_cfg["aug"])
    target = run / "metrics.json"
    _write_json(target, report.to_dict())
    for key in ("accuracy_patient", "accuracy_image", "sensitivity", "specificity"):
        m, s = report.mean[key], report.sd[key]
        print(f"{key:>17}: " + ("undefined" if m is None else f"{m:.3f} +/- {s:.3f}"))
    print(f"wrote {target}")
    return 0


# -- augment preview -------------------------------------------------------------------

def cmd_augment(args) -> int:
    from PIL import Image

    manifest = _manifest(args)
    records = manifest.records[: args.limit]
    cfg = aug.AugmentConfig(args.aug, data.seed_for(args.seed, "augment", 0),
                            allow_any_factor=args.allow_any_factor)
    ds = data.RecordDataset(aug.augment_dataset(records, cfg), shape=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (rec, params) in enumerate(ds.items):
        img = ds.get_batch([i])[0]
        name = f"{Path(rec.path).stem}_v{i % args.aug:02d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out / name)
        index.append({"file": name, "source": rec.path, "params": None if params is None else params.to_dict()})
    _write_json(out / "augment_index.json", index)
    print(f"wrote {len(index)} images to {out}")
    return 0


# -- stats --------------------------------------------------------------------------------

def cmd_stats(args) -> int:
    if len(args.reports) < 2:
        raise CommandError("stats needs at least two metrics reports")
    reports = [metrics.MetricsReport.from_dict(json.loads(Path(p).read_text())) for p in args.reports]
    n = {r.n_folds for r in reports}
    if len(n) != 1:
        raise CommandError(f"reports have different fold counts: {sorted(n)}")
    names = [f"{r.model} {r.aug_factor}x" for r in reports]
    if len(set(names)) != len(names):
        names = [Path(p).parent.name or Path(p).stem for p in args.reports]
    matrix = [[r.folds[f][args.metric] for r in reports] for f in range(n.pop())]
    if any(v is None for row in matrix for v in row):
        raise CommandError(f"metric {args.metric} is undefined in some fold")
    rm = stats.friedman_ranks(matrix, names)
    cd = stats.nemenyi_cd(len(names), rm.accuracies.shape[0], args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    info = plotting.cd_diagram(rm.average_ranks, cd, names, out / "cd_diagram.svg")
    result = rm.to_dict() | {"metric": args.metric, "alpha": args.alpha, "cd": cd, "groups": info["groups"],
                             "significant_pairs": [[names[i], names[j]]
                                                   for i, j in stats.significant_pairs(rm.average_ranks, cd)]}
    if len(names) >= 3:
        chi2, p = rm.friedman()
        result["friedman"] = {"chi2": chi2, "p_value": p}
    _write_json(out / "ranks.json", result)
    for name, r in sorted(zip(names, rm.average_ranks), key=lambda t: t[1]):
        print(f"{name:>24}  avg rank {r:.2f}")
    print(f"CD (alpha={args.alpha}, k={len(names)}, n={rm.accuracies.shape[0]}) = {cd:.3f}")
    print(f"wrote {out / 'ranks.json'} and {out / 'cd_diagram.svg'}")
    return 0


# -- params --------------------------------------------------------------------------------

def cmd_params(args) -> int:
    rows = []
    for name in model.BUILDERS:
        trainable, frozen = model.count_parameters(model.build(name))
        rows.append({"arch": name, "trainable": trainable, "non_trainable": frozen})
    print(f"{'architecture':<16}{'trainable':>12}{'non-trainable':>15}")
    for r in rows:
        print(f"{r['arch']:<16}{r['trainable']:>12,}{r['non_trainable']:>15,}")
    print("\npublished trainable counts (reference only):")
    for name, count in PUBLISHED_PARAMS:
        print(f"  {name:<14}{count:>12}")
    if args.out:
        _write_json(Path(args.out) / "params.json",
                    {"computed": rows, "published_reference": dict(PUBLISHED_PARAMS)})
    return 0


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texnet", description="Texture CNNs for histopathology images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    def common(p, data_source=True):
        p.add_argument("--config", help="JSON file of option defaults; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs")
        if data_source:
            p.add_argument("--data", help="BreakHis-style directory tree")
            p.add_argument("--manifest", help="CSV with header " + ",".join(data.MANIFEST_HEADER))
            p.add_argument("--mag", type=int, default=200, choices=data.MAGNIFICATIONS)

    p = sub.add_parser("split", help="write a patient-wise fold plan")
    common(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--verify-counts", action="store_true", help="check subtype counts against the public release")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model per fold")
    common(p)
    p.add_argument("--arch", choices=sorted(model.BUILDERS), default="tcnn")
    p.add_argument("--aug", type=int, default=1)
    p.add_argument("--allow-any-factor", action="store_true")
    p.add_argument("--folds", type=int, default=5, help="fold count when no --plan is given")
    p.add_argument("--plan")
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--size", type=_shape, default=(230, 350), help="network input HEIGHTxWIDTH")
    p.add_argument("--precision", choices=sorted(DTYPES), default="single")
    p.add_argument("--keep-last", action="store_true", help="keep final weights instead of the best epoch's")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints on their test patients")
    common(p)
    p.add_argument("--plan")
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="write augmented previews of a few images")
    common(p)
    p.add_argument("--aug", type=int, default=6)
    p.add_argument("--allow-any-factor", action="store_true")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--size", type=_shape, default=(230, 350))
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("stats", help="Friedman ranks, Nemenyi CD and CD diagram")
    common(p, data_source=False)
    p.add_argument("reports", nargs="+", help="metrics.json files, one per model")
    p.add_argument("--metric", default="accuracy_patient", choices=metrics.METRIC_NAMES)
    p.add_argument("--alpha", type=float, default=0.05, choices=sorted(stats.Q_ALPHA))
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("params", help="trainable parameter counts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        parser.commands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def _thread_limit():
    n = os.environ.get("TEXNET_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = _parse(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _thread_limit()
    try:
        return args.func(args)
    except (CommandError, data.ManifestError, ValueError, OSError) as exc:
        print(f"texnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
