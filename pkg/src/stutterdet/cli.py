"""Command-line entry point: ``stutterdet <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 incompatible
checkpoint, 4 data error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .audio import FeatureConfig, write_features
from .augment import AUGMENTATIONS, NoisePool, expand_manifest
from .data import Label, SplitPlan, make_split, parse_manifest, write_manifest
from .exceptions import (
    AudioDecodeError,
    IncompatibleCheckpointError,
    InfeasibleSplitError,
    ManifestError,
    MissingClassError,
    PoolError,
    StutterDetError,
)
from .metrics import RunReport, average_reports, config_hash
from .model import Checkpoint
from .synth import SynthSpec, generate
from .train import FeatureStore, TrainConfig, cross_corpus, evaluate, run_cv

logger = logging.getLogger("stutterdet")

EXIT_OK, EXIT_USAGE, EXIT_INCOMPATIBLE, EXIT_DATA = 0, 2, 3, 4
CONFIG_SECTIONS = {"features", "train", "synth", "pool", "manifests", "out_dir"}
MANIFEST_KEYS = {"train", "test", "clean"}


class ConfigError(StutterDetError):
    pass


def load_config(path):
    """Read a JSON run configuration, rejecting unknown keys."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    _check_keys(cfg.get("features", {}), {f.name for f in fields(FeatureConfig)}, "features")
    _check_keys(cfg.get("train", {}), {f.name for f in fields(TrainConfig)}, "train")
    _check_keys(cfg.get("synth", {}), {f.name for f in fields(SynthSpec)}, "synth")
    _check_keys(cfg.get("manifests", {}), MANIFEST_KEYS, "manifests")
    return cfg


def _check_keys(section, allowed, name):
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")


def _seed(flag, section):
    if flag is not None:
        return flag
    if "SK_SEED" in os.environ:
        try:
            return int(os.environ["SK_SEED"])
        except ValueError:
            raise ConfigError("SK_SEED must be an integer") from None
    return section.get("seed", 0)


def _feature_config(cfg):
    try:
        return FeatureConfig(**cfg.get("features", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad feature config: {exc}") from exc


def write_resolved(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(resolved, hash=config_hash(resolved))
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return payload["hash"]


def _pick(flag, section, key, default=None):
    return flag if flag is not None else section.get(key, default)


def cmd_synth(args, cfg):
    section = dict(cfg.get("synth", {}))
    out = _pick(args.out, cfg, "out_dir")
    if out is None:
        raise ConfigError("--out is required")
    imbalance = dict(section.get("class_imbalance", {}))
    for item in args.imbalance or []:
        name, _, mult = item.partition("=")
        if name not in Label.__members__:
            raise ConfigError(f"unknown class {name!r} in --imbalance")
        imbalance[name] = float(mult)
    try:
        spec = SynthSpec(
            n_per_class=_pick(args.n_per_class, section, "n_per_class", 40),
            clip_s=_pick(args.clip_s, section, "clip_s", 3.0),
            rate=section.get("rate", 16000),
            n_podcasts=_pick(args.n_podcasts, section, "n_podcasts", 10),
            seed=_seed(args.seed, section),
            class_imbalance=imbalance,
            ambiguity=_pick(args.ambiguity, section, "ambiguity", 0.0),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    manifest = generate(spec, out)
    resolved = asdict(spec)
    resolved["class_imbalance"] = {k.name: v for k, v in spec.class_imbalance.items()}
    write_resolved(out, {"command": "synth", "synth": resolved})
    print(Path(out) / "manifest.csv")
    logger.info("%d records", len(manifest))
    return EXIT_OK


def cmd_augment(args, cfg):
    manifests = cfg.get("manifests", {})
    src = _pick(args.manifest, manifests, "clean")
    pool_path = _pick(args.pool, cfg, "pool")
    out = _pick(args.out, cfg, "out_dir")
    if src is None or pool_path is None or out is None:
        raise ConfigError("--manifest, --pool and --out are required")
    if not Path(pool_path).exists():
        raise ConfigError(f"noise pool {pool_path} does not exist")
    types = tuple(t.strip() for t in args.types.split(",")) if args.types else AUGMENTATIONS
    bad = set(types) - set(AUGMENTATIONS)
    if bad:
        raise ConfigError(f"unknown augmentation types {sorted(bad)}")
    manifest = parse_manifest(src)
    pool = NoisePool.load(pool_path)
    seed = _seed(args.seed, cfg.get("train", {}))
    augmented = expand_manifest(manifest, pool, seed, Path(out) / "audio", types)
    path = write_manifest(augmented, Path(out) / "manifest.csv")
    write_resolved(out, {"command": "augment", "manifest": str(src), "pool": str(pool_path),
                         "types": list(types), "seed": seed})
    print(path)
    return EXIT_OK


def cmd_features(args, cfg):
    feat_cfg = _feature_config(cfg)
    src = _pick(args.manifest, cfg.get("manifests", {}), "train")
    out = _pick(args.out, cfg, "out_dir")
    if src is None or out is None:
        raise ConfigError("--manifest and --out are required")
    manifest = parse_manifest(src)
    store = FeatureStore(feat_cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in manifest.records:
        path = out / f"{rec.id}.skft"
        write_features(path, store.features(rec))
        index.append({"id": rec.id, "path": path.name, "label": rec.label.name})
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    write_resolved(out, {"command": "features", "manifest": str(src),
                         "features": asdict(feat_cfg)})
    print(out)
    return EXIT_OK


def cmd_split(args, cfg):
    src = _pick(args.manifest, cfg.get("manifests", {}), "train")
    if src is None or args.out is None:
        raise ConfigError("--manifest and --out are required")
    manifest = parse_manifest(src)
    plan = make_split(manifest, args.folds, seed=_seed(args.seed, cfg.get("train", {})))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan.save(args.out)
    print(args.out)
    return EXIT_OK


def _train_config(args, cfg):
    section = dict(cfg.get("train", {}))
    overrides = {
        "variant": args.variant, "loss_mode": args.loss, "freeze_workflow": args.workflow,
        "max_epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "patience": args.patience,
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    section["seed"] = _seed(args.seed, section)
    try:
        return TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def cmd_train(args, cfg):
    train_cfg = _train_config(args, cfg)
    feat_cfg = _feature_config(cfg)
    src = _pick(args.manifest, cfg.get("manifests", {}), "train")
    out = _pick(args.out, cfg, "out_dir")
    if src is None or out is None:
        raise ConfigError("--manifest and --out are required")
    out = Path(out)
    manifest = parse_manifest(src)
    if args.plan:
        plan = SplitPlan.load(args.plan)
    else:
        plan = make_split(manifest, args.folds, seed=train_cfg.seed)
    if args.fold_limit:
        plan = SplitPlan(plan.folds[: args.fold_limit])
    resolved = {"command": "train", "manifest": str(src), "train": train_cfg.to_dict(),
                "features": asdict(feat_cfg), "folds": len(plan)}
    write_resolved(out, resolved)
    plan.save(out / "plan.json")
    result = run_cv(train_cfg, manifest, plan, FeatureStore(feat_cfg), out_dir=out,
                    jobs=args.jobs)
    if result.failures:
        (out / "failures.json").write_text(json.dumps(result.failures, indent=2) + "\n",
                                           encoding="utf-8")
    if result.average is None:
        logger.error("every fold failed")
        return EXIT_DATA
    print(format_report(result.average))
    return EXIT_OK


def cmd_eval(args, cfg):
    manifests = cfg.get("manifests", {})
    test_src = _pick(args.test_manifest, manifests, "test")
    if test_src is None:
        raise ConfigError("--test-manifest is required")
    if args.checkpoint is None and _pick(args.train_manifest, manifests, "train") is None:
        raise ConfigError("give --checkpoint, or --train-manifest for cross-corpus training")
    test = parse_manifest(test_src)
    if args.checkpoint is not None:
        ckpt = Checkpoint.load(args.checkpoint)
        feat_cfg = FeatureConfig(**ckpt.config.get("features", cfg.get("features", {})))
        report = evaluate(ckpt, test, FeatureStore(feat_cfg), fold="eval",
                          cfg_hash=config_hash(ckpt.config))
    else:
        train_cfg = _train_config(args, cfg)
        feat_cfg = _feature_config(cfg)
        train = parse_manifest(_pick(args.train_manifest, manifests, "train"))
        result, report = cross_corpus(train_cfg, train, test, FeatureStore(feat_cfg))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            result.checkpoint.config["features"] = asdict(feat_cfg)
            result.checkpoint.save(out / "model.pt")
    if args.out:
        out = Path(args.out)
        target = out / "report.json" if out.suffix != ".json" else out
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(report.to_json() + "\n", encoding="utf-8")
    if report.coverage < 1.0:
        logger.warning("coverage %.1f%%: %d records skipped", 100 * report.coverage,
                       report.skipped)
    print(format_report(report))
    return EXIT_OK


def cmd_report(args, cfg):
    reports = []
    for path in args.reports:
        try:
            reports.append(RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"cannot read report {path}: {exc}") from exc
    report = reports[0] if len(reports) == 1 else average_reports(reports)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(format_report(report))
    return EXIT_OK


def format_report(report):
    names = [label.name for label in Label]
    head = " ".join(f"{n[:5]:>6}" for n in names)
    accs = " ".join(
        f"{100 * report.per_class_accuracy[n]:6.2f}" if n in report.per_class_accuracy else "     -"
        for n in names
    )
    return (f"fold={report.fold} n={report.n} coverage={100 * report.coverage:.1f}%\n"
            f"{head}   total  macroF1\n"
            f"{accs}  {100 * report.total_accuracy:6.2f}  {100 * report.macro_f1:6.2f}")


def build_parser():
    p = argparse.ArgumentParser(prog="stutterdet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic tone corpus")
    s.add_argument("--out")
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--n-podcasts", type=int)
    s.add_argument("--clip-s", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--ambiguity", type=float)
    s.add_argument("--imbalance", action="append", metavar="CLASS=MULT")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("augment", help="expand a clean manifest with augmented copies")
    a.add_argument("--manifest")
    a.add_argument("--pool", help="pool listing file or directory")
    a.add_argument("--out")
    a.add_argument("--types", help=f"comma list from {','.join(AUGMENTATIONS)}")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_augment)

    f = sub.add_parser("features", help="write MFCC matrices as .skft files")
    f.add_argument("--manifest")
    f.add_argument("--out")
    f.set_defaults(func=cmd_features)

    sp = sub.add_parser("split", help="write a podcast-grouped fold plan")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_split)

    def train_flags(parser):
        parser.add_argument("--variant", choices=("single", "mb", "mc"))
        parser.add_argument("--loss", choices=("ce", "wce"))
        parser.add_argument("--workflow",
                            choices=("none", "enc-frz", "enc-disf-frz", "enc-fluent-frz"))
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--patience", type=int)
        parser.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="cross-validated training")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--plan", help="fold plan from `split`")
    t.add_argument("--folds", type=int, default=10)
    t.add_argument("--fold-limit", type=int, help="run only the first N folds")
    t.add_argument("--jobs", type=int, default=1)
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a cross-corpus run")
    e.add_argument("--checkpoint")
    e.add_argument("--train-manifest")
    e.add_argument("--test-manifest")
    e.add_argument("--out")
    train_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print or average RunReport files")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"stutterdet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleCheckpointError as exc:
        print(f"stutterdet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ManifestError, AudioDecodeError, PoolError, MissingClassError,
            InfeasibleSplitError, StutterDetError, OSError) as exc:
        print(f"stutterdet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
