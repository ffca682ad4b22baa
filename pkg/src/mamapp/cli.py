"""``mamapp`` command line: split | train | eval | predict | features | params.

Exit codes: 0 success, 2 usage/config/data/checkpoint error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .config_file import (RunConfig, build_run_config, load_run_config, parse_config_text,
                          parse_value)
from .evaluation import confusion, export_features, metrics, pca, write_pca
from .model import (REFERENCE_PARAM_COUNT, CheckpointError, ConfigError, MamAppConfig, build,
                    count_params, load_checkpoint, predict_proba, read_checkpoint,
                    summarize_params)
from .tensor import DimensionError, NumericError
from .training import NonFiniteLossError, predict_batches, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("mamapp")


def _env_seed() -> Optional[int]:
    raw = os.environ.get("MAMAPP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"MAMAPP_SEED must be an integer, got {raw!r}") from exc


def _resolve_seed(flag: Optional[int], default: int = 0) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return env if env is not None else default


def _write_outputs_manifest(out: Path, files: Sequence[Path], command: str) -> None:
    entries = sorted(str(Path(f).relative_to(out)) if Path(f).is_relative_to(out) else str(f)
                     for f in files)
    (out / "manifest.json").write_text(json.dumps({"command": command, "files": entries}, indent=2)
                                       + "\n", encoding="utf-8")


def _index_for(data: str, seed: int) -> D.DatasetIndex:
    """A directory is indexed and split with ``seed``; a CSV is read as a split manifest."""
    path = Path(data)
    if path.is_file() and path.suffix.lower() == ".csv":
        return D.read_manifest(path)
    return D.stratified_split(D.index_dataset(path), seed)


def _print_split_table(index: D.DatasetIndex, stream=None) -> None:
    stream = stream or sys.stdout
    rows = index.split_table()
    width = max(len("Class"), len("Total"), *(len(r[0]) for r in rows))
    print(f"{'Class':<{width}}  {'Train':>6} {'Val':>6} {'Test':>6} {'Total':>6}", file=stream)
    for name, tr, va, te, tot in rows:
        print(f"{name:<{width}}  {tr:>6} {va:>6} {te:>6} {tot:>6}", file=stream)
    sums = [sum(r[i] for r in rows) for i in range(1, 5)]
    print(f"{'Total':<{width}}  {sums[0]:>6} {sums[1]:>6} {sums[2]:>6} {sums[3]:>6}", file=stream)


# ------------------------------------------------------------------ commands
def cmd_split(args) -> int:
    seed = _resolve_seed(args.seed)
    index = D.stratified_split(D.index_dataset(args.data), seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_manifest(index, out)
    _print_split_table(index)
    return EXIT_OK


def _apply_overrides(values: dict, args) -> dict:
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = parse_value(v)
    for key in ("data", "out", "epochs", "workers", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    seed = args.seed if args.seed is not None else (values.get("seed") if "seed" in values else _env_seed())
    if seed is not None:
        values["seed"] = seed
    return values


def _run_config(args) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        try:
            values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_run_config(_apply_overrides(values, args))


def cmd_train(args) -> int:
    run = _run_config(args)
    if run.data is None:
        raise ConfigError("no dataset given (set 'data' in the config or pass --data)")
    if run.out is None:
        raise ConfigError("no output directory given (set 'out' in the config or pass --out)")
    cfg = run.model
    index = _index_for(run.data, cfg.seed)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(index, out / "split.csv")
    result = train(cfg, index, out_dir=out, workers=run.workers, resume=args.resume,
                   progress=lambda r: print(f"epoch {r.epoch}: train_loss {r.train_loss:.4f} "
                                            f"val_loss {r.val_loss:.4f} val_acc {r.val_acc:.4f}",
                                            flush=True))
    files = [out / n for n in ("best.ckpt", "last.ckpt", "trainlog.csv", "summary.json", "split.csv")]
    _write_outputs_manifest(out, files, "train")
    print(f"best epoch {result.best_epoch}; artifacts in {out}")
    return EXIT_OK


def _load_ckpt(path, config_path=None):
    cfg = load_run_config(config_path).model if config_path else None
    model, cfg = load_checkpoint(path, cfg)
    _, meta, _ = read_checkpoint(path)
    classes = meta.get("classes") or [str(i) for i in range(cfg.num_classes)]
    return model, cfg, classes


def _split_batches(index, split, cfg: MamAppConfig, workers: int):
    normalize = ((cfg.normalize_mean, cfg.normalize_std) if cfg.normalize_mean is not None else None)
    return D.make_batches(index, split, cfg.batch_size, cfg.seed, 0,
                          image_size=tuple(cfg.input_size[:2]), augment_images=False,
                          workers=workers, normalize=normalize)


def _check_classes(index: D.DatasetIndex, classes: Sequence[str]) -> None:
    if list(index.classes) != list(classes):
        raise ConfigError(f"dataset classes {index.classes} do not match checkpoint classes {list(classes)}")


def cmd_eval(args) -> int:
    model, cfg, classes = _load_ckpt(args.ckpt, args.config)
    index = _index_for(args.data, _resolve_seed(args.seed, cfg.seed))
    _check_classes(index, classes)
    y, p, losses, _ = predict_batches(model, _split_batches(index, args.split, cfg, args.workers),
                                      cfg.label_smoothing)
    report = metrics(confusion(y, p, cfg.num_classes, classes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.confusion.write_csv(out / "confusion.csv")
    _write_outputs_manifest(out, [out / "metrics.json", out / "confusion.csv"], "eval")
    print(f"split {args.split}: n={report.confusion.total} accuracy {report.accuracy:.4f} "
          f"loss {float(losses.mean()):.4f}")
    print(f"micro P/R/F1 {report.micro['p']:.4f} {report.micro['r']:.4f} {report.micro['f1']:.4f}")
    print(f"macro P/R/F1 {report.macro['p']:.4f} {report.macro['r']:.4f} {report.macro['f1']:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg, classes = _load_ckpt(args.ckpt, args.config)
    img = D.load_and_preprocess(args.image, tuple(cfg.input_size[:2]))
    if cfg.normalize_mean is not None:
        img = (img - np.asarray(cfg.normalize_mean, np.float32)[:, None, None]) \
            / np.asarray(cfg.normalize_std, np.float32)[:, None, None]
    probs = predict_proba(model, img[None])[0]
    top = int(np.argmax(probs))
    print(classes[top])
    for name, pr in zip(classes, probs):
        print(f"  {name}: {pr:.6f}")
    return EXIT_OK


def cmd_features(args) -> int:
    model, cfg, classes = _load_ckpt(args.ckpt, args.config)
    index = _index_for(args.data, _resolve_seed(args.seed, cfg.seed))
    _check_classes(index, classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats, paths, names = export_features(model, _split_batches(index, args.split, cfg, args.workers),
                                          out / "features.csv", classes)
    files = [out / "features.csv"]
    if args.pca:
        proj = pca(feats, args.pca)
        write_pca(proj, paths, names, out / f"pca{args.pca}.csv", out / f"pca{args.pca}.json")
        files += [out / f"pca{args.pca}.csv", out / f"pca{args.pca}.json"]
        ratios = ", ".join(f"{r:.4f}" for r in proj.explained_variance_ratio)
        print(f"explained variance ratios: {ratios}")
    _write_outputs_manifest(out, files, "features")
    print(f"wrote {len(paths)} feature rows to {out / 'features.csv'}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_run_config(args.config).model if args.config else MamAppConfig()
    total, breakdown = count_params(build(cfg))
    groups = summarize_params(breakdown)
    width = max(len(k) for k in list(breakdown) + list(groups))
    for name, n in breakdown.items():
        print(f"{name:<{width}}  {n:>7,}")
    print("-" * (width + 9))
    for name, n in groups.items():
        print(f"{name:<{width}}  {n:>7,}")
    print(f"total: {total:,} (paper: {REFERENCE_PARAM_COUNT:,})")
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamapp", description="Mam-App leaf disease classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="index an image folder and write a stratified split manifest")
    s.add_argument("--data", required=True, help="dataset root with one directory per class")
    s.add_argument("--seed", type=int, default=None, help="shuffle seed (default: $MAMAPP_SEED or 0)")
    s.add_argument("--out", required=True, help="manifest CSV to write")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", help="continue from a last.ckpt")
    t.add_argument("--data", help="dataset root or split manifest CSV")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--workers", type=int, default=None, help="image loading threads")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    def eval_like(name, func, help_):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--config", help="build the model from this config instead of the stored one")
        e.add_argument("--data", required=True, help="dataset root or split manifest CSV")
        e.add_argument("--split", default="test", choices=D.SPLITS)
        e.add_argument("--seed", type=int, default=None,
                       help="split seed when --data is a directory (default: checkpoint seed)")
        e.add_argument("--out", default=".", help="output directory")
        e.add_argument("--workers", type=int, default=1)
        e.set_defaults(func=func)
        return e

    eval_like("eval", cmd_eval, "metrics and confusion matrix on one split")
    f = eval_like("features", cmd_features, "export pooled features, optionally with PCA")
    f.add_argument("--pca", type=int, choices=(2, 3), default=None)

    r = sub.add_parser("predict", help="classify one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--config", help="build the model from this config instead of the stored one")
    r.add_argument("--image", required=True)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("params", help="count trainable parameters")
    c.add_argument("--config", help="key = value config file (default: built-in config)")
    c.set_defaults(func=cmd_params)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLossError, NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, D.IngestionError, DimensionError, KeyError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
