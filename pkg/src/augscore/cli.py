"""Command-line entry point.

Every subcommand echoes its fully-resolved configuration into the output
directory and confines side effects there.  Exit codes: 0 success, 1 usage
or configuration error, 2 data error, 3 numeric divergence.  Failures print
one machine-parseable line to stderr: ``error: <category>: <reason>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .augment import TRANSFORM_IDS, sample_view_pair
from .autodiff import NumericError
from .config import (ConfigError, DatasetConfig, RunConfig, dump_resolved,
                     parse_config)
from .data import (DataError, LabeledDataset, export_dataset, load_cifar10,
                   load_exported, synth_shapes)
from .evaluate import (knn_eval, linear_probe, pair_score_grid,
                       score_histogram, score_magnitude_curve)
from .losses import METHODS, WEIGHT_MODES, WEIGHT_NORMS, SIMCLR_FORMS
from .rng import derive_seed
from .score import (ScoreNetDesc, default_sigma_ladder, init_score_net,
                    train_score_model)
from .training import (CheckpointError, embed_dataset, load_checkpoint,
                       save_checkpoint, train_cl)

ANALYZE_KINDS = ("curve", "hist", "pair_grid", "contour")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argparse that raises instead of exiting, for exit-code control."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="augscore", add_help=True)
    sub = p.add_subparsers(dest="cmd", required=True, metavar="subcommand")

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", default=None, help="JSON run config")
            sp.add_argument("--data", default=None,
                            help="dataset directory (overrides config path)")

    sp = sub.add_parser("synth", help="generate a synthetic shape dataset")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=500)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--classes", type=int, default=4)
    common(sp, config=False)

    sp = sub.add_parser("train-score", help="train the denoising score model")
    common(sp)

    sp = sub.add_parser("train-cl", help="train a weighted contrastive encoder")
    common(sp)
    sp.add_argument("--score", default=None, help="score model checkpoint")
    sp.add_argument("--method", choices=METHODS, default=None)
    sp.add_argument("--weight-mode", choices=WEIGHT_MODES, default=None)
    sp.add_argument("--weight-norm", choices=WEIGHT_NORMS, default=None)
    sp.add_argument("--simclr-form", choices=SIMCLR_FORMS, default=None)

    sp = sub.add_parser("eval-knn", help="k-NN accuracy of a frozen encoder")
    sp.add_argument("encoder_ckpt", help="encoder checkpoint path")
    common(sp)
    sp.add_argument("--k", type=int, default=5)

    sp = sub.add_parser("eval-linear", help="linear-probe accuracy")
    sp.add_argument("encoder_ckpt", help="encoder checkpoint path")
    common(sp)
    sp.add_argument("--steps", type=int, default=100,
                    help="probe training epochs")

    sp = sub.add_parser("analyze", help="score-model analysis tables")
    common(sp)
    sp.add_argument("--score", required=True, help="score model checkpoint")
    sp.add_argument("--kind", choices=ANALYZE_KINDS, required=True)
    sp.add_argument("--transform-a", choices=TRANSFORM_IDS,
                    default="brightness")
    sp.add_argument("--transform-b", choices=TRANSFORM_IDS,
                    default="brightness")
    sp.add_argument("--steps", type=int, default=9)

    sp = sub.add_parser("compare", help="methods x weight modes sweep")
    common(sp)
    sp.add_argument("--methods", default="simclr",
                    help="comma-separated method list")
    sp.add_argument("--weight-modes", default="constant,score",
                    help="comma-separated weight mode list")
    sp.add_argument("--k", type=int, default=5)
    return p


# ----------------------------------------------------------------- plumbing

def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        seed = args.seed if args.seed is not None else 0
        cfg = RunConfig(seed=seed)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.dataset.path = args.data
        if cfg.dataset.kind == "synth":
            cfg.dataset.kind = "file"
    for flag, field in (("method", "method"), ("weight_mode", "weight_mode"),
                        ("weight_norm", "weight_norm"),
                        ("simclr_form", "simclr_form")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.cl, field, v)
    return cfg.validate()


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, out / "resolved_config.json")


def _load_datasets(cfg: RunConfig) -> tuple:
    d = cfg.dataset
    if d.kind == "synth":
        train = synth_shapes(d.n, d.resolution, d.class_count,
                             derive_seed(cfg.seed, 0xDA7A, 0))
        test = synth_shapes(d.n_test, d.resolution, d.class_count,
                            derive_seed(cfg.seed, 0xDA7A, 1))
        return train, test
    base = Path(d.path)
    if d.kind == "file":
        if not base.is_dir():
            raise DataError(f"dataset path {base} must be a directory "
                            "holding train.bin and test.bin")
        return load_exported(base / "train.bin"), load_exported(base / "test.bin")
    if d.kind == "cifar10":
        batches = sorted(base.glob("data_batch_*"))
        test_path = base / "test_batch"
        if not batches or not test_path.is_file():
            raise DataError(f"{base} lacks data_batch_* or test_batch files")
        return load_cifar10(batches), load_cifar10([test_path])
    raise DataError(f"unknown dataset kind {d.kind!r}")


def _sigma_ladder(cfg: RunConfig):
    return default_sigma_ladder(cfg.score.sigma_levels, cfg.score.sigma_max,
                                cfg.score.sigma_min)


def _train_score(cfg: RunConfig, train: LabeledDataset):
    desc = ScoreNetDesc(kind="unet",
                        in_channels=train.images.shape[-1],
                        channels=cfg.score.channels)
    return train_score_model(train.images, desc, _sigma_ladder(cfg),
                             epochs=cfg.score.epochs,
                             batch_size=cfg.score.batch_size,
                             lr=cfg.score.lr, seed=cfg.seed)


def _load_score(path):
    params, _ = load_checkpoint(path)
    if not isinstance(params.desc, ScoreNetDesc):
        raise CheckpointError(f"{path} is not a score model checkpoint")
    return params


def _load_encoder(path):
    from .nn import EncoderDesc
    params, _ = load_checkpoint(path)
    if not isinstance(params.desc, EncoderDesc):
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    return params


def _knn_csv(report, path: Path) -> None:
    per = ",".join(f"class_{i}" for i in range(len(report.per_class)))
    vals = ",".join("nan" if np.isnan(a) else f"{a:.8g}"
                    for a in report.per_class)
    path.write_text(f"k,accuracy,n_test,{per}\n"
                    f"{report.k},{report.accuracy:.8g},{report.n_test},{vals}\n")


# -------------------------------------------------------------- subcommands

def _cmd_synth(args) -> int:
    cfg = RunConfig(seed=args.seed if args.seed is not None else 0,
                    dataset=DatasetConfig(kind="synth", n=args.n,
                                          n_test=args.n_test,
                                          resolution=args.resolution,
                                          class_count=args.classes))
    cfg.validate()
    out = Path(args.out)
    _echo_config(cfg, out)
    train, test = _load_datasets(cfg)
    export_dataset(train, out / "train.bin")
    export_dataset(test, out / "test.bin")
    manifest = {"n": args.n, "n_test": args.n_test,
                "resolution": args.resolution, "classes": args.classes,
                "seed": cfg.seed, "files": ["train.bin", "test.bin"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True) + "\n")
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


def _cmd_train_score(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    train, _ = _load_datasets(cfg)
    params, history = _train_score(cfg, train)
    save_checkpoint(params, {"step": len(history)}, out / "score.ckpt")
    lines = ["epoch,loss"] + [f"{h['epoch']},{h['loss']:.8g}" for h in history]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    print(f"score model trained: final loss {history[-1]['loss']:.6g}")
    return 0


def _cmd_train_cl(args) -> int:
    cfg = _resolve_config(args)
    score_params = None
    if cfg.cl.weight_mode in ("score", "score_field"):
        if not args.score:
            raise UsageError(f"--score is required when weight-mode is "
                             f"{cfg.cl.weight_mode!r}")
        score_params = _load_score(args.score)
    elif args.score:
        raise UsageError(f"--score given but weight-mode "
                         f"{cfg.cl.weight_mode!r} does not read scores")
    out = Path(args.out)
    _echo_config(cfg, out)
    train, _ = _load_datasets(cfg)
    params, metrics = train_cl(cfg, train, score_params=score_params,
                               out_dir=out)
    metrics.to_csv(out / "metrics.csv")
    final = metrics.rows[-1]["loss"] if metrics.rows else float("nan")
    print(f"encoder trained: final loss {final:.6g}")
    return 0


def _cmd_eval_knn(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    params = _load_encoder(args.encoder_ckpt)
    train, test = _load_datasets(cfg)
    emb_train = embed_dataset(params, train.images)
    emb_test = embed_dataset(params, test.images)
    report = knn_eval(emb_train, train.labels, emb_test, test.labels,
                      k=args.k)
    _knn_csv(report, out / "knn.csv")
    print(f"knn k={report.k} accuracy {report.accuracy:.6g} "
          f"on {report.n_test} test images")
    return 0


def _cmd_eval_linear(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    params = _load_encoder(args.encoder_ckpt)
    train, test = _load_datasets(cfg)
    emb_train = embed_dataset(params, train.images)
    emb_test = embed_dataset(params, test.images)
    acc = linear_probe(emb_train, train.labels, emb_test, test.labels,
                       epochs=args.steps, lr=0.1)
    (out / "linear.csv").write_text(f"epochs,lr,accuracy\n"
                                    f"{args.steps},0.1,{acc:.8g}\n")
    print(f"linear probe accuracy {acc:.6g}")
    return 0


def _cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    score = _load_score(args.score)
    _, test = _load_datasets(cfg)
    sigmas = _sigma_ladder(cfg)
    idx = cfg.score.sigma_index
    if args.kind == "curve":
        table = score_magnitude_curve(score, test.images, args.transform_a,
                                      args.steps, sigmas, idx)
    elif args.kind == "hist":
        views = [sample_view_pair(img, i, 0, cfg.seed, cfg.aug).view_a
                 for i, img in enumerate(test.images)]
        table = score_histogram(score, test.images, np.stack(views),
                                sigmas, idx)
    else:
        kind = "pair_grid" if args.kind == "pair_grid" else "contour"
        table = pair_score_grid(score, test.images[0], args.transform_a,
                                args.transform_b, args.steps, sigmas, idx,
                                kind=kind)
    path = out / f"analysis_{args.kind}.csv"
    path.write_text(table.to_csv())
    print(f"wrote {path}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    methods = [m for m in args.methods.split(",") if m]
    modes = [m for m in args.weight_modes.split(",") if m]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    for m in modes:
        if m not in WEIGHT_MODES:
            raise UsageError(f"unknown weight mode {m!r}")
    out = Path(args.out)
    _echo_config(cfg, out)
    train, test = _load_datasets(cfg)
    score_params = None
    if any(m in ("score", "score_field") for m in modes):
        score_params, _ = _train_score(cfg, train)
        save_checkpoint(score_params, {"step": cfg.score.epochs},
                        out / "score.ckpt")
    rows = []
    for method in methods:
        for mode in modes:
            run_cfg = dataclasses.replace(
                cfg, cl=dataclasses.replace(cfg.cl, method=method,
                                            weight_mode=mode,
                                            optimizer=None, lr=None,
                                            weight_decay=None))
            run_cfg.validate()
            sp = score_params if mode in ("score", "score_field") else None
            params, metrics = train_cl(run_cfg, train, score_params=sp)
            emb_train = embed_dataset(params, train.images)
            emb_test = embed_dataset(params, test.images)
            report = knn_eval(emb_train, train.labels, emb_test, test.labels,
                              k=args.k)
            final = metrics.rows[-1]["loss"] if metrics.rows else float("nan")
            rows.append((method, mode, final, report.accuracy))
            print(f"{method}/{mode}: final loss {final:.6g}, "
                  f"knn accuracy {report.accuracy:.6g}")
    lines = ["method,weight_mode,final_loss,knn_accuracy"]
    lines += [f"{m},{w},{l:.8g},{a:.8g}" for m, w, l, a in rows]
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    return 0


_COMMANDS = {"synth": _cmd_synth, "train-score": _cmd_train_score,
             "train-cl": _cmd_train_cl, "eval-knn": _cmd_eval_knn,
             "eval-linear": _cmd_eval_linear, "analyze": _cmd_analyze,
             "compare": _cmd_compare}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:      # --help
        return 0 if e.code in (0, None) else 1
    try:
        return _COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
