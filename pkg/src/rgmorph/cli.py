"""Command-line interface: ``rgmorph <command> [options]``.

Commands: synth, prep, train, encode, fit-gmm, generate, reconstruct, eval,
sweep. Every command accepts ``--config FILE`` with ``key=value`` lines
(``#`` starts a comment); explicit flags override file values.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import persistence
from .datapipe import (
    CLASS_NAMES,
    SPLIT_NAMES,
    build_dataset,
    parse_class,
    synth_raw,
)
from .dnnae import ArchSpec, TrainConfig, build_dnnae, evaluate, encode, decode, train, write_metrics_csv, _fmt
from .exceptions import RgmorphError
from .gmm import EmOptions, em_fit
from .neural import deterministic
from .pipeline import generate_morphologies
from .rng import TAG_SAMPLE, TAG_SYNTH, RngStream

log = logging.getLogger("rgmorph")

# config key -> (type, default); keys double as argparse dests
CONFIG_KEYS = {
    "seed": (int, 0),
    "epochs": (int, 200),
    "batch_size": (int, 100),
    "code_len": (int, 256),
    "widths": (str, "2048,1024,1024"),
    "loss_mode": (str, "mse_ce"),
    "regularizer": (str, "bn"),
    "keep_prob": (float, 0.5),
    "aug_factor_fri": (int, None),
    "aug_factor_frii": (int, None),
    "gmm_cov": (str, "diag"),
    "data": (str, None),
    "ckpt": (str, None),
    "out": (str, None),
    "metrics": (str, None),
    "gmm": (str, None),
    "out_dir": (str, None),
}
LOSS_CHOICES = {"mse": "mse_only", "mse_ce": "mse_plus_ce"}


class UsageError(Exception):
    pass


def read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            typ = CONFIG_KEYS[key][0]
            try:
                values[key] = typ(value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return values


def _resolve(args):
    """Fill unset (None) options from the config file, then defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key, (_, default) in CONFIG_KEYS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, cfg.get(key, default))
    if getattr(args, "loss_mode", None) not in (None, *LOSS_CHOICES):
        raise UsageError(f"loss must be one of {sorted(LOSS_CHOICES)}")
    if getattr(args, "regularizer", None) not in (None, "bn", "dropout"):
        raise UsageError("reg must be bn or dropout")
    if getattr(args, "gmm_cov", None) not in (None, "diag", "full"):
        raise UsageError("gmm-cov must be diag or full")
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required (flag or config key)")


def _int_list(text):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"expected positive integers, got {text!r}")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    _require(args, "out")
    if args.n_per_class < 5:
        raise UsageError("--n-per-class must be >= 5")
    raws, labels = [], []
    for label in (0, 1):
        for i in range(args.n_per_class):
            raw, _ = synth_raw(label, RngStream(args.seed, (TAG_SYNTH, label, i)), size=args.raw_size)
            raws.append(raw)
            labels.append(label)
    factors = {0: args.aug_factor_fri or 1, 1: args.aug_factor_frii or 1}
    if args.raw_dir:
        os.makedirs(args.raw_dir, exist_ok=True)
        with open(os.path.join(args.raw_dir, "labels.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "label"])
            for i, (raw, lab) in enumerate(zip(raws, labels)):
                name = f"{CLASS_NAMES[lab].lower()}_{i:05d}.pgm"
                persistence.export_pgm(raw / raw.max(), os.path.join(args.raw_dir, name))
                w.writerow([name, CLASS_NAMES[lab]])
    ds = build_dataset(raws, labels, factors, args.seed, size=args.crop)
    persistence.save_dataset(args.out, ds)
    log.info("wrote %d records to %s", len(ds), args.out)


def cmd_prep(args):
    _require(args, "out")
    raws, labels = [], []
    with open(args.labels, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise UsageError("labels CSV needs columns filename,label")
        for row in reader:
            raws.append(persistence.read_pgm(os.path.join(args.images, row["filename"])))
            labels.append(parse_class(row["label"]))
    factors = {
        0: 200 if args.aug_factor_fri is None else args.aug_factor_fri,
        1: 400 if args.aug_factor_frii is None else args.aug_factor_frii,
    }
    ds = build_dataset(raws, labels, factors, args.seed, size=args.crop)
    persistence.save_dataset(args.out, ds)
    log.info("wrote %d records to %s", len(ds), args.out)


def _train_cfg(args):
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        loss_mode=LOSS_CHOICES[args.loss_mode],
    )


def _arch(args, side, code_len=None):
    return ArchSpec(
        input_side=side,
        encoder_widths=tuple(_int_list(args.widths)),
        code_len=args.code_len if code_len is None else code_len,
        regularizer=args.regularizer,
        keep_prob=args.keep_prob,
    )


def cmd_train(args):
    _require(args, "data")
    if args.out is None:
        args.out = "model.dnae"
    ds = persistence.load_dataset(args.data)
    metrics = args.metrics or args.out + ".metrics.csv"
    if args.resume:
        model = persistence.load_checkpoint(args.resume)
        append = True
    else:
        model = build_dnnae(_arch(args, ds.images.shape[1]), seed=args.seed)
        append = False
    if append and not os.path.exists(metrics):
        append = False
    write_metrics_csv(metrics, [], append=append)

    def on_epoch_end(m, row):
        write_metrics_csv(metrics, [row], append=True)
        if args.checkpoint_every and m.epochs_done % args.checkpoint_every == 0:
            persistence.save_checkpoint(args.out, m)
            persistence.snap_to_storage(m)

    train(model, ds.xy(0), ds.xy(1) if np.any(ds.split == 1) else None, _train_cfg(args), on_epoch_end)
    persistence.save_checkpoint(args.out, model)


def _split_subset(ds, split):
    if split == "all":
        return ds
    codes = {v: k for k, v in SPLIT_NAMES.items()}
    return ds.subset(codes[split])


def cmd_encode(args):
    _require(args, "ckpt", "data", "out")
    model = persistence.load_checkpoint(args.ckpt)
    ds = _split_subset(persistence.load_dataset(args.data), args.split)
    with deterministic():
        codes = encode(model, ds.images.astype(np.float64))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "split", "origin_id", "aug_index"] + [f"f{j}" for j in range(codes.shape[1])])
        for i in range(len(ds)):
            w.writerow(
                [int(ds.labels[i]), int(ds.split[i]), int(ds.origin_id[i]), int(ds.aug_index[i])]
                + [_fmt(v) for v in codes[i]]
            )


def cmd_fit_gmm(args):
    _require(args, "ckpt", "data", "out")
    label = parse_class(args.cls)
    model = persistence.load_checkpoint(args.ckpt)
    ds = persistence.load_dataset(args.data)
    splits = [s.strip() for s in args.splits.split(",")]
    codes_by_name = {v: k for k, v in SPLIT_NAMES.items()}
    sel = (ds.labels == label) & np.isin(ds.split, [codes_by_name[s] for s in splits])
    with deterministic():
        codes = encode(model, ds.images[sel].astype(np.float64))
        opts = EmOptions(max_iters=args.max_iters, tol=args.tol, seed=args.seed, ridge=args.ridge)
        gmm, trace = em_fit(codes, args.k, opts, args.gmm_cov)
    persistence.save_gmm(args.out, gmm)
    log.info("EM finished after %d iterations, mean log-likelihood %.4f", len(trace), trace[-1])


def cmd_generate(args):
    _require(args, "gmm", "ckpt")
    out_dir = args.out_dir or "."
    label = parse_class(args.cls)
    model = persistence.load_checkpoint(args.ckpt)
    gmm = persistence.load_gmm(args.gmm)
    if gmm.n_features != model.arch.code_len:
        raise RgmorphError(f"mixture dimension {gmm.n_features} != model code length {model.arch.code_len}")
    with deterministic():
        images, _ = generate_morphologies(model, gmm, args.n, RngStream(args.seed, (TAG_SAMPLE, label)))
    os.makedirs(out_dir, exist_ok=True)
    for i, img in enumerate(images):
        persistence.export_pgm(img, os.path.join(out_dir, f"{CLASS_NAMES[label].lower()}_{i:04d}.pgm"))


def cmd_reconstruct(args):
    _require(args, "ckpt", "data")
    out_dir = args.out_dir or "."
    model = persistence.load_checkpoint(args.ckpt)
    ds = _split_subset(persistence.load_dataset(args.data), args.split)
    n = min(args.n, len(ds))
    with deterministic():
        recon = decode(model, encode(model, ds.images[:n].astype(np.float64)))
    os.makedirs(out_dir, exist_ok=True)
    for i in range(n):
        tag = f"{i:04d}_{CLASS_NAMES[int(ds.labels[i])].lower()}"
        persistence.export_pgm(ds.images[i].astype(np.float64), os.path.join(out_dir, f"{tag}_input.pgm"))
        persistence.export_pgm(recon[i], os.path.join(out_dir, f"{tag}_recon.pgm"))


EVAL_COLUMNS = ["split", "n", "mse", "mse_per_pixel", "ce", "mse_fri", "mse_frii", "accuracy"]


def cmd_eval(args):
    _require(args, "ckpt", "data")
    model = persistence.load_checkpoint(args.ckpt)
    ds = _split_subset(persistence.load_dataset(args.data), args.split)
    with deterministic():
        rep = evaluate(model, ds.xy())
    row = [
        args.split,
        rep.n_samples,
        _fmt(rep.mse),
        _fmt(rep.mse / model.arch.n_pixels),
        _fmt(rep.ce),
        _fmt(rep.per_class_mse.get(0, float("nan"))),
        _fmt(rep.per_class_mse.get(1, float("nan"))),
        _fmt(rep.accuracy),
    ]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_sweep(args):
    _require(args, "data", "out")
    ds = persistence.load_dataset(args.data)
    lens = _int_list(args.code_lens)
    tr, va, te = ds.xy(0), ds.xy(1) if np.any(ds.split == 1) else None, ds.xy(2)
    rows = []
    for m_len in lens:
        model = build_dnnae(_arch(args, ds.images.shape[1], code_len=m_len), seed=args.seed)
        train(model, tr, va, _train_cfg(args))
        with deterministic():
            rep = evaluate(model, te)
        rows.append(
            [m_len, _fmt(rep.mse), _fmt(rep.per_class_mse.get(0, float("nan"))), _fmt(rep.per_class_mse.get(1, float("nan")))]
        )
        log.info("code_len %d: test mse %.4f", m_len, rep.mse)
        if args.ckpt_dir:
            os.makedirs(args.ckpt_dir, exist_ok=True)
            persistence.save_checkpoint(os.path.join(args.ckpt_dir, f"code{m_len}.dnae"), model)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code_len", "test_mse", "test_mse_fri", "test_mse_frii"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# parser


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--loss", dest="loss_mode", choices=sorted(LOSS_CHOICES))
    training.add_argument("--reg", dest="regularizer", choices=["bn", "dropout"])
    training.add_argument("--code-len", type=_positive_int)
    training.add_argument("--widths", help="encoder hidden widths, e.g. 2048,1024,1024")
    training.add_argument("--epochs", type=int)
    training.add_argument("--batch-size", type=_positive_int)
    training.add_argument("--keep-prob", type=float)

    p = argparse.ArgumentParser(prog="rgmorph", description="Radio galaxy morphology autoencoder + GMM generator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic FRI/FRII dataset")
    s.add_argument("--n-per-class", type=int, default=200)
    s.add_argument("--out")
    s.add_argument("--aug-factor-fri", type=_positive_int)
    s.add_argument("--aug-factor-frii", type=_positive_int)
    s.add_argument("--raw-size", type=_positive_int, default=40, help="side of the rendered raw cutouts")
    s.add_argument("--crop", type=_positive_int, default=40)
    s.add_argument("--raw-dir", help="also write raw PGM cutouts and labels.csv here")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep", parents=[common], help="preprocess PGM cutouts into a dataset")
    s.add_argument("--images", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out")
    s.add_argument("--aug-factor-fri", type=_positive_int)
    s.add_argument("--aug-factor-frii", type=_positive_int)
    s.add_argument("--crop", type=_positive_int, default=40)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train", parents=[common, training], help="train the autoencoder")
    s.add_argument("--data")
    s.add_argument("--out", help="checkpoint path (default: model.dnae)")
    s.add_argument("--metrics", help="per-epoch CSV (default: <out>.metrics.csv)")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.add_argument("--checkpoint-every", type=_positive_int)
    s.set_defaults(func=cmd_train)

    split_choices = ["train", "val", "test", "all"]
    s = sub.add_parser("encode", parents=[common], help="write feature codes to CSV")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split", choices=split_choices, default="all")
    s.add_argument("--out")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("fit-gmm", parents=[common], help="fit a class mixture to codes")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--class", dest="cls", required=True, type=str.lower, choices=["fri", "frii"])
    s.add_argument("--splits", default="train,val")
    s.add_argument("--k", type=_positive_int, default=3)
    s.add_argument("--gmm-cov", choices=["diag", "full"])
    s.add_argument("--ridge", type=float, default=1e-6)
    s.add_argument("--max-iters", type=_positive_int, default=500)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit_gmm)

    s = sub.add_parser("generate", parents=[common], help="sample codes and decode images")
    s.add_argument("--gmm")
    s.add_argument("--ckpt")
    s.add_argument("--class", dest="cls", required=True, type=str.lower, choices=["fri", "frii"])
    s.add_argument("-n", type=_positive_int, default=8)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("reconstruct", parents=[common], help="write input/reconstruction PGM pairs")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split", choices=split_choices, default="test")
    s.add_argument("-n", type=_positive_int, default=10)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", parents=[common], help="test-set losses as CSV")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split", choices=split_choices, default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, training], help="train per code length, CSV of test losses")
    s.add_argument("--data")
    s.add_argument("--code-lens", default="16,32,64,128,256,512")
    s.add_argument("--out")
    s.add_argument("--ckpt-dir")
    s.set_defaults(func=cmd_sweep)
    return p


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        _resolve(args)
        if getattr(args, "epochs", None) is not None and args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rgmorph: error: {exc}", file=sys.stderr)
        return 2
    except (RgmorphError, OSError, KeyError) as exc:
        print(f"rgmorph: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
