"""Command-line interface: ``lfrclab {train,eval,analyze,transfer}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file-format
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ds_da_scatter, export_heatmap, robust_accuracy, transfer_eval, write_scatter_csv, UNDEFINED
from .attacks import IMAGE_RANGE, UNBOUNDED, AttackConfig
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import (RunConfig, build_train_config, effective_config_text, load_datasets, load_run_config,
                     materialize_data)
from .data import Dataset, load_csv, load_idx
from .errors import ConfigError, FormatError, IncompatibleCheckpointError, InputError, NumericalError
from .trainer import train, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ATTACKS = ("none", "fgsm", "pgd", "cw")


class UsageError(Exception):
    pass


def _print_table(rows, out) -> None:
    for row in rows:
        out.write("\t".join(str(v) for v in row) + "\n")


def _fmt(v) -> str:
    return "%.12g" % v if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# shared helpers


def _load_dataset(paths, spec) -> Dataset:
    """One path is a CSV file, two are IDX images and labels.

    Tabular rows are reshaped to image inputs when the model expects images.
    """
    if len(paths) == 1:
        ds = load_csv(paths[0], spec.num_classes)
        if len(spec.input_shape) == 3 and ds.inputs.ndim == 2:
            if ds.inputs.shape[1] != int(np.prod(spec.input_shape)):
                raise InputError(f"{paths[0]}: {ds.inputs.shape[1]} features cannot form images of shape {spec.input_shape}")
            ds = Dataset(ds.inputs.reshape((len(ds),) + spec.input_shape), ds.labels, ds.num_classes, ds.provenance)
        return ds
    if len(paths) == 2:
        return load_idx(paths[0], paths[1], spec.num_classes)
    raise UsageError("--dataset takes one CSV path or two IDX paths (images, labels)")


def _attack_from_args(args, dataset: Dataset) -> AttackConfig | None:
    name = args.attack
    if name == "none":
        return None
    image = dataset.is_image
    if args.eps is None and not image:
        raise UsageError(f"--eps is required for attack {name!r} on tabular data")
    eps = 8 / 255 if args.eps is None else args.eps
    if name == "fgsm":
        return AttackConfig(eps, eps if eps > 0 else 1.0, 1, False, "cross-entropy",
                            IMAGE_RANGE if image else UNBOUNDED)
    if args.step is not None:
        step = args.step
    elif image and args.eps is None:
        step = 2 / 255
    else:
        step = eps / 4 if eps > 0 else 1.0
    return AttackConfig(eps, step, args.iters, not args.no_random_start,
                        "cw-margin" if name == "cw" else "cross-entropy", IMAGE_RANGE if image else UNBOUNDED)


def _attack_banner(attack: AttackConfig | None) -> list:
    if attack is None:
        return [("attack", "none")]
    return [("attack.epsilon", _fmt(attack.epsilon)), ("attack.step_size", _fmt(attack.step_size)),
            ("attack.iterations", attack.iterations), ("attack.random_start", str(attack.random_start).lower()),
            ("attack.inner_loss", attack.inner_loss),
            ("attack.data_range", f"{_fmt(attack.data_range[0])},{_fmt(attack.data_range[1])}")]


def _write_banner(rows, out, path=None) -> None:
    text = "".join(f"# {k} = {v}\n" for k, v in rows)
    out.write("# effective config\n" + text)
    if path is not None:
        Path(path).write_text(text)


def _load_model(path):
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out) -> int:
    if not args.config:
        raise UsageError("train needs --config PATH")
    cfg: RunConfig = load_run_config(args.config)
    if args.seed is not None:
        cfg.set("train", "seed", args.seed)
    if args.lam is not None:
        cfg.set("train", "lambda", args.lam)
    if args.epochs is not None:
        cfg.set("train", "epochs", args.epochs)
    if args.tap:
        cfg.set("model", "taps", tuple(args.tap))
    if args.out is not None:
        cfg.set("output", "dir", str(Path(args.out).resolve()))
    materialize_data(cfg)
    train_set, val_set = load_datasets(cfg)
    tc = build_train_config(cfg, train_set)
    out_dir = Path(cfg.get("output", "dir") or (cfg.base_dir / "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.values.setdefault("output", {})["dir"] = str(out_dir)
    text = effective_config_text(cfg, tc)
    out.write("# effective config\n" + "".join(f"# {line}\n" for line in text.splitlines() if line))
    (out_dir / "effective_config.ini").write_text(text)

    _print_table([("epoch", "lr", "train_ce", "train_lfrc", "val_clean_acc", "val_robust_acc")], out)
    progress = lambda r: (_print_table([(r.epoch, _fmt(r.lr), _fmt(r.train_ce), _fmt(r.train_lfrc),
                                         _fmt(r.val_clean_acc), _fmt(r.val_robust_acc))], out), out.flush())
    result = train(tc, train_set, val_set, progress=progress)
    save_checkpoint(result.best, out_dir / "best.ckpt")
    save_checkpoint(result.last, out_dir / "last.ckpt")
    write_history_csv(result.history, out_dir / "history.csv")
    _print_table([("best_epoch", result.best.epoch), ("best_val_robust_acc", _fmt(result.best.metric)),
                  ("output_dir", out_dir)], out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model = _load_model(args.checkpoint)
    dataset = _load_dataset(args.dataset, model.spec).astype(model.dtype)
    attack = _attack_from_args(args, dataset)
    banner = [("checkpoint", Path(args.checkpoint).resolve()), ("dataset", " ".join(str(Path(p).resolve()) for p in args.dataset)),
              ("batch_size", args.batch_size), ("seed", args.seed)] + _attack_banner(attack)
    target = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    _write_banner(banner, out, target.with_suffix(".config.txt"))
    clean = robust_accuracy(model, dataset, None, args.batch_size, args.seed)
    rows = [("clean", _fmt(clean))]
    if attack is not None:
        rows.append((args.attack, _fmt(robust_accuracy(model, dataset, attack, args.batch_size, args.seed))))
    _print_table([("attack", "accuracy")] + rows, out)
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "accuracy"])
        w.writerows(rows)
    return EXIT_OK


def cmd_analyze(args, out) -> int:
    if args.batch_size < 2:
        raise InputError("--batch-size must be at least 2")
    model = _load_model(args.checkpoint)
    dataset = _load_dataset(args.dataset, model.spec).astype(model.dtype)
    if args.batch_size > len(dataset):
        raise InputError(f"--batch-size {args.batch_size} exceeds dataset size {len(dataset)}")
    attack = _attack_from_args(args, dataset)
    tap = args.tap or model.spec.tap_points[-1]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    banner = [("checkpoint", Path(args.checkpoint).resolve()), ("dataset", " ".join(str(Path(p).resolve()) for p in args.dataset)),
              ("batch_size", args.batch_size), ("tap", tap), ("seed", args.seed), ("out", out_dir.resolve())]
    _write_banner(banner + _attack_banner(attack), out, out_dir / "effective_config.txt")

    def save(b, m_nat, m_adv):
        export_heatmap(m_nat, out_dir / f"batch{b:04d}_nat")
        export_heatmap(m_adv, out_dir / f"batch{b:04d}_adv")

    diags = ds_da_scatter(model, dataset, attack, args.batch_size, tap, args.seed, on_batch=save)
    summary = write_scatter_csv(diags, out_dir / "scatter.csv")
    _print_table([("batch_index", "ds", "da")] + [(d.batch_index, _fmt(d.ds), d.da) for d in diags], out)
    _print_table([(k, UNDEFINED if v is None else _fmt(v)) for k, v in summary.items()], out)
    return EXIT_OK


def cmd_transfer(args, out) -> int:
    surrogate = _load_model(args.surrogate)
    target = _load_model(args.target)
    dataset = _load_dataset(args.dataset, target.spec).astype(target.dtype)
    attack = _attack_from_args(args, dataset)
    banner = [("surrogate", Path(args.surrogate).resolve()), ("target", Path(args.target).resolve()),
              ("dataset", " ".join(str(Path(p).resolve()) for p in args.dataset)), ("batch_size", args.batch_size),
              ("seed", args.seed)] + _attack_banner(attack)
    _write_banner(banner, out)
    acc = transfer_eval(surrogate, target, dataset, attack, args.batch_size, args.seed)
    _print_table([("attack", "transfer_accuracy"), (args.attack, _fmt(acc))], out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_attack_args(p, default_attack="pgd") -> None:
    p.add_argument("--dataset", nargs="+", required=True, metavar="PATH",
                   help="a CSV file, or IDX images and labels files")
    p.add_argument("--attack", choices=ATTACKS, default=default_attack)
    p.add_argument("--eps", type=float, help="L-inf budget (image default 8/255)")
    p.add_argument("--step", type=float, help="PGD/CW step size (image default 2/255)")
    p.add_argument("--iters", type=int, default=20, help="PGD/CW iterations (default 20)")
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="seed for attack random starts")
    p.add_argument("--batch-size", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfrclab", description="Adversarial training with relation consistency.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config file")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="consistency loss weight")
    p.add_argument("--tap", action="append", help="tap point (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean and adversarial accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_attack_args(p)
    p.add_argument("--out", help="results CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="similarity heatmaps and DS/DA scatter")
    p.add_argument("--checkpoint", required=True)
    _add_attack_args(p)
    p.add_argument("--tap", help="tap point (default: the model's last tap)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("transfer", help="accuracy of a target model under attacks crafted on a surrogate")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--target", required=True)
    _add_attack_args(p)
    p.set_defaults(func=cmd_transfer)
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (UsageError, ConfigError, IncompatibleCheckpointError) as exc:
        err.write(f"lfrclab {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (FormatError, InputError, OSError) as exc:
        err.write(f"lfrclab {args.command}: error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        err.write(f"lfrclab {args.command}: numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
