"""Command-line entry point: ``clid {gen,run,probe,sweep,eval}``.

Every flag can also come from a ``key=value`` file passed with ``--config``;
flags given on the command line win. Outputs land under ``--out``, which
defaults to ``$CLID_OUTPUT_ROOT/<command>`` (``runs/<command>`` when unset).
All files are written to a temp name and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data, ranker
from .errors import ClidError, ConfigError, DataError, TrainingDivergence
from .losses import LOSS_KINDS, WEIGHT_RATIO_GRID, compat_probe
from .metrics import MetricsReport, evaluate, mean_ci
from .models import TwoTower
from .trainer import METHOD_LOSS, METHODS, Splits, TrainConfig, run_method, train_teacher, weight_ratio_sweep

log = logging.getLogger("clid")

OUTPUT_ENV = "CLID_OUTPUT_ROOT"
EXIT_DIVERGED = 3
EXIT_ERROR = 2
AGG_METRICS = ("ndcg10", "logloss", "ece", "gauc")


# -- output helpers --------------------------------------------------------------

def write_atomic(path, payload):
    """Write text or bytes to ``path`` via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _out_dir(args, command):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _size_range(text):
    """``20`` or ``5-30``."""
    lo, _, hi = str(text).partition("-")
    return int(lo) if not hi else (int(lo), int(hi))


def _flag(text):
    return str(text).lower() in ("1", "true", "yes", "on")


# -- config file -------------------------------------------------------------

def read_config(path):
    """``key=value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise DataError(f"config line without '=': {raw!r}")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def _with_config(sub, config):
    """Use values from the config file as defaults for the matching flags."""
    if config:
        for action in sub._actions:
            if action.dest in config:
                raw = config[action.dest]
                sub.set_defaults(**{action.dest: action.type(raw) if action.type else raw})
    return sub


# -- dataset source ----------------------------------------------------------

def _add_gen_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--num-queries", type=int, default=200)
    g.add_argument("--docs", type=_size_range, default=20, help="list size or lo-hi range")
    g.add_argument("--feat-dim", type=int, default=16)
    g.add_argument("--context-strength", type=float, default=2.0)
    g.add_argument("--weight-scale", type=float, default=1.5)
    g.add_argument("--context-scale", type=float, default=3.0)
    g.add_argument("--bias", type=float, default=0.0)
    g.add_argument("--data-seed", type=int, default=0)


def _synthetic(args):
    return data.gen_synthetic(args.num_queries, args.docs, args.feat_dim, args.context_strength,
                              args.data_seed, weight_scale=args.weight_scale, bias=args.bias,
                              context_scale=args.context_scale)


def load_splits(args):
    """Splits from ``--data`` (a fold directory) or a freshly generated synthetic set."""
    if args.data:
        meta_path = Path(args.data) / "meta.txt"
        transform = args.transform
        if transform is None:
            meta = data.read_meta(meta_path) if meta_path.exists() else {}
            transform = meta.get("transform", "log1p")
        return Splits(*data.load_split_dir(args.data, transform=transform == "log1p"))
    ds = _synthetic(args).dataset(transform=args.transform == "log1p")
    tr, va, te = data.split_lists(ds.n_lists)
    return Splits(ds.subset(tr), ds.subset(va), ds.subset(te))


def _add_train_flags(p):
    p.add_argument("--data", help="directory holding train.txt, vali.txt, test.txt")
    p.add_argument("--transform", choices=("log1p", "none"), default=None,
                   help="feature transform (default: from meta.txt, else log1p)")
    _add_gen_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--protocol", choices=("teacher_first", "simultaneous"), default="teacher_first")
    g.add_argument("--epochs", type=int, default=None, help="default 100, or 1 when simultaneous")
    g.add_argument("--batch-lists", type=int, default=8)
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--weight-decay", type=float, default=0.001)
    g.add_argument("--hidden", type=_int_list, default=(64, 32))
    g.add_argument("--shallow-hidden", type=int, default=256)
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--batchnorm", type=_flag, default=False)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0, help="trial t uses seed + t")
    g.add_argument("--eval-every", type=int, default=1)


def train_config(args, seed):
    return TrainConfig(protocol=args.protocol, epochs=args.epochs, batch_lists=args.batch_lists,
                       lr=args.lr, weight_decay=args.weight_decay, seed=seed,
                       eval_every=args.eval_every, hidden=tuple(args.hidden),
                       shallow_hidden=args.shallow_hidden, dropout=args.dropout,
                       batchnorm=args.batchnorm)


# -- commands ----------------------------------------------------------------

def cmd_gen(args):
    out = _out_dir(args, "gen")
    syn = _synthetic(args)
    groups = data.group_by_qid(syn.samples)
    tr, va, te = data.split_lists(len(groups))
    for name, idx in zip(data.SPLIT_FILES, (tr, va, te)):
        samples = [s for i in idx for s in groups[i].samples]
        write_atomic(out / name, data.format_svmlight(samples))
    meta = dict(syn.meta, transform="none", splits="60/20/20")
    write_atomic(out / "meta.txt", data.format_meta(meta))
    print(f"wrote {len(tr)}/{len(va)}/{len(te)} queries to {out}")
    return 0


def _save_model(directory, result, method, teacher=None):
    """One checkpoint per tower plus a manifest naming the composition."""
    params = result.params
    if isinstance(params, TwoTower):
        towers = {"main": params.main, "shallow": params.shallow}
    else:
        towers = {"main": params}
    teacher = result.teacher if result.teacher is not None else teacher
    if teacher is not None:
        towers["teacher"] = teacher
    lines = [f"method={method}"]
    for name, p in towers.items():
        write_atomic(directory / f"{name}.pfdr", ranker.params_to_bytes(p))
        lines.append(f"{name}={name}.pfdr")
    write_atomic(directory / "manifest.txt", "\n".join(lines) + "\n")


def _aggregate_rows(reports):
    rows = []
    for m in AGG_METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        if not vals:
            continue
        mean, half = mean_ci(vals)
        rows.append([m, repr(mean), repr(half), len(vals), "student-t 95%"])
    return rows


TRIAL_HEADER = ("trial", "seed", "method") + MetricsReport.COLUMNS
AGG_HEADER = ("metric", "mean", "ci95_halfwidth", "n_trials", "ci_method")


def cmd_run(args):
    out = _out_dir(args, "run")
    splits = load_splits(args)
    rows, reports, status = [], [], 0
    for t in range(args.trials):
        seed = args.seed + t
        cfg = train_config(args, seed)
        teacher = None
        try:
            if args.method in METHOD_LOSS and cfg.protocol == "teacher_first":
                teacher = train_teacher(splits, cfg).params
            rep, res = run_method(args.method, splits, cfg, teacher=teacher,
                                  weight_ratio=args.weight_ratio, temperature=args.temperature)
        except TrainingDivergence as exc:
            log.error("trial %d (seed %d) diverged: %s", t, seed, exc)
            status = EXIT_DIVERGED
            break
        reports.append(rep)
        rows.append([t, seed, args.method, *rep.csv_row()])
        tdir = out / f"trial_{t}"
        write_atomic(tdir / "log.csv", res.log.to_csv())
        _save_model(tdir, res, args.method, teacher)
        # rewrite after every trial so partial results survive a later failure
        write_atomic(out / "trials.csv", _csv_text(TRIAL_HEADER, rows))
        write_atomic(out / "aggregate.csv", _csv_text(AGG_HEADER, _aggregate_rows(reports)))
        print(f"trial {t} seed {seed}: ndcg10={rep.ndcg10:.4f} logloss={rep.logloss:.4f} ece={rep.ece:.4f}")
    if rows:
        for m, mean, half, n, _ in _aggregate_rows(reports):
            print(f"{m}: {float(mean):.4f} +/- {float(half):.4f} (n={n})")
    return status


PROBE_HEADER = ("loss", "n", "trials", "max_grad_norm", "min_grad_norm", "descent_fraction", "compatible")


def cmd_probe(args):
    n = args.n
    rows = []
    for kind in args.losses.split(","):
        rep = compat_probe(kind.strip(), n, args.trials, seed=args.seed, tau=args.temperature)
        rows.append([rep.loss_kind, args.n_text, rep.trials, repr(rep.max_grad_norm),
                     repr(rep.min_grad_norm), repr(rep.descent_fraction), rep.compatible])
    text = _csv_text(PROBE_HEADER, rows)
    if args.out:
        write_atomic(Path(args.out), text)
    sys.stdout.write(text)
    return 0


SWEEP_HEADER = ("ratio", "ndcg10", "neg_logloss")


def cmd_sweep(args):
    out = _out_dir(args, "sweep")
    splits = load_splits(args)
    cfg = train_config(args, args.seed)
    teacher = None
    if cfg.protocol == "teacher_first":
        teacher = train_teacher(splits, cfg).params
    results = weight_ratio_sweep(splits, cfg, grid=args.grid, teacher=teacher, method=args.method)
    rows = [[repr(r), "", ""] if rep is None else [repr(r), repr(rep.ndcg10), repr(-rep.logloss)]
            for r, rep in results]
    text = _csv_text(SWEEP_HEADER, rows)
    write_atomic(out / "sweep.csv", text)
    sys.stdout.write(text)
    return 0


def read_predictions(path):
    """Predictions CSV with columns qid, label, prediction and optionally user_id."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        missing = {"qid", "label", "prediction"} - cols
        if missing:
            raise DataError(f"predictions file lacks columns {sorted(missing)}")
        rows = list(reader)
    order, groups = [], {}
    for row in rows:
        q = row["qid"]
        if q not in groups:
            groups[q] = []
            order.append(q)
        groups[q].append(row)
    flat = [r for q in order for r in groups[q]]
    pred = np.array([float(r["prediction"]) for r in flat])
    labels = np.array([float(r["label"]) for r in flat])
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be 0 or 1")
    offsets = np.concatenate([[0], np.cumsum([len(groups[q]) for q in order])]).astype(int)
    users = np.array([r["user_id"] for r in flat]) if "user_id" in cols else None
    return pred, labels, offsets, users


def cmd_eval(args):
    pred, labels, offsets, users = read_predictions(args.predictions)
    rep = evaluate(pred, labels, offsets, user_ids=users, k=args.k, ece_bins=args.bins,
                   with_gauc=users is not None)
    text = rep.to_kv()
    if args.out:
        write_atomic(Path(args.out), text)
    sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser(config=None):
    """``config`` maps flag names (underscored) to raw string defaults."""
    parser = argparse.ArgumentParser(prog="clid", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset in SVMLight format")
    _add_gen_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)
    _with_config(p, config)

    p = sub.add_parser("run", help="train one method over several seeded trials")
    _add_train_flags(p)
    p.add_argument("--method", choices=METHODS, default="clid")
    p.add_argument("--weight-ratio", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    _with_config(p, config)

    p = sub.add_parser("probe", help="calibration-compatibility table for distillation losses")
    p.add_argument("--losses", default=",".join(LOSS_KINDS))
    p.add_argument("--n", dest="n_text", default="2-20", help="list size or lo-hi range")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", help="CSV file")
    p.set_defaults(func=cmd_probe)
    _with_config(p, config)

    p = sub.add_parser("sweep", help="weight-ratio sweep with a shared teacher")
    _add_train_flags(p)
    p.add_argument("--method", choices=[m for m in METHODS if "+" in m or m == "clid"], default="clid")
    p.add_argument("--grid", type=_float_list, default=list(WEIGHT_RATIO_GRID))
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    _with_config(p, config)

    p = sub.add_parser("eval", help="metrics for an existing predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", help="key=value report file")
    p.set_defaults(func=cmd_eval)
    _with_config(p, config)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        path = _config_path(argv)
        parser = build_parser(read_config(path) if path else None)
        args = parser.parse_args(argv)
        if getattr(args, "trials", 1) < 1:
            raise ConfigError("--trials must be at least 1")
        if hasattr(args, "n_text"):
            args.n = _size_range(args.n_text)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (ClidError, ValueError, OSError) as exc:
        print(f"clid: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
