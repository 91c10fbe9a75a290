"""Command-line entry point.

Every subcommand resolves its settings from built-in defaults, then an
optional ``--config`` file (``key = value`` lines under ``[train]``,
``[synth]`` and ``[run]`` sections), then command-line flags. The resolved
settings are written next to the outputs as ``resolved_config.ini``, so a
run can be repeated from that file and its input data alone. The same
settings, minus the output directory, head every CSV as ``#`` comment lines;
leaving the directory out keeps results byte-identical wherever they land.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .config import ABLATIONS, TrainConfig, coerce
from .errors import PRPLError
from .gradcheck import gradient_check
from .model import predict
from .protocols import (FoldResult, ProtocolResult, ProtocolSpec, confusion_csv,
                        confusion_matrix, metrics_csv, run_noise_sweep, run_protocol,
                        sweep_csv, write_text)
from .training import TrainHistory, fit

log = logging.getLogger("prpl")


@dataclass(frozen=True)
class RunOptions:
    """Everything a run needs besides training hyperparameters and the
    synthetic-data recipe. Empty paths mean "generate synthetic data"."""

    source: str = ""
    target: str = ""
    dataset: str = ""
    output_dir: str = "runs/latest"
    seeds: str = "0"
    data_seed: int = 0
    protocol: str = "cross_subject_single_session"
    source_trials: int = 9
    target_trials: int = 0  # 0: all remaining trials
    population_std: bool = True
    parallel_folds: int = 1
    etas: str = "10,20,30"
    subjects: int = 5
    sessions: int = 3
    trials: int = 15

    def seed_list(self):
        return _int_list(self.seeds, "seeds")

    def eta_list(self):
        try:
            return [float(v) for v in self.etas.split(",") if v.strip()]
        except ValueError:
            raise PRPLError(f"bad eta list {self.etas!r}") from None

    def protocol_spec(self):
        return ProtocolSpec(self.protocol, self.source_trials, self.target_trials or None)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: D.SyntheticSpec = field(default_factory=D.SyntheticSpec)
    run: RunOptions = field(default_factory=RunOptions)

    SECTIONS = ("train", "synth", "run")

    def to_ini(self):
        cp = configparser.ConfigParser()
        for name in self.SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().rstrip("\n") + "\n"


def _int_list(text, what):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise PRPLError(f"bad {what} list {text!r}") from None


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def _section_updates(cls, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise PRPLError(f"unknown {cls.__name__} option(s): {unknown}")
    return {k: coerce(cls, k, v) for k, v in values.items()}


def load_config(path):
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise PRPLError(f"cannot read config file {path}")
    extra = sorted(set(cp.sections()) - set(RunConfig.SECTIONS))
    if extra:
        raise PRPLError(f"unknown config section(s): {extra}")
    cfg = RunConfig()
    for name in RunConfig.SECTIONS:
        if cp.has_section(name):
            current = getattr(cfg, name)
            cfg = replace(cfg, **{name: replace(
                current, **_section_updates(type(current), dict(cp[name])))})
    return cfg


# ---------------------------------------------------------------------------
# argument parsing

_SYNTH_FLAGS = {
    "classes": "n_classes", "dim": "d", "per_class": "per_class", "spread": "spread",
    "sigma": "sigma", "rotation": "rotation_deg", "translation": "translation",
    "target_noise": "target_noise",
}


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--ablation", choices=sorted(ABLATIONS),
                   help="preset of ablation toggles, applied before individual flags")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            g.add_argument(flag, dest=f"train.{f.name}", action="store_true", default=None)
        else:
            g.add_argument(flag, dest=f"train.{f.name}", default=None, metavar="V")


def _add_synth_flags(p):
    g = p.add_argument_group("synthetic data")
    for flag, name in _SYNTH_FLAGS.items():
        g.add_argument("--" + flag.replace("_", "-"), dest=f"synth.{name}", default=None,
                       metavar="V")


def _add_run_flags(p, *names):
    g = p.add_argument_group("run")
    for name in names:
        if name == "sample_std":
            g.add_argument("--sample-std", dest="run.population_std", action="store_false",
                           default=None, help="report the n-1 standard deviation")
            continue
        g.add_argument("--" + name.replace("_", "-"), dest=f"run.{name}", default=None,
                       metavar="V")


def build_parser():
    parser = argparse.ArgumentParser(prog="prpl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [train], [synth], [run] sections")
        return p

    p = add("synth", "write synthetic source/target datasets (or a multi-subject cohort)")
    _add_synth_flags(p)
    _add_run_flags(p, "output_dir", "data_seed", "subjects", "sessions", "trials")
    p.add_argument("--cohort", action="store_true",
                   help="write one dataset with subject/session/trial ids")

    p = add("preprocess", "raw signals -> differential-entropy features")
    p.add_argument("inputs", nargs="+", help="raw recording files")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--no-lds", action="store_true", help="skip temporal smoothing")
    p.add_argument("--window", type=float, default=1.0, help="segment length in seconds")
    p.add_argument("--bands", default=None,
                   help="comma list of lo-hi pairs, e.g. 1-3,4-7,8-13,14-30,31-50")
    p.add_argument("--filter-order", type=int, default=4)

    p = add("train", "fit on source, score on target, once per seed")
    _add_train_flags(p)
    _add_synth_flags(p)
    _add_run_flags(p, "source", "target", "output_dir", "seeds")

    for name, text in (("protocol", "cross-validation protocol over a cohort dataset"),
                       ("noise-sweep", "protocol repeated under source label noise")):
        p = add(name, text)
        _add_train_flags(p)
        _add_synth_flags(p)
        _add_run_flags(p, "dataset", "output_dir", "data_seed", "protocol", "source_trials",
                       "target_trials", "parallel_folds", "subjects", "sessions", "trials",
                       "sample_std", *(["etas"] if name == "noise-sweep" else []))

    p = add("gradcheck", "compare analytic gradients with finite differences")
    _add_train_flags(p)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--dims", default="8,12,3", help="d_in,samples per domain,classes")
    return parser


def resolve(args):
    """Defaults < config file < --ablation < individual flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "ablation", None):
        cfg = replace(cfg, train=replace(cfg.train, **ABLATIONS[args.ablation]))
    updates = {name: {} for name in RunConfig.SECTIONS}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            updates[section][name] = value
    for section, values in updates.items():
        if values:
            current = getattr(cfg, section)
            cfg = replace(cfg, **{section: replace(
                current, **_section_updates(type(current), values))})
    return cfg


# ---------------------------------------------------------------------------
# commands


def _header(cfg: RunConfig):
    # the output location does not affect results; leaving it out keeps
    # reports of identical runs byte-identical wherever they are written
    return replace(cfg, run=replace(cfg.run, output_dir="")).to_ini().splitlines()


def _write_resolved(cfg, argv, out):
    out.mkdir(parents=True, exist_ok=True)
    text = "# command: prpl " + " ".join(argv) + "\n" + cfg.to_ini()
    write_text(out / "resolved_config.ini", text)


def _history_csv(histories, header_lines):
    buf = io.StringIO()
    buf.write("".join(f"# {line}\n" for line in header_lines))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run"] + list(TrainHistory.COLUMNS))
    for name, h in histories:
        for rec in h.records:
            w.writerow([name] + [repr(float(rec[c])) if isinstance(rec[c], float)
                                 else str(rec[c]) for c in TrainHistory.COLUMNS])
    return buf.getvalue()


def cmd_synth(cfg: RunConfig, args, argv):
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.cohort:
        cohort = D.generate_cohort(cfg.synth, cfg.run.subjects, cfg.run.sessions,
                                   cfg.run.trials, cfg.run.data_seed)
        D.save_dataset(cohort, out / "cohort.csv")
        print(f"{out / 'cohort.csv'}: {len(cohort)} rows")
    else:
        src, tgt = D.generate_synthetic(cfg.synth, cfg.run.data_seed)
        D.save_dataset(src, out / "source.csv")
        D.save_dataset(tgt, out / "target.csv")
        print(f"{out / 'source.csv'}: {len(src)} rows")
        print(f"{out / 'target.csv'}: {len(tgt)} rows")
    _write_resolved(cfg, argv, out)
    return 0


def _parse_bands(text):
    if not text:
        return D.DEFAULT_BANDS
    bands = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        try:
            bands.append((float(lo), float(hi)))
        except ValueError:
            raise PRPLError(f"bad band {part!r}; expected lo-hi") from None
    return tuple(bands)


def cmd_preprocess(args, argv):
    bands = _parse_bands(args.bands)
    parts = []
    for path in args.inputs:
        rec = D.load_raw(path)
        ds = D.compute_de_features(rec, bands, args.window, args.filter_order)
        parts.append(ds if args.no_lds else D.smooth_dataset(ds))
    merged = D.Dataset(np.vstack([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       np.concatenate([p.subject for p in parts]),
                       np.concatenate([p.session for p in parts]),
                       np.concatenate([p.trial for p in parts]))
    D.save_dataset(merged, args.output)
    print(f"{args.output}: {len(merged)} rows x {merged.n_features} features")
    return 0


def cmd_train(cfg: RunConfig, argv):
    out = Path(cfg.run.output_dir)
    header = _header(cfg)
    from_files = bool(cfg.run.source or cfg.run.target)
    if from_files and not (cfg.run.source and cfg.run.target):
        raise PRPLError("--source and --target must be given together")
    if from_files:
        src, tgt = D.load_dataset(cfg.run.source), D.load_dataset(cfg.run.target)
    folds, histories = [], []
    n = None
    for seed in cfg.run.seed_list():
        if not from_files:
            src, tgt = D.generate_synthetic(cfg.synth, seed)
        n = max(src.n_classes, tgt.n_classes)
        t0 = time.perf_counter()
        result = fit(cfg.train.with_(seed=seed), src.features, src.labels, tgt.features, n)
        pred = predict(result.params, result.prototypes, tgt.features)
        acc = float(np.mean(pred == tgt.labels))
        log.info("seed %d: target accuracy %.4f (%.1fs)", seed, acc, time.perf_counter() - t0)
        last = result.history.records[-1] if result.history.records else {}
        folds.append(FoldResult(f"seed{seed}", acc, confusion_matrix(tgt.labels, pred, n),
                                float(last.get("objective", np.nan)),
                                float(last.get("source_acc", np.nan))))
        histories.append((f"seed{seed}", result.history))
    res = ProtocolResult(folds, cfg.run.population_std)
    _write_resolved(cfg, argv, out)
    write_text(out / "history.csv", _history_csv(histories, header))
    write_text(out / "metrics.csv", metrics_csv(res, header))
    write_text(out / "confusion.csv", confusion_csv(res.confusion, header))
    print(f"target accuracy {res.summary()} over {len(folds)} seed(s); outputs in {out}")
    return 0


def _protocol_data(cfg: RunConfig):
    if cfg.run.dataset:
        return D.load_dataset(cfg.run.dataset)
    return D.generate_cohort(cfg.synth, cfg.run.subjects, cfg.run.sessions, cfg.run.trials,
                             cfg.run.data_seed)


def cmd_protocol(cfg: RunConfig, argv):
    out = Path(cfg.run.output_dir)
    header = _header(cfg)
    ds = _protocol_data(cfg)
    res = run_protocol(cfg.train, ds, cfg.run.protocol_spec(),
                       population_std=cfg.run.population_std,
                       workers=cfg.run.parallel_folds, n_classes=ds.n_classes)
    _write_resolved(cfg, argv, out)
    write_text(out / "metrics.csv", metrics_csv(res, header))
    write_text(out / "confusion.csv", confusion_csv(res.confusion, header))
    print(f"{cfg.run.protocol}: {res.summary()} over {len(res.folds)} folds; outputs in {out}")
    return 0


def cmd_noise_sweep(cfg: RunConfig, argv):
    out = Path(cfg.run.output_dir)
    header = _header(cfg)
    ds = _protocol_data(cfg)
    etas = cfg.run.eta_list()
    results = run_noise_sweep(cfg.train, ds, cfg.run.protocol_spec(), etas,
                              population_std=cfg.run.population_std,
                              workers=cfg.run.parallel_folds, n_classes=ds.n_classes)
    _write_resolved(cfg, argv, out)
    write_text(out / "sweep.csv", sweep_csv(etas, results, header))
    for eta, res in zip(etas, results):
        tag = f"eta{eta:g}"
        write_text(out / f"metrics_{tag}.csv", metrics_csv(res, header))
        write_text(out / f"confusion_{tag}.csv", confusion_csv(res.confusion, header))
        print(f"eta={eta:g}%: {res.summary()}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args):
    dims = tuple(_int_list(args.dims, "dims"))
    if len(dims) != 3:
        raise PRPLError("--dims needs three integers: d_in,samples,classes")
    worst, worst_where = 0.0, ""
    for seed in range(1, args.instances + 1):
        report = gradient_check(seed, dims, args.tolerance, cfg.train)
        if report.max_rel_error >= worst:
            worst, worst_where = report.max_rel_error, f"instance {seed} {report.worst}"
    ok = worst <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e}"
          + ("" if ok else f" at {worst_where}"))
    return 0 if ok else 1


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "preprocess":
            return cmd_preprocess(args, argv)
        cfg = resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg, args, argv)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        return {"train": cmd_train, "protocol": cmd_protocol,
                "noise-sweep": cmd_noise_sweep}[args.command](cfg, argv)
    except (PRPLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
