"""Cross-validation protocols over subject/session/trial ids, scoring and
experiment drivers (label-noise sweeps, metric CSVs)."""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, substream_seed
from .data import Dataset, SyntheticSpec, generate_synthetic, inject_label_noise
from .errors import PRPLError, ProtocolError
from .model import predict
from .training import fit

KINDS = (
    "cross_subject_cross_session",
    "cross_subject_single_session",
    "within_subject_cross_session",
    "within_subject_single_session",
)


@dataclass(frozen=True)
class ProtocolSpec:
    """Which folds to build.

    ``source_trials`` is used by ``within_subject_single_session`` only: the
    first that many trials of a session are the source, the rest the target
    (9 of 15 and 16 of 24 are the usual splits). ``target_trials`` optionally
    caps how many of the remaining trials are used.
    """

    kind: str = "cross_subject_single_session"
    source_trials: int = 9
    target_trials: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown protocol {self.kind!r}; choose from {KINDS}")
        if self.source_trials < 1 or (self.target_trials is not None and self.target_trials < 1):
            raise ProtocolError("trial split counts must be >= 1")


@dataclass
class Fold:
    name: str
    source: np.ndarray
    target: np.ndarray


def _need_sessions(D, subject, sessions):
    have = set(np.unique(D.session[D.subject == subject]).tolist())
    missing = sorted(set(sessions) - have)
    if missing:
        raise ProtocolError(f"subject {subject} lacks session(s) {missing}")


def make_folds(D: Dataset, spec: ProtocolSpec):
    """Source/target index arrays for every fold of the protocol."""
    subjects = np.unique(D.subject)
    folds = []
    if spec.kind == "cross_subject_cross_session":
        if len(subjects) < 2:
            raise ProtocolError("leave-one-subject-out needs at least two subjects")
        for s in subjects:
            folds.append(Fold(f"subject{s}", np.flatnonzero(D.subject != s),
                              np.flatnonzero(D.subject == s)))
    elif spec.kind == "cross_subject_single_session":
        if len(subjects) < 2:
            raise ProtocolError("leave-one-subject-out needs at least two subjects")
        for s in subjects:
            _need_sessions(D, s, [1])
        first = D.session == 1
        for s in subjects:
            folds.append(Fold(f"subject{s}", np.flatnonzero(first & (D.subject != s)),
                              np.flatnonzero(first & (D.subject == s))))
    elif spec.kind == "within_subject_cross_session":
        for s in subjects:
            _need_sessions(D, s, [1, 2, 3])
            mine = D.subject == s
            folds.append(Fold(f"subject{s}",
                              np.flatnonzero(mine & ((D.session == 1) | (D.session == 2))),
                              np.flatnonzero(mine & (D.session == 3))))
    else:
        k = spec.source_trials
        for s in subjects:
            for sess in np.unique(D.session[D.subject == s]):
                scope = (D.subject == s) & (D.session == sess)
                trials = np.unique(D.trial[scope])
                if len(trials) <= k:
                    raise ProtocolError(
                        f"subject {s} session {sess} has {len(trials)} trials, "
                        f"need more than {k}")
                src_trials = trials[:k]
                tgt_trials = trials[k:]
                if spec.target_trials is not None:
                    tgt_trials = tgt_trials[: spec.target_trials]
                folds.append(Fold(f"subject{s}_session{sess}",
                                  np.flatnonzero(scope & np.isin(D.trial, src_trials)),
                                  np.flatnonzero(scope & np.isin(D.trial, tgt_trials))))
    rank = _canonical_rank(D)
    for f in folds:
        if not len(f.source) or not len(f.target):
            raise ProtocolError(f"fold {f.name} has an empty source or target")
        f.source = f.source[np.argsort(rank[f.source], kind="stable")]
        f.target = f.target[np.argsort(rank[f.target], kind="stable")]
    return folds


def _canonical_rank(D: Dataset):
    """Position of each row under a content-based ordering, so that fold
    contents (and hence training) do not depend on row order in the file."""
    keys = [D.features[:, j] for j in range(D.n_features - 1, -1, -1)]
    keys += [D.labels, D.trial, D.session, D.subject]
    order = np.lexsort(keys)
    rank = np.empty(len(D), dtype=int)
    rank[order] = np.arange(len(D))
    return rank


def confusion_matrix(y_true, y_pred, n):
    """Counts with rows indexed by true class and columns by prediction."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n):
        raise ValueError(f"labels must lie in 0..{n - 1}")
    C = np.zeros((n, n), dtype=int)
    np.add.at(C, (y_true, y_pred), 1)
    return C


@dataclass
class FoldResult:
    name: str
    accuracy: float
    confusion: np.ndarray
    final_objective: float
    final_source_acc: float


@dataclass
class ProtocolResult:
    folds: list = field(default_factory=list)
    population_std: bool = True

    @property
    def accuracies(self):
        return np.array([f.accuracy for f in self.folds])

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies, ddof=0 if self.population_std else 1))

    @property
    def confusion(self):
        return sum(f.confusion for f in self.folds)

    def summary(self):
        """Percentages in the usual ``mean±std`` form."""
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"


def _run_fold(config, D, fold, n_classes, noise=0.0, noise_seed=0):
    source = D.subset(fold.source)
    if noise:
        source = inject_label_noise(source, noise, noise_seed, n_classes)
    # target labels stay here; fit only sees target features
    target_X = D.features[fold.target]
    target_y = D.labels[fold.target]
    try:
        result = fit(config, source.features, source.labels, target_X, n_classes)
    except PRPLError as exc:
        raise type(exc)(f"fold {fold.name}: {exc}") from exc
    pred = predict(result.params, result.prototypes, target_X)
    last = result.history.records[-1] if result.history.records else {}
    return FoldResult(fold.name, float(np.mean(pred == target_y)),
                      confusion_matrix(target_y, pred, n_classes),
                      float(last.get("objective", np.nan)),
                      float(last.get("source_acc", np.nan)))


def _fold_job(args):
    return _run_fold(*args)


def run_protocol(config: TrainConfig, D: Dataset, spec: ProtocolSpec, *, noise=0.0,
                 population_std=True, workers=1, n_classes=None):
    """Fit and score every fold.

    With ``noise`` > 0 that percentage of each fold's source labels is
    redrawn before training; the seed for this is derived from the config
    seed and the fold position. ``workers`` > 1 runs folds in separate
    processes; results are identical to the sequential run.
    """
    n = n_classes if n_classes is not None else D.n_classes
    folds = make_folds(D, spec)
    jobs = [(config, D, f, n, noise, substream_seed(config.seed + k, "noise"))
            for k, f in enumerate(folds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    return ProtocolResult(results, population_std)


def run_noise_sweep(config: TrainConfig, D: Dataset, spec: ProtocolSpec, etas=(10, 20, 30),
                    **kwargs):
    """One protocol run per source label-noise percentage."""
    return [run_protocol(config, D, spec, noise=eta, **kwargs) for eta in etas]


# ---------------------------------------------------------------------------
# CSV output


def _comment_block(header_lines):
    return "".join(f"# {line}\n" for line in header_lines)


def metrics_csv(result: ProtocolResult, header_lines=()):
    """``fold,accuracy`` rows followed by ``mean`` and ``std`` summary rows."""
    buf = io.StringIO()
    buf.write(_comment_block(header_lines))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "accuracy"])
    for f in result.folds:
        w.writerow([f.name, repr(f.accuracy)])
    w.writerow(["mean", repr(result.mean)])
    w.writerow(["std", repr(result.std)])
    return buf.getvalue()


def confusion_csv(C, header_lines=()):
    buf = io.StringIO()
    buf.write(_comment_block(header_lines))
    w = csv.writer(buf, lineterminator="\n")
    n = len(C)
    w.writerow(["true\\pred"] + [str(j) for j in range(n)])
    for i in range(n):
        w.writerow([str(i)] + [str(int(v)) for v in C[i]])
    return buf.getvalue()


def sweep_csv(etas, results, header_lines=()):
    buf = io.StringIO()
    buf.write(_comment_block(header_lines))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eta", "mean", "std"])
    for eta, r in zip(etas, results):
        w.writerow([repr(float(eta)), repr(r.mean), repr(r.std)])
    return buf.getvalue()


def write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic benchmark


@dataclass
class BenchmarkResult:
    variant: str
    seeds: list
    accuracies: np.ndarray
    seconds: float

    @property
    def mean(self):
        return float(np.mean(self.accuracies))


def synthetic_benchmark(config: TrainConfig, spec: SyntheticSpec = SyntheticSpec(),
                        seeds=range(5), noise=0.0, variant="full"):
    """Target accuracy of one training setup on freshly drawn shifted domains.

    Seed s draws the data, initialises the model and (when ``noise`` > 0)
    corrupts that percentage of source labels.
    """
    accs = []
    t0 = time.perf_counter()
    for seed in seeds:
        S, T = generate_synthetic(spec, seed)
        if noise:
            S = inject_label_noise(S, noise, substream_seed(seed, "noise"), spec.n_classes)
        res = fit(config.with_(seed=seed), S.features, S.labels, T.features, spec.n_classes)
        accs.append(float(np.mean(predict(res.params, res.prototypes, T.features) == T.labels)))
    return BenchmarkResult(variant, list(seeds), np.array(accs), time.perf_counter() - t0)
