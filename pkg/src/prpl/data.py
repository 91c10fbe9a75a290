"""Datasets: synthetic domain shift, label noise, EEG feature ingestion and
the columnar text format.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import DatasetError, ParseError, SegmentationError

ID_COLUMNS = ("subject", "session", "trial", "label")

# Delta, Theta, Alpha, Beta, Gamma (Hz)
DEFAULT_BANDS = ((1.0, 3.0), (4.0, 7.0), (8.0, 13.0), (14.0, 30.0), (31.0, 50.0))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    subject: np.ndarray = None
    session: np.ndarray = None
    trial: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        n = len(self.features)
        self.labels = np.asarray(self.labels, dtype=int)
        for name in ("subject", "session", "trial"):
            value = getattr(self, name)
            setattr(self, name, np.zeros(n, dtype=int) if value is None
                    else np.asarray(value, dtype=int))
        for name in ("labels", "subject", "session", "trial"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if n and self.labels.min() < 0:
            raise DatasetError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.features)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.subject[idx],
                       self.session[idx], self.trial[idx])

    def with_labels(self, labels):
        return Dataset(self.features, labels, self.subject, self.session, self.trial)

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("features", "labels", "subject", "session", "trial"))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 3
    d: int = 20
    per_class: int = 200
    spread: float = 0.5
    sigma: float = 1.0
    rotation_deg: float = 25.0
    translation: float = 0.5  # per-coordinate offset, in units of sigma
    target_noise: float = 0.0

    def __post_init__(self):
        if min(self.n_classes, self.d, self.per_class) < 1:
            raise DatasetError("class count, dimension and samples per class must be >= 1")
        if self.sigma <= 0 or self.spread < 0 or self.target_noise < 0:
            raise DatasetError("sigma must be positive; spread and noise non-negative")
        if self.d < 2 and self.rotation_deg:
            raise DatasetError("rotation needs d >= 2")


def _rotation_plane(rng, means):
    """Orthonormal pair spanning a random plane inside the class-mean span.

    Outside the span of the class means a rotation leaves the class-conditional
    structure untouched, so the plane is drawn where it actually shifts classes.
    """
    d = means.shape[1]
    basis = np.linalg.svd(means, full_matrices=False)[2]
    if basis.shape[0] < 2:
        basis = np.vstack([basis, rng.normal(size=(2, d))])
    coeffs = rng.normal(size=(2, basis.shape[0]))
    q, _ = np.linalg.qr((coeffs @ basis).T)
    return q[:, :2]


def _translation(rng, means, per_coordinate):
    """Offset of RMS ``per_coordinate`` per axis, pointing inside the class-mean span."""
    d = means.shape[1]
    basis = np.linalg.svd(means, full_matrices=False)[2]
    direction = rng.normal(size=basis.shape[0]) @ basis
    return per_coordinate * np.sqrt(d) * direction / np.linalg.norm(direction)


def rotation_matrix(plane, angle_deg):
    """Rotation by ``angle_deg`` inside the plane spanned by the two columns."""
    theta = np.deg2rad(angle_deg)
    u, v = plane[:, 0], plane[:, 1]
    d = len(u)
    R = np.eye(d)
    R += (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    R += np.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    return R


@dataclass
class ShiftParams:
    means: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


def _class_samples(rng, means, per_class, sigma):
    n, d = means.shape
    y = np.repeat(np.arange(n), per_class)
    X = means[y] + sigma * rng.normal(size=(len(y), d))
    return X, y


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed=0, return_shift=False):
    """Source and target domains of Gaussian classes; the target is rotated,
    translated and optionally noised.
    """
    rng = np.random.default_rng(seed)
    means = spec.spread * rng.normal(size=(spec.n_classes, spec.d))
    plane = _rotation_plane(rng, means)
    R = rotation_matrix(plane, spec.rotation_deg)
    t = _translation(rng, means, spec.translation * spec.sigma)

    Xs, ys = _class_samples(rng, means, spec.per_class, spec.sigma)
    Xt, yt = _class_samples(rng, means, spec.per_class, spec.sigma)
    Xt = Xt @ R.T + t
    if spec.target_noise:
        Xt = Xt + spec.target_noise * rng.normal(size=Xt.shape)
    ps, pt = rng.permutation(len(ys)), rng.permutation(len(yt))
    source = Dataset(Xs[ps], ys[ps])
    target = Dataset(Xt[pt], yt[pt], subject=np.ones(len(yt), dtype=int))
    if return_shift:
        return source, target, ShiftParams(means, R, t)
    return source, target


def generate_cohort(spec: SyntheticSpec = SyntheticSpec(), n_subjects=5, n_sessions=3,
                    n_trials=15, seed=0):
    """Multi-subject dataset with id columns, for exercising the protocols.

    Each subject sees the same class means under its own rotation (angle drawn
    in +-rotation_deg) and translation; each session adds a quarter-strength
    shift of its own. Trial k carries label k mod n_classes and ``per_class``
    samples are split evenly over a session's trials of that class.
    """
    rng = np.random.default_rng(seed)
    means = spec.spread * rng.normal(size=(spec.n_classes, spec.d))
    per_trial = max(1, spec.per_class * spec.n_classes // n_trials)
    rows, labels, ids = [], [], []

    def shift(scale):
        plane = _rotation_plane(rng, means)
        R = rotation_matrix(plane, scale * rng.uniform(-1, 1) * spec.rotation_deg)
        return R, _translation(rng, means, scale * spec.translation * spec.sigma)

    for subj in range(n_subjects):
        R_sub, t_sub = shift(1.0)
        for sess in range(n_sessions):
            R_ses, t_ses = shift(0.25)
            for trial in range(n_trials):
                c = trial % spec.n_classes
                X = means[c] + spec.sigma * rng.normal(size=(per_trial, spec.d))
                X = (X @ R_sub.T + t_sub) @ R_ses.T + t_ses
                if spec.target_noise:
                    X = X + spec.target_noise * rng.normal(size=X.shape)
                rows.append(X)
                labels.append(np.full(per_trial, c))
                ids.append(np.tile([subj, sess + 1, trial + 1], (per_trial, 1)))
    ids = np.vstack(ids)
    return Dataset(np.vstack(rows), np.concatenate(labels), ids[:, 0], ids[:, 1], ids[:, 2])


def inject_label_noise(D: Dataset, eta, seed=0, n_classes=None):
    """Redraw the labels of round(eta% of N) uniformly chosen samples.

    Replacement labels are uniform over all classes, so some may coincide
    with the original. Features and ids are untouched.
    """
    if not 0 <= eta <= 100:
        raise ValueError(f"noise percentage must lie in [0, 100], got {eta}")
    n = n_classes if n_classes is not None else D.n_classes
    count = int(round(eta * len(D) / 100.0))
    rng = np.random.default_rng(seed)
    labels = D.labels.copy()
    if count:
        pos = rng.choice(len(D), size=count, replace=False)
        labels[pos] = rng.integers(0, n, size=count)
    return D.with_labels(labels)


# ---------------------------------------------------------------------------
# EEG ingestion


@dataclass
class RawRecording:
    data: np.ndarray  # channels x samples
    rate: float
    trials: list = field(default_factory=list)  # (start, stop, label)
    subject: int = 0
    session: int = 0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.rate <= 0:
            raise DatasetError("sampling rate must be positive")
        last = 0
        for start, stop, _ in self.trials:
            if not (last <= start < stop <= self.data.shape[1]):
                raise DatasetError(f"trial bounds ({start}, {stop}) overlap or fall out of range")
            last = stop

    @property
    def n_channels(self):
        return self.data.shape[0]


def differential_entropy(x, axis=-1):
    """Gaussian differential entropy 0.5*log(2*pi*e*var)."""
    return 0.5 * np.log(2.0 * np.pi * np.e * np.var(x, axis=axis))


def bandpass_sos(lo, hi, rate, order=4):
    return signal.butter(order, [lo, hi], btype="bandpass", fs=rate, output="sos")


def compute_de_features(rec: RawRecording, bands=DEFAULT_BANDS, window=1.0, order=4):
    """DE features per non-overlapping window, channel-major column order.

    The whole recording is band-passed with a zero-phase Butterworth filter
    (so trials away from the recording ends carry no edge transients), each
    trial is cut into ``window``-second segments (a trailing partial segment
    is dropped), and each segment gives one row of ``n_channels * n_bands``
    values; column ``ch * n_bands + b`` holds channel ch, band b.
    """
    seg = int(round(window * rec.rate))
    if seg < 2:
        raise SegmentationError(f"window of {window}s is shorter than two samples")
    if not rec.trials:
        raise SegmentationError("recording has no trials")
    for k, (start, stop, _) in enumerate(rec.trials):
        if stop - start < seg:
            raise SegmentationError(
                f"trial {k + 1} has {stop - start} samples, shorter than a {seg}-sample window")
    filtered = [signal.sosfiltfilt(bandpass_sos(lo, hi, rec.rate, order), rec.data, axis=1)
                for lo, hi in bands]
    rows, labels, trial_ids = [], [], []
    for k, (start, stop, label) in enumerate(rec.trials):
        n_seg = (stop - start) // seg
        per_band = []
        for y in filtered:
            y = y[:, start:start + n_seg * seg]
            per_band.append(differential_entropy(y.reshape(rec.n_channels, n_seg, seg)))
        # (bands, channels, segments) -> (segments, channels * bands)
        feats = np.stack(per_band).transpose(2, 1, 0).reshape(n_seg, -1)
        rows.append(feats)
        labels.append(np.full(n_seg, label))
        trial_ids.append(np.full(n_seg, k + 1))
    n = sum(len(r) for r in rows)
    return Dataset(np.vstack(rows), np.concatenate(labels),
                   np.full(n, rec.subject), np.full(n, rec.session), np.concatenate(trial_ids))


def lds_smooth(features, q=None, r=None):
    """Fixed-interval Kalman smoothing of each column under a random walk.

    State x_t = x_{t-1} + w, observation y_t = x_t + v with Var(w)=q and
    Var(v)=r. Defaults: r is the column variance and q one hundredth of it.
    Scalars or per-column arrays are accepted for q and r.
    """
    Y = np.atleast_2d(np.asarray(features, dtype=float))
    T, d = Y.shape
    var = Y.var(axis=0)
    var = np.where(var > 0, var, 1.0)
    r = var if r is None else np.broadcast_to(np.asarray(r, dtype=float), (d,))
    q = 0.01 * var if q is None else np.broadcast_to(np.asarray(q, dtype=float), (d,))
    if np.any(q <= 0) or np.any(r <= 0):
        raise ValueError("q and r must be positive")

    x_f = np.empty((T, d))
    P_f = np.empty((T, d))
    P_p = np.empty((T, d))
    x, P = Y[0].copy(), r.copy()
    x_f[0], P_f[0], P_p[0] = x, P, P
    for t in range(1, T):
        P_pred = P + q
        gain = P_pred / (P_pred + r)
        x = x + gain * (Y[t] - x)
        P = (1.0 - gain) * P_pred
        x_f[t], P_f[t], P_p[t] = x, P, P_pred

    out = np.empty_like(x_f)
    out[-1] = x_f[-1]
    for t in range(T - 2, -1, -1):
        C = P_f[t] / P_p[t + 1]
        out[t] = x_f[t] + C * (out[t + 1] - x_f[t])
    return out


def smooth_dataset(D: Dataset, q=None, r=None):
    """LDS-smooth features within each (subject, session, trial) sequence."""
    out = D.features.copy()
    keys = np.stack([D.subject, D.session, D.trial], axis=1)
    for key in np.unique(keys, axis=0):
        idx = np.flatnonzero((keys == key).all(axis=1))
        out[idx] = lds_smooth(D.features[idx], q, r)
    return Dataset(out, D.labels, D.subject, D.session, D.trial)


# ---------------------------------------------------------------------------
# file formats


def save_dataset(D: Dataset, path):
    header = list(ID_COLUMNS) + [f"f{j}" for j in range(D.n_features)]
    lines = [",".join(header)]
    for i in range(len(D)):
        ids = (D.subject[i], D.session[i], D.trial[i], D.labels[i])
        lines.append(",".join([str(int(v)) for v in ids] + [repr(float(v)) for v in D.features[i]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, n_classes=None):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("empty file, expected a header", line=1)
    header = [h.strip() for h in lines[0].split(",")]
    for j, col in enumerate(ID_COLUMNS):
        if col not in header:
            raise ParseError(f"missing column {col!r}", line=1)
        if header[j] != col:
            raise ParseError(f"column {j + 1} should be {col!r}, found {header[j]!r}", line=1)
    feat_cols = header[len(ID_COLUMNS):]
    if not feat_cols:
        raise ParseError("no feature columns", line=1)
    for j, col in enumerate(feat_cols):
        if col != f"f{j}":
            raise ParseError(f"expected feature column 'f{j}', found {col!r}", line=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(parts)}", line=lineno)
        try:
            ids = [int(p) for p in parts[:4]]
            feats = [float(p) for p in parts[4:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if ids[3] < 0 or (n_classes is not None and ids[3] >= n_classes):
            raise DatasetError(f"line {lineno}: label {ids[3]} out of range")
        rows.append((ids, feats))
    if not rows:
        raise ParseError("file has a header but no rows", line=len(lines))
    ids = np.array([r[0] for r in rows], dtype=int)
    X = np.array([r[1] for r in rows], dtype=float)
    return Dataset(X, ids[:, 3], ids[:, 0], ids[:, 1], ids[:, 2])


def save_raw(rec: RawRecording, path):
    """Write the raw signal format: ``key=value`` header lines, then one block
    per trial introduced by ``label=<k>`` with one comma-separated row of
    channel values per time sample."""
    lines = [f"rate={rec.rate!r}", f"channels={rec.n_channels}",
             f"subject={rec.subject}", f"session={rec.session}"]
    for start, stop, label in rec.trials:
        lines.append(f"label={label}")
        for t in range(start, stop):
            lines.append(",".join(repr(float(v)) for v in rec.data[:, t]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_raw(path):
    meta = {}
    blocks = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            key = key.strip()
            try:
                if key == "label":
                    blocks.append((int(value), []))
                elif key in ("rate",):
                    meta[key] = float(value)
                elif key in ("channels", "subject", "session"):
                    meta[key] = int(value)
                else:
                    raise ParseError(f"unknown header key {key!r}", line=lineno)
            except ValueError:
                raise ParseError(f"bad value for {key!r}: {value!r}", line=lineno) from None
            continue
        if "rate" not in meta or "channels" not in meta:
            raise ParseError("sample row before rate= and channels= headers", line=lineno)
        if not blocks:
            raise ParseError("sample row before the first label= line", line=lineno)
        try:
            values = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if len(values) != meta["channels"]:
            raise ParseError(
                f"expected {meta['channels']} channel values, found {len(values)}", line=lineno)
        blocks[-1][1].append(values)
    if "rate" not in meta or "channels" not in meta:
        raise ParseError("missing rate= or channels= header")
    if not blocks:
        raise ParseError("no trial blocks")
    trials, chunks, pos = [], [], 0
    for label, samples in blocks:
        if not samples:
            raise ParseError(f"trial with label {label} has no samples")
        chunks.append(np.array(samples).T)
        trials.append((pos, pos + len(samples), label))
        pos += len(samples)
    return RawRecording(np.hstack(chunks), meta["rate"], trials,
                        meta.get("subject", 0), meta.get("session", 0))
