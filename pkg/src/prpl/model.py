"""Network primitives: feature extractor, domain discriminator, prototypes and
bilinear interaction features.

Everything here is a forward pass on float64 numpy arrays. Gradients live in
:mod:`prpl.training`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DimensionError, MissingClassError

FEATURE_DIM = 64


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _ArrayGroup:
    """Mixin giving dataclasses of arrays a flat name -> array view."""

    def named_arrays(self, prefix=""):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, _ArrayGroup):
                out.update(value.named_arrays(prefix + f.name + "."))
            else:
                out[prefix + f.name] = value
        return out

    def map(self, fn):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            kwargs[f.name] = value.map(fn) if isinstance(value, _ArrayGroup) else fn(value)
        return type(self)(**kwargs)

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)


@dataclass
class ExtractorParams(_ArrayGroup):
    """Three affine layers d_in -> 64 -> 64 -> 64, rectified between layers."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def d_in(self):
        return self.W1.shape[0]


@dataclass
class DiscriminatorParams(_ArrayGroup):
    """64 -> 64 (relu, dropout) -> 64 -> 1 (logistic)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray


@dataclass
class ModelParams(_ArrayGroup):
    extractor: ExtractorParams
    discriminator: DiscriminatorParams
    S: np.ndarray


# Gradients share the parameter layout exactly.
Gradients = ModelParams


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed, d_in, n_classes, width=FEATURE_DIM):
    """Draw every weight, bias and S uniformly from +-1/sqrt(fan_in)."""
    if int(d_in) < 1:
        raise ConfigError(f"d_in must be >= 1, got {d_in}")
    if int(n_classes) < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    rng = np.random.default_rng(seed)
    h = width
    ext = ExtractorParams(
        W1=_uniform(rng, d_in, (d_in, h)), b1=_uniform(rng, d_in, h),
        W2=_uniform(rng, h, (h, h)), b2=_uniform(rng, h, h),
        W3=_uniform(rng, h, (h, h)), b3=_uniform(rng, h, h),
    )
    disc = DiscriminatorParams(
        W1=_uniform(rng, h, (h, h)), b1=_uniform(rng, h, h),
        W2=_uniform(rng, h, (h, h)), b2=_uniform(rng, h, h),
        W3=_uniform(rng, h, (h, 1)), b3=_uniform(rng, h, 1),
    )
    S = _uniform(rng, h, (h, h))
    return ModelParams(extractor=ext, discriminator=disc, S=S)


def _check_input(params: ExtractorParams, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise DimensionError(
            f"expected input with {params.d_in} columns, got shape {X.shape}")
    return X


def extract_features(params: ExtractorParams, X):
    X = _check_input(params, X)
    a1 = relu(X @ params.W1 + params.b1)
    a2 = relu(a1 @ params.W2 + params.b2)
    return a2 @ params.W3 + params.b3


def dropout_mask(rng, shape, p_drop):
    """Inverted-dropout keep mask, already scaled by 1/(1-p_drop)."""
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"p_drop must lie in [0, 1), got {p_drop}")
    keep = rng.random(shape) >= p_drop
    return keep / (1.0 - p_drop)


def discriminate(params: DiscriminatorParams, F, dropout_mask=None):
    """Probability that each feature row came from the source domain.

    ``dropout_mask`` is applied after the first rectified layer; pass None in
    evaluation mode.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[1] != params.W1.shape[0]:
        raise DimensionError(f"feature matrix has shape {F.shape}")
    a1 = relu(F @ params.W1 + params.b1)
    if dropout_mask is not None:
        if dropout_mask.shape != a1.shape:
            raise DimensionError(
                f"dropout mask shape {dropout_mask.shape} != {a1.shape}")
        a1 = a1 * dropout_mask
    z2 = a1 @ params.W2 + params.b2
    u = z2 @ params.W3 + params.b3
    return sigmoid(u[:, 0])


def class_average_matrix(y, n):
    """(n x N) matrix M with M @ F giving per-class feature means."""
    y = np.asarray(y, dtype=int)
    counts = np.bincount(y, minlength=n)
    if len(counts) > n:
        raise DimensionError(f"label {y.max()} out of range for {n} classes")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClassError(f"no samples for class(es) {missing.tolist()}")
    M = np.zeros((n, len(y)))
    M[y, np.arange(len(y))] = 1.0
    return M / counts[:, None]


def compute_prototypes(F_s, y_s, n):
    """Class centroids of source features, one row per class."""
    F_s = np.asarray(F_s, dtype=float)
    if len(F_s) != len(y_s):
        raise DimensionError("features and labels differ in length")
    return class_average_matrix(y_s, n) @ F_s


def identity_prototypes(n, width=FEATURE_DIM):
    """Fixed one-hot anchors used when prototypes are ablated."""
    if n > width:
        raise ConfigError(f"cannot ablate prototypes with {n} > {width} classes")
    return np.eye(n, width)


def bilinear_logits(F, S, P):
    """h(f_i, mu_c) = f_i^T S mu_c for every row i and class c."""
    F = np.atleast_2d(F)
    if F.shape[1] != S.shape[0] or P.shape[1] != S.shape[1]:
        raise DimensionError(
            f"incompatible shapes F{F.shape}, S{S.shape}, P{P.shape}")
    return F @ S @ P.T


def interaction_features(F, S, P, normalize=False):
    """Softmax over bilinear logits; optionally scaled to unit length.

    Accepts a single feature vector or a matrix of rows.
    """
    single = np.ndim(F) == 1
    L = softmax(bilinear_logits(F, S, P))
    if normalize:
        L = L / np.linalg.norm(L, axis=1, keepdims=True)
    return L[0] if single else L


def align_prototypes(params: ModelParams, P, X_s, y_s):
    """Reorder prototype rows so that component c of l answers for class c.

    Pairwise losses only see whether two samples share a label, so training
    can settle with class c peaking on any component. The mean interaction
    feature of each source class is matched to a component by linear
    assignment; an already aligned set comes back unchanged.
    """
    from scipy.optimize import linear_sum_assignment

    n = len(P)
    L = interaction_features(extract_features(params.extractor, X_s), params.S, P)
    avg = class_average_matrix(y_s, n) @ L
    rows, cols = linear_sum_assignment(-avg)
    return P[cols[np.argsort(rows)]]


def predict_from_interaction(L):
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(np.atleast_2d(L), axis=1)


def predict(params: ModelParams, P, X):
    F = extract_features(params.extractor, X)
    return predict_from_interaction(bilinear_logits(F, params.S, P))
