"""Manual backpropagation, RMSprop and the PR-PL training loop.

The extractor and S descend on

    J = L_src + gamma * L_tgt - lambda * L_disc

while the discriminator descends on L_disc itself. This is what a gradient
reversal layer does: the discriminator's gradient reaches the extractor
multiplied by -lambda.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import model as M
from . import objectives as O
from .config import TrainConfig, substream
from .errors import DatasetError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray


@dataclass(frozen=True)
class Schedules:
    lam: float = 0.0
    gamma: float = 0.0
    beta: float = 0.0


@dataclass
class ForwardCache:
    X: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    F: np.ndarray
    avg: Optional[np.ndarray]  # class-average matrix, None when prototypes are fixed
    P: np.ndarray
    FS: np.ndarray
    L: np.ndarray
    n_source: int
    ys: np.ndarray
    disc: Optional[dict] = None

    @property
    def L_s(self):
        return self.L[: self.n_source]

    @property
    def L_t(self):
        return self.L[self.n_source:]


def forward(params: M.ModelParams, batch: Batch, n_classes, config=TrainConfig(),
            mask=None):
    """Shared forward pass over the concatenated source and target batch."""
    ext = params.extractor
    X = np.vstack([batch.xs, batch.xt]).astype(float, copy=False)
    z1 = X @ ext.W1 + ext.b1
    a1 = M.relu(z1)
    z2 = a1 @ ext.W2 + ext.b2
    a2 = M.relu(z2)
    F = a2 @ ext.W3 + ext.b3
    ns = len(batch.xs)
    if config.no_prototypes:
        avg = None
        P = M.identity_prototypes(n_classes, F.shape[1])
    else:
        avg = M.class_average_matrix(batch.ys, n_classes)
        P = avg @ F[:ns]
    FS = F @ params.S
    L = M.softmax(FS @ P.T)
    cache = ForwardCache(X, z1, a1, z2, a2, F, avg, P, FS, L, ns, np.asarray(batch.ys))
    if not config.no_discriminator:
        d = params.discriminator
        q1 = F @ d.W1 + d.b1
        h1 = M.relu(q1)
        h1d = h1 * mask if mask is not None else h1
        q2 = h1d @ d.W2 + d.b2
        u = (q2 @ d.W3 + d.b3)[:, 0]
        cache.disc = dict(q1=q1, h1d=h1d, q2=q2, prob=M.sigmoid(u), mask=mask)
    return cache


def _pair_term(L, r, want_grad):
    """Pair BCE over non-invalid entries of r and its gradient w.r.t. L."""
    norms = np.sqrt(np.sum(L * L, axis=1, keepdims=True))
    Ln = L / norms
    # 1 - cos as half the squared chord length keeps full relative precision
    # for nearly parallel rows, where log(1 - g) is steepest
    diff = Ln[:, None, :] - Ln[None, :, :]
    D = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    valid = r != O.INVALID
    rf = (r == O.PAIRED).astype(float)
    Dc = np.minimum(np.maximum(D, O.EPS), 1.0 - O.EPS)
    loss = float(np.where(valid, -rf * np.log1p(-Dc) - (1.0 - rf) * np.log(Dc), 0.0).sum())
    if not want_grad:
        return loss, None
    inside = valid & (D > O.EPS) & (D < 1.0 - O.EPS)
    dG = np.where(inside, -rf / (1.0 - Dc) + (1.0 - rf) / Dc, 0.0)
    dLn = (dG + dG.T) @ Ln
    dL = (dLn - Ln * np.sum(dLn * Ln, axis=1, keepdims=True)) / norms
    return loss, dL


def _regularizer(P, form, want_grad):
    A = P.T @ P if form == "printed" else P @ P.T
    A[np.diag_indices_from(A)] -= 1.0
    R = float(np.sqrt(np.sum(A * A)))
    if not want_grad:
        return R, None
    if R == 0.0:
        return R, np.zeros_like(P)
    dP = 2.0 * (P @ A if form == "printed" else A @ P) / R
    return R, dP


def _softmax_backward(L, dL):
    return L * (dL - np.sum(dL * L, axis=1, keepdims=True))


class Terms(NamedTuple):
    source: float
    target: float
    disc: float
    regularizer: float
    objective: float


def losses(cache: ForwardCache, target_pairs, sched: Schedules, config=TrainConfig(),
           want_grad=True, params=None):
    """Loss terms and, if requested, gradients of a forward cache.

    Returns ``(terms, grads)``; grads is None when ``want_grad`` is False.
    """
    ns = cache.n_source
    Ls, Lt = cache.L_s, cache.L_t
    dL = np.zeros_like(cache.L) if want_grad else None

    if config.no_source_pairwise:
        idx = np.arange(ns)
        picked = Ls[idx, cache.ys]
        src = float(-np.log(np.maximum(picked, O.EPS)).sum())
        if want_grad:
            dL[idx, cache.ys] = np.where(picked > O.EPS, -1.0 / picked, 0.0)
    else:
        src, dLs = _pair_term(Ls, O.source_pair_labels(cache.ys), want_grad)
        if want_grad:
            dL[:ns] += dLs

    reg, dP_reg = 0.0, None
    if sched.beta and not config.no_prototypes:
        reg, dP_reg = _regularizer(cache.P, config.reg_form, want_grad)

    tgt = 0.0
    if target_pairs is not None and not config.no_target_pairwise:
        tgt, dLt = _pair_term(Lt, target_pairs, want_grad and sched.gamma != 0.0)
        if dLt is not None:
            dL[ns:] += sched.gamma * dLt

    disc = 0.0
    dc = cache.disc
    if dc is not None:
        p = dc["prob"]
        ps, pt = p[:ns], p[ns:]
        disc = O.discriminator_loss(ps, pt)

    value = O.total_objective(src + sched.beta * reg, tgt, disc,
                              0.0 if dc is None else sched.lam, sched.gamma)
    terms = Terms(src, tgt, disc, reg, value)
    if not want_grad:
        return terms, None

    grads = params.zeros_like()
    dH = _softmax_backward(cache.L, dL)
    dFS = dH @ cache.P
    grads.S = cache.F.T @ dFS
    dF = dFS @ params.S.T
    if cache.avg is not None:
        dP = dH.T @ cache.FS
        if dP_reg is not None:
            dP += sched.beta * dP_reg
        dF[:ns] += cache.avg.T @ dP

    if dc is not None:
        d = params.discriminator
        gd = grads.discriminator
        p = dc["prob"]
        du = np.empty_like(p)
        du[:ns] = p[:ns] - 1.0
        du[ns:] = p[ns:]
        du[(p <= O.EPS) | (p >= 1.0 - O.EPS)] = 0.0
        du = du[:, None]
        gd.W3 = dc["q2"].T @ du
        gd.b3 = du.sum(axis=0)
        dq2 = du @ d.W3.T
        gd.W2 = dc["h1d"].T @ dq2
        gd.b2 = dq2.sum(axis=0)
        dh1 = dq2 @ d.W2.T
        if dc["mask"] is not None:
            dh1 = dh1 * dc["mask"]
        dq1 = dh1 * (dc["q1"] > 0)
        gd.W1 = cache.F.T @ dq1
        gd.b1 = dq1.sum(axis=0)
        # gradient reversal
        dF -= sched.lam * (dq1 @ d.W1.T)

    ext = params.extractor
    ge = grads.extractor
    ge.W3 = cache.a2.T @ dF
    ge.b3 = dF.sum(axis=0)
    dz2 = (dF @ ext.W3.T) * (cache.z2 > 0)
    ge.W2 = cache.a1.T @ dz2
    ge.b2 = dz2.sum(axis=0)
    dz1 = (dz2 @ ext.W2.T) * (cache.z1 > 0)
    ge.W1 = cache.X.T @ dz1
    ge.b1 = dz1.sum(axis=0)

    for name, g in grads.named_arrays().items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    return terms, grads


def backward(params, batch, sched: Schedules, target_pairs=None, config=TrainConfig(),
             mask=None, n_classes=None):
    """Objective value and gradients for one batch.

    ``target_pairs`` is the frozen pseudo-label matrix for the target batch
    (None skips the target term). Discriminator gradients are those of
    L_disc; extractor and S gradients are those of the full objective.
    """
    n = n_classes if n_classes is not None else int(np.max(batch.ys)) + 1
    cache = forward(params, batch, n, config, mask)
    terms, grads = losses(cache, target_pairs, sched, config, True, params)
    return terms.objective, grads


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class RMSpropState:
    acc: M.ModelParams
    rho: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, rho=0.99, eps=1e-8):
        return cls(params.zeros_like(), rho, eps)


def rmsprop_step(params, grads, state: RMSpropState, lr, l2_weight=0.0):
    """In-place RMSprop update with decoupled L2 decay. Returns (params, state)."""
    p_arrays = params.named_arrays()
    g_arrays = grads.named_arrays()
    a_arrays = state.acc.named_arrays()
    for name, p in p_arrays.items():
        g = g_arrays[name]
        acc = a_arrays[name]
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p -= lr * g / np.sqrt(acc + state.eps) + lr * l2_weight * p
    return params, state


# ---------------------------------------------------------------------------
# batching


def _class_quotas(counts, batch_size):
    n = len(counts)
    if batch_size < n:
        raise DatasetError(f"batch size {batch_size} cannot hold all {n} classes")
    share = batch_size * counts / counts.sum()
    q = np.maximum(np.floor(share).astype(int), 1)
    while q.sum() > batch_size:
        q[np.argmax(q)] -= 1
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    i = 0
    while q.sum() < batch_size:
        q[order[i % n]] += 1
        i += 1
    return q


def _cycled(rng, pool, length):
    reps = -(-length // len(pool))
    return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:length]


def make_batches(y_s, n_target, batch_size, seed, n_classes=None):
    """Index pairs (source, target) for one epoch.

    Every source batch contains each class at least once, with class shares
    proportional to the source label distribution. The shorter domain is
    cycled so both yield ``batch_size`` indices per step. ``seed`` may be an
    int or a numpy Generator (which is advanced).
    """
    rng = np.random.default_rng(seed)
    y_s = np.asarray(y_s, dtype=int)
    n = n_classes if n_classes is not None else int(y_s.max()) + 1
    counts = np.bincount(y_s, minlength=n)
    if (counts == 0).any():
        raise DatasetError(
            f"source has no samples for class(es) {np.flatnonzero(counts == 0).tolist()}")
    if n_target < 1:
        raise DatasetError("target domain is empty")
    steps = max(1, math.ceil(max(len(y_s), n_target) / batch_size))
    quotas = _class_quotas(counts, batch_size)
    streams = [_cycled(rng, np.flatnonzero(y_s == c), steps * q)
               for c, q in enumerate(quotas)]
    tgt = _cycled(rng, np.arange(n_target), steps * batch_size)
    out = []
    for k in range(steps):
        src = np.concatenate([s[k * q:(k + 1) * q] for s, q in zip(streams, quotas)])
        out.append((rng.permutation(src), tgt[k * batch_size:(k + 1) * batch_size]))
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return [r[key] for r in self.records]

    COLUMNS = ("epoch", "source_loss", "target_loss", "disc_loss", "regularizer",
               "objective", "lam", "gamma", "tau_h", "tau_l", "valid_pair_fraction",
               "source_acc", "target_acc")


class FitResult(NamedTuple):
    params: M.ModelParams
    prototypes: np.ndarray
    history: TrainHistory


def epoch_thresholds(config: TrainConfig, epoch, state: O.ThresholdState):
    """Thresholds in force during ``epoch`` (1-based) for each pseudo-label mode."""
    if config.pseudo_mode == "nonlinear":
        return state
    if config.pseudo_mode == "linear":
        return O.linear_thresholds(config.tau_h0, config.tau_l0, epoch - 1, config.maxepoch)
    if config.pseudo_mode == "fixed":
        return O.ThresholdState(config.tau_h0, config.tau_l0, epoch - 1)
    mid = 0.5 * (config.tau_h0 + config.tau_l0)
    return O.ThresholdState(mid, mid, epoch - 1)


def epoch_schedules(config: TrainConfig, epoch):
    p = epoch / config.maxepoch
    lam = 0.0 if config.no_discriminator else O.lambda_schedule(p, config.lambda_mode)
    if config.no_target_pairwise:
        gamma = 0.0
    elif config.gamma_mode == "dynamic":
        gamma = O.gamma_schedule(epoch, config.maxepoch, config.delta)
    else:
        gamma = config.delta
    return Schedules(lam=lam, gamma=gamma, beta=config.beta)


def full_prototypes(params, X_s, y_s, n_classes, config=TrainConfig()):
    """Inference prototypes: centroids over the whole source set, row-aligned
    to class indices (see :func:`prpl.model.align_prototypes`)."""
    if config.no_prototypes:
        P = M.identity_prototypes(n_classes, params.S.shape[0])
    else:
        P = M.compute_prototypes(M.extract_features(params.extractor, X_s), y_s, n_classes)
    return M.align_prototypes(params, P, X_s, y_s)


def fit(config: TrainConfig, X_s, y_s, X_t, n_classes=None,
        monitor: Optional[Callable[[M.ModelParams, np.ndarray], float]] = None):
    """Train PR-PL on labelled source data and unlabelled target features.

    Target labels never enter this function. ``monitor(params, prototypes)``
    may return a target accuracy for the history; it is called once per epoch.
    """
    X_s = np.asarray(X_s, dtype=float)
    X_t = np.asarray(X_t, dtype=float)
    y_s = np.asarray(y_s, dtype=int)
    if X_s.shape[1] != X_t.shape[1]:
        raise DatasetError(
            f"source has {X_s.shape[1]} features but target has {X_t.shape[1]}")
    n = n_classes if n_classes is not None else int(y_s.max()) + 1
    seed = config.seed
    params = M.init_params(int(substream(seed, "init").integers(2**31)), X_s.shape[1], n)
    history = TrainHistory()
    if config.maxepoch == 0:
        return FitResult(params, full_prototypes(params, X_s, y_s, n, config), history)

    batch_rng = substream(seed, "batching")
    drop_rng = substream(seed, "dropout")
    opt = RMSpropState.zeros(params, config.rho, config.eps_opt)
    th_state = O.ThresholdState(config.tau_h0, config.tau_l0)
    use_target = not config.no_target_pairwise

    for epoch in range(1, config.maxepoch + 1):
        sched = epoch_schedules(config, epoch)
        th = epoch_thresholds(config, epoch, th_state)
        sums = np.zeros(5)
        valid = []
        batches = make_batches(y_s, len(X_t), config.batch_size, batch_rng, n)
        for step, (si, ti) in enumerate(batches):
            batch = Batch(X_s[si], y_s[si], X_t[ti])
            mask = None
            if not config.no_discriminator:
                mask = M.dropout_mask(drop_rng, (len(si) + len(ti), params.S.shape[0]),
                                      config.p_drop)
            cache = forward(params, batch, n, config, mask)
            pairs = None
            if use_target:
                pairs = O.target_pseudo_labels(cache.L_t, th, config.sim_form)
                valid.append(float(np.mean(pairs != O.INVALID)))
            try:
                terms, grads = losses(cache, pairs, sched, config, True, params)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} step {step}: {exc}") from None
            rmsprop_step(params, grads, opt, config.lr, config.l2_weight)
            sums += terms[:5]

        protos = full_prototypes(params, X_s, y_s, n, config)
        src_acc = float(np.mean(M.predict(params, protos, X_s) == y_s))
        tgt_acc = float(monitor(params, protos)) if monitor is not None else float("nan")
        means = sums / len(batches)
        history.records.append(dict(
            epoch=epoch, source_loss=means[0], target_loss=means[1], disc_loss=means[2],
            regularizer=means[3], objective=means[4], lam=sched.lam, gamma=sched.gamma,
            tau_h=th.tau_h, tau_l=th.tau_l,
            valid_pair_fraction=float(np.mean(valid)) if valid else float("nan"),
            source_acc=src_acc, target_acc=tgt_acc))
        log.debug("epoch %d objective %.4f source acc %.3f", epoch, means[4], src_acc)
        if config.pseudo_mode == "nonlinear" and epoch < config.maxepoch:
            th_state = O.update_thresholds(th_state, config.maxepoch)

    return FitResult(params, full_prototypes(params, X_s, y_s, n, config), history)
