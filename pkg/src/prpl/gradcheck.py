"""Finite-difference verification of :func:`prpl.training.backward`.

The numeric side re-derives the objective from scratch in a stacked form:
every parameter may carry a leading axis of K perturbed copies, so a block of
central differences costs one broadcast evaluation. It shares no code with
the analytic path beyond the basic activation functions.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import model as M
from . import objectives as O
from .config import TrainConfig
from .training import Batch, Schedules, backward, forward

# Relative errors use max(|a|, |n|, floor) as denominator, with the floor set
# per tensor to FLOOR_SCALE * max(1, max|a|). Central differences at step 1e-5
# carry ~1e-7 absolute round-off, which would otherwise dominate tiny entries.
FLOOR_SCALE = 1e-3
CHUNK = 128


class GradCheckReport(NamedTuple):
    max_rel_error: float
    passed: bool
    worst: str
    adapted: int = 0


def relative_error(analytic, numeric, floor=None):
    if floor is None:
        floor = FLOOR_SCALE * max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck_instance(seed, d_in=8, n_samples=12, n_classes=3, config=TrainConfig()):
    """Random small problem with every loss term active and mixed pseudo-labels."""
    rng = np.random.default_rng(seed)
    params = M.init_params(seed, d_in, n_classes)
    ys = rng.permutation(np.arange(n_samples) % n_classes)
    batch = Batch(rng.normal(size=(n_samples, d_in)), ys, rng.normal(size=(n_samples, d_in)))
    mask = M.dropout_mask(rng, (2 * n_samples, params.S.shape[0]), config.p_drop)
    sched = Schedules(lam=0.7, gamma=1.3, beta=0.5)
    cache = forward(params, batch, n_classes, config, mask)
    # Fresh prototypes are nearly identical, so softmax outputs sit close to
    # uniform and every cosine is within ~1e-5 of 1, where finite differences
    # of log(1 - g) lose most digits. Rescale S to order-one logit spread.
    spread = np.std(cache.FS @ cache.P.T, axis=1).mean()
    params.S *= 1.0 / spread
    cache = forward(params, batch, n_classes, config, mask)
    s = O.pair_similarities(cache.L_t, config.sim_form)
    off = s[~np.eye(n_samples, dtype=bool)]
    lo, hi = np.quantile(off, [1 / 3, 2 / 3])
    pairs = O.target_pseudo_labels(cache.L_t, O.ThresholdState(hi, lo), config.sim_form)
    return params, batch, sched, pairs, mask


def _bias(b, stacked):
    return b[:, None, :] if stacked else b


def _stacked_pair_loss(L, r):
    Ln = L / np.sqrt(np.sum(L * L, axis=-1, keepdims=True))
    diff = Ln[..., :, None, :] - Ln[..., None, :, :]
    D = 0.5 * np.sum(diff * diff, axis=-1)
    D = np.minimum(np.maximum(D, O.EPS), 1.0 - O.EPS)
    paired = r == O.PAIRED
    unpaired = r == O.UNPAIRED
    per_pair = np.where(paired, -np.log1p(-D), 0.0) + np.where(unpaired, -np.log(D), 0.0)
    return per_pair.sum(axis=(-1, -2))


def stacked_values(arrays, stacked, batch, n_classes, config, mask, pairs, sched):
    """Objective, discriminator loss and ReLU pattern for K parameter copies.

    ``arrays`` maps parameter names to arrays; names in ``stacked`` carry a
    leading axis of K copies. Returns arrays of shape (K,) and (K, bits).
    """
    def affine(x, prefix, layer):
        W = arrays[f"{prefix}.W{layer}"]
        bname = f"{prefix}.b{layer}"
        return x @ W + _bias(arrays[bname], bname in stacked)

    X = np.vstack([batch.xs, batch.xt])
    ns = len(batch.xs)
    z1 = affine(X, "extractor", 1)
    z2 = affine(M.relu(z1), "extractor", 2)
    F = affine(M.relu(z2), "extractor", 3)

    if config.no_prototypes:
        P = M.identity_prototypes(n_classes, F.shape[-1])
    else:
        onehot = (np.asarray(batch.ys)[None, :] == np.arange(n_classes)[:, None]).astype(float)
        P = (onehot / onehot.sum(axis=1, keepdims=True)) @ F[..., :ns, :]
    H = (F @ arrays["S"]) @ np.swapaxes(P, -1, -2)
    H = H - H.max(axis=-1, keepdims=True)
    L = np.exp(H)
    L = L / L.sum(axis=-1, keepdims=True)

    if config.no_source_pairwise:
        picked = L[..., np.arange(ns), np.asarray(batch.ys)]
        src = -np.log(np.maximum(picked, O.EPS)).sum(axis=-1)
    else:
        src = _stacked_pair_loss(L[..., :ns, :], O.source_pair_labels(batch.ys))
    if sched.beta and not config.no_prototypes:
        if config.reg_form == "printed":
            A = np.swapaxes(P, -1, -2) @ P - np.eye(P.shape[-1])
        else:
            A = P @ np.swapaxes(P, -1, -2) - np.eye(P.shape[-2])
        src = src + sched.beta * np.sqrt(np.sum(A * A, axis=(-1, -2)))
    total = src
    if pairs is not None and not config.no_target_pairwise:
        total = total + sched.gamma * _stacked_pair_loss(L[..., ns:, :], pairs)

    patterns = [z1 > 0, z2 > 0]
    disc = np.zeros(np.shape(total))
    if not config.no_discriminator:
        q1 = affine(F, "discriminator", 1)
        patterns.append(q1 > 0)
        a = M.relu(q1)
        if mask is not None:
            a = a * mask
        u = affine(affine(a, "discriminator", 2), "discriminator", 3)[..., 0]
        p = np.minimum(np.maximum(1.0 / (1.0 + np.exp(-u)), O.EPS), 1.0 - O.EPS)
        disc = -np.log(p[..., :ns]).sum(axis=-1) - np.log(1.0 - p[..., ns:]).sum(axis=-1)
        total = total - sched.lam * disc

    k = np.shape(total)[0] if np.ndim(total) else 1
    bits = np.concatenate(
        [np.broadcast_to(q, (k,) + q.shape[-2:]).reshape(k, -1) for q in patterns], axis=1)
    return np.atleast_1d(total), np.atleast_1d(disc), bits


def numeric_gradients(params, batch, sched, pairs, config, mask, n_classes, step=1e-5):
    """Central differences of the full objective (extractor, S) and of L_disc
    (discriminator).

    Where a perturbation flips a ReLU branch, the step is shrunk, and failing
    that a second-order one-sided difference is taken on the side that stays
    on the base branch. Returns ``(numeric, n_adapted)``.
    """
    base_arrays = params.named_arrays()
    num = params.zeros_like()
    num_arrays = num.named_arrays()

    def evaluate(name, flat_idx, offsets):
        arr = base_arrays[name]
        stack = np.repeat(arr.reshape(1, -1), len(offsets), axis=0)
        stack[np.arange(len(offsets)), flat_idx] += offsets
        arrays = dict(base_arrays)
        arrays[name] = stack.reshape((len(offsets),) + arr.shape)
        total, disc, bits = stacked_values(
            arrays, {name}, batch, n_classes, config, mask, pairs, sched)
        return (disc if name.startswith("discriminator.") else total), bits

    _, _, base_bits = stacked_values(
        base_arrays, set(), batch, n_classes, config, mask, pairs, sched)
    base_bits = base_bits[0]

    def adaptive(name, k, base_value):
        h = step
        for _ in range(3):
            v, bits = evaluate(name, np.array([k, k]), np.array([h, -h]))
            if (bits == base_bits).all():
                return (v[0] - v[1]) / (2.0 * h)
            h /= 10.0
        for sign in (1.0, -1.0):
            v, bits = evaluate(name, np.array([k, k]), sign * np.array([step, 2 * step]))
            if (bits == base_bits).all():
                return sign * (-3.0 * base_value + 4.0 * v[0] - v[1]) / (2.0 * step)
        v, _ = evaluate(name, np.array([k, k]), np.array([step, -step]))
        return (v[0] - v[1]) / (2.0 * step)

    adapted = 0
    for name, arr in base_arrays.items():
        if name.startswith("discriminator.") and config.no_discriminator:
            continue
        out = num_arrays[name].reshape(-1)
        base_value = evaluate(name, np.array([0]), np.array([0.0]))[0][0]
        for start in range(0, arr.size, CHUNK):
            idx = np.arange(start, min(start + CHUNK, arr.size))
            v, bits = evaluate(name, np.concatenate([idx, idx]),
                               np.concatenate([np.full(len(idx), step),
                                               np.full(len(idx), -step)]))
            m = len(idx)
            out[idx] = (v[:m] - v[m:]) / (2.0 * step)
            same = (bits == base_bits).all(axis=1)
            for j in np.flatnonzero(~(same[:m] & same[m:])):
                out[idx[j]] = adaptive(name, idx[j], base_value)
                adapted += 1
    return num, adapted


def compare_gradients(analytic, numeric, tolerance=1e-4, adapted=0):
    worst_name, worst = "", 0.0
    num_arrays = numeric.named_arrays()
    for name, a in analytic.named_arrays().items():
        err = float(np.max(relative_error(a, num_arrays[name]), initial=0.0))
        if err > worst:
            worst_name, worst = name, err
    return GradCheckReport(worst, worst <= tolerance, worst_name, adapted)


def gradient_check(seed=1, dims=(8, 12, 3), tolerance=1e-4, config=TrainConfig(), step=1e-5):
    """Compare backward() against central finite differences on a random instance."""
    d_in, n_samples, n_classes = dims
    params, batch, sched, pairs, mask = gradcheck_instance(
        seed, d_in, n_samples, n_classes, config)
    if config.no_discriminator:
        mask = None
    _, grads = backward(params, batch, sched, pairs, config, mask, n_classes)
    numeric, adapted = numeric_gradients(
        params, batch, sched, pairs, config, mask, n_classes, step)
    return compare_gradients(grads, numeric, tolerance, adapted)
