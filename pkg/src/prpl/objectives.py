"""Loss terms, pair relations and the annealing schedules of the PR-PL objective.

Pair-label matrices are small int8 arrays using the codes ``PAIRED`` (1),
``UNPAIRED`` (0) and ``INVALID`` (-1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

EPS = 1e-7

PAIRED = 1
UNPAIRED = 0
INVALID = -1

LAMBDA_MAX = 10.0


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def discriminator_loss(d_s, d_t):
    """Binary cross-entropy with source labelled 1 and target labelled 0, summed."""
    d_s = np.asarray(d_s, dtype=float)
    d_t = np.asarray(d_t, dtype=float)
    if d_s.size == 0 or d_t.size == 0:
        raise ValueError("discriminator_loss needs non-empty source and target outputs")
    return float(-np.log(_clamp(d_s)).sum() - np.log(1.0 - _clamp(d_t)).sum())


def lambda_schedule(p, mode="standard"):
    """Adversarial weight as a function of training progress ``p`` in [0, 1].

    ``standard`` is the usual 2/(1+exp(-10p)) - 1 ramp. ``literal`` evaluates
    2/(1-exp(-p)) - 1, which diverges at p=0, so it is clamped to [0, 10].
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    if mode == "standard":
        return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
    if mode == "literal":
        if p == 0.0:
            return LAMBDA_MAX
        lam = 2.0 / (1.0 - math.exp(-p)) - 1.0
        return min(max(lam, 0.0), LAMBDA_MAX)
    raise ValueError(f"unknown lambda mode {mode!r}")


def source_pair_labels(y):
    y = np.asarray(y)
    return (y[:, None] == y[None, :]).astype(np.int8)


def pairwise_similarity(l_i, l_j):
    """Cosine similarity of two interaction features."""
    ni = np.linalg.norm(l_i)
    nj = np.linalg.norm(l_j)
    if ni == 0.0 or nj == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.dot(l_i, l_j) / (ni * nj))


def cosine_matrix(L):
    Ln = L / np.linalg.norm(L, axis=1, keepdims=True)
    return Ln @ Ln.T


def pair_bce(r, g):
    g = _clamp(g)
    return -r * np.log(g) - (1 - r) * np.log(1.0 - g)


def _pair_loss(L, r):
    G = cosine_matrix(np.asarray(L, dtype=float))
    r = np.asarray(r)
    if r.shape != G.shape:
        raise DimensionError(f"pair labels {r.shape} vs {G.shape} similarities")
    valid = r != INVALID
    return float(pair_bce(r[valid].astype(float), G[valid]).sum())


def prototype_regularizer(P, form="printed"):
    """Frobenius distance of P^T P (``printed``) or P P^T (``gram``) from identity."""
    P = np.asarray(P, dtype=float)
    if form == "printed":
        A = P.T @ P - np.eye(P.shape[1])
    elif form == "gram":
        A = P @ P.T - np.eye(P.shape[0])
    else:
        raise ValueError(f"unknown regularizer form {form!r}")
    return float(np.linalg.norm(A, "fro"))


def source_pairwise_loss(L, r, P, beta, reg_form="printed"):
    """Sum of pair BCE over all ordered pairs (i == j included) plus beta * R(P)."""
    r = np.asarray(r)
    if (r == INVALID).any():
        raise ValueError("source pair labels cannot contain INVALID entries")
    loss = _pair_loss(L, r)
    if beta:
        loss += beta * prototype_regularizer(P, reg_form)
    return loss


def source_pointwise_loss(L, y, P, beta, reg_form="printed"):
    """Cross-entropy of interaction features against labels, plus beta * R(P).

    Stands in for the pairwise source term in the corresponding ablation.
    """
    L = np.asarray(L, dtype=float)
    loss = float(-np.log(np.maximum(L[np.arange(len(L)), y], EPS)).sum())
    if beta:
        loss += beta * prototype_regularizer(P, reg_form)
    return loss


@dataclass(frozen=True)
class ThresholdState:
    tau_h: float
    tau_l: float
    epoch: int = 0

    def __post_init__(self):
        if self.tau_h < self.tau_l:
            raise ValueError(f"tau_h={self.tau_h} below tau_l={self.tau_l}")


def pair_similarities(L, sim_form="cosine"):
    L = np.asarray(L, dtype=float)
    if sim_form == "cosine":
        return cosine_matrix(L)
    if sim_form == "rawdot":
        return L @ L.T
    raise ValueError(f"unknown similarity form {sim_form!r}")


def target_pseudo_labels(L_t, th: ThresholdState, sim_form="cosine"):
    """Paired above tau_h, unpaired below tau_l, invalid in between."""
    s = pair_similarities(L_t, sim_form)
    r = np.full(s.shape, INVALID, dtype=np.int8)
    r[s >= th.tau_h] = PAIRED
    r[s < th.tau_l] = UNPAIRED
    # float noise can make s_ij and s_ji straddle a threshold
    return np.where(np.triu(np.ones(s.shape, dtype=bool)), r, r.T)


def target_pairwise_loss(L_t, pl):
    return _pair_loss(L_t, pl)


def update_thresholds(th: ThresholdState, maxepoch):
    """One step of the nonlinear threshold recurrence; both move toward the midpoint."""
    step = (th.tau_h - th.tau_l) / maxepoch
    return ThresholdState(th.tau_h - step, th.tau_l + step, th.epoch + 1)


def linear_thresholds(tau_h0, tau_l0, epoch, maxepoch):
    """Linear interpolation from the initial pair to the midpoint at maxepoch."""
    shift = 0.5 * (tau_h0 - tau_l0) * min(epoch / maxepoch, 1.0)
    return ThresholdState(tau_h0 - shift, tau_l0 + shift, epoch)


def thresholds_closed_form(tau_h0, tau_l0, t, maxepoch):
    """Closed form of the recurrence, for cross-checking only.

    The gap contracts by (1 - 2/maxepoch) per step.
    """
    half_gap = 0.5 * (tau_h0 - tau_l0)
    shrink = 1.0 - (1.0 - 2.0 / maxepoch) ** t
    return ThresholdState(tau_h0 - half_gap * shrink, tau_l0 + half_gap * shrink, t)


def gamma_schedule(epoch, maxepoch, delta):
    return delta * epoch / maxepoch


def total_objective(source_loss, target_loss, disc_loss, lam, gamma):
    """Value minimised over the extractor and S, maximised over the discriminator."""
    return source_loss + gamma * target_loss - lam * disc_loss
