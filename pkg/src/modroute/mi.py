"""Inter-bin mutual information between token modality and expert bin."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class DegenerateSample(ValueError):
    pass


@dataclass
class JointTable:
    P: np.ndarray

    @property
    def p_modality(self) -> np.ndarray:
        return self.P.sum(axis=1)

    @property
    def p_bin(self) -> np.ndarray:
        return self.P.sum(axis=0)


def bin_scores(g, scores, expert_bin, num_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Modality-weighted mean gate mass per bin for each sample.

    ``g`` is (S, J, N_e), ``scores`` is (S, J, 2).  Returns ``S_bar`` of shape
    (S, 2, num_bins) and a (S, 2) mask of modality rows with nonzero score mass.
    Undefined rows are left at zero.
    """
    g = np.asarray(g, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    N_e = g.shape[-1]
    N_B = N_e // num_bins
    onehot = np.eye(num_bins)[np.asarray(expert_bin)]  # (N_e, num_bins)
    bin_mass = g @ onehot  # (S, J, num_bins)
    weighted = np.einsum("sjm,sjk->smk", scores, bin_mass)
    Z = scores.sum(axis=1)  # (S, 2)
    valid = Z > 0
    S_bar = np.where(valid[..., None], weighted / (N_B * np.where(valid, Z, 1.0))[..., None], 0.0)
    return S_bar, valid


def joint_probs(S_bar) -> JointTable:
    S_bar = np.asarray(S_bar, dtype=np.float64)
    total = S_bar.sum()
    if not total > 0:
        raise DegenerateSample("joint scores are all zero")
    return JointTable(S_bar / total)


def mutual_information(joint: JointTable) -> float:
    P = joint.P
    outer = np.outer(joint.p_modality, joint.p_bin)
    nz = P > 0
    I = float(np.sum(P[nz] * np.log(P[nz] / outer[nz])))
    return max(I, 0.0)


def _sample_mi_grad(S_bar: np.ndarray) -> tuple[float, np.ndarray]:
    """MI of one (rows, bins) table and dI/dS_bar."""
    total = S_bar.sum()
    P = S_bar / total
    pm = P.sum(axis=1, keepdims=True)
    pb = P.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(P > 0, np.log(P / (pm * pb)), 0.0)
    I = float(np.sum(P * ratio))
    # zero cells are unreachable under a dense softmax gate; their gradient is dropped
    dS = (ratio - I) / total
    return max(I, 0.0), dS


def mi_layer_loss_grad(g, scores, expert_bin, num_bins: int) -> tuple[float, np.ndarray]:
    """-mean_i I_i for one layer and its gradient w.r.t. ``g`` (S, J, N_e).

    Samples with a single defined modality row contribute I = 0 and no gradient.
    """
    g = np.asarray(g, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    S, J, N_e = g.shape
    N_B = N_e // num_bins
    expert_bin = np.asarray(expert_bin)
    S_bar, valid = bin_scores(g, scores, expert_bin, num_bins)
    Z = scores.sum(axis=1)
    loss = 0.0
    dg = np.zeros_like(g)
    for i in range(S):
        rows = np.flatnonzero(valid[i])
        if len(rows) < 2:
            continue
        I, dS = _sample_mi_grad(S_bar[i, rows])
        loss -= I / S
        # dS_bar[m, k] / dg[j, e] = M[j, m] / (N_B Z_m) for e in bin k
        coef = scores[i][:, rows] / (N_B * Z[i, rows])  # (J, rows)
        dg[i] -= (coef @ dS)[:, expert_bin] / S
    return loss, dg


def per_sample_mi(g, scores, expert_bin, num_bins: int) -> np.ndarray:
    """I_i for every sample of one layer; single-modality samples give 0."""
    S_bar, valid = bin_scores(g, scores, expert_bin, num_bins)
    out = np.zeros(S_bar.shape[0])
    dropped = 0
    for i in range(S_bar.shape[0]):
        rows = np.flatnonzero(valid[i])
        if len(rows) < 2:
            dropped += 1
            continue
        out[i] = mutual_information(joint_probs(S_bar[i, rows]))
    if dropped:
        log.debug("%d sample(s) carry a single modality; their MI is 0", dropped)
    return out


def mi_loss(gates, scores, layouts_bins, num_bins: int) -> float:
    """-sum over layers of the batch-mean MI.

    ``gates`` is a sequence of per-layer (S, J, N_e) gate scores, ``scores``
    the matching (L, S, J, 2) score field and ``layouts_bins`` per-layer
    expert-to-bin maps.
    """
    total = 0.0
    for layer, g in enumerate(gates):
        total -= per_sample_mi(g, scores[layer], layouts_bins[layer], num_bins).mean()
    return total
