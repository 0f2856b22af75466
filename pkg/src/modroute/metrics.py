"""Specialization and fusion diagnostics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import TEXT, logsumexp

log = logging.getLogger(__name__)


class NotComputable(ValueError):
    pass


def modality_affiliation(C) -> tuple[np.ndarray, bool]:
    """Per-expert text affiliation from one layer's (2, N_e) routed counts.

    Counts are normalized per modality over experts, then per expert over
    modalities.  Returns (C_tilde_text, ok); ``ok`` is False when a modality
    has no tokens in this layer.  Experts with no load get 0.5.
    """
    C = np.asarray(C, dtype=np.float64)
    totals = C.sum(axis=1)
    if np.any(totals <= 0):
        return np.full(C.shape[1], 0.5), False
    share = C / totals[:, None]
    denom = share.sum(axis=0)
    text = np.where(denom > 0, share[TEXT] / np.where(denom > 0, denom, 1.0), 0.5)
    return text, True


@dataclass
class MsiReport:
    per_layer: np.ndarray
    overall: float
    signed: np.ndarray
    excluded_layers: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "msi": self.overall,
            "per_layer": [None if np.isnan(v) else float(v) for v in self.per_layer],
            "excluded_layers": self.excluded_layers,
            "signed": self.signed.tolist(),
        }


def msi(counts) -> MsiReport:
    """Modality specialization index from (L, 2, N_e) hard routed counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim == 2:
        counts = counts[None]
    per_layer = np.full(counts.shape[0], np.nan)
    signed = np.zeros((counts.shape[0], counts.shape[2]))
    excluded = []
    for l, C in enumerate(counts):
        text, ok = modality_affiliation(C)
        signed[l] = 2.0 * (text - 0.5)
        if not ok:
            excluded.append(l)
            log.warning("layer %d has a modality with no tokens; excluded from MSI", l)
            continue
        per_layer[l] = np.mean(2.0 * np.abs(text - 0.5))
    if len(excluded) == counts.shape[0]:
        raise NotComputable("every layer lacks one of the modalities")
    return MsiReport(per_layer, float(np.nanmean(per_layer)), signed, excluded)


def _diag_logpdf(x, mean, var) -> np.ndarray:
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var).sum(axis=-1)


def js_divergence(
    features_a,
    features_b,
    num_samples: int = 10_000,
    seed: int = 0,
    var_floor: float = 1e-9,
) -> float:
    """Jensen-Shannon divergence (nats) between two feature sets.

    Each set is summarized by a diagonal Gaussian; the two KL terms against
    the equal-weight mixture are averaged by Monte Carlo.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) < 2 or len(b) < 2:
        raise NotComputable("need at least two points per set")
    mu_a, var_a = a.mean(0), np.maximum(a.var(0), var_floor)
    mu_b, var_b = b.mean(0), np.maximum(b.var(0), var_floor)
    rng = np.random.default_rng(seed)
    xa = mu_a + np.sqrt(var_a) * rng.standard_normal((num_samples, a.shape[1]))
    xb = mu_b + np.sqrt(var_b) * rng.standard_normal((num_samples, b.shape[1]))

    def terms(x):
        la = _diag_logpdf(x, mu_a, var_a)
        lb = _diag_logpdf(x, mu_b, var_b)
        lm = logsumexp(np.stack([la, lb]), axis=0) - np.log(2.0)
        return la, lb, lm

    la, _, lm = terms(xa)
    kl_a = np.mean(la - lm)
    _, lb, lm = terms(xb)
    kl_b = np.mean(lb - lm)
    return float(max(0.5 * (kl_a + kl_b), 0.0))


def write_msi_csv(report: MsiReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "msi"])
        for l, v in enumerate(report.per_layer):
            w.writerow([l, "" if np.isnan(v) else repr(float(v))])


def write_json(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

