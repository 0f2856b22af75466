"""Soft modality scores.

Two estimators produce a per-layer field of shape (L, S, J, 2) whose last
axis is (text, vision) and sums to one:

* the attention-accumulated estimator propagates hard input labels through
  head-averaged attention with a norm-weighted residual mix;
* the Gaussian estimator keeps streaming diagonal-Gaussian moments per
  modality and scores tokens by a tempered softmax of log-likelihoods.

An online Gaussian-mixture variant of the second estimator is also provided.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    TEXT,
    VISION,
    InvalidInput,
    NotReady,
    TokenBatch,
    logsumexp,
    softmax,
)

DEFAULT_EPS_VAR = 1e-6


def init_hard_scores(labels) -> np.ndarray:
    """One-hot (text, vision) scores from hard labels, shape labels.shape + (2,)."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (2,))
    out[..., TEXT] = labels == TEXT
    out[..., VISION] = labels == VISION
    return out


def attn_aggregate(scores: np.ndarray, attn: np.ndarray) -> np.ndarray:
    """Mix each token's scores with those of the tokens it attends to.

    ``scores`` is (..., J, 2) and ``attn`` is (..., J, J) with rows summing to one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    attn = np.asarray(attn, dtype=np.float64)
    J = scores.shape[-2]
    if attn.shape[-2:] != (J, J):
        raise InvalidInput(f"attention of shape {attn.shape[-2:]} does not match sequence length {J}")
    return attn @ scores


def attn_residual_update(
    agg: np.ndarray, prev: np.ndarray, attn_out_norm: np.ndarray, input_norm: np.ndarray
) -> np.ndarray:
    """Norm-weighted blend of aggregated and carried-over scores.

    Tokens whose two norms are both zero keep ``prev`` unchanged.
    """
    a = np.asarray(attn_out_norm, dtype=np.float64)[..., None]
    r = np.asarray(input_norm, dtype=np.float64)[..., None]
    if np.any(a < 0) or np.any(r < 0):
        raise InvalidInput("norms must be nonnegative")
    total = a + r
    safe = np.where(total > 0, total, 1.0)
    out = (a * agg + r * prev) / safe
    return np.where(total > 0, out, prev)


def attention_score_field(batch: TokenBatch) -> np.ndarray:
    """Attention-accumulated scores for every layer, shape (L, S, J, 2).

    Entry ``l`` is the score after layer ``l``'s attention block, i.e. the one
    seen by that layer's router.
    """
    if batch.attn is None:
        raise InvalidInput("batch carries no attention matrices")
    M = init_hard_scores(batch.labels)
    out = np.empty((batch.num_layers,) + M.shape)
    for layer in range(batch.num_layers):
        x = batch.features[layer]
        attn = batch.attn[layer]
        agg = attn_aggregate(M, attn)
        attn_out_norm = np.linalg.norm(attn @ x, axis=-1)
        input_norm = np.linalg.norm(x, axis=-1)
        M = attn_residual_update(agg, M, attn_out_norm, input_norm)
        out[layer] = M
    return out


@dataclass
class GaussianMoments:
    """EMA-Welford moments for each (layer, modality).

    N has shape (L, 2); S_mu and S_var have shape (L, 2, D).
    """

    num_layers: int
    dim: int
    beta: float = 0.99
    eps_var: float = DEFAULT_EPS_VAR
    N: np.ndarray = field(init=False)
    S_mu: np.ndarray = field(init=False)
    S_var: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not 0 < self.beta <= 1:
            raise InvalidInput(f"beta must lie in (0, 1], got {self.beta}")
        if not self.eps_var > 0:
            raise InvalidInput("eps_var must be positive")
        self.N = np.zeros((self.num_layers, 2))
        self.S_mu = np.zeros((self.num_layers, 2, self.dim))
        self.S_var = np.zeros((self.num_layers, 2, self.dim))

    def update(self, layer: int, modality: int, X) -> None:
        """Fold a batch of modality-``modality`` features into the running moments."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        beta = self.beta
        n = X.shape[0]
        N_prev = self.N[layer, modality]
        if n == 0:
            self.N[layer, modality] = beta * N_prev
            self.S_mu[layer, modality] *= beta
            self.S_var[layer, modality] *= beta
            return
        mu_b = X.mean(axis=0)
        ss_b = ((X - mu_b) ** 2).sum(axis=0)
        if N_prev > 0:
            delta = mu_b - self.S_mu[layer, modality] / N_prev
            cross = delta**2 * (beta * N_prev * n / (beta * N_prev + n))
        else:
            cross = 0.0
        self.N[layer, modality] = beta * N_prev + n
        self.S_mu[layer, modality] = beta * self.S_mu[layer, modality] + n * mu_b
        self.S_var[layer, modality] = beta * self.S_var[layer, modality] + ss_b + cross

    def update_batch(self, batch: TokenBatch) -> None:
        labels = batch.flat_labels()
        for layer in range(batch.num_layers):
            x = batch.layer_tokens(layer)
            for m in (TEXT, VISION):
                self.update(layer, m, x[labels == m])

    def ready(self, layer: int | None = None) -> bool:
        N = self.N if layer is None else self.N[layer]
        return bool(np.all(N > 0))

    def mean(self, layer: int) -> np.ndarray:
        self._require(layer)
        return self.S_mu[layer] / self.N[layer][:, None]

    def var(self, layer: int) -> np.ndarray:
        """Floored variance, shape (2, D)."""
        self._require(layer)
        return np.maximum(self.S_var[layer] / self.N[layer][:, None], self.eps_var)

    def _require(self, layer: int) -> None:
        if not self.ready(layer):
            raise NotReady(f"layer {layer} has a modality with no observed tokens")


def diag_loglik(x, mean, var) -> np.ndarray:
    """-1/2 sum_d (log var_d + (x_d - mean_d)^2 / var_d), broadcasting over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * (np.log(var) + (x - mean) ** 2 / var).sum(axis=-1)


def gaussian_loglik(moments: GaussianMoments, layer: int, x) -> np.ndarray:
    """Per-modality log-likelihoods of tokens ``x`` (..., D); returns (..., 2)."""
    mu = moments.mean(layer)
    var = moments.var(layer)
    x = np.asarray(x, dtype=np.float64)[..., None, :]
    return diag_loglik(x, mu, var)


def gaussian_score(LL, tau: float) -> np.ndarray:
    return softmax(LL, temperature=tau, axis=-1)


def gaussian_score_field(moments: GaussianMoments, batch: TokenBatch, tau: float) -> np.ndarray:
    out = np.empty(batch.features.shape[:3] + (2,))
    for layer in range(batch.num_layers):
        out[layer] = gaussian_score(gaussian_loglik(moments, layer, batch.features[layer]), tau)
    return out


@dataclass
class Mixture:
    """Diagonal Gaussian mixture: weights (k,), means (k, D), variances (k, D)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def loglik(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None, :]
        comp = np.log(self.weights) + diag_loglik(x, self.means, self.variances)
        return logsumexp(comp, axis=-1)

    @classmethod
    def from_moments(cls, moments: GaussianMoments, layer: int, modality: int) -> "Mixture":
        return cls(
            np.ones(1),
            moments.mean(layer)[modality][None, :],
            moments.var(layer)[modality][None, :],
        )


def gmm_score(text: Mixture | None, vision: Mixture | None, x, tau: float) -> np.ndarray:
    """Tempered softmax over per-modality mixture log-densities; returns (..., 2)."""
    if text is None or vision is None:
        raise NotReady("both modality mixtures must be fitted")
    LL = np.stack([text.loglik(x), vision.loglik(x)], axis=-1)
    return gaussian_score(LL, tau)


class OnlineGMM:
    """Mini-batch EM for one modality's diagonal mixture.

    Sufficient statistics (soft counts, first and second raw moments) decay by
    ``beta`` between batches.  The first batch seeds the components with
    k-means++ and a hard assignment.
    """

    def __init__(
        self,
        k: int,
        dim: int,
        beta: float = 0.99,
        eps_var: float = DEFAULT_EPS_VAR,
        weight_floor: float = 1e-3,
        seed: int = 0,
    ):
        if k < 1:
            raise InvalidInput("k must be >= 1")
        self.k = k
        self.dim = dim
        self.beta = beta
        self.eps_var = eps_var
        self.weight_floor = weight_floor
        self._rng = np.random.default_rng(seed)
        self.n = np.zeros(k)
        self.s1 = np.zeros((k, dim))
        self.s2 = np.zeros((k, dim))
        self.fitted = False

    def _seed_centers(self, X: np.ndarray) -> np.ndarray:
        rng = self._rng
        centers = [X[rng.integers(len(X))]]
        for _ in range(1, self.k):
            d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
            total = d2.sum()
            if total <= 0:
                centers.append(X[rng.integers(len(X))])
            else:
                centers.append(X[rng.choice(len(X), p=d2 / total)])
        return np.array(centers)

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        mix = self.mixture()
        comp = np.log(mix.weights) + diag_loglik(X[:, None, :], mix.means, mix.variances)
        return np.exp(comp - logsumexp(comp, axis=-1)[:, None])

    def partial_fit(self, X) -> None:
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        if len(X) == 0:
            self.n *= self.beta
            self.s1 *= self.beta
            self.s2 *= self.beta
            return
        if not self.fitted:
            centers = self._seed_centers(X)
            assign = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
            r = np.eye(self.k)[assign]
            self.fitted = True
        else:
            r = self.responsibilities(X)
        self.n = self.beta * self.n + r.sum(axis=0)
        self.s1 = self.beta * self.s1 + r.T @ X
        self.s2 = self.beta * self.s2 + r.T @ (X**2)

    def mixture(self) -> Mixture:
        if not self.fitted:
            raise NotReady("mixture has not seen any data")
        n = np.maximum(self.n, 1e-12)
        w = np.maximum(self.n / self.n.sum(), self.weight_floor)
        w = w / w.sum()
        mu = self.s1 / n[:, None]
        var = np.maximum(self.s2 / n[:, None] - mu**2, self.eps_var)
        return Mixture(w, mu, var)


def export_score_csv(field_: np.ndarray, path, sample_ids=None) -> None:
    """Write a (L, S, J, 2) score field as rows of layer,sample,token,M_text,M_vision."""
    L, S, J, _ = field_.shape
    sample_ids = np.arange(S) if sample_ids is None else sample_ids
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "sample", "token", "M_text", "M_vision"])
        for layer in range(L):
            for s in range(S):
                for j in range(J):
                    t, v = field_[layer, s, j]
                    w.writerow([layer, int(sample_ids[s]), j, repr(float(t)), repr(float(v))])
