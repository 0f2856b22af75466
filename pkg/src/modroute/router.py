"""Gating, top-k selection, load tracking and balance losses with hand-written gradients.

All per-layer functions take flattened tokens: ``x`` is (T, D), ``W`` is
(N_e, D) and gate scores are (T, N_e).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import TEXT, VISION, InvalidConfig, InvalidInput, sigmoid, softmax


class UnsupportedCombination(ValueError):
    pass


@dataclass
class GateOutput:
    logits: np.ndarray
    g: np.ndarray
    topk: np.ndarray
    kind: str = "softmax"

    @property
    def num_experts(self) -> int:
        return self.g.shape[-1]

    @property
    def k(self) -> int:
        return self.topk.shape[-1]


@dataclass
class BalanceStats:
    f: np.ndarray
    P: np.ndarray


def topk_select(g: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; ties go to the lower expert id."""
    return np.argsort(-g, axis=-1, kind="stable")[..., :k]


def gate_forward(W, x, k: int, kind: str = "softmax", topk: np.ndarray | None = None) -> GateOutput:
    """Gate scores for tokens ``x``.  A precomputed ``topk`` freezes the selection."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise InvalidInput(f"feature dim {x.shape[-1]} does not match router dim {W.shape[1]}")
    if not 1 <= k <= W.shape[0]:
        raise InvalidConfig(f"k={k} outside [1, {W.shape[0]}]")
    logits = x @ W.T
    if kind == "softmax":
        g = softmax(logits, axis=-1)
    elif kind == "sigmoid":
        g = sigmoid(logits)
    else:
        raise InvalidConfig(f"unknown router kind {kind!r}")
    if topk is None:
        topk = topk_select(g, k)
    return GateOutput(logits, g, topk, kind)


def apply_modality_mask(logits, labels, partition: dict[int, set[int] | list[int]], k: int) -> GateOutput:
    """Hard-routing baseline: each token may only use its modality's expert set.

    ``partition`` maps TEXT / VISION to allowed expert ids; shared experts may
    appear in both sets.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    T, N_e = logits.shape
    covered = set()
    allow = np.zeros((2, N_e), dtype=bool)
    for m in (TEXT, VISION):
        ids = list(partition[m])
        if len(ids) < k:
            raise InvalidConfig(f"modality {m} allows {len(ids)} experts, fewer than k={k}")
        allow[m, ids] = True
        covered.update(ids)
    if covered != set(range(N_e)):
        raise InvalidConfig("partition does not cover every expert")
    mask = allow[labels]
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    g = e / e.sum(axis=-1, keepdims=True)
    # masked entries are exactly zero, so they sort after every allowed expert
    topk = topk_select(np.where(mask, g, -1.0), k)
    return GateOutput(np.where(mask, logits, -np.inf), g, topk, "softmax")


def routed_counts(topk: np.ndarray, num_experts: int) -> np.ndarray:
    return np.bincount(topk.reshape(-1), minlength=num_experts).astype(np.float64)


def modality_counts(topk: np.ndarray, labels, num_experts: int) -> np.ndarray:
    """C[m, e]: number of modality-m tokens whose top-k contains expert e."""
    labels = np.asarray(labels).reshape(-1)
    C = np.zeros((2, num_experts))
    rows = np.repeat(labels, topk.shape[-1])
    np.add.at(C, (rows, topk.reshape(-1)), 1.0)
    return C


def balance_stats(gate: GateOutput) -> BalanceStats:
    T = gate.g.shape[0]
    f = routed_counts(gate.topk, gate.num_experts) / T
    P = gate.g.mean(axis=0)
    return BalanceStats(f, P)


def balance_loss(gate: GateOutput) -> tuple[float, BalanceStats]:
    """Global auxiliary loss N_e * sum_e f_e P_e for one layer."""
    stats = balance_stats(gate)
    return float(gate.num_experts * stats.f @ stats.P), stats


def balance_loss_grad_g(gate: GateOutput) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. g, with the routed fractions held fixed."""
    loss, stats = balance_loss(gate)
    T = gate.g.shape[0]
    dg = np.broadcast_to(gate.num_experts * stats.f / T, gate.g.shape).copy()
    return loss, dg


def bin_token_mask(topk: np.ndarray, expert_bin: np.ndarray, num_bins: int) -> np.ndarray:
    """(num_bins, T) mask of tokens with at least one top-k expert in each bin."""
    hit = np.zeros((num_bins, topk.shape[0]), dtype=bool)
    bins_of_choice = expert_bin[topk]
    for b in range(num_bins):
        hit[b] = np.any(bins_of_choice == b, axis=-1)
    return hit


def bin_balance_loss_grad_g(
    gate: GateOutput, expert_bin: np.ndarray, num_bins: int, scope: str = "bin"
) -> tuple[float, np.ndarray]:
    """Bin-level balance loss for one layer and its gradient w.r.t. g.

    With ``scope="bin"`` the fractions and mean scores of bin k are taken over
    the tokens that routed at least one slot into bin k; ``scope="global"``
    uses every token.  An empty bin contributes nothing.
    """
    g, topk = gate.g, gate.topk
    T, N_e = g.shape
    N_B = N_e // num_bins
    expert_bin = np.asarray(expert_bin)
    if scope == "bin":
        token_mask = bin_token_mask(topk, expert_bin, num_bins)
    elif scope == "global":
        token_mask = np.ones((num_bins, T), dtype=bool)
    else:
        raise InvalidConfig(f"unknown bin balance scope {scope!r}")
    loss = 0.0
    dg = np.zeros_like(g)
    for b in range(num_bins):
        rows = token_mask[b]
        n = int(rows.sum())
        if n == 0:
            continue
        experts = np.flatnonzero(expert_bin == b)
        f = routed_counts(topk[rows], N_e)[experts] / n
        P = g[rows][:, experts].mean(axis=0)
        loss += N_B * float(f @ P)
        dg[np.ix_(rows, experts)] += N_B * f / n
    return loss, dg


def bin_balance_loss(gate: GateOutput, expert_bin, num_bins: int, scope: str = "bin") -> float:
    return bin_balance_loss_grad_g(gate, expert_bin, num_bins, scope)[0]


def backprop_gate(gate: GateOutput, dg: np.ndarray, x) -> np.ndarray:
    """Chain a gradient w.r.t. gate scores back to the (N_e, D) gate weights."""
    g = gate.g
    if gate.kind == "softmax":
        dz = g * (dg - (g * dg).sum(axis=-1, keepdims=True))
    else:
        dz = dg * g * (1.0 - g)
    return dz.T @ np.asarray(x, dtype=np.float64)


def loss_grad_router(
    loss: str,
    W,
    x,
    k: int,
    kind: str = "softmax",
    *,
    topk: np.ndarray | None = None,
    expert_bin=None,
    num_bins: int = 1,
    scores=None,
    seq_shape: tuple[int, int] | None = None,
    scope: str = "bin",
    experimental_sigmoid_mi: bool = False,
) -> tuple[float, np.ndarray]:
    """Value and analytic gradient of one layer's loss w.r.t. ``W``.

    ``loss`` is "balance", "bin_balance" or "mi".  The MI loss needs soft
    ``scores`` of shape (T, 2), bin assignments, and ``seq_shape`` = (S, J)
    telling how the T tokens split into samples.
    """
    gate = gate_forward(W, x, k, kind, topk=topk)
    if loss == "balance":
        value, dg = balance_loss_grad_g(gate)
    elif loss == "bin_balance":
        value, dg = bin_balance_loss_grad_g(gate, expert_bin, num_bins, scope)
    elif loss == "mi":
        if kind == "sigmoid" and not experimental_sigmoid_mi:
            raise UnsupportedCombination("MI loss on a sigmoid router needs experimental_sigmoid_mi=True")
        from .mi import mi_layer_loss_grad

        S, J = seq_shape
        value, dg = mi_layer_loss_grad(
            gate.g.reshape(S, J, -1), np.asarray(scores).reshape(S, J, 2), expert_bin, num_bins
        )
        dg = dg.reshape(gate.g.shape)
    else:
        raise InvalidConfig(f"unknown loss {loss!r}")
    return value, backprop_gate(gate, dg, x)


class ExpertLoadEMA:
    """EMA of per-(modality, expert) routed counts for every layer; C has shape (L, 2, N_e)."""

    def __init__(self, num_layers: int, num_experts: int, beta: float = 0.99):
        if not 0 < beta < 1:
            raise InvalidInput(f"beta must lie in (0, 1), got {beta}")
        self.beta = beta
        self.C = np.zeros((num_layers, 2, num_experts))

    def update(self, layer: int, topk: np.ndarray, labels) -> None:
        counts = modality_counts(topk, labels, self.C.shape[-1])
        self.C[layer] = self.beta * self.C[layer] + (1.0 - self.beta) * counts
