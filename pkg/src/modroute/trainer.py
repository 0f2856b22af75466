"""Synthetic multimodal token streams and a gradient-descent loop over router weights."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import mi as mi_mod
from .binning import BinLayout, adaptive_binning, fixed_binning, text_bias
from .ep_sim import DECODE, PREFILL, RoutingTrace
from .metrics import msi
from .numerics import TEXT, VISION, InvalidConfig, ModelConfig, TokenBatch, softmax
from .router import (
    ExpertLoadEMA,
    backprop_gate,
    bin_balance_loss_grad_g,
    gate_forward,
    modality_counts,
)
from .scores import GaussianMoments, Mixture, OnlineGMM, attention_score_field, gaussian_score_field, gmm_score, init_hard_scores

log = logging.getLogger(__name__)

ESTIMATORS = ("gaussian", "attention", "gmm", "hard")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, dump: dict):
        super().__init__(f"non-finite loss at step {step}: {dump}")
        self.step = step
        self.dump = dump


@dataclass
class SynthConfig:
    D: int = 32
    L: int = 4
    N_e: int = 16
    k: int = 2
    N_bins: int = 4
    samples: int = 32
    V: int = 24
    T: int = 8
    fusion: list[float] | None = None
    attention: str = "uniform"
    mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        ModelConfig(self.D, self.L, self.N_e, self.k, self.N_bins)
        if self.V < 0 or self.T < 0 or self.V + self.T < 1:
            raise InvalidConfig("need V, T >= 0 and V + T >= 1")
        if self.samples < 1:
            raise InvalidConfig("samples must be >= 1")
        if self.attention not in ("uniform", "similarity"):
            raise InvalidConfig(f"unknown attention kind {self.attention!r}")
        lam = self.fusion_schedule
        if len(lam) != self.L:
            raise InvalidConfig(f"fusion schedule has {len(lam)} entries, expected L={self.L}")
        if np.any(lam < 0) or np.any(lam > 1) or np.any(np.diff(lam) < 0):
            raise InvalidConfig("fusion schedule must be non-decreasing within [0, 1]")

    @property
    def fusion_schedule(self) -> np.ndarray:
        if self.fusion is None:
            return np.zeros(self.L)
        return np.asarray(self.fusion, dtype=np.float64)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.D, self.L, self.N_e, self.k, self.N_bins)


@dataclass
class TrainConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    steps: int = 500
    lr: float = 50.0
    momentum: float = 0.0
    alpha_bal: float = 5e-3
    alpha_mi: float = 1e-2
    beta: float = 0.99
    estimator: str = "gaussian"
    tau_scale: float = 0.5
    eps_var: float = 1e-6
    gmm_k: int = 1
    warmup: int = 10
    rebin_every: int = 10
    binning: str = "adaptive"
    bin_scope: str = "global"
    init_scale: float = 0.1
    eval_samples: int = 64
    proxy_task: bool = False
    task_weight: float = 1e-3
    task_lr: float = 0.5
    trace_samples: int = 8
    decode_steps: int = 4

    def __post_init__(self) -> None:
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if self.estimator not in ESTIMATORS:
            raise InvalidConfig(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.binning not in ("adaptive", "fixed"):
            raise InvalidConfig(f"unknown binning {self.binning!r}")
        if self.bin_scope not in ("bin", "global"):
            raise InvalidConfig(f"unknown bin_scope {self.bin_scope!r}")
        if not self.lr > 0 or not self.task_lr > 0:
            raise InvalidConfig("learning rates must be positive")
        if self.alpha_bal < 0 or self.alpha_mi < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        if not 0 < self.beta < 1:
            raise InvalidConfig("beta must lie in (0, 1)")
        if not self.tau_scale > 0:
            raise InvalidConfig("tau_scale must be positive")
        if self.steps < 0 or self.warmup < 0 or self.rebin_every < 1:
            raise InvalidConfig("steps, warmup must be >= 0 and rebin_every >= 1")

    @property
    def tau(self) -> float:
        return self.tau_scale * self.synth.D

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build from a nested dict, rejecting unknown keys with their path."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config key(s): {sorted(unknown)}")
        data = dict(data)
        if "synth" in data:
            synth = data["synth"]
            sknown = {f.name for f in fields(SynthConfig)}
            bad = set(synth) - sknown
            if bad:
                raise InvalidConfig(f"unknown config key(s): {sorted('synth.' + b for b in bad)}")
            data["synth"] = SynthConfig(**synth)
        return cls(**data)


PRESETS = {
    "desk": {},
    "paper-scale": {
        "synth": {"D": 64, "L": 4, "N_e": 64, "k": 8, "N_bins": 8, "samples": 16, "V": 32, "T": 8},
        "alpha_mi": 1e-2,
        "steps": 300,
    },
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig.from_dict(json.loads(json.dumps(PRESETS[name])))


class SyntheticData:
    """Per-layer Gaussian token features whose modalities merge as fusion grows.

    Layer ``l`` features are ``(1 - lam_l) * modality_draw + lam_l * shared_draw``.
    Distribution parameters are fixed by the seed; batches come from ``rng``.
    """

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        prng = np.random.default_rng([cfg.seed, 0])
        L, D = cfg.L, cfg.D
        self.means = prng.normal(0.0, cfg.mean_scale, size=(L, 2, D))
        self.vars = prng.uniform(0.5, 1.5, size=(L, 2, D))
        self.shared_mean = prng.normal(0.0, cfg.mean_scale, size=(L, D))
        self.lam = cfg.fusion_schedule

    def draw(self, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
        """Features of shape (L,) + labels.shape + (D,)."""
        L, D = self.cfg.L, self.cfg.D
        out = np.empty((L,) + labels.shape + (D,))
        for l in range(L):
            own = self.means[l][labels] + np.sqrt(self.vars[l][labels]) * rng.standard_normal(labels.shape + (D,))
            shared = self.shared_mean[l] + rng.standard_normal(labels.shape + (D,))
            out[l] = (1.0 - self.lam[l]) * own + self.lam[l] * shared
        return out

    def labels(self, samples: int) -> np.ndarray:
        row = np.r_[np.full(self.cfg.V, VISION), np.full(self.cfg.T, TEXT)]
        return np.tile(row, (samples, 1))

    def attention(self, feats: np.ndarray) -> np.ndarray:
        L, S, J, D = feats.shape
        if self.cfg.attention == "uniform":
            return np.full((L, S, J, J), 1.0 / J)
        sim = feats @ np.swapaxes(feats, -1, -2)
        return softmax(sim, temperature=math.sqrt(D), axis=-1)

    def batch(self, rng: np.random.Generator, samples: int | None = None) -> TokenBatch:
        labels = self.labels(samples or self.cfg.samples)
        feats = self.draw(rng, labels)
        return TokenBatch(feats, labels, self.attention(feats))


def gen_synthetic_batch(cfg: SynthConfig, rng: np.random.Generator, samples: int | None = None) -> TokenBatch:
    return SyntheticData(cfg).batch(rng, samples)


class ScoreEstimator:
    """Wraps the chosen soft-score estimator and its streaming state."""

    def __init__(self, cfg: TrainConfig):
        s = cfg.synth
        self.kind = cfg.estimator
        self.tau = cfg.tau
        self.moments = GaussianMoments(s.L, s.D, cfg.beta, cfg.eps_var)
        self.gmms = None
        if self.kind == "gmm":
            self.gmms = [
                [OnlineGMM(cfg.gmm_k, s.D, cfg.beta, cfg.eps_var, seed=s.seed * 1000 + 2 * l + m) for m in (TEXT, VISION)]
                for l in range(s.L)
            ]

    def observe(self, batch: TokenBatch) -> None:
        self.moments.update_batch(batch)
        if self.gmms is not None:
            labels = batch.flat_labels()
            for l in range(batch.num_layers):
                x = batch.layer_tokens(l)
                for m in (TEXT, VISION):
                    if np.any(labels == m):
                        self.gmms[l][m].partial_fit(x[labels == m])

    def field(self, batch: TokenBatch) -> np.ndarray:
        if self.kind == "hard":
            return np.broadcast_to(init_hard_scores(batch.labels), batch.features.shape[:3] + (2,)).copy()
        if self.kind == "attention":
            return attention_score_field(batch)
        if self.kind == "gaussian":
            return gaussian_score_field(self.moments, batch, self.tau)
        out = np.empty(batch.features.shape[:3] + (2,))
        for l in range(batch.num_layers):
            g = self.gmms[l]
            out[l] = gmm_score(g[TEXT].mixture(), g[VISION].mixture(), batch.features[l], self.tau)
        return out


@dataclass
class StepLosses:
    bal: float
    mi: float
    task: float
    mi_per_layer: np.ndarray

    @property
    def total_routing(self) -> float:
        return self.bal + self.mi


class Trainer:
    """Owns router weights, load EMA, bin layout and estimator state."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        s = cfg.synth
        self.data = SyntheticData(s)
        self.rng = np.random.default_rng([s.seed, 1])
        init_rng = np.random.default_rng([s.seed, 3])
        self.W = init_rng.normal(0.0, cfg.init_scale, size=(s.L, s.N_e, s.D))
        self.velocity = np.zeros_like(self.W)
        self.experts = None
        self.targets = None
        if cfg.proxy_task:
            self.experts = init_rng.normal(0.0, 1.0 / math.sqrt(s.D), size=(s.L, s.N_e, s.D, s.D))
            self.targets = init_rng.normal(0.0, 1.0 / math.sqrt(s.D), size=(s.L, 2, s.D, s.D))
        self.ema = ExpertLoadEMA(s.L, s.N_e, cfg.beta)
        self.layout = fixed_binning(s.N_e, s.N_bins, s.L)
        self.estimator = ScoreEstimator(cfg)
        self.step_count = 0
        self.warmed = False

    def warm_up(self) -> None:
        if self.warmed:
            return
        if self.cfg.estimator in ("gaussian", "gmm"):
            for _ in range(max(self.cfg.warmup, 1)):
                self.estimator.observe(self.data.batch(self.rng))
        self.warmed = True

    def rebin(self) -> None:
        if self.cfg.binning == "adaptive":
            self.layout = adaptive_binning(text_bias(self.ema.C), self.cfg.synth.N_bins, self.layout.generation + 1)

    def losses_and_grads(self, batch: TokenBatch, scores: np.ndarray, W: np.ndarray | None = None,
                         topk: list | None = None) -> tuple[StepLosses, np.ndarray, list]:
        """Weighted routing (and optional proxy task) losses with their W gradient."""
        cfg = self.cfg
        s = cfg.synth
        W = self.W if W is None else W
        S, J = batch.num_samples, batch.seq_len
        grad = np.zeros_like(W)
        bal = mi_total = task = 0.0
        mi_layers = np.zeros(s.L)
        gates = []
        for l in range(s.L):
            x = batch.layer_tokens(l)
            gate = gate_forward(W[l], x, s.k, topk=None if topk is None else topk[l])
            gates.append(gate)
            expert_bin = self.layout.expert_bin(l)
            lb, dg_b = bin_balance_loss_grad_g(gate, expert_bin, s.N_bins, cfg.bin_scope)
            lm, dg_m = mi_mod.mi_layer_loss_grad(gate.g.reshape(S, J, -1), scores[l], expert_bin, s.N_bins)
            bal += lb
            mi_total += lm
            mi_layers[l] = -lm
            dg = cfg.alpha_bal * dg_b + cfg.alpha_mi * dg_m.reshape(gate.g.shape)
            if cfg.proxy_task:
                lt, dg_t = self._task_loss_grad(l, gate, x, batch.flat_labels(), update_experts=False)
                task += lt
                dg = dg + cfg.task_weight * dg_t
            if np.any(dg):
                grad[l] = backprop_gate(gate, dg, x)
        return StepLosses(bal, mi_total, task, mi_layers), grad, gates

    def _task_loss_grad(self, l: int, gate, x, labels, update_experts: bool):
        """Mixture-of-linear-experts regression onto modality-specific linear targets."""
        T = x.shape[0]
        y = np.einsum("tij,tj->ti", self.targets[l][labels], x)
        outs = np.einsum("eij,tj->tei", self.experts[l], x)  # (T, N_e, D)
        mask = np.zeros_like(gate.g)
        np.put_along_axis(mask, gate.topk, 1.0, axis=1)
        w = gate.g * mask
        pred = np.einsum("te,tei->ti", w, outs)
        resid = pred - y
        loss = 0.5 * float((resid**2).sum()) / T
        dg = mask * np.einsum("ti,tei->te", resid, outs) / T
        if update_experts:
            dE = np.einsum("te,ti,tj->eij", w, resid, x) / T
            # normalized step: stable for task_lr < 2 whatever the feature scale
            self.experts[l] -= self.cfg.task_lr * dE / float(np.mean(np.sum(x * x, axis=1)))
        return loss, dg

    def train_step(self) -> StepLosses:
        cfg = self.cfg
        self.warm_up()
        batch = self.data.batch(self.rng)
        self.estimator.observe(batch)
        scores = self.estimator.field(batch)
        losses, grad, gates = self.losses_and_grads(batch, scores)
        dump = {"L_bal": losses.bal, "L_MI": losses.mi, "L_task": losses.task}
        if not all(math.isfinite(v) for v in dump.values()) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(self.step_count, dump)
        labels = batch.flat_labels()
        for l, gate in enumerate(gates):
            self.ema.update(l, gate.topk, labels)
            if cfg.proxy_task:
                self._task_loss_grad(l, gate, batch.layer_tokens(l), labels, update_experts=True)
        if cfg.momentum:
            self.velocity = cfg.momentum * self.velocity + grad
            self.W = self.W - cfg.lr * self.velocity
        else:
            self.W = self.W - cfg.lr * grad
        self.step_count += 1
        if self.step_count % cfg.rebin_every == 0:
            self.rebin()
        return losses

    def routed_counts(self, batch: TokenBatch) -> np.ndarray:
        s = self.cfg.synth
        C = np.zeros((s.L, 2, s.N_e))
        for l in range(s.L):
            gate = gate_forward(self.W[l], batch.layer_tokens(l), s.k)
            C[l] = modality_counts(gate.topk, batch.flat_labels(), s.N_e)
        return C

    def bin_shares(self, counts: np.ndarray) -> np.ndarray:
        """(L, N_bins) share of routed slots landing in each bin."""
        s = self.cfg.synth
        per_expert = counts.sum(axis=1)
        out = np.zeros((s.L, s.N_bins))
        for l in range(s.L):
            np.add.at(out[l], self.layout.expert_bin(l), per_expert[l])
            out[l] /= out[l].sum()
        return out

    def export_router_trace(self, rng: np.random.Generator, num_samples: int, decode_steps: int,
                            with_scores: bool = True) -> RoutingTrace:
        return router_trace(self.W, self.data, rng, num_samples, decode_steps, with_scores)


def router_trace(W: np.ndarray, data: SyntheticData, rng: np.random.Generator, num_samples: int,
                 decode_steps: int = 0, with_scores: bool = True) -> RoutingTrace:
    """Route a fresh synthetic batch (plus text decode tokens) through ``W``."""
    s = data.cfg
    labels = data.labels(num_samples)
    if decode_steps:
        labels = np.concatenate([labels, np.full((num_samples, decode_steps), TEXT)], axis=1)
    feats = data.draw(rng, labels)
    J = labels.shape[1]
    J_prefill = s.V + s.T
    sid = np.repeat(np.arange(num_samples), J)
    tok = np.tile(np.arange(J), num_samples)
    phase = np.where(tok < J_prefill, PREFILL, DECODE)
    mod = labels.reshape(-1)
    layers, topks, scores = [], [], []
    for l in range(s.L):
        gate = gate_forward(W[l], feats[l].reshape(-1, s.D), s.k)
        layers.append(np.full(len(sid), l))
        topks.append(gate.topk)
        scores.append(np.take_along_axis(gate.g, gate.topk, axis=1))
    n_layers = s.L
    return RoutingTrace(
        s.N_e, s.k, s.L, s.D,
        np.tile(sid, n_layers), np.tile(phase, n_layers), np.concatenate(layers),
        np.tile(tok, n_layers), np.tile(mod, n_layers), np.concatenate(topks),
        np.concatenate(scores) if with_scores else None,
    )


@dataclass
class TrainLog:
    rows: list[dict]
    W: np.ndarray
    layout: BinLayout
    f_spec: np.ndarray
    final_msi: float
    final_bin_shares: np.ndarray
    config: dict
    trace: RoutingTrace | None = None

    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else []

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns())
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "final_msi": self.final_msi,
            "final_bin_shares": self.final_bin_shares.tolist(),
            "f_spec": self.f_spec.tolist(),
            "layout": self.layout.to_json(),
            "rows": self.rows,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def run_training(cfg: TrainConfig, export_trace: bool = True, log_every: int = 1) -> TrainLog:
    """Train the router stack and evaluate MSI on a held-out batch every ``log_every`` steps."""
    s = cfg.synth
    log.info("training seed=%d steps=%d alpha_bal=%g alpha_mi=%g estimator=%s",
             s.seed, cfg.steps, cfg.alpha_bal, cfg.alpha_mi, cfg.estimator)
    tr = Trainer(cfg)
    tr.warm_up()
    eval_batch = tr.data.batch(np.random.default_rng([s.seed, 2]), cfg.eval_samples)
    rows: list[dict] = []

    def evaluate(step: int, losses: StepLosses | None) -> dict:
        counts = tr.routed_counts(eval_batch)
        row = {"step": step}
        if losses is not None:
            row.update({"loss_bal": losses.bal, "loss_mi": losses.mi, "loss_task": losses.task})
            for l, v in enumerate(losses.mi_per_layer):
                row[f"mi_layer{l}"] = float(v)
        row["msi"] = msi(counts).overall
        row["layout_generation"] = tr.layout.generation
        return row

    for step in range(1, cfg.steps + 1):
        losses = tr.train_step()
        if step % log_every == 0 or step == cfg.steps:
            row = evaluate(step, losses)
            for v in row.values():
                if isinstance(v, float) and not math.isfinite(v):
                    raise TrainingDiverged(step, row)
            rows.append(row)
    counts = tr.routed_counts(eval_batch)
    final = msi(counts).overall
    trace = None
    if export_trace:
        trace = tr.export_router_trace(np.random.default_rng([s.seed, 4]), cfg.trace_samples, cfg.decode_steps)
    return TrainLog(rows, tr.W, tr.layout, text_bias(tr.ema.C), final, tr.bin_shares(counts), cfg.to_dict(), trace)
