"""Numeric kernels, containers and the finite-difference oracle shared by all modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

TEXT = 0
VISION = 1
MODALITIES = ("text", "vision")


class InvalidInput(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


class NotReady(RuntimeError):
    pass


class OracleFailure(ArithmeticError):
    def __init__(self, coord: int, value: float):
        super().__init__(f"non-finite function value {value!r} at coordinate {coord}")
        self.coord = coord


@dataclass(frozen=True)
class ModelConfig:
    D: int
    L: int
    N_e: int
    k: int
    N_bins: int
    router_kind: str = "softmax"

    def __post_init__(self) -> None:
        if min(self.D, self.L, self.N_e, self.N_bins) < 1:
            raise InvalidConfig("D, L, N_e and N_bins must be positive")
        if self.N_e % self.N_bins:
            raise InvalidConfig(f"N_e={self.N_e} is not divisible by N_bins={self.N_bins}")
        if not 1 <= self.k <= self.N_e:
            raise InvalidConfig(f"k={self.k} outside [1, N_e={self.N_e}]")
        if self.router_kind not in ("softmax", "sigmoid"):
            raise InvalidConfig(f"unknown router_kind {self.router_kind!r}")

    @property
    def N_B(self) -> int:
        return self.N_e // self.N_bins


@dataclass
class TokenBatch:
    """A batch of equal-length token sequences with per-layer features.

    ``features`` has shape (L, S, J, D); ``labels`` has shape (S, J) holding
    TEXT or VISION.  ``attn`` (optional) holds head-averaged attention, shape
    (L, S, J, J).  ``sample_ids`` defaults to 0..S-1; token index is the
    position along J.
    """

    features: np.ndarray
    labels: np.ndarray
    attn: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise InvalidInput("features must have shape (L, S, J, D)")
        if self.labels.shape != self.features.shape[1:3]:
            raise InvalidInput(
                f"labels shape {self.labels.shape} does not match features {self.features.shape[1:3]}"
            )
        if not np.all(np.isin(self.labels, (TEXT, VISION))):
            raise InvalidInput("labels must be TEXT (0) or VISION (1)")
        if self.attn is not None:
            self.attn = np.asarray(self.attn, dtype=np.float64)
            L, S, J, _ = self.features.shape
            if self.attn.shape != (L, S, J, J):
                raise InvalidInput(f"attn shape {self.attn.shape} != {(L, S, J, J)}")
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.num_samples)

    @property
    def num_layers(self) -> int:
        return self.features.shape[0]

    @property
    def num_samples(self) -> int:
        return self.features.shape[1]

    @property
    def seq_len(self) -> int:
        return self.features.shape[2]

    @property
    def dim(self) -> int:
        return self.features.shape[3]

    def layer_tokens(self, layer: int) -> np.ndarray:
        """Features of one layer flattened to (S*J, D)."""
        return self.features[layer].reshape(-1, self.dim)

    def flat_labels(self) -> np.ndarray:
        return self.labels.reshape(-1)


def _check_finite(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise InvalidInput("input contains non-finite values")


def softmax(v, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature-scaled softmax along ``axis`` with max-subtraction."""
    if not temperature > 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    z = np.asarray(v, dtype=np.float64) / temperature
    _check_finite(z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(v, axis: int | None = None) -> np.ndarray | float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidInput("logsumexp of an empty vector")
    if axis is None:
        m = v.max()
        if not np.isfinite(m):
            return float(m)
        return float(m + np.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.exp(v - m).sum(axis=axis))


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise InvalidInput("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(i, fp if not np.isfinite(fp) else fm)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def sample_gaussian(rng: np.random.Generator, mean, var, n: int) -> np.ndarray:
    """Draw ``n`` rows from a diagonal Gaussian."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_1d(np.asarray(var, dtype=np.float64))
    if np.any(var <= 0):
        raise InvalidInput("variance must be positive")
    if n == 0:
        return np.empty((0, mean.size))
    return mean + np.sqrt(var) * rng.standard_normal((n, mean.size))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
