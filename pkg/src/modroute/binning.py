"""Expert bins: fixed index-order groups or groups sorted by text bias."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import TEXT, VISION, InvalidConfig


@dataclass(frozen=True)
class BinLayout:
    """Per-layer expert orderings split into ``num_bins`` consecutive groups.

    ``perm[l]`` lists expert ids in bin order; bin b holds
    ``perm[l][b*N_B:(b+1)*N_B]``.
    """

    perm: np.ndarray
    num_bins: int
    generation: int = 0

    def __post_init__(self) -> None:
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.ndim == 1:
            perm = perm[None, :]
        object.__setattr__(self, "perm", perm)
        N_e = perm.shape[1]
        if N_e % self.num_bins:
            raise InvalidConfig(f"N_e={N_e} is not divisible by N_bins={self.num_bins}")
        for row in perm:
            if not np.array_equal(np.sort(row), np.arange(N_e)):
                raise InvalidConfig("bin permutation is not a bijection on expert ids")

    @property
    def num_layers(self) -> int:
        return self.perm.shape[0]

    @property
    def num_experts(self) -> int:
        return self.perm.shape[1]

    @property
    def bin_size(self) -> int:
        return self.num_experts // self.num_bins

    def bins(self, layer: int) -> list[np.ndarray]:
        return list(self.perm[layer].reshape(self.num_bins, self.bin_size))

    def expert_bin(self, layer: int) -> np.ndarray:
        """Bin index of every expert id."""
        out = np.empty(self.num_experts, dtype=np.int64)
        out[self.perm[layer]] = np.arange(self.num_experts) // self.bin_size
        return out

    def to_json(self) -> dict:
        return {
            "num_bins": self.num_bins,
            "generation": self.generation,
            "layers": [
                {
                    "layer": l,
                    "experts": self.perm[l].tolist(),
                    "boundaries": list(range(0, self.num_experts + 1, self.bin_size)),
                }
                for l in range(self.num_layers)
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, data: dict) -> "BinLayout":
        perm = [layer["experts"] for layer in sorted(data["layers"], key=lambda d: d["layer"])]
        return cls(np.array(perm), data["num_bins"], data.get("generation", 0))


def text_bias(C) -> np.ndarray:
    """Text fraction of each expert's load; experts with no load get 0.5.

    ``C`` has shape (..., 2, N_e) with modality on the second-to-last axis.
    """
    C = np.asarray(C, dtype=np.float64)
    text = C[..., TEXT, :]
    total = text + C[..., VISION, :]
    return np.where(total > 0, text / np.where(total > 0, total, 1.0), 0.5)


def _check_divisible(num_experts: int, num_bins: int) -> None:
    if num_bins < 1 or num_experts % num_bins:
        raise InvalidConfig(f"N_e={num_experts} is not divisible by N_bins={num_bins}")


def adaptive_binning(f_spec, num_bins: int, generation: int = 0) -> BinLayout:
    """Sort experts by ascending text bias (ties by id) and cut into equal bins.

    ``f_spec`` is (N_e,) or (L, N_e).  Bin 0 is the most vision-leaning.
    """
    f_spec = np.atleast_2d(np.asarray(f_spec, dtype=np.float64))
    _check_divisible(f_spec.shape[1], num_bins)
    perm = np.argsort(f_spec, axis=1, kind="stable")
    return BinLayout(perm, num_bins, generation)


def fixed_binning(num_experts: int, num_bins: int, num_layers: int = 1) -> BinLayout:
    _check_divisible(num_experts, num_bins)
    perm = np.tile(np.arange(num_experts), (num_layers, 1))
    return BinLayout(perm, num_bins)
