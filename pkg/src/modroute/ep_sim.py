"""Expert-parallel deployment simulator.

Replays routing traces against a bin-to-device placement, counts cross-device
dispatches with and without de-duplication, and turns the counts into
prefill/decode latency under synchronous or overlapped communication.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .binning import BinLayout
from .numerics import TEXT, VISION, InvalidConfig

PREFILL, DECODE = 0, 1
PHASES = ("prefill", "decode")
MODALITY_NAMES = {TEXT: "text", VISION: "vision"}
HOME_POLICIES = ("device0", "sample_shard")


class CorruptTrace(ValueError):
    pass


class TraceParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class RoutingTrace:
    """Columnar routing records, one row per (token, layer)."""

    N_e: int
    k: int
    L: int
    D: int
    sample_id: np.ndarray
    phase: np.ndarray
    layer: np.ndarray
    token_index: np.ndarray
    modality: np.ndarray
    topk: np.ndarray
    gate_scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("sample_id", "phase", "layer", "token_index", "modality"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        self.topk = np.asarray(self.topk, dtype=np.int64).reshape(-1, self.k)
        if self.gate_scores is not None:
            self.gate_scores = np.asarray(self.gate_scores, dtype=np.float64).reshape(-1, self.k)

    def __len__(self) -> int:
        return len(self.sample_id)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if self.topk.min() < 0 or self.topk.max() >= self.N_e:
            raise CorruptTrace(f"expert id outside [0, {self.N_e})")
        if self.layer.min() < 0 or self.layer.max() >= self.L:
            raise CorruptTrace(f"layer outside [0, {self.L})")
        srt = np.sort(self.topk, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise CorruptTrace("repeated expert id within a record's top-k")

    def equals(self, other: "RoutingTrace") -> bool:
        if (self.N_e, self.k, self.L, self.D) != (other.N_e, other.k, other.L, other.D):
            return False
        for name in ("sample_id", "phase", "layer", "token_index", "modality", "topk"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        if (self.gate_scores is None) != (other.gate_scores is None):
            return False
        return self.gate_scores is None or np.array_equal(self.gate_scores, other.gate_scores)

    def select(self, mask) -> "RoutingTrace":
        return RoutingTrace(
            self.N_e, self.k, self.L, self.D,
            self.sample_id[mask], self.phase[mask], self.layer[mask],
            self.token_index[mask], self.modality[mask], self.topk[mask],
            None if self.gate_scores is None else self.gate_scores[mask],
        )

    @classmethod
    def empty(cls, N_e: int, k: int, L: int, D: int) -> "RoutingTrace":
        z = np.zeros(0, dtype=np.int64)
        return cls(N_e, k, L, D, z, z, z, z, z, np.zeros((0, k), dtype=np.int64))

    @classmethod
    def concat(cls, traces: list["RoutingTrace"]) -> "RoutingTrace":
        first = traces[0]
        scores = [t.gate_scores for t in traces]
        return cls(
            first.N_e, first.k, first.L, first.D,
            *(np.concatenate([getattr(t, n) for t in traces])
              for n in ("sample_id", "phase", "layer", "token_index", "modality", "topk")),
            None if any(s is None for s in scores) else np.concatenate(scores),
        )


def export_trace(trace: RoutingTrace, path) -> None:
    """Write a trace as JSONL: a header line, then one record per line."""
    with Path(path).open("w") as fh:
        fh.write(_dump({"N_e": trace.N_e, "k": trace.k, "L": trace.L, "D": trace.D}) + "\n")
        for r in range(len(trace)):
            rec = {
                "sample_id": int(trace.sample_id[r]),
                "phase": PHASES[trace.phase[r]],
                "layer": int(trace.layer[r]),
                "token_index": int(trace.token_index[r]),
                "modality": MODALITY_NAMES[int(trace.modality[r])],
                "topk": trace.topk[r].tolist(),
            }
            if trace.gate_scores is not None:
                rec["gate_scores"] = trace.gate_scores[r].tolist()
            fh.write(_dump(rec) + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


_HEADER_KEYS = {"N_e", "k", "L", "D"}
_RECORD_KEYS = {"sample_id", "phase", "layer", "token_index", "modality", "topk"}


def import_trace(path) -> RoutingTrace:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise TraceParseError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceParseError(1, f"invalid JSON: {exc.msg}") from None
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise TraceParseError(1, f"header must have exactly the keys {sorted(_HEADER_KEYS)}")
    k = header["k"]
    cols: dict[str, list] = {name: [] for name in _RECORD_KEYS}
    scores: list = []
    phase_ids = {p: i for i, p in enumerate(PHASES)}
    modality_ids = {v: m for m, v in MODALITY_NAMES.items()}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise TraceParseError(lineno, "record is not an object")
        missing = _RECORD_KEYS - set(rec)
        if missing:
            raise TraceParseError(lineno, f"missing field(s) {sorted(missing)}")
        extra = set(rec) - _RECORD_KEYS - {"gate_scores"}
        if extra:
            raise TraceParseError(lineno, f"unknown field(s) {sorted(extra)}")
        if rec["phase"] not in phase_ids or rec["modality"] not in modality_ids:
            raise TraceParseError(lineno, "bad phase or modality value")
        if not isinstance(rec["topk"], list) or len(rec["topk"]) != k:
            raise TraceParseError(lineno, f"topk must be a list of {k} expert ids")
        for name in ("sample_id", "layer", "token_index"):
            cols[name].append(rec[name])
        cols["phase"].append(phase_ids[rec["phase"]])
        cols["modality"].append(modality_ids[rec["modality"]])
        cols["topk"].append(rec["topk"])
        scores.append(rec.get("gate_scores"))
    has_scores = bool(scores) and all(s is not None for s in scores)
    if not scores:
        return RoutingTrace.empty(header["N_e"], k, header["L"], header["D"])
    return RoutingTrace(
        header["N_e"], k, header["L"], header["D"],
        cols["sample_id"], cols["phase"], cols["layer"], cols["token_index"],
        cols["modality"], cols["topk"], scores if has_scores else None,
    )


@dataclass
class DeviceTopology:
    num_devices: int = 2
    bandwidth: float = 1.25e9  # bytes/s, 10 Gb Ethernet
    msg_latency: float = 5e-5
    payload_bytes: float = 64.0
    compute_per_token_expert: float = 1e-6
    expert_overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.num_devices < 1:
            raise InvalidConfig("num_devices must be >= 1")
        for f in fields(self):
            if f.name in ("num_devices", "expert_overhead"):
                continue
            if not getattr(self, f.name) > 0:
                raise InvalidConfig(f"topology field {f.name!r} must be positive")
        if self.expert_overhead < 0:
            raise InvalidConfig("topology field 'expert_overhead' must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceTopology":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown topology field(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "DeviceTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def calibrated_toy(cls) -> "DeviceTopology":
        """Two edge GPUs on 10 GbE moving 2048-dim bf16 activations.

        Expert compute pays a per-activation weight-load overhead, so compute
        grows sublinearly with batch size while traffic grows linearly.
        """
        return cls(
            num_devices=2,
            bandwidth=1.25e9,
            msg_latency=5e-5,
            payload_bytes=4096.0,
            compute_per_token_expert=2e-6,
            expert_overhead=2e-4,
        )


@dataclass
class PlacementPlan:
    bin_device: np.ndarray  # (L, N_bins)
    expert_device: np.ndarray  # (L, N_e)
    num_devices: int

    def to_json(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "bin_device": self.bin_device.tolist(),
            "expert_device": self.expert_device.tolist(),
        }


def place_bins(layout: BinLayout, num_devices: int, policy: str = "block") -> PlacementPlan:
    """Map bins to devices; ``block`` keeps neighbouring bins together."""
    nb = layout.num_bins
    if policy == "block":
        if nb % num_devices:
            raise InvalidConfig(f"block placement needs N_bins={nb} divisible by {num_devices} devices")
        per_dev = nb // num_devices
        bin_dev = np.arange(nb) // per_dev
    elif policy == "round_robin":
        bin_dev = np.arange(nb) % num_devices
    else:
        raise InvalidConfig(f"unknown placement policy {policy!r}")
    bin_device = np.tile(bin_dev, (layout.num_layers, 1))
    expert_device = np.stack([bin_dev[layout.expert_bin(l)] for l in range(layout.num_layers)])
    return PlacementPlan(bin_device, expert_device, num_devices)


@dataclass
class PhaseModalityCounts:
    tokens: int = 0
    raw_dispatches: int = 0
    remote_dispatches: int = 0
    dedup_pairs: int = 0

    @property
    def ratio_no_dedup(self) -> float:
        return self.remote_dispatches / self.raw_dispatches if self.raw_dispatches else 0.0

    @property
    def ratio_dedup(self) -> float:
        return self.dedup_pairs / self.tokens if self.tokens else 0.0

    def __add__(self, other: "PhaseModalityCounts") -> "PhaseModalityCounts":
        return PhaseModalityCounts(
            self.tokens + other.tokens,
            self.raw_dispatches + other.raw_dispatches,
            self.remote_dispatches + other.remote_dispatches,
            self.dedup_pairs + other.dedup_pairs,
        )


@dataclass
class TransferStats:
    """Dispatch counts by (phase, modality) plus per-step device loads.

    Each "group" is one forward step of one layer: all prefill tokens of a
    layer, or one decode step of a layer.  ``group_phase`` / ``group_step``
    identify groups; ``assignments`` and ``active_experts`` are
    (groups, devices); ``group_dedup_pairs`` and ``group_messages`` are (groups,).
    """

    num_devices: int
    counts: dict[tuple[int, int], PhaseModalityCounts]
    group_phase: np.ndarray
    group_step: np.ndarray
    assignments: np.ndarray
    active_experts: np.ndarray
    group_dedup_pairs: np.ndarray
    group_messages: np.ndarray

    def cell(self, phase: int, modality: int | None = None) -> PhaseModalityCounts:
        if modality is not None:
            return self.counts.get((phase, modality), PhaseModalityCounts())
        return self.cell(phase, VISION) + self.cell(phase, TEXT)

    def rows(self) -> list[dict]:
        out = []
        for p, pname in enumerate(PHASES):
            for label, m in (("V", VISION), ("T", TEXT), ("V+T", None)):
                c = self.cell(p, m)
                out.append({
                    "phase": pname,
                    "modality": label,
                    "tokens": c.tokens,
                    "raw_dispatches": c.raw_dispatches,
                    "remote_dispatches": c.remote_dispatches,
                    "dedup_pairs": c.dedup_pairs,
                    "ratio_no_dedup": c.ratio_no_dedup,
                    "ratio_dedup": c.ratio_dedup,
                })
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def token_home(sample_id: np.ndarray, num_devices: int, policy: str = "device0") -> np.ndarray:
    if policy == "device0":
        return np.zeros_like(sample_id)
    if policy == "sample_shard":
        return sample_id % num_devices
    raise InvalidConfig(f"unknown token home policy {policy!r}; expected one of {HOME_POLICIES}")


def replay_trace(trace: RoutingTrace, plan: PlacementPlan, home: str = "device0") -> TransferStats:
    if plan.expert_device.shape[1] != trace.N_e:
        raise InvalidConfig(
            f"trace has N_e={trace.N_e} but placement covers {plan.expert_device.shape[1]} experts"
        )
    trace.validate()
    nd = plan.num_devices
    n = len(trace)
    src = token_home(trace.sample_id, nd, home)
    dev = plan.expert_device[trace.layer[:, None], trace.topk]  # (n, k)
    remote = dev != src[:, None]
    per_dev_remote = np.stack([np.any(remote & (dev == d), axis=1) for d in range(nd)], axis=1)
    pairs = per_dev_remote.sum(axis=1)
    n_remote = remote.sum(axis=1)

    counts: dict[tuple[int, int], PhaseModalityCounts] = {}
    for p in (PREFILL, DECODE):
        for m in (TEXT, VISION):
            sel = (trace.phase == p) & (trace.modality == m)
            if not sel.any():
                continue
            counts[(p, m)] = PhaseModalityCounts(
                int(sel.sum()), int(sel.sum()) * trace.k, int(n_remote[sel].sum()), int(pairs[sel].sum())
            )

    step = np.where(trace.phase == DECODE, trace.token_index, 0)
    keys = np.stack([trace.phase, step, trace.layer], axis=1)
    if n:
        ukeys, gid = np.unique(keys, axis=0, return_inverse=True)
        gid = gid.reshape(-1)
    else:
        ukeys, gid = np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    G = len(ukeys)
    assignments = np.zeros((G, nd), dtype=np.int64)
    np.add.at(assignments, (np.repeat(gid, trace.k), dev.reshape(-1)), 1)
    active = np.zeros((G, nd), dtype=np.int64)
    if n:
        ge = np.unique(np.stack([np.repeat(gid, trace.k), trace.topk.reshape(-1)], axis=1), axis=0)
        ge_dev = plan.expert_device[ukeys[ge[:, 0], 2], ge[:, 1]]
        np.add.at(active, (ge[:, 0], ge_dev), 1)
    group_pairs = np.bincount(gid, weights=pairs, minlength=G).astype(np.int64)
    messages = np.zeros(G, dtype=np.int64)
    for d in range(nd):
        hit = per_dev_remote[:, d]
        if hit.any():
            links = np.unique(np.stack([gid[hit], src[hit]], axis=1), axis=0)
            np.add.at(messages, links[:, 0], 1)
    return TransferStats(nd, counts, ukeys[:, 0], ukeys[:, 1], assignments, active, group_pairs, messages)


@dataclass
class LatencyReport:
    mode: str
    ttft: float
    tpot: float
    prefill_compute: np.ndarray = field(repr=False)
    prefill_comm: float = 0.0
    decode_steps: int = 0

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "ttft_s": self.ttft,
            "tpot_s": self.tpot,
            "prefill_compute_per_device_s": self.prefill_compute.tolist(),
            "prefill_comm_s": self.prefill_comm,
            "decode_steps": self.decode_steps,
        }


def group_times(stats: TransferStats, topo: DeviceTopology) -> tuple[np.ndarray, np.ndarray]:
    """(compute per group and device, communication per group) in seconds."""
    compute = (
        stats.assignments * topo.compute_per_token_expert + stats.active_experts * topo.expert_overhead
    )
    comm = stats.group_dedup_pairs * topo.payload_bytes / topo.bandwidth + stats.group_messages * topo.msg_latency
    return compute, comm


def latency_model(stats: TransferStats, topo: DeviceTopology, mode: str = "sync") -> LatencyReport:
    """TTFT and TPOT from replayed counts.

    Synchronous steps pay compute then communication; asynchronous steps
    overlap them and pay the larger of the two.
    """
    if stats.num_devices != topo.num_devices:
        raise InvalidConfig(
            f"stats were replayed on {stats.num_devices} devices, topology has {topo.num_devices}"
        )
    compute, comm = group_times(stats, topo)
    peak = compute.max(axis=1) if len(compute) else np.zeros(0)
    if mode == "sync":
        per_group = peak + comm
    elif mode == "async":
        per_group = np.maximum(peak, comm)
    else:
        raise InvalidConfig(f"unknown latency mode {mode!r}")
    pre = stats.group_phase == PREFILL
    dec = ~pre
    steps = len(np.unique(stats.group_step[dec]))
    return LatencyReport(
        mode,
        float(per_group[pre].sum()),
        float(per_group[dec].sum() / steps) if steps else 0.0,
        compute[pre].sum(axis=0) if pre.any() else np.zeros(stats.num_devices),
        float(comm[pre].sum()),
        steps,
    )


def uniform_trace(
    rng: np.random.Generator,
    num_samples: int,
    vision_tokens: int,
    text_tokens: int,
    N_e: int,
    k: int,
    L: int = 1,
    D: int = 1,
    decode_steps: int = 0,
) -> RoutingTrace:
    """Trace whose top-k sets are uniform random k-subsets of the experts."""
    J = vision_tokens + text_tokens
    sid, tok, mod, ph = [], [], [], []
    for s in range(num_samples):
        sid.append(np.full(J + decode_steps, s))
        tok.append(np.arange(J + decode_steps))
        mod.append(np.r_[np.full(vision_tokens, VISION), np.full(text_tokens + decode_steps, TEXT)])
        ph.append(np.r_[np.full(J, PREFILL), np.full(decode_steps, DECODE)])
    sid, tok, mod, ph = (np.concatenate(a) if a else np.zeros(0, dtype=np.int64) for a in (sid, tok, mod, ph))
    n = len(sid)
    layer = np.repeat(np.arange(L), n)
    topk = np.argsort(rng.random((n * L, N_e)), axis=1)[:, :k]
    return RoutingTrace(N_e, k, L, D, np.tile(sid, L), np.tile(ph, L), layer, np.tile(tok, L), np.tile(mod, L), topk)
