from math import comb
from pathlib import Path

import numpy as np
import pytest

from modroute.binning import adaptive_binning, fixed_binning
from modroute.ep_sim import (
    DECODE,
    PREFILL,
    CorruptTrace,
    DeviceTopology,
    RoutingTrace,
    TraceParseError,
    export_trace,
    import_trace,
    latency_model,
    place_bins,
    replay_trace,
    uniform_trace,
)
from modroute.numerics import TEXT, VISION, InvalidConfig

FIXTURE = Path(__file__).parent / "fixtures" / "trace3.jsonl"


def test_golden_fixture():
    t = import_trace(FIXTURE)
    assert (t.N_e, t.k, t.L, t.D) == (8, 2, 2, 16)
    assert t.sample_id.tolist() == [0, 0, 1]
    assert t.phase.tolist() == [PREFILL, PREFILL, DECODE]
    assert t.layer.tolist() == [0, 1, 0]
    assert t.token_index.tolist() == [0, 1, 5]
    assert t.modality.tolist() == [VISION, TEXT, TEXT]
    assert t.topk.tolist() == [[0, 3], [7, 4], [5, 6]]
    assert t.gate_scores is None


def test_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    t = uniform_trace(rng, 10, 60, 30, 16, 4, L=1, decode_steps=10)
    assert len(t) == 1000
    t.gate_scores = rng.random((len(t), 4))
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    export_trace(t, a)
    back = import_trace(a)
    assert back.equals(t)
    export_trace(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_empty_trace(tmp_path):
    p = tmp_path / "e.jsonl"
    export_trace(RoutingTrace.empty(8, 2, 1, 4), p)
    assert p.read_text().count("\n") == 1
    assert len(import_trace(p)) == 0


@pytest.mark.parametrize(
    "line, needle",
    [
        ('{"sample_id":0,"phase":"prefill","layer":0,"token_index":0,"modality":"text"}', "missing"),
        ('{"sample_id":0,"phase":"prefill","layer":0,"token_index":0,"modality":"text","topk":[0,1],"x":1}', "unknown"),
        ('{"sample_id":0,"phase":"prefill","layer":0,"token_index":0,"modality":"text","topk":[0]}', "topk"),
        ("{not json", "invalid JSON"),
    ],
)
def test_parse_errors_carry_line_number(tmp_path, line, needle):
    p = tmp_path / "bad.jsonl"
    p.write_text(FIXTURE.read_text() + line + "\n")
    with pytest.raises(TraceParseError) as exc:
        import_trace(p)
    assert exc.value.lineno == 5
    assert needle in str(exc.value)


def test_corrupt_trace():
    t = RoutingTrace(4, 2, 1, 1, [0], [0], [0], [0], [TEXT], [[0, 4]])
    with pytest.raises(CorruptTrace):
        replay_trace(t, place_bins(fixed_binning(4, 2), 2))
    t = RoutingTrace(4, 2, 1, 1, [0], [0], [0], [0], [TEXT], [[1, 1]])
    with pytest.raises(CorruptTrace):
        t.validate()


def test_place_bins_examples():
    layout = fixed_binning(16, 8)
    assert place_bins(layout, 2, "block").bin_device[0].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert np.flatnonzero(place_bins(layout, 2, "round_robin").bin_device[0] == 0).tolist() == [0, 2, 4, 6]
    assert place_bins(layout, 4, "block").bin_device[0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    plan = place_bins(adaptive_binning(np.arange(16)[::-1] / 16, 8), 2)
    assert np.bincount(plan.expert_device[0]).tolist() == [8, 8]
    with pytest.raises(InvalidConfig):
        place_bins(fixed_binning(12, 3), 2, "block")


def test_all_local_gives_zero():
    t = RoutingTrace(8, 2, 1, 1, [0, 1], [0, 0], [0, 0], [0, 1], [TEXT, VISION], [[0, 1], [2, 3]])
    stats = replay_trace(t, place_bins(fixed_binning(8, 2), 2))
    c = stats.cell(PREFILL)
    assert c.ratio_no_dedup == 0.0 and c.ratio_dedup == 0.0


def test_uniform_hypergeometric():
    rng = np.random.default_rng(1)
    t = uniform_trace(rng, 100, 700, 300, 64, 8)
    assert len(t) >= 100_000
    stats = replay_trace(t, place_bins(fixed_binning(64, 2), 2))
    c = stats.cell(PREFILL)
    assert abs(c.ratio_no_dedup - 0.5) < 0.02
    assert abs(c.ratio_dedup - (1 - comb(32, 8) / comb(64, 8))) < 0.005
    assert c.dedup_pairs <= c.remote_dispatches


def test_mostly_local_trace_cuts_dedup_ratio():
    rng = np.random.default_rng(2)
    n = 5000
    # 90% of tokens route entirely to their home device, the rest uniformly
    local = rng.random(n) < 0.9
    topk = np.where(
        local[:, None],
        np.argsort(rng.random((n, 32)), axis=1)[:, :8],
        np.argsort(rng.random((n, 64)), axis=1)[:, :8],
    )
    t = RoutingTrace(64, 8, 1, 1, np.zeros(n), np.zeros(n), np.zeros(n), np.arange(n), np.full(n, TEXT), topk)
    plan = place_bins(fixed_binning(64, 2), 2)
    base = replay_trace(uniform_trace(rng, 1, 0, n, 64, 8), plan)
    trained = replay_trace(t, plan)
    assert base.cell(PREFILL).ratio_dedup - trained.cell(PREFILL).ratio_dedup >= 0.3


def test_device_relabel_invariance():
    rng = np.random.default_rng(3)
    t = uniform_trace(rng, 4, 20, 10, 16, 4, L=2, decode_steps=3)
    home_free = replay_trace(t, place_bins(fixed_binning(16, 4, 2), 2, "block"), home="sample_shard")
    flipped = place_bins(fixed_binning(16, 4, 2), 2, "block")
    flipped.expert_device = 1 - flipped.expert_device
    t2 = t.select(np.ones(len(t), dtype=bool))
    t2.sample_id = t.sample_id + 1  # sample_shard homes flip with the devices
    other = replay_trace(t2, flipped, home="sample_shard")
    for p in (PREFILL, DECODE):
        assert home_free.cell(p) == other.cell(p)
    np.testing.assert_array_equal(home_free.assignments, other.assignments[:, ::-1])


def test_latency_invariants():
    topo = DeviceTopology.calibrated_toy()
    for seed in range(5):
        t = uniform_trace(np.random.default_rng(seed), 3, 40, 20, 16, 2, L=2, decode_steps=4)
        stats = replay_trace(t, place_bins(fixed_binning(16, 2, 2), 2))
        sync, asy = latency_model(stats, topo, "sync"), latency_model(stats, topo, "async")
        assert asy.ttft <= sync.ttft and asy.tpot <= sync.tpot
        assert sync.decode_steps == 4
    # zero transfers: everything on device 0
    t = RoutingTrace(8, 2, 1, 1, [0, 0], [0, 0], [0, 0], [0, 1], [TEXT, TEXT], [[0, 1], [2, 3]])
    stats = replay_trace(t, place_bins(fixed_binning(8, 2), 2))
    s, a = latency_model(stats, topo, "sync"), latency_model(stats, topo, "async")
    assert s.ttft == a.ttft == pytest.approx(4 * topo.compute_per_token_expert + 4 * topo.expert_overhead)
    with pytest.raises(InvalidConfig):
        latency_model(stats, DeviceTopology(num_devices=3))


def test_topology_config(tmp_path):
    with pytest.raises(InvalidConfig):
        DeviceTopology.from_dict({"bandwidth": 1.0, "speed": 2})
    with pytest.raises(InvalidConfig):
        DeviceTopology(bandwidth=0)
    p = tmp_path / "t.json"
    p.write_text('{"num_devices": 2, "bandwidth": 1e9}')
    assert DeviceTopology.load(p).bandwidth == 1e9


def test_csv_rows(tmp_path):
    t = uniform_trace(np.random.default_rng(5), 2, 10, 5, 8, 2, decode_steps=2)
    stats = replay_trace(t, place_bins(fixed_binning(8, 2), 2))
    rows = stats.rows()
    assert [(r["phase"], r["modality"]) for r in rows] == [
        ("prefill", "V"), ("prefill", "T"), ("prefill", "V+T"),
        ("decode", "V"), ("decode", "T"), ("decode", "V+T"),
    ]
    stats.write_csv(tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().startswith("phase,modality,tokens")
