import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modroute.binning import BinLayout, adaptive_binning, fixed_binning, text_bias
from modroute.numerics import InvalidConfig


def as_sets(layout, layer=0):
    return [set(b.tolist()) for b in layout.bins(layer)]


def test_text_bias():
    np.testing.assert_allclose(text_bias([[30.0], [10.0]]), [0.75])
    np.testing.assert_array_equal(text_bias([[0.0], [0.0]]), [0.5])
    rng = np.random.default_rng(0)
    C = rng.random((3, 2, 8))
    np.testing.assert_allclose(text_bias(C), C[:, 0] / (C[:, 0] + C[:, 1]), atol=1e-15)


def test_adaptive_examples():
    layout = adaptive_binning([0.9, 0.1, 0.8, 0.2], 2)
    assert as_sets(layout) == [{1, 3}, {2, 0}]
    assert layout.perm[0].tolist() == [1, 3, 2, 0]
    assert adaptive_binning(np.full(6, 0.3), 3).perm[0].tolist() == list(range(6))


def test_adaptive_sorted_bins():
    rng = np.random.default_rng(1)
    f = rng.random(64)
    layout = adaptive_binning(f, 8)
    bins = layout.bins(0)
    for a, b in zip(bins, bins[1:]):
        assert f[a].max() <= f[b].min()
    np.testing.assert_array_equal(np.sort(f), f[layout.perm[0]])


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_monotone_transform_invariance(seed):
    f = np.random.default_rng(seed).random((2, 16))
    a = adaptive_binning(f, 4)
    b = adaptive_binning(np.exp(3 * f) - 7, 4)
    np.testing.assert_array_equal(a.perm, b.perm)
    assert np.array_equal(adaptive_binning(f, 4).perm, a.perm)


def test_fixed_examples():
    assert as_sets(fixed_binning(8, 2)) == [set(range(4)), set(range(4, 8))]
    assert [len(b) for b in fixed_binning(8, 8).bins(0)] == [1] * 8
    assert as_sets(fixed_binning(8, 1)) == [set(range(8))]
    with pytest.raises(InvalidConfig):
        fixed_binning(8, 3)
    with pytest.raises(InvalidConfig):
        adaptive_binning(np.zeros(8), 3)


def test_layout_validation_and_expert_bin():
    with pytest.raises(InvalidConfig):
        BinLayout(np.array([0, 0, 1, 2]), 2)
    layout = BinLayout(np.array([[3, 1, 0, 2]]), 2)
    assert layout.expert_bin(0).tolist() == [1, 0, 1, 0]


def test_json_round_trip(tmp_path):
    layout = adaptive_binning(np.random.default_rng(3).random((3, 8)), 4, generation=5)
    path = tmp_path / "layout.json"
    layout.save(path)
    data = json.loads(path.read_text())
    assert data["layers"][0]["boundaries"] == [0, 2, 4, 6, 8]
    back = BinLayout.from_json(data)
    np.testing.assert_array_equal(back.perm, layout.perm)
    assert back.generation == 5 and back.num_bins == 4
