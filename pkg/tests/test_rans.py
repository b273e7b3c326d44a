import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from dcae.errors import CorruptStreamError
from dcae.rans import (
    TOTAL,
    QuantizedCdf,
    ScaleTable,
    default_scale_table,
    ideal_bits,
    logistic_table,
    quantize_pmf,
    rans_decode,
    rans_encode,
    support_radius,
)
from dcae.rans import _gaussian_table


def test_quantize_uniform_and_halves():
    np.testing.assert_array_equal(quantize_pmf([0.25] * 4), [16384] * 4)
    np.testing.assert_array_equal(quantize_pmf([0.5, 0.5]), [32768, 32768])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=300))
def test_quantize_random_pmf_is_a_valid_table(weights):
    p = np.asarray(weights)
    p = p / p.sum() if p.sum() > 0 else p
    freqs = quantize_pmf(p)
    assert freqs.sum() == TOTAL and freqs.min() >= 1


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_pmf([])
    with pytest.raises(ValueError):
        quantize_pmf([0.7, 0.7])
    with pytest.raises(ValueError):
        quantize_pmf([-0.1, 1.1])


def test_support_radius_examples():
    assert support_radius(0.11) == 1
    radii = [support_radius(s) for s in np.geomspace(0.11, 256, 64)]
    assert radii == sorted(radii)
    for s, r in zip(np.geomspace(0.11, 256, 64), radii):
        assert ndtr(-(r + 0.5) / s) < 2.0 ** -16
        assert r == 1 or ndtr(-(r - 0.5) / s) >= 2.0 ** -16


def test_unit_scale_center_bucket():
    table = _gaussian_table(1.0)
    center = table.freqs[table.bucket(0)[0]]
    assert abs(int(center) - round(0.382925 * 65536)) <= 1


def test_scale_table_layout_and_upward_mapping():
    table = default_scale_table()
    assert len(table) == 64
    assert table.scales[0] == pytest.approx(0.11) and table.scales[-1] == pytest.approx(256.0)
    sig = np.geomspace(0.11, 256, 1000)
    assert np.all(table.scales[table.index(sig)] >= sig * (1 - 1e-12))
    for t in table.tables:
        assert t.cdf[-1] == TOTAL and np.all(np.diff(t.cdf) >= 1)


def test_empty_stream_is_flush_only():
    data = rans_encode([], [])
    assert len(data) == 4
    assert rans_decode(data, []).size == 0


def test_uniform_symbols_cost_two_bits_each():
    table = QuantizedCdf.from_freqs(0, quantize_pmf([0, 0.25, 0.25, 0.25, 0.25, 0]))
    symbols = [0, 1, 2, 3, 3, 2, 1, 0]
    data = rans_encode(symbols, [table] * 8)
    assert len(data) <= math.ceil(8 * 2 / 8) + 4 + 2
    np.testing.assert_array_equal(rans_decode(data, [table] * 8), symbols)


@st.composite
def coded_sequences(draw):
    table = default_scale_table()
    n = draw(st.integers(0, 80))
    idx = draw(st.lists(st.integers(0, len(table) - 1), min_size=n, max_size=n))
    cdfs = [table.tables[i] for i in idx]
    symbols = []
    for t in cdfs:
        # mostly in range, sometimes far into the escape region
        symbols.append(draw(st.one_of(st.integers(t.low, t.high), st.integers(-5000, 5000))))
    return symbols, cdfs


@given(coded_sequences())
def test_roundtrip_with_escapes(case):
    symbols, cdfs = case
    data = rans_encode(symbols, cdfs)
    np.testing.assert_array_equal(rans_decode(data, cdfs), symbols)
    assert 8 * len(data) <= ideal_bits(symbols, cdfs) + 48


@given(st.floats(-30, 30), st.floats(0.02, 40), st.lists(st.integers(-200, 200), max_size=30))
def test_logistic_table_roundtrip(loc, scale, symbols):
    t = logistic_table(loc, scale)
    assert t.cdf[-1] == TOTAL and t.freqs.min() >= 1
    data = rans_encode(symbols, [t] * len(symbols))
    np.testing.assert_array_equal(rans_decode(data, [t] * len(symbols)), symbols)


def test_truncated_or_odd_streams_are_rejected():
    table = default_scale_table().tables[20]
    data = rans_encode([0, 1, -1, 2] * 10, [table] * 40)
    for bad in (data[:-1], data[:3], data[2:]):
        with pytest.raises(CorruptStreamError):
            rans_decode(bad, [table] * 40)


def test_wrong_symbol_count_is_detected():
    table = default_scale_table().tables[30]
    data = rans_encode([3, -2, 0, 1, 5], [table] * 5)
    with pytest.raises(CorruptStreamError):
        rans_decode(data, [table] * 6)


def test_runaway_escape_prefix_is_rejected():
    t = QuantizedCdf.from_freqs(0, [1, TOTAL - 2, 1])
    # a state whose low bits always select the low escape, then all-zero payload bits
    stream = b"\x00\x00" * 8 + (1 << 16).to_bytes(4, "little")
    with pytest.raises(CorruptStreamError):
        rans_decode(stream, [t])


def test_from_freqs_validates():
    with pytest.raises(ValueError):
        QuantizedCdf.from_freqs(0, [0, TOTAL])
    with pytest.raises(ValueError):
        QuantizedCdf.from_freqs(0, [5, 5])


def test_scale_table_custom_range():
    t = ScaleTable(count=8, lo=0.5, hi=4.0)
    assert len(t) == 8 and t.index(100.0) == 7
