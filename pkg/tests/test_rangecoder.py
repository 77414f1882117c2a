import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rawcodec.coder.rangecoder import (
    TOTAL,
    RangeDecoder,
    RangeEncoder,
    StreamError,
    check_cdf,
    ideal_bits,
)
from rawcodec.mixture import build_cdf_table


def random_tables(r, n, alphabet, conc=0.3):
    p = r.dirichlet(np.full(alphabet, conc), size=n)
    return np.stack([build_cdf_table(row) for row in p])


def roundtrip(cdfs, symbols):
    enc = RangeEncoder()
    enc.encode_table(cdfs, symbols)
    data = enc.finish()
    dec = RangeDecoder(data)
    out = dec.decode_table(cdfs)
    dec.check_exhausted()
    return data, out


def test_empty_stream_is_four_bytes():
    assert len(RangeEncoder().finish()) == 4
    RangeDecoder(RangeEncoder().finish()).check_exhausted()


def test_single_symbol_examples():
    uni = np.arange(0, TOTAL + 1, TOTAL // 4)
    for s in range(4):
        enc = RangeEncoder()
        enc.encode_symbol(s, uni)
        dec = RangeDecoder(enc.finish())
        assert dec.decode_symbol(uni) == s


def test_certain_symbol_costs_nothing_beyond_flush():
    cdf = np.array([0, TOTAL - 1, TOTAL])
    enc = RangeEncoder()
    for _ in range(1000):
        enc.encode_symbol(0, cdf)
    assert len(enc.finish()) <= 4 + 1


@given(st.integers(0, 10**6), st.integers(1, 300), st.integers(2, 300))
def test_roundtrip_property(seed, n, alphabet):
    r = np.random.default_rng(seed)
    cdfs = random_tables(r, n, alphabet)
    pmf = np.diff(cdfs, axis=1) / TOTAL
    symbols = np.array([r.choice(alphabet, p=row) for row in pmf])
    _, out = roundtrip(cdfs, symbols)
    assert np.array_equal(out, symbols)


def test_rare_symbols_roundtrip():
    # every symbol has probability 1/TOTAL except the first
    cdf = np.concatenate([[0], np.arange(TOTAL - 255, TOTAL + 1)])
    cdfs = np.tile(cdf, (500, 1))
    symbols = np.random.default_rng(3).integers(1, 256, 500)
    data, out = roundtrip(cdfs, symbols)
    assert np.array_equal(out, symbols)
    assert len(data) * 8 <= ideal_bits(cdfs, symbols) * 1.01 + 64


def test_optimality_small():
    r = np.random.default_rng(9)
    cdfs = random_tables(r, 20000, 16)
    pmf = np.diff(cdfs, axis=1) / TOTAL
    symbols = (pmf.cumsum(1) > r.uniform(size=(20000, 1))).argmax(1)
    data, _ = roundtrip(cdfs, symbols)
    assert len(data) * 8 <= 1.01 * ideal_bits(cdfs, symbols) + 256


def test_truncated_and_extended_streams():
    r = np.random.default_rng(4)
    cdfs = random_tables(r, 400, 64, conc=1.0)
    symbols = r.integers(0, 64, 400)
    data, _ = roundtrip(cdfs, symbols)
    with pytest.raises(StreamError):
        RangeDecoder(data[:-3]).decode_table(cdfs)
    with pytest.raises(StreamError):
        RangeDecoder(b"\x00\x01")
    dec = RangeDecoder(data + b"\x00")
    dec.decode_table(cdfs)
    with pytest.raises(StreamError):
        dec.check_exhausted()


def test_invalid_inputs():
    enc = RangeEncoder()
    with pytest.raises(ValueError):
        enc.encode(0, 0)
    with pytest.raises(ValueError):
        enc.encode(TOTAL - 1, 2)
    with pytest.raises(ValueError):
        enc.encode_table(np.array([[0, TOTAL]]), np.array([1]))
    with pytest.raises(ValueError):
        check_cdf([0, 5, 5, TOTAL])
    with pytest.raises(ValueError):
        check_cdf([1, TOTAL])
    assert check_cdf([0, TOTAL]).tolist() == [0, TOTAL]


def test_deterministic_bytes():
    r = np.random.default_rng(8)
    cdfs = random_tables(r, 300, 10)
    symbols = r.integers(0, 10, 300)
    assert roundtrip(cdfs, symbols)[0] == roundtrip(cdfs, symbols)[0]
