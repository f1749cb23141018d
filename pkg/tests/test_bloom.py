import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmguard import bloom, prp
from lsmguard.adversary import AttackBudget, craft_saturating_keys
from lsmguard.bloom import BloomParams, BloomState
from lsmguard.errors import InvalidParams, KeyTooLong

keys_st = st.lists(st.binary(min_size=1, max_size=24), max_size=60)


@pytest.mark.parametrize("m,k", [(0, 1), (8, 0), (4, 5), (1 << 32, 2)])
def test_invalid_params(m, k):
    with pytest.raises(InvalidParams):
        BloomParams(m, k)


def test_fresh_filter():
    st_ = bloom.bf_new(BloomParams(8, 2))
    assert st_.bit_vector().tolist() == [False] * 8
    assert st_.set_count == 0 and bloom.bf_fill_fraction(st_) == 0.0
    assert not bloom.bf_query(st_, b"anything")
    assert bloom.bf_measure_fpr(st_, 1000, 0) == 0.0


def test_insert_sets_hash_positions():
    params = BloomParams(8, 2, hash_seed=3)
    st_ = bloom.bf_new(params)
    bloom.bf_insert(st_, b"x")
    expected = set(bloom.positions(b"x", params))
    assert set(np.flatnonzero(st_.bit_vector())) == expected
    assert st_.set_count == len(expected)
    assert st_.fill_fraction() == len(expected) / 8
    before = bytes(st_.bits)
    bloom.bf_insert(st_, b"x")
    assert bytes(st_.bits) == before and st_.n_inserted == 2


def test_positions_follow_double_hashing():
    params = BloomParams(1000, 5, hash_seed=11)
    a, b = bloom.hash_pair(b"key", 11)
    assert bloom.positions(b"key", params) == [(a + i * b) % 1000 for i in range(5)]
    assert a != b
    pa, pb = bloom.hash_pairs([b"key", b"other"], 11)
    mat = bloom.position_matrix(pa, pb, 1000, 5)
    assert mat[0].tolist() == bloom.positions(b"key", params)
    assert mat[1].tolist() == bloom.positions(b"other", params)


def test_one_set_bit_rejects_spread_keys():
    params = BloomParams(8, 2)
    st_ = BloomState(params)
    st_.bits[0] = 1  # only bit 0 set
    st_.set_count = 1
    spread = [x for x in (bytes([i]) for i in range(256)) if len(set(bloom.positions(x, params))) == 2]
    assert spread
    assert not any(st_.query(x) for x in spread)


def test_saturated_filter_accepts_everything():
    st_ = BloomState(BloomParams(64, 3))
    st_.bits[:] = b"\xff" * len(st_.bits)
    st_.set_count = 64
    assert all(st_.query(bytes([i, j])) for i in range(16) for j in range(16))
    assert bloom.bf_measure_fpr(st_, 1000, 1) == 1.0


@settings(max_examples=100, deadline=None)
@given(keys_st, st.integers(8, 512), st.integers(1, 6), st.integers(0, 2**64 - 1))
def test_completeness_and_popcount(keys, m, k, seed):
    k = min(k, m)
    st_ = BloomState(BloomParams(m, k, seed))
    fills = []
    for x in keys:
        st_.insert(x)
        fills.append(st_.set_count)
        assert st_.set_count == int(st_.bit_vector().sum())
    assert all(st_.query(x) for x in keys)
    assert fills == sorted(fills)  # monotone
    assert 0 <= st_.set_count <= m


@settings(max_examples=50, deadline=None)
@given(keys_st, st.integers(8, 512), st.integers(1, 6))
def test_bulk_insert_matches_scalar(keys, m, k):
    k = min(k, m)
    a, b = BloomState(BloomParams(m, k)), BloomState(BloomParams(m, k))
    for x in keys:
        a.insert(x)
    b.insert_many(keys)
    assert a == b and a.set_count == b.set_count
    probes = [bytes([i]) for i in range(50)]
    assert b.query_many(probes).tolist() == [a.query(x) for x in probes]


def test_serialization_layout_and_roundtrip():
    params = BloomParams(100, 3, hash_seed=0xDEADBEEF)
    st_ = BloomState(params)
    for i in range(20):
        st_.insert(i.to_bytes(4, "big"))
    buf = st_.to_bytes()
    assert struct.unpack_from("<IIQ", buf) == (100, 3, 0xDEADBEEF)
    assert len(buf) == 16 + 8 * math.ceil(100 / 64)
    words = struct.unpack_from("<2Q", buf, 16)
    for p in range(100):
        assert bool(words[p // 64] >> (p % 64) & 1) == bool(st_.bit_vector()[p])
    back, used = BloomState.from_bytes(b"junk" + buf, offset=4, n_inserted=20)
    assert used == len(buf) and back == st_ and back.set_count == st_.set_count


@pytest.mark.parametrize("n", [0])
def test_theoretical_fpr_empty(n):
    assert bloom.bf_theoretical_fpr(BloomParams(1024, 4), n) == 0.0


def test_theoretical_fpr_vanishes_with_m():
    vals = [bloom.bf_theoretical_fpr(BloomParams(m, 4), 100) for m in (10**3, 10**5, 10**7)]
    assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-12


def test_theoretical_fpr_matches_closed_form():
    m, k, n = 1024, 4, 100
    assert bloom.bf_theoretical_fpr(BloomParams(m, k), n) == pytest.approx((1 - (1 - 1 / m) ** (k * n)) ** k)


def test_theoretical_fpr_matches_monte_carlo():
    # Oracle: empirical rate over 10^5 random probes, averaged over a few filters.
    params = BloomParams(1024, 4)
    rates = []
    for seed in range(5):
        st_ = BloomState(params)
        st_.insert_many(bloom.random_probe_keys(100, seed + 100))
        rates.append(bloom.bf_measure_fpr(st_, 100_000, seed))
    assert abs(np.mean(rates) - bloom.bf_theoretical_fpr(params, 100)) <= 0.01


@pytest.mark.parametrize("m,n", [(512, 50), (2048, 200), (10_000, 1000)])
def test_soundness_at_desk_scale(m, n):
    params = BloomParams(m, 4)
    st_ = BloomState(params)
    keys = bloom.random_probe_keys(n, 9)
    st_.insert_many(keys)
    assert bloom.bf_measure_fpr(st_, 50_000, 1, exclude=keys) <= bloom.bf_theoretical_fpr(params, n) + 0.02


def test_expected_random_saturation_formula():
    assert bloom.expected_random_saturation(BloomParams(256, 1)) == 1419
    assert bloom.expected_random_saturation(BloomParams(2, 1)) == 1
    for m in (5, 64, 1000):
        assert bloom.expected_random_saturation(BloomParams(m, m)) == math.floor(math.log(m))


def test_small_m_divergence_from_coupon_collector():
    # m=2, k=1: exact mean draws to see both bits is 2*H_2 = 3, the formula says 1.
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(20_000):
        seen, t = set(), 0
        while len(seen) < 2:
            seen.add(int(rng.integers(0, 2)))
            t += 1
        draws.append(t)
    assert np.mean(draws) == pytest.approx(3.0, abs=0.05)


def test_secure_wrapper_completeness():
    key = prp.prp_keygen(3)
    st_ = BloomState(BloomParams(512, 4))
    keys = [f"k{i}".encode() for i in range(60)]
    for x in keys:
        bloom.secure_bf_insert(st_, key, x)
    assert all(bloom.secure_bf_query(st_, key, x) for x in keys)
    with pytest.raises(KeyTooLong):
        bloom.secure_bf_insert(st_, key, b"y" * 16)


def test_crafted_keys_lose_their_edge_through_prp():
    params = BloomParams(1024, 4)
    crafted = craft_saturating_keys(params, AttackBudget(rng_seed=1))
    plain = BloomState(params)
    plain.insert_many(crafted)
    assert plain.fill_fraction() == 1.0

    n = len(crafted)
    secure_fills, random_fills = [], []
    for trial in range(50):
        key = prp.prp_keygen(trial)
        s = BloomState(params)
        for x in crafted:
            bloom.secure_bf_insert(s, key, x)
        secure_fills.append(s.fill_fraction())
        r = BloomState(params)
        r.insert_many(bloom.random_probe_keys(n, 1000 + trial))
        random_fills.append(r.fill_fraction())
    mu, sd = np.mean(random_fills), np.std(random_fills, ddof=1)
    assert abs(np.mean(secure_fills) - mu) <= 3 * sd
    assert max(secure_fills) < 1.0
