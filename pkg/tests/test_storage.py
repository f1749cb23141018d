import os
import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmguard import storage
from lsmguard.errors import CorruptRun, EmptyRun, InvariantViolation, OpenFailed, UsageError
from lsmguard.storage import BloomSizing, Entry, Manifest

SIZING = BloomSizing(10.0, 4)


def make_entries(n, value_len=20, start=0):
    return [Entry(f"key{i:08d}".encode(), b"v" * value_len, i) for i in range(start, start + n)]


def test_block_count_matches_arithmetic(tmp_path):
    # 11-byte key + 20-byte value + 16-byte entry header = 47 bytes per entry;
    # 4092 usable bytes per block -> 87 entries per block.
    entries = make_entries(1000)
    h = storage.write_run(entries, 1, 0, str(tmp_path), SIZING)
    per_block = (4096 - 4) // (16 + 11 + 20)
    assert len(h.fence) == -(-1000 // per_block) == 12
    assert h.fence.first_keys == [entries[i].key for i in range(0, 1000, per_block)]
    assert os.path.getsize(h.path) > 12 * 4096


def test_file_layout(tmp_path):
    entries = make_entries(300)
    h = storage.write_run(entries, 1, 0, str(tmp_path), SIZING, block_size=1024)
    raw = open(h.path, "rb").read()
    assert raw[:4] == b"LSMA" and struct.unpack_from("<I", raw, 4) == (1,)
    bloom_off, fence_off, crc, magic = struct.unpack_from("<QQI4s", raw, len(raw) - 24)
    assert magic == b"LSMZ" and crc == zlib.crc32(struct.pack("<QQ", bloom_off, fence_off))
    assert bloom_off == 8 + 1024 * len(h.fence)
    for off in h.fence.offsets:
        block = raw[off:off + 1024]
        assert struct.unpack("<I", block[-4:])[0] == zlib.crc32(block[:-4])
    m, k, _ = struct.unpack_from("<IIQ", raw, bloom_off)
    assert (m, k) == (3000, 4)
    (count,) = struct.unpack_from("<I", raw, fence_off)
    assert count == len(h.fence)
    first_klen, = struct.unpack_from("<I", raw, 8)
    assert raw[8 + 16:8 + 16 + first_klen] == entries[0].key


def test_tombstone_uses_sentinel_length(tmp_path):
    h = storage.write_run([Entry(b"a", None, 3), Entry(b"b", b"x", 4)], 1, 0, str(tmp_path), SIZING)
    raw = open(h.path, "rb").read()
    assert struct.unpack_from("<IIQ", raw, 8) == (1, 0xFFFFFFFF, 3)
    assert raw[8 + 16:8 + 17] == b"a"
    assert struct.unpack_from("<IIQ", raw, 8 + 17) == (1, 1, 4)
    assert storage.scan_run(h) == [Entry(b"a", None, 3), Entry(b"b", b"x", 4)]


def test_write_rejects_bad_input(tmp_path):
    with pytest.raises(EmptyRun):
        storage.write_run([], 1, 0, str(tmp_path), SIZING)
    with pytest.raises(InvariantViolation):
        storage.write_run([Entry(b"b", b"", 0), Entry(b"a", b"", 1)], 1, 0, str(tmp_path), SIZING)
    with pytest.raises(InvariantViolation):
        storage.write_run([Entry(b"a", b"", 0), Entry(b"a", b"", 1)], 1, 0, str(tmp_path), SIZING)
    limit = storage.max_entry_payload(4096)
    assert limit == 4096 - 20
    storage.write_run([Entry(b"k", b"x" * (limit - 1), 0)], 1, 0, str(tmp_path), SIZING, file_name="ok.sst")
    with pytest.raises(UsageError):
        storage.write_run([Entry(b"k", b"x" * limit, 0)], 1, 0, str(tmp_path), SIZING)


def test_bloom_completeness_and_sizing(tmp_path):
    entries = make_entries(777)
    h = storage.write_run(entries, 1, 0, str(tmp_path), SIZING)
    assert h.bloom.params.m_bits == 7770
    assert all(h.bloom.query(e.key) for e in entries)
    assert BloomSizing(10.24, 4).params_for(100).m_bits == 1024
    assert BloomSizing(10.0, 4).params_for(0).m_bits == 4


def test_read_point_pages(tmp_path):
    entries = make_entries(500)[::2]  # even keys only
    h = storage.write_run(entries, 1, 0, str(tmp_path), SIZING)
    hit, pages = storage.read_point(h, entries[10].key)
    assert hit == entries[10] and pages == 1
    assert storage.read_point(h, b"aaa") == (None, 0)
    assert storage.read_point(h, b"zzz") == (None, 0)
    assert storage.read_point(h, b"key00000003") == (None, 1)


def test_roundtrip_through_load(tmp_path):
    entries = make_entries(2000, value_len=5) + [Entry(b"zz", None, 9999)]
    h = storage.write_run(entries, 2, 0, str(tmp_path), SIZING)
    for meta in ((None, None), (h.entry_count, h.max_key)):
        back = storage.load_run(h.path, 2, 0, *meta)
        assert storage.scan_run(back) == entries
        assert back.entry_count == len(entries) and back.max_key == b"zz" and back.min_key == entries[0].key
        assert back.bloom == h.bloom
        back.close()


def test_truncated_file_is_corrupt(tmp_path):
    h = storage.write_run(make_entries(100), 1, 0, str(tmp_path), SIZING)
    data = open(h.path, "rb").read()
    with open(h.path, "wb") as fh:
        fh.write(data[:-10])
    with pytest.raises(CorruptRun):
        storage.load_run(h.path, 1, 0)


def test_flipped_data_byte_fails_checksum(tmp_path):
    h = storage.write_run(make_entries(100), 1, 0, str(tmp_path), SIZING)
    h.close()
    data = bytearray(open(h.path, "rb").read())
    data[20] ^= 0xFF
    with open(h.path, "wb") as fh:
        fh.write(data)
    back = storage.load_run(h.path, 1, 0, 100, h.max_key)
    with pytest.raises(CorruptRun):
        storage.read_point(back, b"key00000001")


def _run(tmp_path, name, entries):
    return storage.write_run(entries, 1, 0, str(tmp_path), SIZING, file_name=name)


def test_merge_examples(tmp_path):
    newer = _run(tmp_path, "n.sst", [Entry(b"a", b"1", 5)])
    older = _run(tmp_path, "o.sst", [Entry(b"a", b"2", 1)])
    assert storage.merge_runs([newer, older], False) == [Entry(b"a", b"1", 5)]
    tomb = _run(tmp_path, "t.sst", [Entry(b"a", None, 6)])
    assert storage.merge_runs([tomb, older], True) == []
    assert storage.merge_runs([tomb, older], False) == [Entry(b"a", None, 6)]
    x = _run(tmp_path, "x.sst", [Entry(b"c", b"3", 7)])
    assert [e.key for e in storage.merge_runs([x, older], False)] == [b"a", b"c"]


entry_lists = st.lists(
    st.dictionaries(st.binary(min_size=1, max_size=4), st.one_of(st.none(), st.binary(max_size=4)), max_size=20),
    min_size=1, max_size=5)


@settings(max_examples=150, deadline=None)
@given(entry_lists, st.booleans())
def test_merge_set_algebra(dicts, drop):
    # Oracle: newest-first dict overlay, then drop tombstones if asked.
    lists, seq = [], 10_000
    for d in dicts:
        lists.append([Entry(k, v, seq - i) for i, (k, v) in enumerate(sorted(d.items()))])
        seq -= 100
    merged = storage.merge_entry_lists(lists, drop)
    expect = {}
    for d in dicts:
        for k, v in d.items():
            expect.setdefault(k, v)
    if drop:
        expect = {k: v for k, v in expect.items() if v is not None}
    assert [e.key for e in merged] == sorted(expect)
    assert {e.key: e.value for e in merged} == expect


def test_manifest_roundtrip_and_errors(tmp_path):
    d = str(tmp_path)
    assert storage.read_manifest(d) is None
    h = storage.write_run(make_entries(5), 1, 0, d, SIZING, file_name="000001.sst")
    m = Manifest(levels=[[os.path.basename(h.path)]], next_sequence=5, next_file_id=2,
                 params={"size_ratio": 4}, runs={"000001.sst": {"entries": 5}})
    storage.write_manifest(d, m)
    assert storage.read_manifest(d) == m
    assert not os.path.exists(os.path.join(d, "MANIFEST.tmp"))
    os.remove(h.path)
    with pytest.raises(OpenFailed):
        storage.read_manifest(d)
    with open(os.path.join(d, "MANIFEST"), "w") as fh:
        fh.write("{not json")
    with pytest.raises(OpenFailed):
        storage.read_manifest(d)


def test_dump_run(tmp_path):
    h = storage.write_run(make_entries(300), 1, 0, str(tmp_path), SIZING)
    info = storage.dump_run(h.path)
    assert info["entries"] == 300
    assert sum(b["entries"] for b in info["blocks"]) == 300
    assert info["bloom"]["m_bits"] == 3000
