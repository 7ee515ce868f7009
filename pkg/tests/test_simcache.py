import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvcrash.simcache import (
    AddressSpaceExceeded,
    CacheConfig,
    CrashTriggered,
    FlushKind,
    LevelConfig,
    MachineConsumed,
    MemoryImage,
    SimMachine,
    UninitializedRead,
    dump_memory,
    lines_covering,
)

from oracles import ShadowMemory, byte_diff_rate

LINE = 64
# 2 sets x 2 ways in L1, 2 sets x 4 ways in L2
TINY = CacheConfig(levels=(LevelConfig(256, 2), LevelConfig(512, 4)))
ONE_LEVEL = CacheConfig(levels=(LevelConfig(256, 2),))
BIG = CacheConfig(levels=(LevelConfig(4096, 4), LevelConfig(16384, 8)))


def machine(cfg=TINY):
    return SimMachine(cfg)


payload = st.binary(min_size=1, max_size=LINE)
line_no = st.integers(min_value=0, max_value=31)
kinds = st.sampled_from(list(FlushKind))


# -- durability / volatility -------------------------------------------------

@given(line_no, payload, kinds)
def test_flushed_write_survives_crash(ln, data, kind):
    m = machine()
    m.write(ln * LINE, data)
    m.flush_range(ln * LINE, len(data), kind)
    assert m.crash_snapshot().read(ln * LINE, len(data)) == data


@given(st.lists(st.tuples(line_no, payload), min_size=1, max_size=20))
def test_unflushed_writes_lost_without_evictions(writes):
    m = machine(BIG)
    for ln, data in writes:
        m.write(ln * LINE, data)
    snap = m.crash_snapshot()
    for ln, data in writes:
        assert snap.read(ln * LINE, len(data)) == bytes(len(data))
    assert snap.nvm_write_count == 0


def test_eviction_forces_persistence():
    m = machine(ONE_LEVEL)
    # lines 0, 2, 4 share set 0 of a 2-way cache; the third write evicts line 0
    for ln in (0, 2, 4):
        m.write(ln * LINE, bytes([ln + 1]) * LINE)
    snap = m.crash_snapshot()
    assert snap.read(0, LINE) == bytes([1]) * LINE
    assert snap.read(2 * LINE, LINE) == bytes(LINE)
    assert snap.nvm_write_count == 1


@given(line_no, payload, kinds)
def test_clean_flush_writes_nothing(ln, data, kind):
    m = machine()
    m.write(ln * LINE, data)
    assert m.flush_range(ln * LINE, len(data), kind) == 1
    before = m.nvm_write_count
    assert m.flush_range(ln * LINE, len(data), FlushKind.WRITEBACK_NOINV) == 0
    assert m.nvm_write_count == before


def test_writeback_noinv_keeps_line_resident():
    m = machine()
    m.write(0, b"\x07" * LINE)
    m.flush_line(0, FlushKind.WRITEBACK_NOINV)
    assert m.dirty_lines() == set()
    hits = m.stats.hits[0]
    m.read(0, 8)
    assert m.stats.hits[0] == hits + 1


@pytest.mark.parametrize("kind", [FlushKind.FLUSH_INVALIDATE, FlushKind.FLUSH_OPT])
def test_invalidating_flush_drops_line(kind):
    m = machine()
    m.write(0, b"\x07" * LINE)
    m.flush_line(0, kind)
    misses = m.stats.misses[0]
    m.read(0, 8)
    assert m.stats.misses[0] == misses + 1


@given(st.lists(st.tuples(st.integers(0, 4000), st.binary(min_size=1, max_size=100)), min_size=1, max_size=40), st.booleans())
def test_writeback_all_matches_shadow(writes, invalidate):
    m = machine()
    shadow = ShadowMemory()
    for addr, data in writes:
        m.write(addr, data)
        shadow.write(addr, data)
    m.writeback_all(invalidate=invalidate)
    assert m.dirty_lines() == set()
    snap = m.crash_snapshot()
    for addr, v in shadow.bytes.items():
        assert snap.read(addr, 1)[0] == v


# -- freshness and counting --------------------------------------------------

@settings(max_examples=150)
@given(st.lists(st.tuples(st.integers(0, 2000), st.binary(min_size=1, max_size=80)), min_size=1, max_size=60))
def test_reads_see_last_write(writes):
    m = machine()
    shadow = ShadowMemory()
    for addr, data in writes:
        m.write(addr, data)
        shadow.write(addr, data)
        probe = writes[0][0]
        n = len(writes[0][1])
        assert m.read(probe, n) == shadow.read(probe, n)


def test_double_flush_is_free():
    m = machine()
    m.write(100, b"abc" * 50)
    first = m.flush_range(100, 150)
    assert first == len(lines_covering(100, 150, LINE))
    assert m.flush_range(100, 150) == 0


def test_same_value_rewrite_counts_as_consistent():
    m = machine(BIG)
    m.write(0, b"\x05" * LINE)
    m.writeback_all()
    m.write(0, b"\x05" * LINE)
    assert 0 in m.dirty_lines()
    assert m.inconsistent_rate(0, LINE) == 0.0


def test_rate_of_sixteen_dirty_units():
    m = machine(BIG)
    m.write(0, bytes(128))
    m.writeback_all()
    m.write(0, b"\x01" * 16)
    assert m.inconsistent_rate(0, 128) == 0.125


def test_rate_zero_after_flush():
    m = machine()
    m.write(0, b"\x09" * 200)
    m.flush_range(0, 200)
    assert m.inconsistent_rate(0, 200) == 0.0


def test_lru_order_is_hand_traceable():
    m = machine(ONE_LEVEL)
    a, b, c = 0, 2 * LINE, 4 * LINE  # all map to set 0
    m.write(a, b"a")
    m.write(b, b"b")
    m.read(a, 1)  # a becomes most recent; b is now LRU
    m.write(c, b"c")  # evicts b
    snap = m.crash_snapshot()
    assert snap.read(b, 1) == b"b"
    assert snap.read(a, 1) == b"\x00"
    assert snap.nvm_write_count == 1


def test_two_level_victim_goes_to_l2_not_memory():
    m = machine()
    for ln in (0, 2, 4):  # L1 set 0 overflows, L2 (4-way) absorbs the victim
        m.write(ln * LINE, bytes([ln + 1]))
    assert m.nvm_write_count == 0
    assert m.read(0, 1) == b"\x01"


# -- op counter and errors ---------------------------------------------------

def test_crash_fires_before_indexed_op():
    m = machine()
    m.crash_at = 2
    m.write(0, b"x")
    m.flush_line(0)
    with pytest.raises(CrashTriggered) as exc:
        m.write(0, b"y")
    assert exc.value.op_index == 2
    assert m.op_count == 2


def test_snapshot_consumes_machine():
    m = machine()
    m.write(0, b"x")
    m.crash_snapshot()
    with pytest.raises(MachineConsumed):
        m.read(0, 1)


def test_uninitialized_read_raises():
    m = machine()
    m.write(0, b"x")
    with pytest.raises(UninitializedRead):
        m.read(0, 2)


def test_address_space_checked():
    m = SimMachine(CacheConfig(levels=TINY.levels, max_address=1024))
    with pytest.raises(AddressSpaceExceeded):
        m.write(1020, b"12345")


def test_preload_is_visible_and_not_counted():
    m = machine()
    m.preload(10, b"hello")
    assert m.op_count == 0 and m.nvm_write_count == 0
    assert m.read(10, 5) == b"hello"


def test_cacheless_machine_writes_through():
    m = SimMachine(CacheConfig(levels=()))
    m.write(0, b"abc")
    assert m.crash_snapshot().read(0, 3) == b"abc"


@pytest.mark.parametrize(
    "levels,line",
    [
        ((LevelConfig(100, 2),), 64),
        ((LevelConfig(256, 0),), 64),
        ((LevelConfig(1024, 2), LevelConfig(256, 2)), 64),
        ((LevelConfig(256, 2),), 48),
    ],
)
def test_bad_geometry_rejected(levels, line):
    with pytest.raises(ValueError):
        CacheConfig(levels=levels, line_size=line)


def test_config_json_round_trip(tmp_path):
    p = tmp_path / "cache.json"
    p.write_text('{"line_size": 64, "levels": [{"capacity_bytes": 256, "associativity": 2}]}')
    cfg = CacheConfig.from_json(p)
    assert cfg == ONE_LEVEL
    assert CacheConfig.from_dict(CacheConfig.xeon_gold().to_dict()) == CacheConfig.xeon_gold()


def test_dump_format(tmp_path):
    img = MemoryImage(LINE)
    img.lines[2] = bytearray(b"\xab" * LINE)
    dump_memory(img, tmp_path / "m.txt")
    (row,) = (tmp_path / "m.txt").read_text().splitlines()
    addr, hexdata = row.split()
    assert addr == "0x80" and hexdata == "ab" * LINE


def test_random_sequences_match_shadow_rates():
    rng = random.Random(7)
    for _ in range(100):
        m = machine()
        shadow = ShadowMemory()
        m.write(0, bytes(512))
        shadow.write(0, bytes(512))
        m.writeback_all()
        for _ in range(rng.randint(1, 30)):
            addr = rng.randrange(0, 500)
            if rng.random() < 0.8:
                data = bytes(rng.randrange(3) for _ in range(rng.randint(1, 12)))
                m.write(addr, data)
                shadow.write(addr, data)
            else:
                m.flush_line(addr, rng.choice(list(FlushKind)))
        rate = m.inconsistent_rate(64, 300)
        assert rate == byte_diff_rate(shadow, m.crash_snapshot(), 64, 300)
