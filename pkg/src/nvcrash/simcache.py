"""Value-tracking simulator of a write-back cache hierarchy over non-volatile memory.

Every load and store goes through :class:`SimMachine`, which keeps real byte
values in each cache level and in the memory image.  Dirty data that never
left the caches is lost by :meth:`SimMachine.crash_snapshot`, which is what
makes crash experiments meaningful.

The hierarchy is non-inclusive: each level tracks lines independently, fills
go to every level on the miss path, and the innermost valid copy of a line is
always the freshest one.
"""
from __future__ import annotations

import enum
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence


class SimError(Exception):
    """Base class for simulator errors."""


class UninitializedRead(SimError):
    pass


class AddressSpaceExceeded(SimError):
    pass


class MachineConsumed(SimError):
    """Raised when a machine is used after :meth:`SimMachine.crash_snapshot`."""


class CrashTriggered(Exception):
    """Control-flow signal: the operation counter reached the armed crash point."""

    def __init__(self, op_index: int):
        super().__init__(op_index)
        self.op_index = op_index


class FlushKind(enum.Enum):
    FLUSH_INVALIDATE = "clflush"
    FLUSH_OPT = "clflushopt"
    WRITEBACK_NOINV = "clwb"

    @property
    def invalidates(self) -> bool:
        return self is not FlushKind.WRITEBACK_NOINV


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class LevelConfig:
    capacity: int
    associativity: int

    def n_sets(self, line_size: int) -> int:
        return self.capacity // (self.associativity * line_size)


@dataclass(frozen=True)
class CacheConfig:
    levels: tuple = ()
    line_size: int = 64
    max_address: int = 1 << 40

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not _is_pow2(self.line_size):
            raise ValueError(f"line_size must be a power of two, got {self.line_size}")
        prev = 0
        for i, lv in enumerate(self.levels):
            if lv.associativity < 1:
                raise ValueError(f"level {i}: associativity must be positive")
            way_bytes = lv.associativity * self.line_size
            # capacities that are not a multiple of one set (1MB/12-way) round down
            if lv.capacity < way_bytes:
                raise ValueError(
                    f"level {i}: capacity {lv.capacity} is smaller than one set "
                    f"(associativity x line_size = {way_bytes})"
                )
            if lv.capacity < prev:
                raise ValueError("level capacities must be non-decreasing from L1 outward")
            prev = lv.capacity

    @classmethod
    def xeon_gold(cls) -> "CacheConfig":
        """Three-level geometry of a Xeon Gold 6126 (32KB/8, 1MB/12, 19.25MB/11)."""
        return cls(
            levels=(
                LevelConfig(32 * 1024, 8),
                LevelConfig(1024 * 1024, 12),
                LevelConfig(19712 * 1024, 11),
            )
        )

    @classmethod
    def desk(cls) -> "CacheConfig":
        """Tiny two-level geometry used by tests and campaigns (256B/2-way, 1KB/4-way)."""
        return cls(levels=(LevelConfig(256, 2), LevelConfig(1024, 4)))

    @property
    def llc_lines(self) -> int:
        if not self.levels:
            return 0
        return self.levels[-1].capacity // self.line_size

    def to_dict(self) -> dict:
        return {
            "line_size": self.line_size,
            "levels": [
                {"capacity_bytes": lv.capacity, "associativity": lv.associativity}
                for lv in self.levels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheConfig":
        levels = tuple(
            LevelConfig(int(lv["capacity_bytes"]), int(lv["associativity"]))
            for lv in d.get("levels", [])
        )
        return cls(levels=levels, line_size=int(d.get("line_size", 64)))

    @classmethod
    def from_json(cls, path) -> "CacheConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class MemoryImage:
    """Sparse line-granular NVM contents plus the count of line write-backs."""

    def __init__(self, line_size: int = 64):
        self.line_size = line_size
        self.lines: dict[int, bytearray] = {}
        self.nvm_write_count = 0

    def copy(self) -> "MemoryImage":
        img = MemoryImage(self.line_size)
        img.lines = {k: bytearray(v) for k, v in self.lines.items()}
        img.nvm_write_count = self.nvm_write_count
        return img

    def read(self, addr: int, length: int) -> bytes:
        """Raw bytes from the image; absent lines read as zeros."""
        ls = self.line_size
        out = bytearray()
        end = addr + length
        while addr < end:
            ln, off = divmod(addr, ls)
            n = min(ls - off, end - addr)
            data = self.lines.get(ln)
            out += data[off:off + n] if data is not None else bytes(n)
            addr += n
        return bytes(out)

    def dump(self) -> str:
        """Text dump: one ``0x<line-addr> <hex>`` row per line, sorted by address."""
        ls = self.line_size
        rows = [f"0x{ln * ls:x} {self.lines[ln].hex()}" for ln in sorted(self.lines)]
        return "\n".join(rows) + ("\n" if rows else "")

    def __eq__(self, other):
        if not isinstance(other, MemoryImage):
            return NotImplemented
        return self.line_size == other.line_size and self.lines == other.lines


class _Line:
    __slots__ = ("data", "dirty")

    def __init__(self, data: bytearray, dirty: bool = False):
        self.data = data
        self.dirty = dirty


class _Level:
    __slots__ = ("n_sets", "ways", "sets")

    def __init__(self, cfg: LevelConfig, line_size: int):
        self.n_sets = cfg.n_sets(line_size)
        self.ways = cfg.associativity
        self.sets = [OrderedDict() for _ in range(self.n_sets)]

    def lookup(self, ln: int) -> Optional[_Line]:
        return self.sets[ln % self.n_sets].get(ln)


@dataclass
class MachineStats:
    reads: int = 0
    writes: int = 0
    flushes: int = 0
    hits: list = field(default_factory=list)
    misses: list = field(default_factory=list)


class SimMachine:
    """Single-threaded cache hierarchy + NVM image with an operation counter.

    ``op_count`` advances by one per :meth:`read`, :meth:`write` and
    :meth:`flush_line` call.  When ``crash_at`` is set, the operation that would
    carry index ``crash_at`` raises :class:`CrashTriggered` before executing.
    """

    def __init__(self, config: Optional[CacheConfig] = None):
        self.config = config if config is not None else CacheConfig.desk()
        ls = self.config.line_size
        self.line_size = ls
        self._shift = ls.bit_length() - 1
        self._full = (1 << ls) - 1
        self.levels = [_Level(lv, ls) for lv in self.config.levels]
        self.memory = MemoryImage(ls)
        self._init: dict[int, int] = {}
        self.op_count = 0
        self.crash_at: Optional[int] = None
        self.consumed = False
        self.stats = MachineStats(hits=[0] * len(self.levels), misses=[0] * len(self.levels))

    # -- internal helpers ---------------------------------------------------

    def _tick(self):
        if self.consumed:
            raise MachineConsumed("machine was consumed by crash_snapshot")
        if self.op_count == self.crash_at:
            raise CrashTriggered(self.op_count)
        self.op_count += 1

    def _check_range(self, addr: int, length: int):
        if addr < 0 or addr + length > self.config.max_address:
            raise AddressSpaceExceeded(f"[{addr:#x}, {addr + length:#x}) outside address space")

    def _install(self, idx: int, ln: int, data: bytearray, dirty: bool):
        """Place a copy of line ``ln`` in level ``idx``; evicts the LRU way if needed."""
        level = self.levels[idx]
        s = level.sets[ln % level.n_sets]
        line = s.get(ln)
        if line is not None:
            line.data[:] = data
            line.dirty = line.dirty or dirty
            s.move_to_end(ln)
            return line
        if len(s) >= level.ways:
            vln, victim = s.popitem(last=False)
            if victim.dirty:
                self._writeback_down(idx + 1, vln, victim.data)
        line = _Line(bytearray(data), dirty)
        s[ln] = line
        return line

    def _writeback_down(self, idx: int, ln: int, data: bytearray):
        if idx >= len(self.levels):
            mem = self.memory.lines.get(ln)
            if mem is None:
                self.memory.lines[ln] = bytearray(data)
            else:
                mem[:] = data
            self.memory.nvm_write_count += 1
        else:
            self._install(idx, ln, data, True)

    def _fetch(self, ln: int) -> Optional[_Line]:
        """Return the L1 copy of ``ln``, filling the miss path as needed."""
        levels = self.levels
        if not levels:
            return None
        l1 = levels[0]
        s = l1.sets[ln % l1.n_sets]
        line = s.get(ln)
        if line is not None:
            s.move_to_end(ln)
            self.stats.hits[0] += 1
            return line
        self.stats.misses[0] += 1
        hit = len(levels)
        src = None
        for i in range(1, len(levels)):
            lv = levels[i]
            si = lv.sets[ln % lv.n_sets]
            cand = si.get(ln)
            if cand is not None:
                si.move_to_end(ln)
                self.stats.hits[i] += 1
                src = cand.data
                hit = i
                break
            self.stats.misses[i] += 1
        if src is None:
            mem = self.memory.lines.get(ln)
            src = mem if mem is not None else bytearray(self.line_size)
        src = bytearray(src)
        for i in range(hit - 1, -1, -1):
            line = self._install(i, ln, src, False)
        return line

    def _copies(self, ln: int) -> list:
        out = []
        for lv in self.levels:
            line = lv.lookup(ln)
            if line is not None:
                out.append(line)
        return out

    # -- public operations --------------------------------------------------

    def read(self, addr: int, length: int) -> bytes:
        if length < 1:
            raise ValueError("read length must be >= 1")
        self._check_range(addr, length)
        self._tick()
        self.stats.reads += 1
        ls = self.line_size
        end = addr + length
        out = bytearray()
        while addr < end:
            ln = addr >> self._shift
            off = addr - (ln << self._shift)
            n = min(ls - off, end - addr)
            want = ((1 << n) - 1) << off
            if self._init.get(ln, 0) & want != want:
                raise UninitializedRead(f"read of uninitialized bytes near {addr:#x}")
            line = self._fetch(ln)
            data = line.data if line is not None else self.memory.lines[ln]
            out += data[off:off + n]
            addr += n
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        length = len(data)
        if length < 1:
            raise ValueError("write needs at least one byte")
        self._check_range(addr, length)
        self._tick()
        self.stats.writes += 1
        ls = self.line_size
        end = addr + length
        pos = 0
        while addr < end:
            ln = addr >> self._shift
            off = addr - (ln << self._shift)
            n = min(ls - off, end - addr)
            self._init[ln] = self._init.get(ln, 0) | (((1 << n) - 1) << off)
            line = self._fetch(ln)
            if line is None:
                # cacheless machine: stores go straight to NVM
                mem = self.memory.lines.get(ln)
                if mem is None:
                    mem = self.memory.lines[ln] = bytearray(ls)
                mem[off:off + n] = data[pos:pos + n]
                self.memory.nvm_write_count += 1
            else:
                line.data[off:off + n] = data[pos:pos + n]
                line.dirty = True
            addr += n
            pos += n

    def preload(self, addr: int, data: bytes) -> None:
        """Write bytes straight into NVM (no op counted, no write counted).

        Cached copies of the touched lines are dropped so the hierarchy stays
        coherent with the new memory contents.
        """
        self._check_range(addr, len(data))
        ls = self.line_size
        end = addr + len(data)
        pos = 0
        while addr < end:
            ln, off = divmod(addr, ls)
            n = min(ls - off, end - addr)
            for lv in self.levels:
                lv.sets[ln % lv.n_sets].pop(ln, None)
            mem = self.memory.lines.get(ln)
            if mem is None:
                mem = self.memory.lines[ln] = bytearray(ls)
            mem[off:off + n] = data[pos:pos + n]
            self._init[ln] = self._init.get(ln, 0) | (((1 << n) - 1) << off)
            addr += n
            pos += n

    def _flush(self, ln: int, invalidate: bool) -> int:
        copies = []
        for lv in self.levels:
            s = lv.sets[ln % lv.n_sets]
            line = s.get(ln)
            if line is not None:
                copies.append((s, line))
        if not copies:
            return 0
        wrote = 0
        if any(line.dirty for _, line in copies):
            fresh = copies[0][1].data
            mem = self.memory.lines.get(ln)
            if mem is None:
                self.memory.lines[ln] = bytearray(fresh)
            else:
                mem[:] = fresh
            self.memory.nvm_write_count += 1
            wrote = 1
            if not invalidate:
                for _, line in copies[1:]:
                    line.data[:] = fresh
        for s, line in copies:
            if invalidate:
                del s[ln]
            else:
                line.dirty = False
        return wrote

    def flush_line(self, addr: int, kind: FlushKind = FlushKind.FLUSH_OPT) -> int:
        """Persist the line holding ``addr``; returns 1 if a write-back happened."""
        self._check_range(addr, 1)
        self._tick()
        self.stats.flushes += 1
        return self._flush(addr >> self._shift, kind.invalidates)

    def flush_range(self, addr: int, length: int, kind: FlushKind = FlushKind.FLUSH_OPT) -> int:
        if length <= 0:
            return 0
        ls = self.line_size
        start = addr - addr % ls
        writes = 0
        for a in range(start, addr + length, ls):
            writes += self.flush_line(a, kind)
        return writes

    def writeback_all(self, invalidate: bool = False) -> int:
        resident = set()
        for lv in self.levels:
            for s in lv.sets:
                resident.update(s.keys())
        writes = 0
        for ln in sorted(resident):
            writes += self._flush(ln, invalidate)
        return writes

    def dirty_lines(self) -> set:
        out = set()
        for lv in self.levels:
            for s in lv.sets:
                out.update(ln for ln, line in s.items() if line.dirty)
        return out

    def freshest(self, addr: int, length: int) -> bytes:
        """Bytes as the program would see them, without touching LRU or counters."""
        ls = self.line_size
        end = addr + length
        out = bytearray()
        while addr < end:
            ln, off = divmod(addr, ls)
            n = min(ls - off, end - addr)
            src = None
            for lv in self.levels:
                line = lv.lookup(ln)
                if line is not None:
                    src = line.data
                    break
            if src is None:
                src = self.memory.lines.get(ln)
            out += src[off:off + n] if src is not None else bytes(n)
            addr += n
        return bytes(out)

    def inconsistent_rate(self, addr: int, length: int) -> float:
        """Fraction of the range whose freshest value differs from NVM."""
        if length <= 0:
            raise ValueError("object length must be positive")
        ls = self.line_size
        end = addr + length
        diff = 0
        a = addr
        while a < end:
            ln, off = divmod(a, ls)
            n = min(ls - off, end - a)
            src = None
            for lv in self.levels:
                line = lv.lookup(ln)
                if line is not None:
                    src = line.data
                    break
            if src is not None:
                mem = self.memory.lines.get(ln)
                cached = src[off:off + n]
                stored = mem[off:off + n] if mem is not None else bytes(n)
                if cached != stored:
                    diff += sum(1 for x, y in zip(cached, stored) if x != y)
            a += n
        return diff / length

    def crash_snapshot(self) -> MemoryImage:
        """Copy of NVM at a crash; cache contents are discarded and the machine is consumed."""
        img = self.memory.copy()
        for lv in self.levels:
            for s in lv.sets:
                s.clear()
        self.consumed = True
        return img

    @property
    def nvm_write_count(self) -> int:
        return self.memory.nvm_write_count


def dump_memory(image: MemoryImage, path) -> None:
    Path(path).write_text(image.dump(), encoding="utf-8")


def byte_diff(a: bytes, b: bytes) -> int:
    return sum(1 for x, y in zip(a, b) if x != y)


def lines_covering(addr: int, length: int, line_size: int) -> range:
    if length <= 0:
        return range(0)
    return range(addr // line_size, (addr + length - 1) // line_size + 1)
