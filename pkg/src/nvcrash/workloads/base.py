"""Registry types and the execution context shared by the built-in kernels."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..plan import PersistencePlan
from ..simcache import FlushKind, SimMachine


class KernelDiverged(RuntimeError):
    pass


class RestartFault(RuntimeError):
    """The restarted program could not run to completion."""


class RegionKind(str, enum.Enum):
    LOOP = "LOOP"
    STRAIGHT = "STRAIGHT"


@dataclass(frozen=True)
class KernelSpec:
    kernel: str
    size: int
    tolerance: float
    seed: int = 0
    max_iterations: int = 5000

    def __post_init__(self):
        if self.kernel not in KERNEL_DEFAULTS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNEL_DEFAULTS)}")
        if self.size < 1:
            raise ValueError("size must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @classmethod
    def default(cls, kernel: str) -> "KernelSpec":
        size, tol = KERNEL_DEFAULTS[kernel]
        return cls(kernel, size, tol)

    def to_dict(self) -> dict:
        return {"kernel": self.kernel, "size": self.size, "tolerance": self.tolerance, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        kernel = d["kernel"]
        size, tol = KERNEL_DEFAULTS.get(kernel, (None, None))
        return cls(
            kernel=kernel,
            size=int(d.get("size", size)),
            tolerance=float(d.get("tolerance", tol)),
            seed=int(d.get("seed", 0)),
            max_iterations=int(d.get("max_iterations", 5000)),
        )

    @classmethod
    def from_json(cls, path) -> "KernelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# (size, tolerance) tuned for the desk cache geometry
KERNEL_DEFAULTS = {
    "jacobi2d": (8, 1e-3),
    "cgsolve": (8, 1e-6),
    "kmeans": (128, 0.01),
}


@dataclass(frozen=True)
class DataObject:
    name: str
    base: int
    length: int
    read_only: bool = False

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass
class DataObjectRegistry:
    objects: list = field(default_factory=list)
    iterator: Optional[DataObject] = None
    line_size: int = 64
    _next: int = 0x1000

    def allocate(self, name: str, length: int, read_only: bool = False) -> DataObject:
        """Line-aligned bump allocation, so distinct objects never share a line."""
        if any(o.name == name for o in self.objects):
            raise ValueError(f"duplicate object {name!r}")
        obj = DataObject(name, self._next, length, read_only)
        ls = self.line_size
        self._next += -(-length // ls) * ls
        self.objects.append(obj)
        return obj

    def allocate_iterator(self) -> DataObject:
        ls = self.line_size
        self.iterator = DataObject("__iter__", self._next, 8)
        self._next += ls
        return self.iterator

    @property
    def candidates(self) -> list:
        return [o for o in self.objects if not o.read_only]

    def __getitem__(self, name: str) -> DataObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    @property
    def footprint(self) -> int:
        return sum(o.length for o in self.objects)


@dataclass(frozen=True)
class Region:
    region_id: int
    name: str
    kind: RegionKind
    trip: int = 1  # inner-loop iterations per visit (LOOP regions)

    def persist_ops_per_visit(self, freq: Optional[int]) -> int:
        if freq is None:
            return 0
        if self.kind is RegionKind.STRAIGHT:
            return 1
        return -(-self.trip // freq)


@dataclass
class CodeRegionMap:
    regions: list

    @property
    def ids(self) -> list:
        return [r.region_id for r in self.regions]

    def __getitem__(self, rid: int) -> Region:
        for r in self.regions:
            if r.region_id == rid:
                return r
        raise KeyError(rid)

    def kinds(self) -> dict:
        return {r.region_id: r.kind.value for r in self.regions}


@dataclass
class AcceptanceResult:
    passed: bool
    iterations_used: int
    value: float
    converged: bool = True


class RunContext:
    """Region markers, op attribution and plan-driven persistence for one run."""

    def __init__(self, machine: SimMachine, kernel: "Kernel", plan: Optional[PersistencePlan]):
        self.m = machine
        self.kernel = kernel
        self.plan = plan
        self.region: Optional[int] = None
        self.iteration = 0
        self.region_ops: dict = {r: 0 for r in kernel.regions.ids}
        self.persist_ops: dict = {r: 0 for r in kernel.regions.ids}
        self.persist_writes = 0
        self.max_persist_writes = 0
        self.iteration_starts: list = []
        self._mark = machine.op_count
        self._freq = None
        self._trip = 1
        if plan is not None and not plan.is_empty:
            reg = kernel.registry
            self._critical = [reg[name] for name in plan.critical_objects]
            self._kind = plan.kind
        else:
            self._critical = []
            self._kind = FlushKind.FLUSH_OPT

    def _close(self):
        if self.region is not None:
            self.region_ops[self.region] += self.m.op_count - self._mark
        self._mark = self.m.op_count

    def begin(self, region_id: int):
        self._close()
        self.region = region_id
        reg = self.kernel.regions[region_id]
        self._trip = reg.trip
        self._freq = self.plan.frequency(region_id) if self._critical else None

    def step(self, i: int):
        """Inner iteration ``i`` of the current LOOP region has finished."""
        x = self._freq
        if x is not None and ((i + 1) % x == 0 or i == self._trip - 1):
            self.persist()

    def end(self):
        """End of a STRAIGHT region."""
        if self._freq is not None:
            self.persist()

    def persist(self):
        m = self.m
        before = m.nvm_write_count
        for obj in self._critical:
            m.flush_range(obj.base, obj.length, self._kind)
        n = m.nvm_write_count - before
        self.persist_writes += n
        self.max_persist_writes = max(self.max_persist_writes, n)
        self.persist_ops[self.region] += 1

    def finish(self):
        self._close()


class Kernel:
    """A restartable iterative program whose every data access goes through a machine."""

    name = "kernel"

    def __init__(self, spec: KernelSpec, line_size: int = 64):
        self.spec = spec
        self.registry = DataObjectRegistry(line_size=line_size)
        self.regions = CodeRegionMap([])
        self.layout()
        self.registry.allocate_iterator()

    def layout(self):
        raise NotImplementedError

    def initialize(self, m: SimMachine):
        raise NotImplementedError

    def iteration(self, m: SimMachine, ctx: RunContext) -> bool:
        raise NotImplementedError

    def verify(self, m: SimMachine, iterations: int, converged: bool) -> AcceptanceResult:
        raise NotImplementedError


# typed accessors; one machine op each

def read_f64(m: SimMachine, obj: DataObject, start: int, count: int) -> np.ndarray:
    return np.frombuffer(m.read(obj.base + 8 * start, 8 * count), dtype="<f8")


def write_f64(m: SimMachine, obj: DataObject, start: int, values) -> None:
    m.write(obj.base + 8 * start, np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_i64(m: SimMachine, obj: DataObject, start: int, count: int) -> np.ndarray:
    return np.frombuffer(m.read(obj.base + 8 * start, 8 * count), dtype="<i8")


def write_i64(m: SimMachine, obj: DataObject, start: int, values) -> None:
    m.write(obj.base + 8 * start, np.ascontiguousarray(values, dtype="<i8").tobytes())
