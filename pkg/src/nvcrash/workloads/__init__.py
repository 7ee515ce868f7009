"""Restartable iterative kernels executed through a :class:`~nvcrash.simcache.SimMachine`.

A run has an init phase (every object written, then one ``writeback_all`` so
NVM starts consistent) followed by the main loop.  The persisted loop
iterator is the last thing each iteration writes and flushes, so NVM always
knows which iteration a crash interrupted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..plan import PersistencePlan
from ..simcache import CacheConfig, CrashTriggered, FlushKind, MemoryImage, SimError, SimMachine
from .base import (
    AcceptanceResult,
    CodeRegionMap,
    DataObject,
    DataObjectRegistry,
    Kernel,
    KernelDiverged,
    KernelSpec,
    Region,
    RegionKind,
    RestartFault,
    RunContext,
)
from .cg import CGSolve
from .jacobi import Jacobi2D
from .kmeans import KMeans

KERNELS = {cls.name: cls for cls in (Jacobi2D, CGSolve, KMeans)}

__all__ = [
    "AcceptanceResult",
    "CodeRegionMap",
    "Completed",
    "Crashed",
    "DataObject",
    "DataObjectRegistry",
    "GoldenRun",
    "Kernel",
    "KernelDiverged",
    "KernelSpec",
    "Region",
    "RegionKind",
    "RestartFault",
    "golden_run",
    "make_kernel",
    "restart_kernel",
    "run_kernel",
]


def make_kernel(spec: KernelSpec, line_size: int = 64) -> Kernel:
    return KERNELS[spec.kernel](spec, line_size)


@dataclass
class Completed:
    result: AcceptanceResult
    total_ops: int
    region_ops: dict
    persist_ops: dict
    persist_writes: int
    iteration_starts: list
    max_persist_writes: int = 0


@dataclass
class Crashed:
    crash_op_index: int
    region_id: int
    iteration: int
    snapshot: MemoryImage
    rates: dict = field(default_factory=dict)


def _write_iterator(m: SimMachine, kernel: Kernel, value: int):
    it = kernel.registry.iterator
    m.write(it.base, int(value).to_bytes(8, "little", signed=True))


def _initialize(kernel: Kernel, m: SimMachine):
    kernel.initialize(m)
    _write_iterator(m, kernel, 1)
    m.writeback_all(invalidate=False)


def _main_loop(kernel: Kernel, m: SimMachine, ctx: RunContext, start: int, cap: int):
    it_obj = kernel.registry.iterator
    it = start
    converged = False
    while it <= cap:
        ctx.iteration = it
        ctx.iteration_starts.append(m.op_count)
        converged = kernel.iteration(m, ctx)
        _write_iterator(m, kernel, it + 1)
        m.flush_line(it_obj.base, FlushKind.FLUSH_OPT)
        if converged:
            break
        it += 1
    ctx.finish()
    return min(it, cap), converged


def run_kernel(
    spec: KernelSpec,
    machine: SimMachine,
    plan: Optional[PersistencePlan] = None,
    crash_at: Optional[int] = None,
):
    """Execute ``spec`` on ``machine``; crash before main-loop op ``crash_at`` if given.

    Returns :class:`Crashed` (with per-candidate inconsistent rates sampled at
    the crash instant) or :class:`Completed`.
    """
    kernel = make_kernel(spec, machine.line_size)
    _initialize(kernel, machine)
    loop_start = machine.op_count
    ctx = RunContext(machine, kernel, plan)
    if crash_at is not None:
        if crash_at < 0:
            raise ValueError("crash_at must be non-negative")
        machine.crash_at = loop_start + crash_at
    try:
        used, converged = _main_loop(kernel, machine, ctx, 1, spec.max_iterations)
    except CrashTriggered as sig:
        machine.crash_at = None
        rates = {
            o.name: machine.inconsistent_rate(o.base, o.length) for o in kernel.registry.candidates
        }
        region = ctx.region if ctx.region is not None else kernel.regions.ids[0]
        snap = machine.crash_snapshot()
        return Crashed(sig.op_index - loop_start, region, max(ctx.iteration, 1), snap, rates)
    machine.crash_at = None
    total = machine.op_count - loop_start
    if crash_at is not None:
        raise ValueError(f"crash_at={crash_at} is outside the main loop ({total} ops)")
    result = kernel.verify(machine, used, converged)
    starts = [s - loop_start for s in ctx.iteration_starts]
    return Completed(result, total, dict(ctx.region_ops), dict(ctx.persist_ops), ctx.persist_writes, starts, ctx.max_persist_writes)


@dataclass(frozen=True)
class GoldenRun:
    baseline_iterations: int
    total_ops: int
    region_ops: tuple  # (region_id, ops) pairs
    persist_ops: tuple
    iteration_starts: tuple
    passed: bool

    @property
    def a_k(self) -> dict:
        return {rid: ops / self.total_ops for rid, ops in self.region_ops}

    def to_dict(self) -> dict:
        return {
            "baseline_iterations": self.baseline_iterations,
            "total_ops": self.total_ops,
            "region_ops": {str(r): o for r, o in self.region_ops},
            "a_k": {str(r): a for r, a in self.a_k.items()},
        }


_GOLDEN_CACHE: dict = {}


def golden_run(spec: KernelSpec, plan: Optional[PersistencePlan] = None) -> GoldenRun:
    """Crash-free reference run.  Op counts do not depend on cache geometry,
    so it runs on a cacheless machine."""
    key = (spec, plan)
    hit = _GOLDEN_CACHE.get(key)
    if hit is not None:
        return hit
    done = run_kernel(spec, SimMachine(CacheConfig(levels=())), plan)
    if not done.result.passed:
        raise KernelDiverged(f"golden run of {spec.kernel} does not pass its own acceptance check")
    g = GoldenRun(
        baseline_iterations=done.result.iterations_used,
        total_ops=done.total_ops,
        region_ops=tuple(sorted(done.region_ops.items())),
        persist_ops=tuple(sorted(done.persist_ops.items())),
        iteration_starts=tuple(done.iteration_starts),
        passed=done.result.passed,
    )
    _GOLDEN_CACHE[key] = g
    return g


def restart_kernel(
    spec: KernelSpec,
    snapshot: MemoryImage,
    machine: SimMachine,
    baseline_iterations: Optional[int] = None,
) -> AcceptanceResult:
    """Resume from NVM contents left by a crash.

    Non-candidate data is rebuilt by re-running initialization; candidates and
    the iterator are loaded from ``snapshot``.  The loop then continues from
    the persisted iteration until convergence or ``2 x baseline`` iterations.
    """
    if baseline_iterations is None:
        baseline_iterations = golden_run(spec).baseline_iterations
    cap = 2 * baseline_iterations
    kernel = make_kernel(spec, machine.line_size)
    _initialize(kernel, machine)
    machine.writeback_all(invalidate=True)
    reg = kernel.registry
    for obj in reg.candidates + [reg.iterator]:
        machine.preload(obj.base, snapshot.read(obj.base, obj.length))
    start = int.from_bytes(snapshot.read(reg.iterator.base, 8), "little", signed=True)
    if not 1 <= start <= cap:
        raise RestartFault(f"persisted iterator {start} outside [1, {cap}]")
    ctx = RunContext(machine, kernel, None)
    try:
        with np.errstate(all="ignore"):
            used, converged = _main_loop(kernel, machine, ctx, start, cap)
            return kernel.verify(machine, used, converged)
    except KernelDiverged:
        raise
    except (IndexError, ValueError, ZeroDivisionError, OverflowError, SimError) as exc:
        raise RestartFault(f"{type(exc).__name__}: {exc}") from exc
