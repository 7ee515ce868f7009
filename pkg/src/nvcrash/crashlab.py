"""Crash-test campaigns: sample crash points, crash, restart, classify.

Each test owns a fresh machine, so tests are independent and can be fanned out
to worker processes; records are always returned sorted by ``test_id``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .plan import PersistencePlan
from .simcache import CacheConfig, FlushKind, SimMachine
from .workloads import (
    AcceptanceResult,
    Completed,
    Crashed,
    KernelDiverged,
    KernelSpec,
    RestartFault,
    golden_run,
    RunContext,
    make_kernel,
    restart_kernel,
    run_kernel,
)
from .workloads import _initialize

log = logging.getLogger(__name__)


class InvalidCampaign(ValueError):
    pass


class Outcome(str, enum.Enum):
    S1 = "S1"  # recomputed, no extra iterations
    S2 = "S2"  # recomputed with extra iterations
    S3 = "S3"  # interruption
    S4 = "S4"  # verification failed


@dataclass
class CrashRecord:
    test_id: int
    crash_op_index: int
    region_id: int
    iteration: int
    rates: dict
    outcome: Outcome
    extra_iterations: int

    @property
    def success(self) -> int:
        return int(self.outcome is Outcome.S1)


def classify_outcome(result, baseline_iterations: int) -> Outcome:
    """Map a restart result (or the exception it raised) to S1..S4."""
    if isinstance(result, KernelDiverged):
        return Outcome.S4
    if isinstance(result, BaseException):
        return Outcome.S3
    if not result.passed:
        return Outcome.S4
    if result.iterations_used <= baseline_iterations:
        return Outcome.S1
    return Outcome.S2


def sample_crash_points(total_ops: int, n: int, seed: int) -> np.ndarray:
    if total_ops < 1 or n < 1:
        raise InvalidCampaign("need total_ops >= 1 and n >= 1")
    return np.random.default_rng(seed).integers(0, total_ops, size=n)


def campaign_converged(history: Sequence[float], window: int = 3, epsilon: float = 0.05) -> bool:
    if not len(history):
        raise ValueError("history must be non-empty")
    tail = list(history)[-window:]
    return max(tail) - min(tail) <= epsilon


@dataclass
class CampaignResult:
    records: list
    region_ids: list
    candidates: list
    baseline_iterations: int
    total_ops: int
    a_k: dict
    plan: Optional[PersistencePlan] = None
    y_history: list = field(default_factory=list)

    @property
    def n_tests(self) -> int:
        return len(self.records)

    @property
    def Y(self) -> float:
        return sum(r.success for r in self.records) / self.n_tests

    def fraction(self, outcome: Outcome) -> float:
        return sum(r.outcome is outcome for r in self.records) / self.n_tests

    def landings(self) -> dict:
        out = {rid: 0 for rid in self.region_ids}
        for r in self.records:
            out[r.region_id] += 1
        return out

    def c_k(self) -> dict:
        """Per-region S1 fraction; ``None`` where no crash landed."""
        hits = {rid: 0 for rid in self.region_ids}
        for r in self.records:
            hits[r.region_id] += r.success
        land = self.landings()
        return {rid: (hits[rid] / land[rid] if land[rid] else None) for rid in self.region_ids}

    def landing_a_k(self) -> dict:
        land = self.landings()
        return {rid: land[rid] / self.n_tests for rid in self.region_ids}

    @property
    def converged(self) -> bool:
        return bool(self.y_history) and campaign_converged(self.y_history)

    def rate_matrix(self, names=None) -> np.ndarray:
        names = self.candidates if names is None else names
        return np.array([[r.rates[n] for n in names] for r in self.records], dtype=float)

    def success_vector(self) -> np.ndarray:
        return np.array([r.success for r in self.records], dtype=float)

    # -- serialization -------------------------------------------------------

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["test_id", "crash_op_index", "region_id", "iteration", "outcome", "extra_iterations"]
            + [f"icr_{n}" for n in self.candidates]
        )
        for r in sorted(self.records, key=lambda r: r.test_id):
            w.writerow(
                [r.test_id, r.crash_op_index, r.region_id, r.iteration, r.outcome.value, r.extra_iterations]
                + [f"{r.rates[n]:.6f}" for n in self.candidates]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "Y": self.Y,
            "c_k": {str(k): v for k, v in self.c_k().items()},
            "n_tests": self.n_tests,
            "converged": self.converged,
            "outcomes": {o.value: self.fraction(o) for o in Outcome},
            "landings": {str(k): v for k, v in self.landings().items()},
            "a_k": {str(k): v for k, v in self.a_k.items()},
            "baseline_iterations": self.baseline_iterations,
            "total_ops": self.total_ops,
            "candidates": list(self.candidates),
            "regions": [str(r) for r in self.region_ids],
            "y_history": self.y_history,
            "plan": self.plan.to_dict() if self.plan is not None else None,
            "notes": [
                "c_k is null for regions without crash landings; the planner substitutes Y",
                "checkpoint write model counts NVM-side writes only",
            ],
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "campaign.csv").write_text(self.csv_text(), encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, out_dir) -> "CampaignResult":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        records = []
        with open(out / "campaign.csv", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cands = [c[4:] for c in reader.fieldnames if c.startswith("icr_")]
            for row in reader:
                records.append(
                    CrashRecord(
                        test_id=int(row["test_id"]),
                        crash_op_index=int(row["crash_op_index"]),
                        region_id=int(row["region_id"]),
                        iteration=int(row["iteration"]),
                        rates={n: float(row[f"icr_{n}"]) for n in cands},
                        outcome=Outcome(row["outcome"]),
                        extra_iterations=int(row["extra_iterations"]),
                    )
                )
        plan = PersistencePlan.from_dict(summary["plan"]) if summary.get("plan") else None
        return cls(
            records=records,
            region_ids=[int(r) for r in summary["regions"]],
            candidates=cands,
            baseline_iterations=int(summary["baseline_iterations"]),
            total_ops=int(summary["total_ops"]),
            a_k={int(k): v for k, v in summary["a_k"].items()},
            plan=plan,
            y_history=list(summary.get("y_history", [])),
        )


def run_test(
    spec: KernelSpec,
    config: CacheConfig,
    plan: Optional[PersistencePlan],
    crash_op: int,
    test_id: int,
    baseline_iterations: int,
) -> CrashRecord:
    crashed = run_kernel(spec, SimMachine(config), plan, crash_at=int(crash_op))
    if not isinstance(crashed, Crashed):
        raise InvalidCampaign(f"crash point {crash_op} did not trigger")
    try:
        res = restart_kernel(spec, crashed.snapshot, SimMachine(config), baseline_iterations)
    except (RestartFault, KernelDiverged) as exc:
        res = exc
    outcome = classify_outcome(res, baseline_iterations)
    extra = 0
    if isinstance(res, AcceptanceResult) and res.passed:
        extra = max(0, res.iterations_used - baseline_iterations)
    return CrashRecord(
        test_id, crashed.crash_op_index, crashed.region_id, crashed.iteration, crashed.rates, outcome, extra
    )


def _run_batch(args):
    spec, config, plan, items, baseline = args
    return [run_test(spec, config, plan, op, tid, baseline) for tid, op in items]


def run_campaign(
    spec: KernelSpec,
    plan: Optional[PersistencePlan] = None,
    n_tests: int = 200,
    seed: int = 0,
    config: Optional[CacheConfig] = None,
    jobs: int = 1,
    crash_points: Optional[Sequence[int]] = None,
    checkpoint_every: int = 50,
) -> CampaignResult:
    """Run ``n_tests`` crash/restart tests with uniformly sampled crash points.

    Crash points are drawn once from ``seed`` up front, so results do not
    depend on ``jobs``.  ``crash_points`` overrides sampling.
    """
    config = config if config is not None else CacheConfig.desk()
    base = golden_run(spec)
    g = golden_run(spec, plan) if plan is not None else base
    if crash_points is None:
        if n_tests < 1:
            raise InvalidCampaign("n_tests must be >= 1")
        points = sample_crash_points(g.total_ops, n_tests, seed)
    else:
        points = np.asarray(list(crash_points), dtype=np.int64)
        if not len(points):
            raise InvalidCampaign("empty crash point list")
    items = list(enumerate(int(p) for p in points))
    baseline = base.baseline_iterations
    if jobs > 1 and len(items) > 1:
        chunks = [items[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_run_batch, [(spec, config, plan, c, baseline) for c in chunks])
            records = [r for part in parts for r in part]
    else:
        records = _run_batch((spec, config, plan, items, baseline))
    records.sort(key=lambda r: r.test_id)

    history = []
    hits = 0
    for i, r in enumerate(records, 1):
        hits += r.success
        if i % checkpoint_every == 0 or i == len(records):
            history.append(hits / i)
    kernel = make_kernel(spec, config.line_size)
    result = CampaignResult(
        records=records,
        region_ids=kernel.regions.ids,
        candidates=[o.name for o in kernel.registry.candidates],
        baseline_iterations=baseline,
        total_ops=g.total_ops,
        a_k=g.a_k,
        plan=plan,
        y_history=history,
    )
    log.info("%s campaign: n=%d Y=%.3f", spec.kernel, result.n_tests, result.Y)
    return result


# -- NVM write accounting ----------------------------------------------------

@dataclass
class WriteComparison:
    easycrash_writes: int
    chk_critical_writes: int
    chk_all_candidates_writes: int
    persistence_ops: int
    max_writes_per_persist: int
    baseline_writes: int
    llc_lines: int


def _checkpoint(m: SimMachine, objects, dest_base: int) -> int:
    """Copy ``objects`` through the cache into a fresh NVM region, then flush it."""
    ls = m.line_size
    before = m.nvm_write_count
    dest = dest_base
    for obj in objects:
        for off in range(0, obj.length, ls):
            n = min(ls, obj.length - off)
            m.write(dest + off, m.read(obj.base + off, n))
        m.flush_range(dest, obj.length, FlushKind.FLUSH_OPT)
        dest += -(-obj.length // ls) * ls
    return m.nvm_write_count - before


def compare_writes(
    spec: KernelSpec,
    plan: Optional[PersistencePlan],
    config: Optional[CacheConfig] = None,
) -> WriteComparison:
    """Extra NVM writes of a plan versus one checkpoint of critical / all candidates.

    EasyCrash writes are the write-backs caused by the plan's flushes over a
    crash-free run.  A checkpoint is taken once, at the end of the middle
    iteration, by streaming each object through the cache into a separate NVM
    area and flushing it; its cost is every NVM write that happens meanwhile.
    """
    config = config if config is not None else CacheConfig.desk()
    m = SimMachine(config)
    done = run_kernel(spec, m, plan)
    base_m = SimMachine(config)
    run_kernel(spec, base_m, None)

    g = golden_run(spec)
    mid = (g.baseline_iterations + 1) // 2
    critical = list(plan.critical_objects) if plan is not None else []

    def chk_writes(names):
        kernel = make_kernel(spec, config.line_size)
        reg = kernel.registry
        order = [reg[n] for n in critical if n in names] + [
            o for o in reg.candidates if o.name in names and o.name not in critical
        ]
        mc = SimMachine(config)
        _initialize(kernel, mc)
        ctx = RunContext(mc, kernel, None)
        it = 1
        while it <= mid:
            ctx.iteration = it
            kernel.iteration(mc, ctx)
            it += 1
        dest = 1 << 32
        return _checkpoint(mc, order, dest)

    names_all = [o.name for o in make_kernel(spec, config.line_size).registry.candidates]
    return WriteComparison(
        easycrash_writes=done.persist_writes,
        chk_critical_writes=chk_writes(critical) if critical else 0,
        chk_all_candidates_writes=chk_writes(names_all),
        persistence_ops=sum(done.persist_ops.values()),
        max_writes_per_persist=done.max_persist_writes,
        baseline_writes=base_m.nvm_write_count,
        llc_lines=config.llc_lines,
    )
