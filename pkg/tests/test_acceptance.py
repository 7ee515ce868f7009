"""Acceptance suite: one check per criterion, each at its stated tolerance and time limit.

Every check prints a single PASS/FAIL line (collected and repeated in the pytest
terminal summary).  Run directly with ``python3 tests/test_acceptance.py`` to
get just those lines.
"""
from __future__ import annotations

import itertools
import math
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from nvcrash.crashlab import compare_writes, run_campaign  # noqa: E402
from nvcrash.effmodel import (  # noqa: E402
    EfficiencyParams,
    baseline_efficiency,
    derive_tau,
    easycrash_efficiency,
    efficiency_gap,
    improvement,
    mtbf_with_easycrash,
    young_interval,
)
from nvcrash.plan import NEVER  # noqa: E402
from nvcrash.planner import (  # noqa: E402
    WEIGHT_RESOLUTION,
    RegionOption,
    _units,
    interpolate_c,
    iteration_boundary_plan,
    rankdata,
    run_pipeline,
    solve_mck,
    spearman,
)
from nvcrash.simcache import CacheConfig, FlushKind, LevelConfig, SimMachine  # noqa: E402
from nvcrash.workloads import KernelSpec, make_kernel  # noqa: E402
from oracles import ShadowMemory, byte_diff_rate, exhaustive_mck, rank_pearson  # noqa: E402

RESULTS: list = []

LINE = 64
TINY = CacheConfig(levels=(LevelConfig(256, 2), LevelConfig(512, 4)))
BIG = CacheConfig(levels=(LevelConfig(4096, 4), LevelConfig(16384, 8)))


def report(num: int, title: str, ok: bool, elapsed: float, limit: float, detail: str) -> bool:
    timed = elapsed < limit
    status = "PASS" if ok and timed else "FAIL"
    line = f"[{status}] criterion {num:2d}: {title} ({elapsed:.2f}s, limit {limit:g}s) {detail}"
    RESULTS.append(line)
    print(line)
    return ok and timed


# -- 1 ------------------------------------------------------------------------

payload = st.binary(min_size=1, max_size=LINE)
line_no = st.integers(0, 31)
kinds = st.sampled_from(list(FlushKind))


@settings(max_examples=25, deadline=None)
@given(line_no, payload, kinds)
def _flush_then_crash(ln, data, kind):
    m = SimMachine(TINY)
    m.write(ln * LINE, data)
    m.flush_range(ln * LINE, len(data), kind)
    assert m.crash_snapshot().read(ln * LINE, len(data)) == data


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(line_no, payload), min_size=1, max_size=10))
def _no_flush_then_crash(writes):
    m = SimMachine(BIG)
    for ln, data in writes:
        m.write(ln * LINE, data)
    snap = m.crash_snapshot()
    assert all(snap.read(ln * LINE, len(d)) == bytes(len(d)) for ln, d in writes)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), payload)
def _eviction_persists(s, data):
    m = SimMachine(CacheConfig(levels=(LevelConfig(256, 2),)))
    first = s % 2
    m.write(first * LINE, data)
    # two more lines in the same set push the first one out
    m.write((first + 2) * LINE, b"x")
    m.write((first + 4) * LINE, b"y")
    assert m.crash_snapshot().read(first * LINE, len(data)) == data


@settings(max_examples=25, deadline=None)
@given(line_no, payload, kinds)
def _clean_flush_free(ln, data, kind):
    m = SimMachine(TINY)
    m.write(ln * LINE, data)
    m.flush_line(ln * LINE, FlushKind.WRITEBACK_NOINV)
    before = m.nvm_write_count
    assert m.flush_line(ln * LINE, kind) == 0 and m.nvm_write_count == before


@settings(max_examples=25, deadline=None)
@given(line_no, payload)
def _noinv_resident(ln, data):
    m = SimMachine(TINY)
    m.write(ln * LINE, data)
    m.flush_line(ln * LINE, FlushKind.WRITEBACK_NOINV)
    hits = m.stats.hits[0]
    m.read(ln * LINE, len(data))
    assert m.stats.hits[0] == hits + 1 and not m.dirty_lines()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3000), st.binary(min_size=1, max_size=90)), min_size=1, max_size=25))
def _writeback_all_clean(writes):
    m = SimMachine(TINY)
    shadow = ShadowMemory()
    for a, d in writes:
        m.write(a, d)
        shadow.write(a, d)
    m.writeback_all()
    assert not m.dirty_lines()
    snap = m.crash_snapshot()
    assert all(snap.read(a, 1)[0] == v for a, v in shadow.bytes.items())


def criterion_1():
    t = time.perf_counter()
    failures = []
    for f in (_flush_then_crash, _no_flush_then_crash, _eviction_persists, _clean_flush_free, _noinv_resident, _writeback_all_clean):
        try:
            f()
        except Exception as exc:  # noqa: BLE001
            failures.append(f"{f.__name__}: {exc!r}")
    el = time.perf_counter() - t
    return report(1, "flush semantics", not failures, el, 1.0, "; ".join(failures) or "6/6 scenarios")


# -- 2 ------------------------------------------------------------------------

def criterion_2():
    t = time.perf_counter()
    rng = random.Random(20)
    mismatches = 0
    for _ in range(1000):
        m = SimMachine(TINY)
        shadow = ShadowMemory()
        m.write(0, bytes(640))
        shadow.write(0, bytes(640))
        m.writeback_all()
        for _ in range(rng.randint(1, 40)):
            r = rng.random()
            addr = rng.randrange(0, 630)
            if r < 0.6:
                data = bytes(rng.randrange(4) for _ in range(rng.randint(1, 10)))
                m.write(addr, data)
                shadow.write(addr, data)
            elif r < 0.8:
                m.read(addr, rng.randint(1, min(10, 640 - addr)))
            else:
                m.flush_line(addr, rng.choice(list(FlushKind)))
        a = rng.randrange(0, 320)
        n = rng.randint(1, 640 - a)
        rate = m.inconsistent_rate(a, n)
        if rate != byte_diff_rate(shadow, m.crash_snapshot(), a, n):
            mismatches += 1
    el = time.perf_counter() - t
    return report(2, "inconsistent-rate oracle", mismatches == 0, el, 10.0, f"{mismatches}/1000 mismatches")


# -- 3 ------------------------------------------------------------------------

_PERMS: dict = {}


def exact_perm_p(x, y):
    """Exact two-sided permutation p-value, vectorized over all n! orderings."""
    n = len(x)
    if n not in _PERMS:
        _PERMS[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return 1.0
    obs = abs(float(rx @ ry)) / den
    r = np.abs(ry[_PERMS[n]] @ rx) / den
    return float(np.mean(r >= obs - 1e-12))


def criterion_3():
    t = time.perf_counter()
    rng = np.random.default_rng(33)
    worst = 0.0
    agree = compared = 0
    small = [0, 0]  # (agree, compared) restricted to n <= 5, where n! is too small to reach p < 0.01
    for _ in range(500):
        n = int(rng.integers(3, 21))
        x = rng.integers(0, 5, n)  # small range, so plenty of ties
        y = rng.integers(0, 5, n)
        rho, p = spearman(x, y)
        worst = max(worst, abs(rho - rank_pearson(list(x), list(y))))
        if n <= 9:
            same = (p < 0.01) == (exact_perm_p(x, y) < 0.01)
            compared += 1
            agree += same
            if n <= 5:
                small[0] += same
                small[1] += 1
    el = time.perf_counter() - t
    frac = agree / compared
    ok = worst <= 1e-12 and frac >= 0.99
    return report(
        3, "spearman oracle", ok, el, 30.0,
        f"max |rho err|={worst:.1e}; accept/reject agreement {agree}/{compared}={frac:.3f} (need >= 0.99); "
        f"n<=5: {small[0]}/{small[1]}, 6<=n<=9: {agree - small[0]}/{compared - small[1]}",
    )


# -- 4 ------------------------------------------------------------------------

def criterion_4():
    t = time.perf_counter()
    rng = random.Random(44)
    bad = 0
    for _ in range(200):
        groups, total = [], 0
        while True:
            k = rng.randint(1, 3)
            if total + k + 1 > 12 or len(groups) >= 4:
                break
            total += k + 1
            rid = len(groups)
            opts = [RegionOption(rid, 2 ** i, rng.randint(1, 200) * WEIGHT_RESOLUTION, float(rng.randint(0, 50))) for i in range(k)]
            groups.append(opts + [RegionOption(rid, NEVER, 0.0, 0.0)])
        cap = rng.randint(0, 300)
        choice = solve_mck(groups, cap)
        got = sum(g[i].value for g, i in zip(groups, choice))
        if got != exhaustive_mck(groups, cap, lambda o: _units(o.weight, WEIGHT_RESOLUTION)):
            bad += 1
    el = time.perf_counter() - t
    return report(4, "knapsack optimality", bad == 0, el, 5.0, f"{bad}/200 non-optimal")


# -- 5 ------------------------------------------------------------------------

def criterion_5():
    t = time.perf_counter()
    cases = [(0.2, 0.8), (0.0, 1.0), (0.37, 0.91), (0.5, 0.5)]
    ok = all(interpolate_c(c, cm, 1) == cm and interpolate_c(c, cm, NEVER) == c for c, cm in cases)
    el = time.perf_counter() - t
    return report(5, "interpolation endpoints", ok, el, 1.0, "x=1 -> c_max, NEVER -> c")


# -- 6 ------------------------------------------------------------------------

def criterion_6():
    t = time.perf_counter()
    T = young_interval(32, 43200)
    mt = mtbf_with_easycrash(43200, 0.82)
    eff = baseline_efficiency(EfficiencyParams(MTBF=43200, T_chk=32)).efficiency
    red = max(
        abs(
            easycrash_efficiency(EfficiencyParams(T_chk=tc, R=0, t_s=0, T_r_prime=tr)).efficiency
            - baseline_efficiency(EfficiencyParams(T_chk=tc)).efficiency
        )
        for tc in (32, 320, 3200)
        for tr in (0.64, 32.0)
    )
    ok = abs(T - 1662.77) <= 0.01 and mt == 240000 and abs(eff - 0.961) <= 0.002 and red <= 1e-12
    el = time.perf_counter() - t
    return report(6, "closed-form efficiency", ok, el, 1.0, f"T={T:.4f} MTBF'={mt!r} eff={eff:.5f} R=0 gap={red:.1e}")


# -- 7 ------------------------------------------------------------------------

def criterion_7():
    t = time.perf_counter()
    p = EfficiencyParams(R=0.82, t_s=0.03, nodes=100_000)
    imps = [improvement(p.with_(T_chk=tc)) for tc in (32.0, 320.0, 3200.0)]
    positive = all(i > 0 for i in imps)
    monotone = imps[0] <= imps[1] <= imps[2]
    band = 0.05 <= imps[2] <= 0.30
    el = time.perf_counter() - t
    detail = (
        "improvement at T_chk=32/320/3200: " + ", ".join(f"{i:+.4f}" for i in imps)
        + f"; positive={positive} monotone={monotone} in[0.05,0.30]={band}"
    )
    return report(7, "efficiency trend", positive and monotone and band, el, 1.0, detail)


# -- 8 ------------------------------------------------------------------------

def criterion_8():
    t = time.perf_counter()
    parts, ok = [], True
    for name in ("jacobi2d", "kmeans"):
        spec = KernelSpec.default(name)
        pipe = run_pipeline(spec, n_tests=200, seed=8)
        y_none = pipe.baseline.Y
        y_plan = run_campaign(spec, pipe.plan, 200, seed=8).Y
        cands = [o.name for o in make_kernel(spec).registry.candidates]
        y_all = run_campaign(spec, iteration_boundary_plan(spec, cands), 200, seed=8).Y
        crit = pipe.report.critical
        y_sel = run_campaign(spec, iteration_boundary_plan(spec, crit), 200, seed=8).Y if crit else y_none
        ok &= y_plan >= y_none and abs(y_sel - y_all) <= 0.10
        parts.append(
            f"{name}: Y none={y_none:.3f} plan={y_plan:.3f} selected{crit}={y_sel:.3f} all={y_all:.3f}"
        )
    el = time.perf_counter() - t
    return report(8, "campaign recomputability ordering", ok, el, 300.0, "; ".join(parts))


# -- 9 ------------------------------------------------------------------------

def criterion_9():
    t = time.perf_counter()
    small = KernelSpec.default("kmeans")
    plan = run_pipeline(small, n_tests=200, seed=9).plan
    big = KernelSpec("kmeans", 1024, 0.01)
    cfg = CacheConfig.desk()
    cand_bytes = sum(o.length for o in make_kernel(big).registry.candidates)
    w = compare_writes(big, plan, cfg)
    ok = (
        cand_bytes > cfg.levels[-1].capacity
        and w.persistence_ops > 0
        and w.max_writes_per_persist <= w.llc_lines
        and w.easycrash_writes < w.chk_all_candidates_writes
    )
    el = time.perf_counter() - t
    detail = (
        f"kmeans n=1024, candidates {cand_bytes}B vs LLC {cfg.levels[-1].capacity}B; plan {dict(plan.frequencies)} on "
        f"{list(plan.critical_objects)}: max/persist={w.max_writes_per_persist} (LLC lines {w.llc_lines}), "
        f"total={w.easycrash_writes} vs checkpoint-all={w.chk_all_candidates_writes}"
    )
    return report(9, "write-count ordering", ok, el, 60.0, detail)


# -- 10 -----------------------------------------------------------------------

def criterion_10():
    t = time.perf_counter()
    parts, ok = [], True
    for tc in (32.0, 320.0, 3200.0):
        p = EfficiencyParams(T_chk=tc, t_s=0.03)
        tau = derive_tau(p).tau
        at, above, below = efficiency_gap(p, tau), efficiency_gap(p, tau + 1e-3), efficiency_gap(p, tau - 1e-3)
        ok &= above > 0 >= below and abs(at) <= 1e-5
        parts.append(f"T_chk={tc:g}: tau={tau:.6f}")
    el = time.perf_counter() - t
    return report(10, "tau boundary", ok, el, 1.0, "; ".join(parts))


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_criterion(check):
    assert check()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
