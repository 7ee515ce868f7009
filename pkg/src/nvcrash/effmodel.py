"""System efficiency of checkpoint/restart with and without crash recomputation.

All times are in seconds.  A 10-year machine lifetime is split into useful
work, checkpoint writes, work lost on rollback, and recovery.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

TEN_YEARS = 315_360_000.0
HOUR = 3600.0


class PerfectRecomputability(ValueError):
    """R = 1: every crash recomputes, so no checkpoint interval is defined."""


def young_interval(T_chk: float, MTBF: float) -> float:
    if T_chk < 0 or MTBF <= 0:
        raise ValueError("need T_chk >= 0 and MTBF > 0")
    return math.sqrt(2.0 * T_chk * MTBF)


def mtbf_with_easycrash(MTBF: float, R: float) -> float:
    if R >= 1.0:
        raise PerfectRecomputability("R = 1 gives an unbounded MTBF")
    if R < 0:
        raise ValueError("R must be in [0, 1)")
    # 1 - 0.82 is not 0.18 in binary; go through the decimal R was written as
    return float(Fraction(repr(float(MTBF))) / (1 - Fraction(repr(float(R)))))


def mtbf_scaled(base_MTBF: float, base_nodes: int, nodes: int) -> float:
    if not nodes >= base_nodes >= 1:
        raise ValueError("need nodes >= base_nodes >= 1")
    return base_MTBF * base_nodes / nodes


def t_r_prime_estimate(non_readonly_bytes: float, nvm_bandwidth_bytes_per_s: float) -> float:
    if nvm_bandwidth_bytes_per_s <= 0:
        raise ValueError("bandwidth must be positive")
    return non_readonly_bytes / nvm_bandwidth_bytes_per_s


# 64 GB of live data per node read back at 100 GB/s
DEFAULT_T_R_PRIME = t_r_prime_estimate(64e9, 100e9)


@dataclass(frozen=True)
class EfficiencyParams:
    MTBF: float = 12 * HOUR
    T_chk: float = 32.0
    T_r: Optional[float] = None  # defaults to T_chk
    T_sync: Optional[float] = None  # defaults to T_chk / 2
    total_time: float = TEN_YEARS
    R: float = 0.0
    t_s: float = 0.0
    T_r_prime: float = DEFAULT_T_R_PRIME
    nodes: int = 100_000

    def __post_init__(self):
        if self.T_r is None:
            object.__setattr__(self, "T_r", self.T_chk)
        if self.T_sync is None:
            object.__setattr__(self, "T_sync", 0.5 * self.T_chk)
        if self.MTBF <= 0 or self.total_time <= 0 or self.T_chk < 0:
            raise ValueError("MTBF and total_time must be positive, T_chk non-negative")
        if min(self.T_r, self.T_sync, self.T_r_prime) < 0:
            raise ValueError("recovery times must be non-negative")
        if not 0.0 <= self.R <= 1.0:
            raise ValueError("R must be in [0, 1]")
        if not 0.0 <= self.t_s < 1.0:
            raise ValueError("t_s must be in [0, 1)")

    def with_(self, **kw) -> "EfficiencyParams":
        # T_r / T_sync follow T_chk unless given explicitly
        if "T_chk" in kw:
            if self.T_r == self.T_chk:
                kw.setdefault("T_r", None)
            if self.T_sync == 0.5 * self.T_chk:
                kw.setdefault("T_sync", None)
        return replace(self, **kw)


@dataclass
class EfficiencyResult:
    T: float
    N: float
    M: float
    M_rollback: float  # M'
    M_recompute: float  # M''
    T_vain: float
    useful: float
    efficiency: float
    thrashing: bool = False


def baseline_efficiency(p: EfficiencyParams) -> EfficiencyResult:
    T = young_interval(p.T_chk, p.MTBF)
    M = p.total_time / p.MTBF
    per_crash = T / 2 + p.T_r + p.T_sync
    return _finish(p, T, M, M, 0.0, per_crash, 0.0, 0.0)


def easycrash_efficiency(p: EfficiencyParams) -> EfficiencyResult:
    T = young_interval(p.T_chk, mtbf_with_easycrash(p.MTBF, p.R))
    M = p.total_time / p.MTBF
    m1 = M * (1.0 - p.R)
    m2 = M * p.R
    return _finish(p, T, M, m1, m2, T / 2 + p.T_r + p.T_sync, p.T_r_prime + p.T_sync, p.t_s)


def _finish(p, T, M, m1, m2, rollback_cost, recompute_cost, t_s) -> EfficiencyResult:
    lost = m1 * rollback_cost + m2 * recompute_cost
    if lost >= p.total_time or T + p.T_chk <= 0:
        return EfficiencyResult(T, 0.0, M, m1, m2, T / 2, 0.0, 0.0, thrashing=True)
    N = (p.total_time - lost) / (T + p.T_chk)
    useful = N * T * (1.0 - t_s)
    return EfficiencyResult(T, N, M, m1, m2, T / 2, useful, useful / p.total_time)


def improvement(p: EfficiencyParams) -> float:
    base = baseline_efficiency(p).efficiency
    return (easycrash_efficiency(p).efficiency - base) / base


def efficiency_gap(p: EfficiencyParams, R: float) -> float:
    q = replace(p, R=R)
    return easycrash_efficiency(q).efficiency - baseline_efficiency(q).efficiency


@dataclass
class TauResult:
    tau: float
    feasible: bool


def derive_tau(p: EfficiencyParams, tol: float = 1e-6) -> TauResult:
    """Smallest R with EasyCrash efficiency >= baseline; bisection on R."""
    if efficiency_gap(p, 0.0) >= 0:
        return TauResult(0.0, True)
    hi = 1.0 - 1e-12
    if efficiency_gap(p, hi) < 0:
        return TauResult(1.0, False)
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if efficiency_gap(p, mid) >= 0:
            hi = mid
        else:
            lo = mid
    return TauResult(hi, True)


SWEEP_HEADER = ["T_chk", "MTBF", "nodes", "R", "t_s", "eff_baseline", "eff_easycrash", "improvement", "tau"]


def sweep(p: EfficiencyParams, T_chks=(32.0, 320.0, 3200.0), node_counts=None, base_nodes: int = 100_000):
    """Rows for the efficiency CSV; MTBF is rescaled when ``node_counts`` is given."""
    rows = []
    for nodes in node_counts or (p.nodes,):
        mtbf = mtbf_scaled(p.MTBF, base_nodes, nodes) if node_counts else p.MTBF
        for tc in T_chks:
            q = p.with_(T_chk=float(tc), MTBF=mtbf, nodes=nodes)
            b = baseline_efficiency(q).efficiency
            e = easycrash_efficiency(q).efficiency
            rows.append([tc, mtbf, nodes, q.R, q.t_s, b, e, (e - b) / b if b else 0.0, derive_tau(q).tau])
    return rows
