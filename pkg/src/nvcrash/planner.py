"""Choosing what to persist and where.

Two steps: a rank-correlation test picks the data objects whose inconsistency
predicts failed recomputation, then a multiple-choice knapsack picks, per code
region, how often to flush them under a runtime-overhead budget.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .crashlab import CampaignResult, run_campaign
from .plan import NEVER, PersistencePlan
from .simcache import CacheConfig, FlushKind
from .workloads import KernelSpec, RegionKind, golden_run, make_kernel

log = logging.getLogger(__name__)

FREQUENCY_GRID = (1, 2, 4, 8, 16, NEVER)
WEIGHT_RESOLUTION = 1e-4  # knapsack grid, as a fraction of total cost


class LengthMismatch(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class DegenerateCampaign(UserWarning):
    """All tests in a campaign had the same outcome; nothing to correlate."""


# -- correlation -------------------------------------------------------------

def rankdata(a) -> np.ndarray:
    """Average (fractional) ranks starting at 1."""
    a = np.asarray(a, dtype=float)
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    ranks = np.empty(len(a))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple:
    """Spearman's rho with a two-sided t-approximation p-value.

    A constant input has no ranking, so it returns ``(0.0, 1.0)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"lengths differ: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 3:
        raise TooFewSamples(f"need at least 3 samples, got {n}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, 1.0
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) >= 1.0 - 1e-15:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return rho, min(1.0, p)


def is_critical(rho: float, p_value: float, p_threshold: float = 0.01) -> bool:
    """Higher inconsistency must mean lower success, and significantly so."""
    return rho < 0 and p_value < p_threshold


@dataclass
class CorrelationReport:
    names: list
    rho: list
    p_value: list
    selected: list
    p_threshold: float = 0.01
    degenerate: bool = False

    @property
    def critical(self) -> list:
        return [n for n, s in zip(self.names, self.selected) if s]

    def rows(self):
        return list(zip(self.names, self.rho, self.p_value, self.selected))

    def as_tuple(self) -> tuple:
        return tuple((n, float(r), float(p), bool(s)) for n, r, p, s in self.rows())


class CriticalObjectSelector(SelectorMixin, BaseEstimator):
    """Keep features (objects) whose inconsistent rate is negatively and
    significantly rank-correlated with recomputation success.

    ``X`` is the (tests x objects) inconsistent-rate matrix, ``y`` the 0/1
    success indicator.
    """

    def __init__(self, p_threshold: float = 0.01):
        self.p_threshold = p_threshold

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=3, y_numeric=True)
        k = X.shape[1]
        self.rho_ = np.zeros(k)
        self.p_value_ = np.ones(k)
        self.degenerate_ = bool(np.all(y == y[0]))
        if self.degenerate_:
            warnings.warn("all outcomes identical; no object can be selected", DegenerateCampaign)
        else:
            for j in range(k):
                self.rho_[j], self.p_value_[j] = spearman(X[:, j], y)
        self.support_ = np.array([is_critical(r, p, self.p_threshold) for r, p in zip(self.rho_, self.p_value_)], dtype=bool)
        self.n_features_in_ = k
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_


def select_objects(campaign: CampaignResult, candidates=None, p_threshold: float = 0.01) -> CorrelationReport:
    names = list(campaign.candidates if candidates is None else candidates)
    sel = CriticalObjectSelector(p_threshold).fit(campaign.rate_matrix(names), campaign.success_vector())
    return CorrelationReport(
        names=names,
        rho=[float(r) for r in sel.rho_],
        p_value=[float(p) for p in sel.p_value_],
        selected=[bool(s) for s in sel.support_],
        p_threshold=p_threshold,
        degenerate=sel.degenerate_,
    )


# -- cost model --------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Abstract costs.  One simulated op costs ``op_cost``; flushing one line
    costs ``flush_cost_per_line``; flush estimates are multiplied by
    ``doubling_factor`` to stay on the safe side."""

    flush_cost_per_line: float = 1.0
    op_cost: float = 1.0
    doubling_factor: float = 2.0

    def __post_init__(self):
        if min(self.flush_cost_per_line, self.op_cost, self.doubling_factor) < 0:
            raise ValueError("costs must be non-negative")


def estimate_loss(
    critical_bytes: int,
    persist_ops: int,
    cost_model: CostModel,
    total_cost: float,
    line_size: int = 64,
) -> float:
    """Upper-bound runtime loss of ``persist_ops`` flushes of the critical set,
    as a fraction of ``total_cost``.  Assumes every line is resident and dirty."""
    if total_cost <= 0:
        raise ValueError("total_cost must be positive")
    if persist_ops <= 0:
        return 0.0
    lines = -(-int(critical_bytes) // line_size)
    return cost_model.doubling_factor * cost_model.flush_cost_per_line * lines * persist_ops / total_cost


def interpolate_c(c_k: float, c_k_max: float, x: Optional[int]) -> float:
    """Recomputability of a region persisted every ``x`` inner iterations."""
    if x is NEVER:
        return c_k
    if x < 1:
        raise ValueError("x must be >= 1")
    return (c_k_max - c_k) / x + c_k


def predict_Y_prime(a, c_prime, losses=None) -> float:
    """Recomputability after persistence; each region's time share grows by its loss."""
    a = np.asarray(a, dtype=float)
    c_prime = np.asarray(c_prime, dtype=float)
    losses = np.zeros_like(a) if losses is None else np.asarray(losses, dtype=float)
    a_new = (a + losses) / (a + losses).sum()
    return float(a_new @ c_prime)


# -- knapsack ----------------------------------------------------------------

@dataclass(frozen=True)
class RegionOption:
    region_id: int
    frequency: Optional[int]
    weight: float
    value: float
    c_prime: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("weight must be non-negative")


def _units(w: float, resolution: float) -> int:
    # small slack so that e.g. 0.0003 / 0.0001 does not round up to 4
    return int(math.ceil(w / resolution - 1e-9)) if w > 0 else 0


def solve_mck(groups: Sequence[Sequence[RegionOption]], capacity: int, resolution: float = WEIGHT_RESOLUTION):
    """Multiple-choice knapsack over integer weights; one option from each group.

    Maximizes total value with total integer weight <= ``capacity``.  Ties go to
    lower total weight, then to the lexicographically smaller choice vector.
    Returns the list of chosen option indices, or ``None`` if nothing fits.
    """
    if capacity < 0:
        return None
    # best[w] = (value, -weight-free tie key) ; keep (value, choice tuple) per exact weight
    NEG = None
    best = [NEG] * (capacity + 1)
    best[0] = (0.0, ())
    for opts in groups:
        nxt = [NEG] * (capacity + 1)
        for w, cur in enumerate(best):
            if cur is None:
                continue
            for i, opt in enumerate(opts):
                nw = w + _units(opt.weight, resolution)
                if nw > capacity:
                    continue
                cand = (cur[0] + opt.value, cur[1] + (i,))
                old = nxt[nw]
                if old is None or cand[0] > old[0] + 1e-12 or (abs(cand[0] - old[0]) <= 1e-12 and cand[1] < old[1]):
                    nxt[nw] = cand
        best = nxt
    winner = None
    for w, cur in enumerate(best):
        if cur is None:
            continue
        # scanning weights upward: strict improvement needed, so ties keep the lighter one
        if winner is None or cur[0] > winner[0] + 1e-12:
            winner = cur
    return None if winner is None else list(winner[1])


def build_options(
    region_ids,
    region_kinds: dict,
    region_trips: dict,
    visits: int,
    a: dict,
    c: dict,
    c_max: dict,
    critical_bytes: int,
    cost_model: CostModel,
    total_cost: float,
    line_size: int = 64,
    grid=FREQUENCY_GRID,
) -> list:
    """One option group per region over the frequency grid (NEVER always present)."""
    groups = []
    for rid in region_ids:
        opts = []
        kind = region_kinds[rid]
        freqs = grid if kind == RegionKind.LOOP.value else (1, NEVER)
        for x in freqs:
            if x is NEVER:
                ops = 0
            elif kind == RegionKind.STRAIGHT.value:
                ops = visits
            else:
                ops = visits * -(-region_trips[rid] // x)
            w = estimate_loss(critical_bytes, ops, cost_model, total_cost, line_size)
            cx = interpolate_c(c[rid], c_max[rid], x)
            opts.append(RegionOption(rid, x, w, a[rid] * (cx - c[rid]), cx))
        groups.append(opts)
    return groups


def select_regions(
    groups,
    t_s: float,
    tau: float,
    a: dict,
    c: dict,
    critical_objects=(),
    resolution: float = WEIGHT_RESOLUTION,
    kind: FlushKind = FlushKind.FLUSH_OPT,
    region_kinds: Optional[dict] = None,
) -> PersistencePlan:
    """Pick one option per region: max predicted gain with total loss < ``t_s``."""
    capacity = int(math.ceil(t_s / resolution - 1e-9)) - 1  # strict budget
    choice = solve_mck(groups, capacity, resolution)
    if choice is None:
        choice = [next(i for i, o in enumerate(g) if o.frequency is NEVER) for g in groups]
    chosen = [g[i] for g, i in zip(groups, choice)]
    rids = [o.region_id for o in chosen]
    losses = [o.weight for o in chosen]
    y_prime = predict_Y_prime([a[r] for r in rids], [o.c_prime for o in chosen], losses)
    loss = float(sum(losses))
    notes = (f"weights quantized to {resolution:g} of total cost",)
    return PersistencePlan(
        critical_objects=tuple(critical_objects),
        frequencies={o.region_id: o.frequency for o in chosen},
        kind=kind,
        predicted_Y_prime=y_prime,
        predicted_loss=loss,
        feasible=bool(y_prime > tau and loss < t_s),
        region_kinds=region_kinds or {},
        notes=notes,
    )


# -- measurement helpers -----------------------------------------------------

def _kernel_info(spec: KernelSpec, line_size: int):
    k = make_kernel(spec, line_size)
    return k, {r.region_id: r.kind.value for r in k.regions.regions}, {r.region_id: r.trip for r in k.regions.regions}


def everywhere_plan(spec: KernelSpec, critical_objects, line_size: int = 64) -> PersistencePlan:
    """Persist the given objects after every inner iteration of every region."""
    _, kinds, _ = _kernel_info(spec, line_size)
    return PersistencePlan(
        critical_objects=tuple(critical_objects),
        frequencies={rid: 1 for rid in kinds},
        region_kinds=kinds,
    )


def iteration_boundary_plan(spec: KernelSpec, objects, line_size: int = 64) -> PersistencePlan:
    """Persist ``objects`` once per main-loop iteration, at the end of the last region."""
    _, kinds, trips = _kernel_info(spec, line_size)
    last = max(kinds)
    freqs = {rid: NEVER for rid in kinds}
    freqs[last] = 1 if kinds[last] == RegionKind.STRAIGHT.value else trips[last]
    return PersistencePlan(critical_objects=tuple(objects), frequencies=freqs, region_kinds=kinds)


def fill_missing(c: dict, fallback: float) -> dict:
    return {k: (fallback if v is None else v) for k, v in c.items()}


def measure_c_max(
    spec: KernelSpec,
    critical_objects,
    n_tests: int = 200,
    seed: int = 0,
    config: Optional[CacheConfig] = None,
    jobs: int = 1,
    baseline: Optional[CampaignResult] = None,
):
    """Returns ``(c_max, c, everywhere_campaign, baseline_campaign)``; values may be None (no data)."""
    config = config if config is not None else CacheConfig.desk()
    if baseline is None:
        baseline = run_campaign(spec, None, n_tests, seed, config, jobs)
    plan = everywhere_plan(spec, critical_objects, config.line_size)
    every = run_campaign(spec, plan, n_tests, seed, config, jobs)
    return every.c_k(), baseline.c_k(), every, baseline


class RegionPlanner(BaseEstimator):
    """Turns a baseline campaign and an everywhere campaign into a plan.

    ``fit`` takes the two :class:`CampaignResult` objects and the
    correlation report; ``plan_`` holds the result.
    """

    def __init__(
        self,
        t_s: float = 0.03,
        tau: float = 0.0,
        cost_model: Optional[CostModel] = None,
        grid=FREQUENCY_GRID,
        resolution: float = WEIGHT_RESOLUTION,
        kind: FlushKind = FlushKind.FLUSH_OPT,
    ):
        self.t_s = t_s
        self.tau = tau
        self.cost_model = cost_model
        self.grid = grid
        self.resolution = resolution
        self.kind = kind

    def fit(self, spec: KernelSpec, baseline: CampaignResult, every: Optional[CampaignResult], report: CorrelationReport, line_size: int = 64):
        cm = self.cost_model or CostModel()
        kernel, kinds, trips = _kernel_info(spec, line_size)
        g = golden_run(spec)
        a = g.a_k
        Y = baseline.Y
        c = fill_missing(baseline.c_k(), Y)
        critical = report.critical
        if not critical or every is None:
            c_max = dict(c)
        else:
            c_max = fill_missing(every.c_k(), every.Y)
        # measured c_max can dip below c through sampling noise; Eq. 5 needs c <= c_max
        c_max = {k: max(v, c[k]) for k, v in c_max.items()}
        crit_bytes = sum(kernel.registry[n].length for n in critical)
        total_cost = g.total_ops * cm.op_cost
        rids = kernel.regions.ids
        if critical:
            self.groups_ = build_options(
                rids, kinds, trips, g.baseline_iterations, a, c, c_max, crit_bytes, cm, total_cost, line_size, self.grid
            )
        else:
            self.groups_ = [[RegionOption(r, NEVER, 0.0, 0.0, c[r])] for r in rids]
        plan = select_regions(
            self.groups_, self.t_s, self.tau, a, c, critical, self.resolution, self.kind, kinds
        )
        notes = plan.notes + (
            "regions without crash landings use the campaign Y as c_k",
            "c_max clamped to be >= c_k",
        )
        self.plan_ = replace(plan, correlations=report.as_tuple(), notes=notes)
        self.c_ = c
        self.c_max_ = c_max
        self.a_ = a
        return self

    def predict(self, X=None) -> PersistencePlan:
        check_is_fitted(self, "plan_")
        return self.plan_


@dataclass
class PipelineResult:
    plan: PersistencePlan
    report: CorrelationReport
    baseline: CampaignResult
    everywhere: Optional[CampaignResult]
    c: dict = field(default_factory=dict)
    c_max: dict = field(default_factory=dict)


def run_pipeline(
    spec: KernelSpec,
    n_tests: int = 200,
    seed: int = 0,
    config: Optional[CacheConfig] = None,
    t_s: float = 0.03,
    tau: float = 0.0,
    cost_model: Optional[CostModel] = None,
    jobs: int = 1,
    baseline: Optional[CampaignResult] = None,
) -> PipelineResult:
    """Campaign, object selection, c_max campaign, knapsack."""
    config = config if config is not None else CacheConfig.desk()
    if baseline is None:
        baseline = run_campaign(spec, None, n_tests, seed, config, jobs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateCampaign)
        report = select_objects(baseline)
    every = None
    if report.critical:
        every = run_campaign(spec, everywhere_plan(spec, report.critical, config.line_size), n_tests, seed, config, jobs)
    rp = RegionPlanner(t_s=t_s, tau=tau, cost_model=cost_model).fit(spec, baseline, every, report, config.line_size)
    return PipelineResult(rp.plan_, report, baseline, every, rp.c_, rp.c_max_)
