"""Command-line front end.

    nvcrash golden     --config K.json --out runs/base
    nvcrash campaign   --config K.json --out runs/base [--plan plan.json]
    nvcrash campaign   --config K.json --out runs/cmax --everywhere-from runs/base
    nvcrash plan       --baseline runs/base --cmax runs/cmax --out runs/plan
    nvcrash efficiency --plan runs/plan/plan.json --out runs/eff

Every step reads and writes plain files, so each can be rerun on its own.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .crashlab import CampaignResult, InvalidCampaign, run_campaign
from .effmodel import DEFAULT_T_R_PRIME, HOUR, SWEEP_HEADER, EfficiencyParams, sweep
from .plan import PersistencePlan
from .planner import CostModel, DegenerateCampaign, RegionPlanner, everywhere_plan, select_objects
from .simcache import CacheConfig
from .workloads import KERNELS, KernelSpec, golden_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALE = 3
EXIT_DEGENERATE = 4

log = logging.getLogger("nvcrash")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"no such file: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_run_config(args) -> dict:
    """Merge the ``--config`` file (a kernel spec, optionally with run settings) with flags."""
    cfg = {}
    if getattr(args, "config", None):
        cfg = _read_json(args.config)
    if getattr(args, "kernel", None):
        cfg.setdefault("kernel", args.kernel)
    if "kernel" not in cfg:
        raise CliError("no kernel given: pass --config <spec.json> or --kernel", EXIT_CONFIG)
    try:
        spec = KernelSpec.from_dict(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad kernel spec: {exc}", EXIT_CONFIG) from None
    cache = cfg.get("cache")
    if getattr(args, "cache", None):
        cache = args.cache
    try:
        if cache is None:
            cconf = CacheConfig.desk()
        elif isinstance(cache, str):
            cconf = CacheConfig.from_dict(_read_json(cache))
        else:
            cconf = CacheConfig.from_dict(cache)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad cache config: {exc}", EXIT_CONFIG) from None
    return {"spec": spec, "cache": cconf, "raw": cfg}


def _pick(args, raw: dict, name: str, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return raw.get(name, default)


# -- golden ------------------------------------------------------------------

def golden_payload(spec: KernelSpec, cache: CacheConfig) -> dict:
    g = golden_run(spec)
    out = g.to_dict()
    out["spec"] = spec.to_dict()
    out["cache"] = cache.to_dict()
    return out


def cmd_golden(args) -> int:
    rc = load_run_config(args)
    payload = golden_payload(rc["spec"], rc["cache"])
    _write_json(Path(args.out) / "golden.json", payload)
    print(f"golden: {rc['spec'].kernel} baseline_iterations={payload['baseline_iterations']} total_ops={payload['total_ops']}")
    return EXIT_OK


def _check_golden(path: Path, spec: KernelSpec, cache: CacheConfig) -> dict:
    if not path.exists():
        raise CliError(f"{path} not found; run `nvcrash golden` first", EXIT_STALE)
    stored = _read_json(path)
    fresh = golden_payload(spec, cache)
    for key in ("spec", "total_ops", "baseline_iterations"):
        if stored.get(key) != fresh[key]:
            raise CliError(f"{path} is stale ({key} differs); rerun `nvcrash golden`", EXIT_STALE)
    return stored


# -- campaign ----------------------------------------------------------------

def cmd_campaign(args) -> int:
    rc = load_run_config(args)
    spec, cache, raw = rc["spec"], rc["cache"], rc["raw"]
    out = Path(args.out)
    golden_path = Path(args.golden) if args.golden else out / "golden.json"
    if args.golden is None and not golden_path.exists() and args.everywhere_from:
        golden_path = Path(args.everywhere_from) / "golden.json"
    _check_golden(golden_path, spec, cache)

    plan = None
    if args.plan and args.everywhere_from:
        raise CliError("--plan and --everywhere-from are mutually exclusive", EXIT_CONFIG)
    if args.plan:
        try:
            plan = PersistencePlan.from_dict(_read_json(args.plan))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"bad plan file: {exc}", EXIT_CONFIG) from None
    elif args.everywhere_from:
        base = CampaignResult.load(args.everywhere_from)
        report = _report(base, float(_pick(args, raw, "p_threshold", 0.01)))
        if not report.critical:
            raise CliError("baseline campaign selects no critical objects; nothing to persist", EXIT_DEGENERATE)
        plan = everywhere_plan(spec, report.critical, cache.line_size)

    n_tests = int(_pick(args, raw, "n_tests", 200))
    seed = int(_pick(args, raw, "seed", 0))
    try:
        res = run_campaign(spec, plan, n_tests, seed, cache, jobs=args.jobs)
    except InvalidCampaign as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(f"plan does not fit kernel: {exc}", EXIT_CONFIG) from None
    res.save(out)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    summary.update({"spec": spec.to_dict(), "cache": cache.to_dict(), "seed": seed})
    _write_json(out / "summary.json", summary)
    print(f"campaign: n={res.n_tests} Y={res.Y:.4f} converged={res.converged}")
    return EXIT_OK


def _report(campaign: CampaignResult, p_threshold: float):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateCampaign)
        report = select_objects(campaign, p_threshold=p_threshold)
    if report.degenerate:
        raise CliError(
            "degenerate campaign: every test had the same outcome, so no correlation can be computed",
            EXIT_DEGENERATE,
        )
    return report


# -- plan --------------------------------------------------------------------

def cmd_plan(args) -> int:
    base_dir, cmax_dir = Path(args.baseline), Path(args.cmax) if args.cmax else None
    for d in filter(None, (base_dir, cmax_dir)):
        if not (d / "campaign.csv").exists() or not (d / "summary.json").exists():
            raise CliError(f"{d}: missing campaign.csv or summary.json", EXIT_CONFIG)
    base_summary = _read_json(base_dir / "summary.json")
    raw = _read_json(args.config) if args.config else {}
    if "spec" not in base_summary:
        raise CliError(f"{base_dir}/summary.json lacks the kernel spec", EXIT_CONFIG)
    spec = KernelSpec.from_dict(base_summary["spec"])
    cache = CacheConfig.from_dict(base_summary.get("cache", CacheConfig.desk().to_dict()))
    if golden_run(spec).total_ops != base_summary.get("total_ops"):
        raise CliError("baseline campaign does not match the current golden run", EXIT_STALE)

    baseline = CampaignResult.load(base_dir)
    if baseline.plan is not None and not baseline.plan.is_empty:
        log.warning("baseline campaign was run with a plan; c_k will be biased")
    report = _report(baseline, float(_pick(args, raw, "p_threshold", 0.01)))
    every = None
    if cmax_dir is not None:
        every = CampaignResult.load(cmax_dir)
        used = set(every.plan.critical_objects) if every.plan else set()
        if used != set(report.critical):
            log.warning("c_max campaign persisted %s but selection gives %s", sorted(used), report.critical)
    cm = raw.get("cost_model", {})
    planner = RegionPlanner(
        t_s=float(_pick(args, raw, "t_s", 0.03)),
        tau=float(_pick(args, raw, "tau", 0.0)),
        cost_model=CostModel(**cm),
    )
    plan = planner.fit(spec, baseline, every, report, cache.line_size).predict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    print(
        f"plan: critical={list(plan.critical_objects)} loss={plan.predicted_loss:.4f} "
        f"Y'={plan.predicted_Y_prime:.4f} feasible={plan.feasible}"
    )
    return EXIT_OK


# -- efficiency --------------------------------------------------------------

def cmd_efficiency(args) -> int:
    raw = _read_json(args.config).get("efficiency", {}) if args.config else {}
    R = args.R
    if R is None and args.plan:
        R = _read_json(args.plan).get("predicted_Y_prime")
        if R is None:
            raise CliError("plan has no predicted_Y_prime; pass --R", EXIT_CONFIG)
    if R is None:
        R = raw.get("R", 0.82)
    try:
        params = EfficiencyParams(
            MTBF=float(args.mtbf_hours if args.mtbf_hours is not None else raw.get("mtbf_hours", 12)) * HOUR,
            R=float(R),
            t_s=float(args.t_s if args.t_s is not None else raw.get("t_s", 0.03)),
            T_r_prime=float(args.t_r_prime if args.t_r_prime is not None else raw.get("T_r_prime", DEFAULT_T_R_PRIME)),
        )
        rows = sweep(params, args.t_chk or raw.get("T_chk", (32.0, 320.0, 3200.0)), args.nodes or raw.get("nodes"))
    except ValueError as exc:
        raise CliError(f"bad efficiency parameters: {exc}", EXIT_CONFIG) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "efficiency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])
    for r in rows:
        print(f"T_chk={r[0]:g} nodes={r[2]} eff={r[5]:.4f} eff'={r[6]:.4f} improvement={r[7]:+.4f} tau={r[8]:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvcrash", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_kernel=True):
        sp.add_argument("--config", help="kernel spec / run config JSON")
        if with_kernel:
            sp.add_argument("--kernel", choices=sorted(KERNELS), help="use the kernel's default spec")
            sp.add_argument("--cache", help="cache config JSON (default: tiny desk geometry)")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("golden", help="crash-free reference run")
    common(g)
    g.set_defaults(func=cmd_golden)

    c = sub.add_parser("campaign", help="crash test campaign")
    common(c)
    c.add_argument("--seed", type=int)
    c.add_argument("--n-tests", dest="n_tests", type=int)
    c.add_argument("--plan", help="persistence plan JSON")
    c.add_argument("--everywhere-from", dest="everywhere_from", metavar="DIR",
                   help="persist objects selected from this baseline campaign after every inner iteration")
    c.add_argument("--p-threshold", dest="p_threshold", type=float)
    c.add_argument("--golden", help="golden.json to validate against (default: <out>/golden.json)")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_campaign)

    pl = sub.add_parser("plan", help="select critical objects and code regions")
    common(pl, with_kernel=False)
    pl.add_argument("--baseline", required=True, help="campaign directory without a plan")
    pl.add_argument("--cmax", help="campaign directory run with --everywhere-from")
    pl.add_argument("--t-s", dest="t_s", type=float)
    pl.add_argument("--tau", type=float)
    pl.add_argument("--p-threshold", dest="p_threshold", type=float)
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("efficiency", help="system efficiency sweep")
    common(e, with_kernel=False)
    e.add_argument("--R", type=float, help="recomputability (default: plan's predicted Y', else 0.82)")
    e.add_argument("--plan")
    e.add_argument("--t-s", dest="t_s", type=float)
    e.add_argument("--mtbf-hours", dest="mtbf_hours", type=float)
    e.add_argument("--t-r-prime", dest="t_r_prime", type=float)
    e.add_argument("--t-chk", dest="t_chk", type=float, nargs="+")
    e.add_argument("--nodes", type=int, nargs="+")
    e.set_defaults(func=cmd_efficiency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"nvcrash: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
