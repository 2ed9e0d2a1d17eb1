"""Online stage: the allocation ILP over the template library, plus
reconciliation diffs and the uniform demand scale-down fallback."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .domain import (AllocationPlan, DemandSpec, DomainError, MarketState,
                     ServingTemplate, template_cost)
from .milp import CONTINUOUS, GE, INTEGER, LE, MilpModel, solve_exact
from .templates import TemplateLibrary

DEFAULT_SOLVE_BUDGET_S = 60.0


class InfeasibleAllocation(RuntimeError):
    """Demand cannot be met; carries a per-model shortfall report."""

    def __init__(self, report: dict, joint_scale_bound: float):
        self.report = report
        self.joint_scale_bound = joint_scale_bound
        binding = sorted(k for k, v in report.items() if v["shortfall"] > 0)
        super().__init__(
            f"allocation infeasible; binding demands: {binding or 'cross-model contention'}")


@dataclass(frozen=True)
class InstanceInfo:
    iid: str
    region: str
    template_id: str
    load: int = 0


@dataclass
class RunningState:
    """Currently running serving instances with their in-flight load."""

    instances: list[InstanceInfo] = field(default_factory=list)

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for inst in self.instances:
            key = (inst.region, inst.template_id)
            out[key] = out.get(key, 0) + 1
        return out

    def of(self, region: str, template_id: str) -> list[InstanceInfo]:
        return [i for i in self.instances
                if i.region == region and i.template_id == template_id]


@dataclass
class ReconcilePlan:
    scale_up: list[tuple[str, str, int]] = field(default_factory=list)
    scale_down: list[tuple[str, str]] = field(default_factory=list)  # (region, iid)

    def is_empty(self) -> bool:
        return not self.scale_up and not self.scale_down

    def to_json(self) -> str:
        import json

        return json.dumps({"scale_up": [list(x) for x in self.scale_up],
                           "scale_down": [list(x) for x in self.scale_down]},
                          sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReconcilePlan":
        import json

        doc = json.loads(text)
        return cls(scale_up=[(r, t, int(n)) for r, t, n in doc["scale_up"]],
                   scale_down=[(r, i) for r, i in doc["scale_down"]])


@dataclass
class AllocationProblem:
    milp: MilpModel
    var_map: dict[str, tuple[str, str]]           # nu var id -> (region, template_id)
    prices: dict[tuple[str, str], float]          # (region, template_id) -> USD/h
    demand: DemandSpec
    market: MarketState
    library: TemplateLibrary
    running_counts: dict[tuple[str, str], int]
    k_init: float
    meta: dict = field(default_factory=dict)


def _template_price(t: ServingTemplate, market: MarketState, region: str) -> float | None:
    total = 0.0
    for cfg, n in t.combo.items:
        p = market.price(region, cfg.name)
        if p is None:
            return None
        total += n * p
    return total


def _availability_cap(t: ServingTemplate, market: MarketState, region: str) -> int:
    cap = math.inf
    for cfg, n in t.combo.items:
        cap = min(cap, market.available(region, cfg.name) // n)
    return int(cap) if math.isfinite(cap) else 0


def build_allocation_model(library: TemplateLibrary, demand: DemandSpec,
                           market: MarketState, running: RunningState,
                           k_init: float, prune_ratio: float = 3.0
                           ) -> AllocationProblem:
    """Integer counts per (region, template) minimizing provisioning cost plus
    an initialization penalty on newly added instances.

    Cost-inefficient (region, template) pairs (cost/throughput beyond
    `prune_ratio` x the best for their model/phase) are dropped to keep the
    model small, unless instances of them are already running; pass
    prune_ratio=0 to disable (e.g. when exporting for an external solver).
    """
    regions = market.regions()
    run_counts = running.counts()
    m = MilpModel(name="allocation")
    var_map: dict[str, tuple[str, str]] = {}
    prices: dict[tuple[str, str], float] = {}
    pruned = 0

    by_rc_usage: dict[tuple[str, str], dict[str, int]] = {}
    demand_rows: dict[tuple[str, str], dict[str, float]] = {}
    per_mp_candidates: dict[tuple[str, str], list[tuple[float, str, ServingTemplate, str]]] = {}

    for (model, phase) in library.model_phases():
        if demand.get(model, phase) <= 0:
            continue
        cands = []
        for t in library.templates_for(model, phase):
            for r in regions:
                p = _template_price(t, market, r)
                if p is None:
                    continue
                cands.append((p / t.throughput_tps, r, t, t.template_id))
        per_mp_candidates[(model, phase)] = cands

    for (model, phase), cands in per_mp_candidates.items():
        if not cands:
            continue
        best_eff = min(c[0] for c in cands)
        t_m = demand.get(model, phase)
        row: dict[str, float] = {}
        for eff, r, t, tid in cands:
            already_running = run_counts.get((r, tid), 0) > 0
            if prune_ratio and eff > prune_ratio * best_eff and not already_running:
                pruned += 1
                continue
            cap = _availability_cap(t, market, r)
            ub = min(cap, math.ceil(t_m / t.throughput_tps))
            if ub <= 0:
                continue
            vid = f"nu[{r}][{tid}]"
            m.add_var(vid, INTEGER, ub=float(ub))
            var_map[vid] = (r, tid)
            p = _template_price(t, market, r)
            prices[(r, tid)] = p
            row[vid] = t.throughput_tps
            for cfg, n in t.combo.items:
                by_rc_usage.setdefault((r, cfg.name), {})[vid] = float(n)
        demand_rows[(model, phase)] = row

    for (r, cname), coeffs in sorted(by_rc_usage.items()):
        m.add_constraint(f"cap[{r}][{cname}]", coeffs, LE,
                         float(market.available(r, cname)))
    for (model, phase), row in sorted(demand_rows.items()):
        m.add_constraint(f"demand[{model}][{phase}]", row, GE,
                         demand.get(model, phase))

    objective: dict[str, float] = {}
    for vid, (r, tid) in var_map.items():
        objective[vid] = prices[(r, tid)]
    if k_init > 0:
        for vid, (r, tid) in var_map.items():
            p = prices[(r, tid)]
            iid = f"init[{r}][{tid}]"
            m.add_var(iid, CONTINUOUS)
            nu_prev = run_counts.get((r, tid), 0)
            m.add_constraint(f"pen[{r}][{tid}]", {iid: 1.0, vid: -p * k_init},
                             GE, -p * k_init * nu_prev)
            objective[iid] = 1.0
    m.set_objective(objective, "min")

    uncovered = sorted(k for k in demand.rates
                       if demand.rates[k] > 0 and not demand_rows.get(k))
    return AllocationProblem(
        milp=m, var_map=var_map, prices=prices, demand=demand, market=market,
        library=library, running_counts=run_counts, k_init=k_init,
        meta={"pruned_vars": pruned, "uncovered_demands": uncovered,
              "num_vars": len(m.variables), "num_constraints": len(m.constraints)})


def evaluate_counts(counts: dict[tuple[str, str], int], library: TemplateLibrary,
                    market: MarketState, running_counts: dict[tuple[str, str], int],
                    k_init: float) -> tuple[float, float]:
    """(provisioning, init-penalty) USD/h of a candidate allocation; the same
    objective the ILP minimizes, reusable for baseline plans."""
    provision = 0.0
    penalty = 0.0
    for (r, tid), n in counts.items():
        if n == 0:
            continue
        t = library.get(tid)
        p = template_cost(t, market, r)
        provision += n * p
        penalty += max(0, n - running_counts.get((r, tid), 0)) * p * k_init
    return provision, penalty


def capacity_violations(counts: dict[tuple[str, str], int], library: TemplateLibrary,
                        market: MarketState) -> list[str]:
    used: dict[tuple[str, str], int] = {}
    for (r, tid), n in counts.items():
        for cfg, k in library.get(tid).combo.items:
            used[(r, cfg.name)] = used.get((r, cfg.name), 0) + n * k
    return [f"{r}/{c}: used {u} > available {market.available(r, c)}"
            for (r, c), u in sorted(used.items()) if u > market.available(r, c)]


def _standalone_max(prob: AllocationProblem, model: str, phase: str) -> float:
    """LP bound: best achievable tokens/s for one (model, phase) given the whole
    market to itself (ignores cross-model contention)."""
    lp = MilpModel(name=f"standalone[{model}][{phase}]")
    row = {}
    usage: dict[tuple[str, str], dict[str, float]] = {}
    for t in prob.library.templates_for(model, phase):
        for r in prob.market.regions():
            if _template_price(t, prob.market, r) is None:
                continue
            cap = _availability_cap(t, prob.market, r)
            if cap <= 0:
                continue
            vid = f"nu[{r}][{t.template_id}]"
            lp.add_var(vid, CONTINUOUS, ub=float(cap))
            row[vid] = t.throughput_tps
            for cfg, n in t.combo.items:
                usage.setdefault((r, cfg.name), {})[vid] = float(n)
    if not row:
        return 0.0
    for (r, cname), coeffs in sorted(usage.items()):
        lp.add_constraint(f"cap[{r}][{cname}]", coeffs, LE,
                          float(prob.market.available(r, cname)))
    lp.set_objective(row, "max")
    sol = solve_exact(lp, 10.0, engine="highs")
    return sol.objective if sol.status == "optimal" else 0.0


def _joint_scale_bound(prob: AllocationProblem) -> float:
    """LP relaxation: largest uniform demand scale any allocation could serve."""
    lp = MilpModel(name="joint_scale")
    lp.add_var("phi", CONTINUOUS, ub=1.0)
    usage: dict[tuple[str, str], dict[str, float]] = {}
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for vid, (r, tid) in prob.var_map.items():
        t = prob.library.get(tid)
        lp.add_var(vid, CONTINUOUS, ub=prob.milp.variables[vid].ub)
        rows.setdefault((t.model, t.phase), {})[vid] = t.throughput_tps
        for cfg, n in t.combo.items:
            usage.setdefault((r, cfg.name), {})[vid] = float(n)
    for (r, cname), coeffs in sorted(usage.items()):
        lp.add_constraint(f"cap[{r}][{cname}]", coeffs, LE,
                          float(prob.market.available(r, cname)))
    for (model, phase), row in sorted(rows.items()):
        t_m = prob.demand.get(model, phase)
        if t_m <= 0:
            continue
        coeffs = dict(row)
        coeffs["phi"] = -t_m
        lp.add_constraint(f"demand[{model}][{phase}]", coeffs, GE, 0.0)
    for key in prob.meta.get("uncovered_demands", []):
        if prob.demand.rates.get(tuple(key) if isinstance(key, list) else key, 0) > 0:
            return 0.0
    lp.set_objective({"phi": 1.0}, "max")
    sol = solve_exact(lp, 10.0, engine="highs")
    return max(0.0, sol.objective) if sol.status == "optimal" else 0.0


def solve_allocation(prob: AllocationProblem,
                     time_budget_s: float = DEFAULT_SOLVE_BUDGET_S) -> AllocationPlan:
    """Solve the allocation ILP; raises InfeasibleAllocation with a per-model
    shortfall report when demand cannot be met."""
    sol = solve_exact(prob.milp, time_budget_s)
    if sol.status == "infeasible" or prob.meta.get("uncovered_demands"):
        report = {}
        for (model, phase), t_m in sorted(prob.demand.rates.items()):
            if t_m <= 0:
                continue
            cap = _standalone_max(prob, model, phase)
            report[(model, phase)] = {
                "demand_tps": t_m,
                "standalone_max_tps": cap,
                "shortfall": max(0.0, t_m - cap),
            }
        raise InfeasibleAllocation(report, _joint_scale_bound(prob))

    counts: dict[tuple[str, str], int] = {}
    for vid, key in prob.var_map.items():
        n = sol.int_value(vid)
        if n > 0:
            counts[key] = n
    provision, penalty = evaluate_counts(counts, prob.library, prob.market,
                                         prob.running_counts, prob.k_init)
    return AllocationPlan(
        counts=counts,
        objective_usd_per_h=provision + penalty,
        provision_usd_per_h=provision,
        init_penalty_usd_per_h=penalty,
        status=sol.status,
        meta={**prob.meta, "solver_objective": sol.objective,
              "nonzero_vars": len(counts)})


def allocate_with_fallback(library: TemplateLibrary, demand: DemandSpec,
                           market: MarketState, running: RunningState,
                           k_init: float, prune_ratio: float = 3.0,
                           time_budget_s: float = DEFAULT_SOLVE_BUDGET_S,
                           scale_resolution: float = 0.01) -> AllocationPlan:
    """Allocation with the scarce-market protocol: if demand is infeasible,
    uniformly scale it down (binary search at 1% resolution) until a plan exists."""
    prob = build_allocation_model(library, demand, market, running, k_init, prune_ratio)
    try:
        return solve_allocation(prob, time_budget_s)
    except InfeasibleAllocation as exc:
        hi_bound = min(1.0, exc.joint_scale_bound)
        base_report = exc.report

    def attempt(scale: float) -> AllocationPlan | None:
        scaled = demand.scaled(scale)
        p = build_allocation_model(library, scaled, market, running, k_init, prune_ratio)
        try:
            return solve_allocation(p, time_budget_s)
        except InfeasibleAllocation:
            return None

    lo, hi = 0.0, max(hi_bound, scale_resolution)
    plan_lo: AllocationPlan | None = attempt(hi)
    if plan_lo is not None:
        lo = hi
    else:
        while hi - lo > scale_resolution:
            mid = (lo + hi) / 2
            plan = attempt(mid)
            if plan is not None:
                lo, plan_lo = mid, plan
            else:
                hi = mid
    if plan_lo is None:
        plan_lo = AllocationPlan(status="infeasible")
        lo = 0.0
    plan_lo.demand_scale = lo
    plan_lo.shortfall = {k: v * (1.0 - lo) for k, v in demand.rates.items() if v > 0}
    for key, info in base_report.items():
        plan_lo.meta.setdefault("infeasibility_report", {})[str(key)] = info
    return plan_lo


def diff_allocations(running: RunningState, target: AllocationPlan) -> ReconcilePlan:
    """Reconcile the running cluster to the target counts: create what is
    missing, drain the excess starting from the lowest-load instance."""
    plan = ReconcilePlan()
    keys = set(running.counts()) | set(target.counts)
    for key in sorted(keys):
        r, tid = key
        want = target.counts.get(key, 0)
        have = running.of(r, tid)
        if want > len(have):
            plan.scale_up.append((r, tid, want - len(have)))
        elif want < len(have):
            victims = sorted(have, key=lambda i: (i.load, i.iid))[:len(have) - want]
            plan.scale_down.extend((r, v.iid) for v in victims)
    return plan
