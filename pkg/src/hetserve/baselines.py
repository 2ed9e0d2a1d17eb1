"""Comparison planners: greedy homogeneous allocation, and a PD-disaggregated
greedy with homogeneous per-phase combos and prefill->decode fan-out.

Both run against the same library/market interfaces and produce the same
AllocationPlan shape as the ILP allocator (objective evaluated with the
identical provisioning + penalty formula)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .domain import DECODE, PREFILL, AllocationPlan, DemandSpec, MarketState, ServingTemplate
from .allocation import RunningState, _availability_cap, _template_price, evaluate_counts
from .templates import TemplateLibrary

FANOUT_MAX = 8


def _is_homogeneous(t: ServingTemplate) -> bool:
    return len(t.combo.items) == 1


def _consume(avail: dict[tuple[str, str], int], t: ServingTemplate, region: str,
             n: int) -> None:
    for cfg, k in t.combo.items:
        avail[(region, cfg.name)] = avail.get((region, cfg.name), 0) - n * k


def _cap(avail: dict[tuple[str, str], int], t: ServingTemplate, region: str) -> int:
    cap = math.inf
    for cfg, k in t.combo.items:
        cap = min(cap, avail.get((region, cfg.name), 0) // k)
    return int(cap) if math.isfinite(cap) else 0


def _finish_plan(counts, shortfall, library, market, running, k_init, meta) -> AllocationPlan:
    provision, penalty = evaluate_counts(counts, library, market,
                                         running.counts(), k_init)
    return AllocationPlan(
        counts={k: v for k, v in counts.items() if v > 0},
        objective_usd_per_h=provision + penalty,
        provision_usd_per_h=provision,
        init_penalty_usd_per_h=penalty,
        shortfall={k: v for k, v in shortfall.items() if v > 1e-9},
        status="heuristic",
        meta=meta)


def homo_allocate(library: TemplateLibrary, demand: DemandSpec, market: MarketState,
                  running: RunningState, k_init: float = 0.0) -> AllocationPlan:
    """Per model/phase greedily pick the most cost-efficient homogeneous
    template (throughput per USD) with remaining availability; unmet demand is
    reported as shortfall, not an error."""
    avail = dict(market.availability)
    counts: dict[tuple[str, str], int] = {}
    shortfall: dict[tuple[str, str], float] = {}

    order = sorted(demand.rates.items(), key=lambda kv: (-kv[1], kv[0]))
    for (model, phase), t_m in order:
        if t_m <= 0:
            continue
        residual = t_m
        cands = [t for t in library.templates_for(model, phase) if _is_homogeneous(t)]
        while residual > 1e-9:
            best = None
            for t in cands:
                for r in market.regions():
                    p = _template_price(t, market, r)
                    if p is None or _cap(avail, t, r) < 1:
                        continue
                    eff = t.throughput_tps / p
                    if best is None or eff > best[0] + 1e-12:
                        best = (eff, r, t)
            if best is None:
                break
            _, r, t = best
            n = min(math.ceil(residual / t.throughput_tps), _cap(avail, t, r))
            counts[(r, t.template_id)] = counts.get((r, t.template_id), 0) + n
            _consume(avail, t, r, n)
            residual -= n * t.throughput_tps
        shortfall[(model, phase)] = max(0.0, residual)

    return _finish_plan(counts, shortfall, library, market, running, k_init,
                        {"planner": "homo"})


@dataclass(frozen=True)
class _Group:
    region: str
    prefill: ServingTemplate
    decode: ServingTemplate
    fanout: int
    cost: float


def cauchy_allocate(library: TemplateLibrary, demand: DemandSpec, market: MarketState,
                    running: RunningState, k_init: float = 0.0,
                    fanout_max: int = FANOUT_MAX) -> AllocationPlan:
    """Per model, greedily deploy (prefill-combo, decode-combo, fan-out k)
    groups: both combos homogeneous but possibly different, k decode replicas
    fed per prefill replica, picked by demand-normalized rate per USD."""
    avail = dict(market.availability)
    counts: dict[tuple[str, str], int] = {}
    shortfall: dict[tuple[str, str], float] = {}

    models = sorted({m for (m, _) in demand.rates},
                    key=lambda m: (-(demand.get(m, PREFILL) + demand.get(m, DECODE)), m))
    for model in models:
        d_p = demand.get(model, PREFILL)
        d_d = demand.get(model, DECODE)
        if d_p <= 0 and d_d <= 0:
            continue
        res_p, res_d = d_p, d_d
        pf = [t for t in library.templates_for(model, PREFILL) if _is_homogeneous(t)]
        dc = [t for t in library.templates_for(model, DECODE) if _is_homogeneous(t)]
        while res_p > 1e-9 or res_d > 1e-9:
            best: tuple[float, _Group] | None = None
            for r in market.regions():
                for tp in pf:
                    pp = _template_price(tp, market, r)
                    if pp is None:
                        continue
                    for td in dc:
                        pd = _template_price(td, market, r)
                        if pd is None:
                            continue
                        for k in range(1, fanout_max + 1):
                            cost = pp + k * pd
                            rate = min(tp.throughput_tps / max(res_p, 1e-9),
                                       k * td.throughput_tps / max(res_d, 1e-9))
                            score = rate / cost
                            if best is not None and score <= best[0] + 1e-12:
                                continue
                            if _group_cap(avail, tp, td, k, r) < 1:
                                continue
                            best = (score, _Group(r, tp, td, k, cost))
            if best is None:
                break
            g = best[1]
            need = 1
            if g.prefill.throughput_tps > 0 and res_p > 0:
                need = max(need, math.ceil(res_p / g.prefill.throughput_tps))
            if g.decode.throughput_tps > 0 and res_d > 0:
                need = max(need, math.ceil(res_d / (g.fanout * g.decode.throughput_tps)))
            n = min(need, _group_cap(avail, g.prefill, g.decode, g.fanout, g.region))
            counts[(g.region, g.prefill.template_id)] = (
                counts.get((g.region, g.prefill.template_id), 0) + n)
            counts[(g.region, g.decode.template_id)] = (
                counts.get((g.region, g.decode.template_id), 0) + n * g.fanout)
            _consume(avail, g.prefill, g.region, n)
            _consume(avail, g.decode, g.region, n * g.fanout)
            res_p -= n * g.prefill.throughput_tps
            res_d -= n * g.fanout * g.decode.throughput_tps
        shortfall[(model, PREFILL)] = max(0.0, res_p)
        shortfall[(model, DECODE)] = max(0.0, res_d)

    return _finish_plan(counts, shortfall, library, market, running, k_init,
                        {"planner": "cauchy"})


def _group_cap(avail, tp: ServingTemplate, td: ServingTemplate, k: int,
               region: str) -> int:
    """How many whole (1 prefill + k decode) groups fit in what's left."""
    need: dict[str, int] = {}
    for cfg, n in tp.combo.items:
        need[cfg.name] = need.get(cfg.name, 0) + n
    for cfg, n in td.combo.items:
        need[cfg.name] = need.get(cfg.name, 0) + n * k
    cap = math.inf
    for cname, n in need.items():
        cap = min(cap, avail.get((region, cname), 0) // n)
    return int(cap) if math.isfinite(cap) else 0
