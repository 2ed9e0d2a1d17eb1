"""Operator CLI: scenario synthesis/validation, offline template generation,
one-shot allocation, multi-epoch simulation, and the cap-sensitivity sweep.

Exit codes: 0 success, 2 validation error, 3 infeasible, 4 solver budget
exhausted, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .allocation import (InfeasibleAllocation, RunningState, build_allocation_model,
                         allocate_with_fallback, solve_allocation)
from .baselines import cauchy_allocate, homo_allocate
from .catalog import core_scenario, extended_scenario
from .domain import DECODE, PREFILL, DomainError, DemandSpec
from .milp import MilpError, export_text, read_solution_text
from .templates import GenContext, LibraryCaps, TemplateLibrary, build_library
from .sim import simulate
from .workload import SimScenario, window_token_rates

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_BUDGET = 4


def _load_scenario(path: str) -> SimScenario:
    return SimScenario.load(path)


def _gen_ctx(scenario: SimScenario) -> GenContext:
    from .perf import ProfileTable

    profile = ProfileTable.load(scenario.profile_file) if scenario.profile_file else None
    net_gbps = min(r.inter_node_net_gbps for r in scenario.regions)
    net_lat = max(r.inter_node_latency_ms for r in scenario.regions)
    return GenContext(perf=scenario.perf, profile=profile,
                      net_gbps=net_gbps, net_latency_ms=net_lat)


def cmd_scenario(args) -> int:
    if args.action == "synth":
        make = core_scenario if args.kind == "core" else extended_scenario
        kwargs = {"epochs": args.epochs, "imbalance": args.imbalance}
        if args.rps is not None:
            kwargs["rps_per_model"] = args.rps
        if args.nodes_each is not None:
            kwargs["nodes_each"] = args.nodes_each
        scenario = make(**kwargs)
        scenario.save(args.out)
        print(f"wrote {args.kind} scenario to {args.out} "
              f"({len(scenario.models)} models, {len(scenario.configs)} configs, "
              f"{len(scenario.regions)} regions)")
        return EXIT_OK
    scenario = _load_scenario(args.scenario)
    scenario.validate()
    trace = scenario.build_trace(seed=0)
    print(f"scenario {scenario.name!r} valid: {len(scenario.models)} models, "
          f"{len(scenario.configs)} configs, {len(scenario.regions)} regions, "
          f"{len(trace)} trace events over {scenario.horizon_s:.0f}s")
    return EXIT_OK


def cmd_gen_templates(args) -> int:
    scenario = _load_scenario(args.scenario)
    if args.solver == "export":
        print("gen-templates: export mode applies to `allocate`; using builtin",
              file=sys.stderr)
    caps = LibraryCaps(args.n_max or scenario.caps.n_max,
                       args.rho or scenario.caps.rho)
    ctx = _gen_ctx(scenario)
    t0 = time.monotonic()
    library = build_library(scenario.configs, scenario.models, scenario.slos, caps,
                            ctx, workers=args.workers)
    wall = time.monotonic() - t0
    library.save(args.out)
    for (model, phase), n in library.counts_by_model_phase().items():
        print(f"{model:>16s} {phase:<8s} {n:6d} templates")
    print(f"total {len(library)} templates in {wall:.1f}s -> {args.out}")
    return EXIT_OK


def _epoch_demand(scenario: SimScenario, epoch: int, seed: int) -> DemandSpec:
    trace = scenario.build_trace(seed)
    ep = scenario.epoch_s
    t0 = max(0, (epoch - 1)) * ep if epoch > 0 else 0.0
    t1 = t0 + ep
    rates = window_token_rates(trace, t0, t1)
    return DemandSpec({k: v * scenario.knobs.headroom for k, v in rates.items()})


def _print_plan(plan, library, scenario) -> None:
    print(f"objective {plan.objective_usd_per_h:.4f} USD/h "
          f"(provision {plan.provision_usd_per_h:.4f} + "
          f"penalty {plan.init_penalty_usd_per_h:.4f}); "
          f"demand scale {plan.demand_scale:.2f}; "
          f"{plan.total_instances()} instances over {plan.active_templates()} templates")
    per_model: dict[str, float] = {}
    per_region: dict[str, float] = {}
    for (r, tid), n in sorted(plan.counts.items()):
        t = library.get(tid)
        cost = n * sum(cnt * scenario.prices[(r, cfg.name)]
                       for cfg, cnt in t.combo.items)
        per_model[t.model] = per_model.get(t.model, 0.0) + cost
        per_region[r] = per_region.get(r, 0.0) + cost
        print(f"  {r:<14s} {tid:<48s} x{n}")
    for model, cost in sorted(per_model.items()):
        print(f"  model {model:<20s} {cost:.4f} USD/h")
    for r, cost in sorted(per_region.items()):
        print(f"  region {r:<16s} {cost:.4f} USD/h")
    for key, miss in sorted(plan.shortfall.items()):
        if miss > 1e-9:
            print(f"  SHORTFALL {key}: {miss:.1f} tokens/s unmet")


def _plan_to_json(plan) -> str:
    return json.dumps({
        "counts": [[r, tid, n] for (r, tid), n in sorted(plan.counts.items())],
        "objective_usd_per_h": plan.objective_usd_per_h,
        "provision_usd_per_h": plan.provision_usd_per_h,
        "init_penalty_usd_per_h": plan.init_penalty_usd_per_h,
        "demand_scale": plan.demand_scale,
        "shortfall": [[m, ph, v] for (m, ph), v in sorted(plan.shortfall.items())],
        "status": plan.status,
    }, sort_keys=True, indent=1) + "\n"


def cmd_allocate(args) -> int:
    scenario = _load_scenario(args.scenario)
    library = TemplateLibrary.load(args.library)
    if args.k is not None:
        scenario.knobs.k_init = args.k
    demand = _epoch_demand(scenario, args.epoch, args.seed)
    market = scenario.market_at(args.epoch)
    running = RunningState()
    k = scenario.knobs.k_init
    t0 = time.monotonic()

    if args.planner == "homo":
        plan = homo_allocate(library, demand, market, running, k)
    elif args.planner == "cauchy":
        plan = cauchy_allocate(library, demand, market, running, k)
    elif args.solver == "export":
        prob = build_allocation_model(library, demand, market, running, k,
                                      prune_ratio=0.0)
        mps_path = args.out + ".mps"
        with open(mps_path, "w") as fh:
            fh.write(export_text(prob.milp))
        print(f"wrote {mps_path} ({prob.meta['num_vars']} vars); "
              f"waiting for solution file {args.solution_file}")
        sol = _wait_for_solution(prob.milp, args.solution_file,
                                 scenario.knobs.solve_budget_s)
        if sol is None:
            print("no solution file appeared within the budget", file=sys.stderr)
            return EXIT_BUDGET
        counts = {}
        for vid, key in prob.var_map.items():
            n = sol.int_value(vid)
            if n > 0:
                counts[key] = n
        from .allocation import evaluate_counts
        prov, pen = evaluate_counts(counts, library, market, running.counts(), k)
        from .domain import AllocationPlan
        plan = AllocationPlan(counts=counts, objective_usd_per_h=prov + pen,
                              provision_usd_per_h=prov, init_penalty_usd_per_h=pen)
    else:
        try:
            if args.fallback:
                plan = allocate_with_fallback(library, demand, market, running, k,
                                              prune_ratio=scenario.knobs.prune_ratio,
                                              time_budget_s=scenario.knobs.solve_budget_s)
            else:
                prob = build_allocation_model(library, demand, market, running, k,
                                              prune_ratio=scenario.knobs.prune_ratio)
                plan = solve_allocation(prob, scenario.knobs.solve_budget_s)
        except InfeasibleAllocation as exc:
            print("infeasible allocation; per-model report:")
            for key, info in sorted(exc.report.items()):
                print(f"  {key}: demand {info['demand_tps']:.1f} tok/s, "
                      f"standalone max {info['standalone_max_tps']:.1f}, "
                      f"shortfall {info['shortfall']:.1f}")
            return EXIT_INFEASIBLE

    wall = time.monotonic() - t0
    _print_plan(plan, library, scenario)
    print(f"solve wall time {wall:.2f}s")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_plan_to_json(plan))
    if plan.status == "budget_exhausted":
        return EXIT_BUDGET
    if any(v > 1e-9 for v in plan.shortfall.values()):
        return EXIT_INFEASIBLE
    return EXIT_OK


def _wait_for_solution(model, path: str, budget_s: float):
    import os

    deadline = time.monotonic() + budget_s
    while time.monotonic() < deadline:
        if os.path.exists(path):
            with open(path) as fh:
                return read_solution_text(model, fh.read())
        time.sleep(0.2)
    return None


def cmd_simulate(args) -> int:
    scenario = _load_scenario(args.scenario)
    library = TemplateLibrary.load(args.library)
    if args.epochs is not None:
        scenario.epochs = args.epochs
    if args.k is not None:
        scenario.knobs.k_init = args.k
    if args.init_delay_s is not None:
        scenario.knobs.init_delay_s = args.init_delay_s
    metrics = simulate(scenario, library, planner=args.planner, seed=args.seed)
    if args.out:
        with open(args.out + ".csv", "w") as fh:
            fh.write(metrics.to_csv_text())
        with open(args.out + "-summary.csv", "w") as fh:
            fh.write(metrics.summary_text())
        print(f"wrote {args.out}.csv and {args.out}-summary.csv")
    print(metrics.summary_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    scenario = _load_scenario(args.scenario)
    n_max_list = [int(x) for x in args.n_max_list.split(",")]
    rho_list = [float(x) for x in args.rho_list.split(",")]
    if len(n_max_list) != len(rho_list):
        raise DomainError("--n-max-list and --rho-list must have equal length")
    models = [m for m in scenario.models
              if args.model is None or m.name == args.model]
    if not models:
        raise DomainError(f"model {args.model!r} not in scenario")
    ctx = _gen_ctx(scenario)
    phases = (args.phase,) if args.phase else (PREFILL, DECODE)
    rows = []
    for n_max, rho in zip(n_max_list, rho_list):
        t0 = time.monotonic()
        lib = build_library(scenario.configs, models,
                            {m.name: scenario.slos[m.name] for m in models},
                            LibraryCaps(n_max, rho), ctx, workers=args.workers,
                            phases=phases)
        wall = time.monotonic() - t0
        best = 0.0
        for t in lib.entries:
            if args.phase and t.phase != args.phase:
                continue
            price = min(sum(n * scenario.prices[(r.name, cfg.name)]
                            for cfg, n in t.combo.items)
                        for r in scenario.regions)
            best = max(best, t.throughput_tps / price)
        count = sum(1 for t in lib.entries
                    if not args.phase or t.phase == args.phase)
        rows.append((n_max, rho, count, wall, best))
        print(f"n_max={n_max} rho={rho}: {count} templates, {wall:.1f}s, "
              f"best {best:.2f} tokens/s/USD-h")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("n_max,rho,templates,gen_seconds,best_tokens_per_usd_h\n")
            for n_max, rho, count, wall, best in rows:
                fh.write(f"{n_max},{rho},{count},{wall:.3f},{best!r}\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetserve",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    ps = sub.add_parser("scenario", help="synthesize or validate scenario files")
    ps.add_argument("action", choices=["synth", "validate"])
    ps.add_argument("--kind", choices=["core", "extended"], default="core")
    ps.add_argument("--rps", type=float, default=None)
    ps.add_argument("--epochs", type=int, default=5)
    ps.add_argument("--nodes-each", type=int, default=None)
    ps.add_argument("--imbalance", choices=["balanced", "large_heavy", "small_heavy"],
                    default="balanced")
    ps.add_argument("--scenario", help="scenario file (validate)")
    ps.add_argument("--out", help="output path (synth)")
    ps.set_defaults(fn=cmd_scenario)

    pg = sub.add_parser("gen-templates", help="build the serving template library")
    pg.add_argument("--scenario", required=True)
    pg.add_argument("--out", required=True)
    pg.add_argument("--n-max", type=int, default=None)
    pg.add_argument("--rho", type=float, default=None)
    pg.add_argument("--workers", type=int, default=1)
    pg.add_argument("--solver", choices=["builtin", "export"], default="builtin")
    pg.set_defaults(fn=cmd_gen_templates)

    pa = sub.add_parser("allocate", help="one-shot allocation for one epoch")
    pa.add_argument("--scenario", required=True)
    pa.add_argument("--library", required=True)
    pa.add_argument("--epoch", type=int, default=0)
    pa.add_argument("--planner", choices=["coral", "homo", "cauchy"], default="coral")
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--k", type=float, default=None)
    pa.add_argument("--fallback", action="store_true",
                    help="scale demand down uniformly when infeasible")
    pa.add_argument("--solver", choices=["builtin", "export"], default="builtin")
    pa.add_argument("--solution-file", default="solution.txt",
                    help="external solver solution file (export mode)")
    pa.add_argument("--out", default="plan.json")
    pa.set_defaults(fn=cmd_allocate)

    pm = sub.add_parser("simulate", help="multi-epoch simulation")
    pm.add_argument("--scenario", required=True)
    pm.add_argument("--library", required=True)
    pm.add_argument("--planner", choices=["coral", "homo", "cauchy"], default="coral")
    pm.add_argument("--seed", type=int, default=0)
    pm.add_argument("--epochs", type=int, default=None)
    pm.add_argument("--k", type=float, default=None)
    pm.add_argument("--init-delay-s", type=float, default=None)
    pm.add_argument("--out", default=None)
    pm.set_defaults(fn=cmd_simulate)

    pw = sub.add_parser("sweep", help="cap-sensitivity sweep over (n_max, rho)")
    pw.add_argument("--scenario", required=True)
    pw.add_argument("--n-max-list", required=True)
    pw.add_argument("--rho-list", required=True)
    pw.add_argument("--model", default=None)
    pw.add_argument("--phase", choices=[PREFILL, DECODE], default=None)
    pw.add_argument("--workers", type=int, default=1)
    pw.add_argument("--out", default=None)
    pw.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DomainError, MilpError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InfeasibleAllocation as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
