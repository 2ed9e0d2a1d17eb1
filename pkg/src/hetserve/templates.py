"""Offline stage: enumerate node combos per (model, SLO, phase), find the
throughput-optimal pipeline placement for each, and persist the template library.

Two equivalent placement solvers are provided: the ILP formulation (binary
layer-count/assignment variables with product linearization) and a dynamic
program over node multisets (`kernels.placement_search`).  They are
cross-checked in the test suite; library generation uses the DP because it is
orders of magnitude faster at production sizes, while the ILP remains the
reference path and feeds the external-solver export.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .domain import (DECODE, PHASES, PREFILL, DomainError, GpuSpec, ModelSpec,
                     NodeComboKey, NodeConfig, Placement, ServingTemplate, SloSpec,
                     combo_key)
from .kernels import NEG_INF, placement_search
from .milp import BINARY, CONTINUOUS, EQ, GE, LE, MilpModel, solve_exact
from .perf import PerfParams, ProfileTable, node_max_throughput, transfer_time

LIBRARY_FORMAT = "hetserve-template-library"
LIBRARY_VERSION = 1


class LibraryGenError(RuntimeError):
    """A (model, phase) pair yielded no feasible template at all."""


@dataclass(frozen=True)
class LibraryCaps:
    """Enumeration pruning: max nodes per combo, memory cap as model-size multiple."""

    n_max: int = 6
    rho: float = 12.0

    def __post_init__(self):
        if self.n_max < 1:
            raise DomainError("n_max must be >= 1")
        if self.rho <= 1:
            raise DomainError("rho must be > 1")


@dataclass(frozen=True)
class GenContext:
    """Everything the placement solvers need besides the combo itself."""

    perf: PerfParams = field(default_factory=PerfParams)
    profile: ProfileTable | None = None
    net_gbps: float = 12.5        # inter-node link assumed during generation
    net_latency_ms: float = 0.5
    granularity: int = 0          # 0 = auto (2 for even L >= 80, else 1)

    def layer_granularity(self, model: ModelSpec) -> int:
        if self.granularity:
            return self.granularity
        return 2 if model.num_layers >= 80 and model.num_layers % 2 == 0 else 1


def stage_budget_s(model: ModelSpec, slo: SloSpec, phase: str, S: int,
                   ctx: GenContext) -> float:
    """Per-stage latency budget: the SLO split uniformly across stages.

    For prefill, inter-stage activation forwarding is paid out of the SLO
    before the split; decode activations are a single token and are ignored.
    """
    total = slo.phase_ms(phase) / 1e3 * ctx.perf.slo_budget_frac
    if phase == PREFILL and S > 1:
        act_bytes = ctx.perf.avg_prompt_tokens * model.hidden_size * model.bytes_per_param
        hop = transfer_time(act_bytes, ctx.net_gbps, ctx.net_latency_ms, ctx.perf.net_eff)
        total -= (S - 1) * hop
    return total / S


def throughput_table(configs: list[NodeConfig], model: ModelSpec, slo: SloSpec,
                     phase: str, S: int, ctx: GenContext) -> np.ndarray:
    """T-hat rows: per-config max throughput for every layer count at this S."""
    g = ctx.layer_granularity(model)
    lsteps = model.num_layers // g
    budget = stage_budget_s(model, slo, phase, S, ctx)
    tab = np.zeros((len(configs), lsteps))
    if budget <= 0:
        return tab
    for ci, cfg in enumerate(configs):
        for jj in range(1, lsteps + 1):
            tab[ci, jj - 1] = node_max_throughput(cfg, model, phase, jj * g, budget,
                                                  ctx.perf, ctx.profile)
    return tab


def enumerate_combos(configs: list[NodeConfig], model: ModelSpec,
                     caps: LibraryCaps) -> list[NodeComboKey]:
    """All node multisets of 1..n_max nodes whose total memory can hold the
    model and stays under rho times the model size; deterministic order."""
    pool = sorted(configs, key=lambda c: c.name)
    lo = model.weight_bytes
    hi = caps.rho * model.weight_bytes
    out: list[NodeComboKey] = []
    for n in range(1, caps.n_max + 1):
        for pick in combinations_with_replacement(pool, n):
            mem = sum(c.mem_bytes for c in pick)
            if lo <= mem < hi:
                out.append(combo_key(list(pick)))
    out.sort(key=lambda k: (k.num_nodes, str(k)))
    return out


# ---------------------------------------------------------------------------
# ILP formulation
# ---------------------------------------------------------------------------

def build_placement_model(combo: NodeComboKey, model: ModelSpec, slo: SloSpec,
                          phase: str, S: int, ctx: GenContext) -> tuple[MilpModel, dict]:
    """Stage-layout ILP: binary x[s,j] (stage s holds j layer units), y[s,k]
    (node k on stage s), linearized products z[s,j,k], maximize the bottleneck
    throughput T."""
    nodes = combo.expand()
    K = len(nodes)
    if not 1 <= S <= K:
        raise DomainError(f"S={S} out of range for a {K}-node combo")
    g = ctx.layer_granularity(model)
    L = model.num_layers // g
    cfgs = sorted({n.name: n for n in nodes}.values(), key=lambda c: c.name)
    tab = throughput_table(cfgs, model, slo, phase, S, ctx)
    trow = {c.name: tab[i] for i, c in enumerate(cfgs)}

    m = MilpModel(name=f"placement_{model.name}_{phase}_S{S}")
    for s in range(S):
        for j in range(1, L + 1):
            m.add_var(f"x[{s}][{j}]", BINARY)
    for s in range(S):
        for k in range(K):
            m.add_var(f"y[{s}][{k}]", BINARY)
    for s in range(S):
        for j in range(1, L + 1):
            for k in range(K):
                m.add_var(f"z[{s}][{j}][{k}]", BINARY)
    m.add_var("T", CONTINUOUS)

    for s in range(S):
        m.add_constraint(f"one_layer_count[{s}]",
                         {f"x[{s}][{j}]": 1.0 for j in range(1, L + 1)}, EQ, 1.0)
    for k in range(K):
        m.add_constraint(f"one_stage[{k}]",
                         {f"y[{s}][{k}]": 1.0 for s in range(S)}, EQ, 1.0)
    m.add_constraint(
        "layer_sum",
        {f"x[{s}][{j}]": float(j) for s in range(S) for j in range(1, L + 1)},
        EQ, float(L))
    for s in range(S):
        coeffs = {"T": 1.0}
        for j in range(1, L + 1):
            for k in range(K):
                coeffs[f"z[{s}][{j}][{k}]"] = -float(trow[nodes[k].name][j - 1])
        m.add_constraint(f"bottleneck[{s}]", coeffs, LE, 0.0)
    for s in range(S):
        for j in range(1, L + 1):
            for k in range(K):
                z, x, y = f"z[{s}][{j}][{k}]", f"x[{s}][{j}]", f"y[{s}][{k}]"
                m.add_constraint(f"lin_a[{s}][{j}][{k}]", {z: 1.0, x: -1.0}, LE, 0.0)
                m.add_constraint(f"lin_b[{s}][{j}][{k}]", {z: 1.0, y: -1.0}, LE, 0.0)
                m.add_constraint(f"lin_c[{s}][{j}][{k}]",
                                 {z: 1.0, x: -1.0, y: -1.0}, GE, -1.0)
    m.set_objective({"T": 1.0}, "max")
    return m, {"granularity": g, "L_units": L, "num_nodes": K}


def _decode_ilp_placement(sol, S: int, L: int, K: int, g: int) -> tuple[list[int], list[int]]:
    layers = []
    for s in range(S):
        j = next(j for j in range(1, L + 1) if sol.int_value(f"x[{s}][{j}]") == 1)
        layers.append(j * g)
    stage_of_node = []
    for k in range(K):
        s = next(s for s in range(S) if sol.int_value(f"y[{s}][{k}]") == 1)
        stage_of_node.append(s)
    return layers, stage_of_node


def placement_ilp_for_S(combo: NodeComboKey, model: ModelSpec, slo: SloSpec,
                        phase: str, S: int, ctx: GenContext | None = None,
                        time_budget_s: float = 60.0,
                        engine: str = "auto") -> tuple[Placement, float] | None:
    """Solve the stage-layout ILP for a fixed stage count; None if infeasible."""
    ctx = ctx or GenContext()
    m, info = build_placement_model(combo, model, slo, phase, S, ctx)
    sol = solve_exact(m, time_budget_s, engine=engine)
    if sol.status == "infeasible" or sol.objective <= 1e-9:
        return None
    layers, stage_of_node = _decode_ilp_placement(
        sol, S, info["L_units"], info["num_nodes"], info["granularity"])
    placement = Placement(S, tuple(layers), tuple(stage_of_node))
    placement.validate(model, combo)
    return placement, float(sol.objective)


# ---------------------------------------------------------------------------
# DP search (production path)
# ---------------------------------------------------------------------------

def _decode_search_placement(stage_j: np.ndarray, stage_counts: np.ndarray,
                             combo: NodeComboKey, g: int) -> Placement:
    S = len(stage_j)
    order = sorted(range(S),
                   key=lambda s: (-int(stage_j[s]), tuple(-c for c in stage_counts[s])))
    layers = tuple(int(stage_j[s]) * g for s in order)
    base = {}
    offset = 0
    for cfg, n in combo.items:
        base[cfg.name] = offset
        offset += n
    names = [cfg.name for cfg, _ in combo.items]
    stage_of_node = [0] * combo.num_nodes
    next_free = dict(base)
    for pos, s in enumerate(order):
        for ci, name in enumerate(names):
            for _ in range(int(stage_counts[s][ci])):
                stage_of_node[next_free[name]] = pos
                next_free[name] += 1
    return Placement(S, layers, tuple(stage_of_node))


def placement_search_for_S(combo: NodeComboKey, model: ModelSpec, slo: SloSpec,
                           phase: str, S: int, ctx: GenContext | None = None
                           ) -> tuple[Placement, float] | None:
    """Exact DP equivalent of the placement ILP; None if infeasible."""
    ctx = ctx or GenContext()
    nodes = combo.expand()
    if not 1 <= S <= len(nodes):
        raise DomainError(f"S={S} out of range for a {len(nodes)}-node combo")
    g = ctx.layer_granularity(model)
    cfgs = [cfg for cfg, _ in combo.items]
    counts = np.array([n for _, n in combo.items], dtype=np.int64)
    tab = throughput_table(cfgs, model, slo, phase, S, ctx)
    best, stage_j, stage_counts = placement_search(counts, tab, S)
    if best <= 1e-9:
        return None
    placement = _decode_search_placement(stage_j, stage_counts, combo, g)
    placement.validate(model, combo)
    return placement, float(best)


def optimal_placement(combo: NodeComboKey, model: ModelSpec, slo: SloSpec,
                      phase: str, ctx: GenContext | None = None,
                      method: str = "search") -> ServingTemplate | None:
    """Best placement over S in [1, |combo|]; ties break toward fewer stages."""
    ctx = ctx or GenContext()
    solver = placement_search_for_S if method == "search" else placement_ilp_for_S
    best: tuple[Placement, float] | None = None
    for S in range(1, min(combo.num_nodes, model.num_layers) + 1):
        res = solver(combo, model, slo, phase, S, ctx)
        if res is not None and (best is None or res[1] > best[1]):
            best = res
    if best is None:
        return None
    return ServingTemplate(model.name, phase, slo, combo, best[0], best[1])


def recompute_throughput(template: ServingTemplate, model: ModelSpec,
                         ctx: GenContext) -> float:
    """Min-stage aggregate throughput re-derived from the placement."""
    budget = stage_budget_s(model, template.slo, template.phase,
                            template.placement.num_stages, ctx)
    if budget <= 0:
        return 0.0
    stage_nodes = template.placement.stage_nodes(template.combo)
    vals = []
    for s, nodes in enumerate(stage_nodes):
        j = template.placement.layers_per_stage[s]
        vals.append(sum(node_max_throughput(n, model, template.phase, j, budget,
                                            ctx.perf, ctx.profile) for n in nodes))
    return min(vals)


def stage_node_weights(template: ServingTemplate, model: ModelSpec,
                       ctx: GenContext) -> list[list[float]]:
    """Per-stage per-node expected throughput (router weights in the runtime)."""
    budget = stage_budget_s(model, template.slo, template.phase,
                            template.placement.num_stages, ctx)
    out = []
    for s, nodes in enumerate(template.placement.stage_nodes(template.combo)):
        j = template.placement.layers_per_stage[s]
        out.append([node_max_throughput(n, model, template.phase, j, budget,
                                        ctx.perf, ctx.profile) for n in nodes])
    return out


# ---------------------------------------------------------------------------
# library build + persistence
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _worker_init(tables, lsteps_by_mp):
    _WORKER_STATE["tables"] = tables
    _WORKER_STATE["lsteps"] = lsteps_by_mp


def _solve_chunk(args):
    """Run the DP for a chunk of combos of one (model, phase)."""
    mp_key, chunk = args
    tables = _WORKER_STATE["tables"][mp_key]
    results = []
    for combo_idx, counts, cfg_rows in chunk:
        best_val = NEG_INF
        best = None
        counts = np.asarray(counts, dtype=np.int64)
        for S in range(1, int(counts.sum()) + 1):
            if S > _WORKER_STATE["lsteps"][mp_key]:
                break
            tab = tables[S][cfg_rows, :]
            val, sj, sc = placement_search(counts, tab, S)
            if val > best_val and val > 1e-9:
                best_val = val
                best = (S, sj.tolist(), sc.tolist())
        results.append((combo_idx, best_val, best))
    return results


@dataclass
class TemplateLibrary:
    entries: list[ServingTemplate] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    _by_mp: dict = field(default_factory=dict, repr=False)
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.reindex()

    def reindex(self) -> None:
        self.entries.sort(key=lambda t: (t.model, t.phase, str(t.combo)))
        self._by_mp = {}
        self._by_id = {}
        for t in self.entries:
            self._by_mp.setdefault((t.model, t.phase), []).append(t)
            if t.template_id in self._by_id:
                raise DomainError(f"duplicate template {t.template_id}")
            self._by_id[t.template_id] = t

    def templates_for(self, model: str, phase: str) -> list[ServingTemplate]:
        return self._by_mp.get((model, phase), [])

    def get(self, template_id: str) -> ServingTemplate:
        return self._by_id[template_id]

    def __len__(self) -> int:
        return len(self.entries)

    def model_phases(self) -> list[tuple[str, str]]:
        return sorted(self._by_mp)

    def counts_by_model_phase(self) -> dict[tuple[str, str], int]:
        return {k: len(v) for k, v in sorted(self._by_mp.items())}

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.meta, sort_keys=True) + "\n")
            for t in self.entries:
                fh.write(json.dumps({
                    "model": t.model,
                    "phase": t.phase,
                    "slo": [t.slo.prefill_ms, t.slo.decode_ms],
                    "combo": [[c.name, n] for c, n in t.combo.items],
                    "num_stages": t.placement.num_stages,
                    "layers_per_stage": list(t.placement.layers_per_stage),
                    "stage_of_node": list(t.placement.stage_of_node),
                    "throughput_tps": t.throughput_tps,
                }, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str) -> "TemplateLibrary":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != LIBRARY_FORMAT:
                raise DomainError(f"{path} is not a template library file")
            configs = {name: _config_from_meta(spec)
                       for name, spec in header["configs"].items()}
            entries = []
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                combo = NodeComboKey(tuple(
                    (configs[name], int(n)) for name, n in rec["combo"]))
                entries.append(ServingTemplate(
                    model=rec["model"], phase=rec["phase"],
                    slo=SloSpec(*rec["slo"]), combo=combo,
                    placement=Placement(rec["num_stages"],
                                        tuple(rec["layers_per_stage"]),
                                        tuple(rec["stage_of_node"])),
                    throughput_tps=float(rec["throughput_tps"])))
        return cls(entries=entries, meta=header)


def _config_meta(cfg: NodeConfig) -> dict:
    return {"gpu": {"name": cfg.gpu.name, "mem_gb": cfg.gpu.mem_gb,
                    "bw_tbps": cfg.gpu.bw_tbps, "tflops": cfg.gpu.tflops,
                    "rel_cost": cfg.gpu.rel_cost},
            "gpu_count": cfg.gpu_count,
            "intra_node_interconnect_gbps": cfg.intra_node_interconnect_gbps}


def _config_from_meta(spec: dict) -> NodeConfig:
    return NodeConfig(GpuSpec(**spec["gpu"]), spec["gpu_count"],
                      spec["intra_node_interconnect_gbps"])


def build_library(configs: list[NodeConfig], models: list[ModelSpec],
                  slos: dict[str, SloSpec], caps: LibraryCaps,
                  ctx: GenContext | None = None, workers: int = 1,
                  method: str = "search",
                  phases: tuple[str, ...] = PHASES) -> TemplateLibrary:
    """Generate the full template library.

    Combos are independent work items, parallelized across processes; results
    merge deterministically in combo-key order.  A (model, phase) pair with no
    feasible template raises LibraryGenError.
    """
    ctx = ctx or GenContext()
    configs = sorted(configs, key=lambda c: c.name)
    cfg_index = {c.name: i for i, c in enumerate(configs)}
    t0 = time.monotonic()

    tables: dict[tuple[str, str], dict[int, np.ndarray]] = {}
    lsteps: dict[tuple[str, str], int] = {}
    work: dict[tuple[str, str], list] = {}
    combos_by_mp: dict[tuple[str, str], list[NodeComboKey]] = {}
    for model in models:
        slo = slos[model.name]
        combos = enumerate_combos(configs, model, caps)
        g = ctx.layer_granularity(model)
        for phase in phases:
            key = (model.name, phase)
            combos_by_mp[key] = combos
            lsteps[key] = model.num_layers // g
            smax = min(caps.n_max, model.num_layers)
            tables[key] = {S: throughput_table(configs, model, slo, phase, S, ctx)
                           for S in range(1, smax + 1)}
            items = []
            for i, combo in enumerate(combos):
                counts = [n for _, n in combo.items]
                rows = [cfg_index[c.name] for c, _ in combo.items]
                items.append((i, counts, rows))
            work[key] = items

    if method != "search":
        return _build_library_ilp(configs, models, slos, caps, ctx, combos_by_mp, t0)

    results: dict[tuple[str, str], dict[int, tuple]] = {k: {} for k in work}
    chunks = []
    for key, items in work.items():
        for i in range(0, len(items), 64):
            chunks.append((key, items[i:i + 64]))

    if workers > 1 and len(chunks) > 1:
        import multiprocessing as mp

        _worker_init(tables, lsteps)  # children inherit via fork
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=mp.get_context("fork")) as pool:
            for (key, _), res in zip(chunks, pool.map(_solve_chunk, chunks,
                                                      chunksize=4)):
                for combo_idx, val, best in res:
                    results[key][combo_idx] = (val, best)
    else:
        _worker_init(tables, lsteps)
        for chunk in chunks:
            for combo_idx, val, best in _solve_chunk(chunk):
                results[chunk[0]][combo_idx] = (val, best)

    entries: list[ServingTemplate] = []
    missing: list[tuple[str, str]] = []
    model_by_name = {m.name: m for m in models}
    for key, combos in combos_by_mp.items():
        model = model_by_name[key[0]]
        g = ctx.layer_granularity(model)
        found = 0
        for i, combo in enumerate(combos):
            val, best = results[key].get(i, (NEG_INF, None))
            if best is None:
                continue
            S, sj, sc = best
            placement = _decode_search_placement(
                np.asarray(sj, dtype=np.int64), np.asarray(sc, dtype=np.int64),
                combo, g)
            placement.validate(model, combo)
            entries.append(ServingTemplate(key[0], key[1], slos[key[0]], combo,
                                           placement, float(val)))
            found += 1
        if found == 0:
            missing.append(key)
    if missing:
        raise LibraryGenError(f"no feasible template for: {sorted(missing)}")

    return TemplateLibrary(entries=entries,
                           meta=_library_meta(configs, models, slos, caps, ctx, t0))


def _build_library_ilp(configs, models, slos, caps, ctx, combos_by_mp, t0):
    entries = []
    missing = []
    model_by_name = {m.name: m for m in models}
    for (mname, phase), combos in combos_by_mp.items():
        model = model_by_name[mname]
        found = 0
        for combo in combos:
            t = optimal_placement(combo, model, slos[mname], phase, ctx, method="ilp")
            if t is not None:
                entries.append(t)
                found += 1
        if found == 0:
            missing.append((mname, phase))
    if missing:
        raise LibraryGenError(f"no feasible template for: {sorted(missing)}")
    return TemplateLibrary(entries=entries,
                           meta=_library_meta(configs, models, slos, caps, ctx, t0))


def _library_meta(configs, models, slos, caps, ctx, t0=None) -> dict:
    return {
        "format": LIBRARY_FORMAT,
        "version": LIBRARY_VERSION,
        "caps": {"n_max": caps.n_max, "rho": caps.rho},
        "perf_digest": ctx.perf.digest(),
        "perf": dict(ctx.perf.__dict__),
        "net": {"gbps": ctx.net_gbps, "latency_ms": ctx.net_latency_ms},
        "granularity": {m.name: ctx.layer_granularity(m) for m in models},
        "configs": {c.name: _config_meta(c) for c in configs},
        "models": {m.name: dict(m.__dict__) for m in models},
        "slos": {name: [s.prefill_ms, s.decode_ms] for name, s in slos.items()},
    }
