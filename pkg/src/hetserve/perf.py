"""Parametric node performance model.

A roofline model with utilization knobs stands in for hardware profiling: it
supplies the per-stage max throughput used by the placement optimizer and the
per-iteration timing used by the simulator.  A loadable profile table can
override the formula per (config, model, phase, layer-count, budget) entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .domain import DECODE, PREFILL, ModelSpec, NodeConfig


@dataclass(frozen=True)
class PerfParams:
    """Utilization factors and workload averages driving the roofline model.

    Defaults are typical serving-efficiency mid-points; only internal
    consistency matters since every planner variant shares the same model.
    """

    mfu: float = 0.5                  # model-FLOPs utilization
    mbu: float = 0.7                  # memory-bandwidth utilization
    net_eff: float = 0.8              # network efficiency
    fixed_overhead_ms: float = 2.0    # per-iteration fixed cost
    avg_prompt_tokens: float = 1024.0
    avg_output_tokens: float = 256.0
    avg_ctx_tokens: float = 1152.0    # mean resident context during decode
    # fraction of the SLO the planner budgets for compute; the remainder
    # absorbs queueing and stage hand-off delay at runtime (1.0 = the whole
    # SLO, i.e. zero operating slack)
    slo_budget_frac: float = 1.0

    def __post_init__(self):
        for f in ("mfu", "mbu", "net_eff", "slo_budget_frac"):
            v = getattr(self, f)
            if not 0 < v <= 1:
                raise ValueError(f"PerfParams.{f} must be in (0, 1], got {v}")
        if self.fixed_overhead_ms < 0:
            raise ValueError("fixed_overhead_ms must be >= 0")

    def phase_ctx(self, phase: str) -> float:
        """Per-request resident KV context in tokens for capacity/read estimates."""
        return self.avg_prompt_tokens if phase == PREFILL else self.avg_ctx_tokens

    def digest(self) -> str:
        import hashlib
        import json

        raw = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:12]


def weight_bytes_per_layer(model: ModelSpec) -> float:
    return model.weight_bytes / model.num_layers


def active_bytes_flops_per_layer(model: ModelSpec) -> float:
    """Active parameters per layer (drives compute; MoE activates fewer)."""
    return model.params_active_b * 1e9 / model.num_layers


def iteration_time(node: NodeConfig, model: ModelSpec, j: int, batch_tokens: float,
                   batch_reqs: int, phase: str, params: PerfParams,
                   ctx_tokens: float | None = None) -> float:
    """One engine iteration over a batch on a node holding `j` layers, seconds.

    Roofline: max(compute, memory) + fixed overhead.  Compute scales with
    active params and processed tokens; memory reads the layer weights once
    plus each request's resident KV (`ctx_tokens` per request; defaults to the
    phase average from `params`).
    """
    assert j >= 1 and batch_tokens >= 1 and batch_reqs >= 1
    gc = node.gpu_count
    ctx = params.phase_ctx(phase) if ctx_tokens is None else ctx_tokens
    compute = (2.0 * active_bytes_flops_per_layer(model) * j * batch_tokens
               / (gc * node.gpu.tflops * 1e12 * params.mfu))
    memory = (j * (weight_bytes_per_layer(model)
                   + batch_reqs * model.kv_bytes_per_token_per_layer * ctx)
              / (gc * node.gpu.bw_tbps * 1e12 * params.mbu))
    return max(compute, memory) + params.fixed_overhead_ms / 1e3


def transfer_time(num_bytes: float, link_gbps: float, latency_ms: float,
                  net_eff: float = 1.0) -> float:
    """Point-to-point transfer: one-way latency plus bandwidth term, seconds."""
    assert num_bytes >= 0
    return latency_ms / 1e3 + num_bytes / (link_gbps * 1e9 * net_eff)


@dataclass
class ProfileTable:
    """Measured-throughput overrides: (config, model, phase, j, budget-bucket) -> tokens/s.

    Budget buckets are integer milliseconds; a bucket of -1 matches any budget.
    Table hits win over the parametric formula.
    """

    entries: dict[tuple[str, str, str, int, int], float] = field(default_factory=dict)

    def add(self, config: str, model: str, phase: str, j: int, budget_ms: int,
            tokens_per_s: float) -> None:
        if tokens_per_s < 0:
            raise ValueError("profile throughput must be >= 0")
        self.entries[(config, model, phase, j, budget_ms)] = tokens_per_s

    def lookup(self, config: str, model: str, phase: str, j: int,
               budget_s: float) -> float | None:
        bucket = int(round(budget_s * 1e3))
        hit = self.entries.get((config, model, phase, j, bucket))
        if hit is None:
            hit = self.entries.get((config, model, phase, j, -1))
        return hit

    @classmethod
    def load(cls, path: str) -> "ProfileTable":
        """Delimited text: config, model, phase, j, budget_ms, tokens_per_s."""
        table = cls()
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [p.strip() for p in line.replace(",", " ").split()]
                if parts[0] == "config":  # header
                    continue
                if len(parts) != 6:
                    raise ValueError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
                cfg, mdl, phase, j, bud, tps = parts
                table.add(cfg, mdl, phase, int(j), int(bud), float(tps))
        return table

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("config model phase j budget_ms tokens_per_s\n")
            for key in sorted(self.entries):
                cfg, mdl, phase, j, bud = key
                fh.write(f"{cfg} {mdl} {phase} {j} {bud} {self.entries[key]!r}\n")


def _tokens_per_request(model: ModelSpec, phase: str, params: PerfParams) -> float:
    # prefill iterations process whole prompts; decode emits one token per request
    return params.avg_prompt_tokens if phase == PREFILL else 1.0


def max_batch_by_memory(node: NodeConfig, model: ModelSpec, phase: str, j: int,
                        params: PerfParams) -> int:
    """Largest resident batch whose KV fits beside the stage's weights."""
    free = node.mem_bytes - j * weight_bytes_per_layer(model)
    if free <= 0:
        return 0
    per_req = j * model.kv_bytes_per_token_per_layer * params.phase_ctx(phase)
    return int(free / per_req)


def node_max_throughput(node: NodeConfig, model: ModelSpec, phase: str, j: int,
                        stage_budget_s: float, params: PerfParams,
                        profile: ProfileTable | None = None) -> float:
    """Max sustainable tokens/s of a node holding `j` layers under a stage budget.

    Picks the largest integer batch meeting both the latency budget (one
    iteration for prefill, one token step for decode) and the KV-capacity cap;
    returns 0 when the weights alone overflow memory or no batch of 1 fits the
    budget.  Throughput is monotone in batch size (weights amortize), so the
    best batch is the largest feasible one.
    """
    if profile is not None:
        hit = profile.lookup(node.name, model.name, phase, j, stage_budget_s)
        if hit is not None:
            return hit
    b, tput = planned_batch_and_tput(node, model, phase, j, stage_budget_s, params)
    return tput


def planned_batch(node: NodeConfig, model: ModelSpec, phase: str, j: int,
                  stage_budget_s: float, params: PerfParams) -> int:
    """The batch size behind the node's max throughput: the concurrency the
    runtime should admit to stay within the latency budget (0 if infeasible)."""
    b, _ = planned_batch_and_tput(node, model, phase, j, stage_budget_s, params)
    return b


def planned_batch_and_tput(node: NodeConfig, model: ModelSpec, phase: str, j: int,
                           stage_budget_s: float,
                           params: PerfParams) -> tuple[int, float]:
    assert stage_budget_s > 0 and j >= 1
    b_mem = max_batch_by_memory(node, model, phase, j, params)
    if b_mem < 1:
        return 0, 0.0

    tpr = _tokens_per_request(model, phase, params)
    gc = node.gpu_count
    # iteration_time(B) = max(a*B, w + k*B) + d with B = batch_reqs
    a = 2.0 * active_bytes_flops_per_layer(model) * j * tpr / (gc * node.gpu.tflops * 1e12 * params.mfu)
    w = j * weight_bytes_per_layer(model) / (gc * node.gpu.bw_tbps * 1e12 * params.mbu)
    k = (j * model.kv_bytes_per_token_per_layer * params.phase_ctx(phase)
         / (gc * node.gpu.bw_tbps * 1e12 * params.mbu))
    d = params.fixed_overhead_ms / 1e3

    slack = stage_budget_s - d
    if slack <= 0:
        return 0, 0.0
    b_lat = math.inf
    if a > 0:
        b_lat = min(b_lat, slack / a)
    if k > 0:
        b_lat = min(b_lat, (slack - w) / k)
    elif w > slack:
        return 0, 0.0
    if not math.isfinite(b_lat):
        b = b_mem
    else:
        b = min(b_mem, int(math.floor(b_lat + 1e-9)))
    if b < 1:
        return 0, 0.0

    def iter_t(batch: int) -> float:
        return iteration_time(node, model, j, batch * tpr, batch, phase, params)

    # local fix-up so the closed form agrees exactly with an integer search
    while b >= 1 and iter_t(b) > stage_budget_s + 1e-12:
        b -= 1
    while b < b_mem and iter_t(b + 1) <= stage_budget_s + 1e-12:
        b += 1
    if b < 1:
        return 0, 0.0
    return b, b * tpr / iter_t(b)
