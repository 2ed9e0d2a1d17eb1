"""Core vocabulary types: GPUs, nodes, regions, models, SLOs, templates, markets, plans."""

from __future__ import annotations

from dataclasses import dataclass, field

PREFILL = "prefill"
DECODE = "decode"
PHASES = (PREFILL, DECODE)

GIB = 2**30


class DomainError(ValueError):
    """Invalid domain object or operation."""


@dataclass(frozen=True)
class GpuSpec:
    name: str
    mem_gb: float          # GiB per GPU
    bw_tbps: float         # memory bandwidth, TB/s
    tflops: float          # dense compute, TFLOPS
    rel_cost: float        # dimensionless hourly cost relative to a reference GPU

    def __post_init__(self):
        for f in ("mem_gb", "bw_tbps", "tflops", "rel_cost"):
            if getattr(self, f) <= 0:
                raise DomainError(f"GpuSpec.{f} must be > 0, got {getattr(self, f)}")


@dataclass(frozen=True)
class NodeConfig:
    """Atomic provisioning unit: a node with `gpu_count` GPUs of one type."""

    gpu: GpuSpec
    gpu_count: int
    intra_node_interconnect_gbps: float = 300.0

    def __post_init__(self):
        if self.gpu_count < 1:
            raise DomainError(f"gpu_count must be >= 1, got {self.gpu_count}")

    @property
    def name(self) -> str:
        return f"{self.gpu_count}x{self.gpu.name}"

    @property
    def mem_bytes(self) -> float:
        return self.gpu_count * self.gpu.mem_gb * GIB


@dataclass(frozen=True)
class Region:
    name: str
    inter_node_net_gbps: float = 12.5   # GB/s between nodes in this region
    inter_node_latency_ms: float = 0.5  # one-way

    def __post_init__(self):
        if self.inter_node_net_gbps <= 0 or self.inter_node_latency_ms < 0:
            raise DomainError(f"invalid network parameters for region {self.name}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    params_total_b: float          # billions of parameters
    params_active_b: float         # billions activated per token (== total unless MoE)
    hidden_size: int
    bytes_per_param: float = 2.0   # fp16/bf16 default
    kv_bytes_per_token_per_layer: float = 4096.0
    is_moe: bool = False
    is_hybrid_attn: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise DomainError("num_layers must be >= 1")
        if self.params_active_b > self.params_total_b:
            raise DomainError("params_active_b cannot exceed params_total_b")
        for f in ("params_total_b", "params_active_b", "hidden_size",
                  "bytes_per_param", "kv_bytes_per_token_per_layer"):
            if getattr(self, f) <= 0:
                raise DomainError(f"ModelSpec.{f} must be > 0")

    @property
    def weight_bytes(self) -> float:
        return self.params_total_b * 1e9 * self.bytes_per_param


@dataclass(frozen=True)
class SloSpec:
    prefill_ms: float  # end-to-end prompt latency bound
    decode_ms: float   # per-output-token latency bound (TPOT)

    def __post_init__(self):
        if self.prefill_ms <= 0 or self.decode_ms <= 0:
            raise DomainError("SLO bounds must be > 0")

    def phase_ms(self, phase: str) -> float:
        return self.prefill_ms if phase == PREFILL else self.decode_ms


@dataclass(frozen=True)
class NodeComboKey:
    """Canonical multiset of node configs; order-independent equality."""

    items: tuple[tuple[NodeConfig, int], ...]  # sorted by config name, counts > 0

    @property
    def num_nodes(self) -> int:
        return sum(n for _, n in self.items)

    @property
    def total_mem_bytes(self) -> float:
        return sum(c.mem_bytes * n for c, n in self.items)

    def expand(self) -> list[NodeConfig]:
        """Node list in canonical order (config-name order, repeats adjacent)."""
        out: list[NodeConfig] = []
        for c, n in self.items:
            out.extend([c] * n)
        return out

    def counts(self) -> dict[str, int]:
        return {c.name: n for c, n in self.items}

    def __str__(self) -> str:
        return "+".join(f"{c.name}*{n}" for c, n in self.items) if self.items else "(empty)"


def combo_key(nodes: list[NodeConfig]) -> NodeComboKey:
    """Canonical, permutation-invariant multiset key over node configs."""
    agg: dict[str, tuple[NodeConfig, int]] = {}
    for node in nodes:
        cur = agg.get(node.name)
        if cur is not None and cur[0] != node:
            raise DomainError(f"two distinct configs share the name {node.name!r}")
        agg[node.name] = (node, (cur[1] if cur else 0) + 1)
    items = tuple((cfg, n) for _, (cfg, n) in sorted(agg.items()))
    return NodeComboKey(items)


@dataclass(frozen=True)
class Placement:
    """Pipeline layout: per-stage layer counts plus the node-to-stage assignment.

    Layer blocks are contiguous in model order: stage s holds layers
    [sum(layers_per_stage[:s]), sum(layers_per_stage[:s+1])).
    """

    num_stages: int
    layers_per_stage: tuple[int, ...]
    stage_of_node: tuple[int, ...]  # node index (combo expansion order) -> stage in [0, S)

    def __post_init__(self):
        if self.num_stages < 1 or len(self.layers_per_stage) != self.num_stages:
            raise DomainError("layers_per_stage length must equal num_stages")
        if any(j < 1 for j in self.layers_per_stage):
            raise DomainError("every stage must hold >= 1 layer")
        if any(not (0 <= s < self.num_stages) for s in self.stage_of_node):
            raise DomainError("stage_of_node entries must be in [0, num_stages)")

    def validate(self, model: ModelSpec, combo: NodeComboKey) -> None:
        """Full validity check against a model and node combo."""
        if sum(self.layers_per_stage) != model.num_layers:
            raise DomainError(
                f"stage layers sum to {sum(self.layers_per_stage)}, model has {model.num_layers}")
        if len(self.stage_of_node) != combo.num_nodes:
            raise DomainError("every node of the combo must be assigned to exactly one stage")
        used = set(self.stage_of_node)
        if used != set(range(self.num_stages)):
            raise DomainError("every stage must have at least one node")

    def stage_nodes(self, combo: NodeComboKey) -> list[list[NodeConfig]]:
        nodes = combo.expand()
        out: list[list[NodeConfig]] = [[] for _ in range(self.num_stages)]
        for idx, stage in enumerate(self.stage_of_node):
            out[stage].append(nodes[idx])
        return out


@dataclass(frozen=True)
class ServingTemplate:
    """Reusable offline artifact: optimal placement and throughput for one node combo."""

    model: str
    phase: str
    slo: SloSpec
    combo: NodeComboKey
    placement: Placement
    throughput_tps: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise DomainError(f"phase must be one of {PHASES}")
        if self.throughput_tps <= 0:
            raise DomainError("template throughput must be > 0")

    @property
    def template_id(self) -> str:
        return f"{self.model}|{self.phase}|{self.combo}"


@dataclass
class DemandSpec:
    """Required throughput in tokens/s per (model, phase)."""

    rates: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, rate in self.rates.items():
            if rate < 0:
                raise DomainError(f"negative demand for {key}")

    def get(self, model: str, phase: str) -> float:
        return self.rates.get((model, phase), 0.0)

    def scaled(self, factor: float) -> "DemandSpec":
        return DemandSpec({k: v * factor for k, v in self.rates.items()})


@dataclass
class MarketState:
    """Per (region, config): available node count and per-node price in USD/h."""

    availability: dict[tuple[str, str], int] = field(default_factory=dict)
    prices: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, a in self.availability.items():
            if a < 0:
                raise DomainError(f"negative availability for {key}")
        for key, p in self.prices.items():
            if p <= 0:
                raise DomainError(f"non-positive price for {key}")

    def price(self, region: str, config: str) -> float | None:
        return self.prices.get((region, config))

    def available(self, region: str, config: str) -> int:
        return self.availability.get((region, config), 0)

    def regions(self) -> list[str]:
        names = {r for r, _ in self.prices} | {r for r, _ in self.availability}
        return sorted(names)


@dataclass
class AllocationPlan:
    """Instance counts per (region, template-id) plus the objective breakdown."""

    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    objective_usd_per_h: float = 0.0
    provision_usd_per_h: float = 0.0
    init_penalty_usd_per_h: float = 0.0
    # extra reporting, not part of the objective
    shortfall: dict[tuple[str, str], float] = field(default_factory=dict)
    demand_scale: float = 1.0
    status: str = "optimal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise DomainError("instance counts must be >= 0")
        gap = abs(self.objective_usd_per_h
                  - (self.provision_usd_per_h + self.init_penalty_usd_per_h))
        if gap > 1e-6 * max(1.0, abs(self.objective_usd_per_h)):
            raise DomainError("objective must equal provision + penalty")

    def total_instances(self) -> int:
        return sum(self.counts.values())

    def active_templates(self) -> int:
        return sum(1 for n in self.counts.values() if n > 0)


def template_cost(template: ServingTemplate, market: MarketState, region: Region | str) -> float:
    """Provisioning cost of one instance of `template` in `region`, USD/h."""
    rname = region.name if isinstance(region, Region) else region
    total = 0.0
    for cfg, n in template.combo.items:
        p = market.price(rname, cfg.name)
        if p is None:
            raise DomainError(f"config {cfg.name} not offered in region {rname}")
        total += n * p
    return total
