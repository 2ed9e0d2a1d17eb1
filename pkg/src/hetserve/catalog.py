"""Built-in GPU/model catalogs and default scenario builders.

Hardware numbers are public datasheet values; prices are relative hourly
rates normalized to a single L4 node.  Token-length distributions are
synthetic placeholders (flagged in scenario metadata).
"""

from __future__ import annotations

from .domain import GpuSpec, ModelSpec, NodeConfig, Region, SloSpec
from .perf import PerfParams
from .templates import LibraryCaps
from .workload import AvailabilityTimeline, PlannerKnobs, SimScenario

GPU_CATALOG = {
    "H100": GpuSpec("H100", mem_gb=80, bw_tbps=3.35, tflops=989, rel_cost=7.6),
    "A100": GpuSpec("A100", mem_gb=80, bw_tbps=2.04, tflops=312, rel_cost=3.5),
    "L40S": GpuSpec("L40S", mem_gb=48, bw_tbps=0.86, tflops=362, rel_cost=2.2),
    "L4": GpuSpec("L4", mem_gb=24, bw_tbps=0.30, tflops=121, rel_cost=1.0),
    "A10G": GpuSpec("A10G", mem_gb=24, bw_tbps=0.60, tflops=70, rel_cost=1.2),
}

MODEL_CATALOG = {
    "phi4-14b": ModelSpec("phi4-14b", num_layers=40, params_total_b=14.7,
                          params_active_b=14.7, hidden_size=5120,
                          kv_bytes_per_token_per_layer=4096),
    "gpt-oss-20b": ModelSpec("gpt-oss-20b", num_layers=24, params_total_b=20.9,
                             params_active_b=3.6, hidden_size=2880,
                             kv_bytes_per_token_per_layer=2048,
                             is_moe=True, is_hybrid_attn=True),
    "qwen3-32b": ModelSpec("qwen3-32b", num_layers=64, params_total_b=32.8,
                           params_active_b=32.8, hidden_size=5120,
                           kv_bytes_per_token_per_layer=4096),
    "llama3-70b": ModelSpec("llama3-70b", num_layers=80, params_total_b=70.6,
                            params_active_b=70.6, hidden_size=8192,
                            kv_bytes_per_token_per_layer=4096),
    "gpt-oss-120b": ModelSpec("gpt-oss-120b", num_layers=36, params_total_b=116.8,
                              params_active_b=5.1, hidden_size=2880,
                              kv_bytes_per_token_per_layer=2048,
                              is_moe=True, is_hybrid_attn=True),
    "qwen3-235b": ModelSpec("qwen3-235b", num_layers=94, params_total_b=235.0,
                            params_active_b=22.0, hidden_size=4096,
                            kv_bytes_per_token_per_layer=2048, is_moe=True),
}

SLO_CATALOG = {
    "phi4-14b": SloSpec(1200, 60),
    "gpt-oss-20b": SloSpec(900, 30),
    "qwen3-32b": SloSpec(1600, 100),
    "llama3-70b": SloSpec(1500, 80),
    "gpt-oss-120b": SloSpec(1000, 40),
    "qwen3-235b": SloSpec(1800, 120),
}

CORE_MODELS = ["qwen3-32b", "gpt-oss-20b", "phi4-14b"]
CORE_GPUS = ["L40S", "L4", "A10G"]
EXTENDED_MODELS = CORE_MODELS + ["qwen3-235b", "gpt-oss-120b", "llama3-70b"]
EXTENDED_GPUS = CORE_GPUS + ["H100", "A100"]

GPU_COUNTS = (1, 2, 4, 8)

_REGION_PRICE_FACTOR = {"us-east": 1.0, "ap-northeast": 1.08, "us-central": 0.95}


def make_configs(gpu_names: list[str], counts=GPU_COUNTS) -> list[NodeConfig]:
    out = []
    for name in gpu_names:
        gpu = GPU_CATALOG[name]
        interconnect = 600.0 if gpu.mem_gb >= 80 else 64.0  # NVLink vs PCIe class
        for n in counts:
            out.append(NodeConfig(gpu, n, interconnect))
    return sorted(out, key=lambda c: c.name)


def make_prices(configs: list[NodeConfig], regions: list[Region],
                base_usd: float = 1.0) -> dict[tuple[str, str], float]:
    prices = {}
    for r in regions:
        factor = _REGION_PRICE_FACTOR.get(r.name, 1.0)
        for c in configs:
            prices[(r.name, c.name)] = round(
                base_usd * c.gpu.rel_cost * c.gpu_count * factor, 4)
    return prices


def flat_availability(configs: list[NodeConfig], regions: list[Region],
                      nodes_each: int) -> AvailabilityTimeline:
    rows = {(-1, r.name, c.name): nodes_each for r in regions for c in configs}
    return AvailabilityTimeline(rows)


def _synth_spec(models: list[str], rps: float) -> dict[str, dict]:
    # sigma 0.5 keeps p99 prompts ~3x the median; heavier tails make fixed
    # prefill SLOs unattainable for the longest prompts regardless of capacity
    return {m: {"rps": rps, "cv": 1.0, "prompt_median": 1024.0, "prompt_sigma": 0.5,
                "output_median": 256.0, "output_sigma": 0.5} for m in models}


def perf_for_workload(synth: dict[str, dict],
                      slo_budget_frac: float = 0.55) -> PerfParams:
    """Perf-model workload averages consistent with the synthetic trace: the
    planner must see the log-normal means, not the medians.  Half the SLO is
    reserved as queueing/hand-off slack by default."""
    import math as _math

    specs = list(synth.values())
    prompt = sum(s["prompt_median"] * _math.exp(s.get("prompt_sigma", 0.0) ** 2 / 2)
                 for s in specs) / len(specs)
    output = sum(s["output_median"] * _math.exp(s.get("output_sigma", 0.0) ** 2 / 2)
                 for s in specs) / len(specs)
    return PerfParams(avg_prompt_tokens=round(prompt, 1),
                      avg_output_tokens=round(output, 1),
                      avg_ctx_tokens=round(prompt + output / 2, 1),
                      slo_budget_frac=slo_budget_frac)


def core_scenario(rps_per_model: float = 10.0, epochs: int = 5,
                  nodes_each: int = 24, imbalance: str = "balanced") -> SimScenario:
    """3 models x 12 configs x 2 regions (default workload: 10 req/s/model)."""
    regions = [Region("us-east"), Region("ap-northeast")]
    configs = make_configs(CORE_GPUS)
    models = [MODEL_CATALOG[m] for m in CORE_MODELS]
    return SimScenario(
        name="core",
        gpus=[GPU_CATALOG[g] for g in CORE_GPUS],
        configs=configs,
        regions=regions,
        models=models,
        slos={m: SLO_CATALOG[m] for m in CORE_MODELS},
        prices=make_prices(configs, regions),
        availability=flat_availability(configs, regions, nodes_each),
        epochs=epochs,
        caps=LibraryCaps(6, 12.0),
        perf=perf_for_workload(_synth_spec(CORE_MODELS, rps_per_model)),
        # headroom sized for SLO-goodput: capacity plans at ~75% utilization
        knobs=PlannerKnobs(headroom=1.3),
        synthetic=_synth_spec(CORE_MODELS, rps_per_model),
        meta={"imbalance": imbalance,
              "token_dists": "synthetic placeholder (median 1024/256, sigma 0.5)"},
    )


def extended_scenario(rps_per_model: float = 25.0, epochs: int = 5,
                      nodes_each: int = 48, imbalance: str = "balanced") -> SimScenario:
    """6 models x 20 configs x 3 regions (default workload: 25 req/s/model)."""
    regions = [Region("us-east"), Region("ap-northeast"), Region("us-central")]
    configs = make_configs(EXTENDED_GPUS)
    models = [MODEL_CATALOG[m] for m in EXTENDED_MODELS]
    return SimScenario(
        name="extended",
        gpus=[GPU_CATALOG[g] for g in EXTENDED_GPUS],
        configs=configs,
        regions=regions,
        models=models,
        slos={m: SLO_CATALOG[m] for m in EXTENDED_MODELS},
        prices=make_prices(configs, regions),
        availability=flat_availability(configs, regions, nodes_each),
        epochs=epochs,
        caps=LibraryCaps(6, 12.0),
        perf=perf_for_workload(_synth_spec(EXTENDED_MODELS, rps_per_model)),
        knobs=PlannerKnobs(headroom=1.3),
        synthetic=_synth_spec(EXTENDED_MODELS, rps_per_model),
        meta={"imbalance": imbalance,
              "token_dists": "synthetic placeholder (median 1024/256, sigma 0.5)"},
    )


def scale_to_scarce(scenario: SimScenario, used_nodes: dict[tuple[str, str], int],
                    margin: float) -> SimScenario:
    """Clamp availability to (1 + margin) x the node counts a reference
    allocation actually used (rounded up), making the market tight but feasible."""
    import math as _math

    rows = {}
    for (e, r, c), n in scenario.availability.rows.items():
        cap = used_nodes.get((r, c), 0)
        rows[(e, r, c)] = min(n, int(_math.ceil(cap * (1.0 + margin)))) if cap else 0
    out = SimScenario(**{**scenario.__dict__,
                         "availability": AvailabilityTimeline(rows),
                         "name": scenario.name + "-scarce"})
    meta = dict(out.meta)
    meta["scarce_margin"] = margin
    out.meta = meta
    return out
