"""Cost-aware planner and simulator for multi-LLM serving on heterogeneous cloud GPUs."""

__version__ = "0.1.0"

from .domain import (DECODE, PREFILL, AllocationPlan, DemandSpec, GpuSpec, MarketState,
                     ModelSpec, NodeComboKey, NodeConfig, Placement, Region,
                     ServingTemplate, SloSpec, combo_key, template_cost)
from .perf import (PerfParams, ProfileTable, iteration_time, node_max_throughput,
                   transfer_time, weight_bytes_per_layer)

__all__ = [
    "PREFILL", "DECODE",
    "GpuSpec", "NodeConfig", "Region", "ModelSpec", "SloSpec",
    "NodeComboKey", "Placement", "ServingTemplate", "DemandSpec", "MarketState",
    "AllocationPlan", "combo_key", "template_cost",
    "PerfParams", "ProfileTable", "weight_bytes_per_layer", "iteration_time",
    "node_max_throughput", "transfer_time",
]
