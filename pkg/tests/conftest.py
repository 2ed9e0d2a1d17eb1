import numpy as np
import pytest

from hetserve.catalog import GPU_CATALOG
from hetserve.domain import (DECODE, PREFILL, GpuSpec, ModelSpec, NodeConfig, Region,
                             SloSpec)
from hetserve.perf import PerfParams, ProfileTable
from hetserve.templates import GenContext, LibraryCaps, TemplateLibrary, build_library
from hetserve.workload import AvailabilityTimeline, PlannerKnobs, SimScenario


@pytest.fixture(scope="session")
def tiny_model() -> ModelSpec:
    return ModelSpec("m7b", num_layers=32, params_total_b=7, params_active_b=7,
                     hidden_size=4096)


@pytest.fixture(scope="session")
def tiny_slo() -> SloSpec:
    return SloSpec(1500, 80)


def make_configs():
    return [NodeConfig(GPU_CATALOG["L40S"], 1, 64.0),
            NodeConfig(GPU_CATALOG["L40S"], 2, 64.0),
            NodeConfig(GPU_CATALOG["L4"], 1, 64.0),
            NodeConfig(GPU_CATALOG["L4"], 4, 64.0)]


@pytest.fixture(scope="session")
def mini_library(tiny_model, tiny_slo) -> TemplateLibrary:
    return build_library(make_configs(), [tiny_model], {tiny_model.name: tiny_slo},
                         LibraryCaps(3, 10.0), GenContext())


def mini_scenario(tiny_model, tiny_slo, rps=2.0, epochs=3, epoch_s=120.0,
                  nodes_each=20) -> SimScenario:
    configs = make_configs()
    regions = [Region("r1")]
    return SimScenario(
        name="mini",
        gpus=[GPU_CATALOG["L40S"], GPU_CATALOG["L4"]],
        configs=configs,
        regions=regions,
        models=[tiny_model],
        slos={tiny_model.name: tiny_slo},
        prices={("r1", c.name): c.gpu.rel_cost * c.gpu_count for c in configs},
        availability=AvailabilityTimeline(
            {(-1, "r1", c.name): nodes_each for c in configs}),
        epoch_s=epoch_s,
        epochs=epochs,
        caps=LibraryCaps(3, 10.0),
        knobs=PlannerKnobs(),
        synthetic={tiny_model.name: {"rps": rps, "prompt_median": 512.0,
                                     "prompt_sigma": 0.5, "output_median": 64.0,
                                     "output_sigma": 0.5}},
    )


@pytest.fixture(scope="session")
def mini_scen(tiny_model, tiny_slo) -> SimScenario:
    return mini_scenario(tiny_model, tiny_slo)


# ---------------------------------------------------------------------------
# contention scenario: two models share a small pool of two decode GPU types;
# greedy per-model allocation starves one model while the joint solve fits
# both by mixing types inside replicas.  Throughputs come from a profile table
# (3 layers: the big GPU can hold 2 fast, the small one only 1 fast).
# ---------------------------------------------------------------------------

CONTENTION_PROFILE = {
    # (config, model, phase, j) -> tokens/s, any budget
    ("1xGA", "m1", DECODE): {1: 110.0, 2: 105.0, 3: 100.0},
    ("1xGB", "m1", DECODE): {1: 105.0, 2: 42.0, 3: 40.0},
    ("1xGA", "m2", DECODE): {1: 210.0, 2: 200.0, 3: 60.0},
    ("1xGB", "m2", DECODE): {1: 170.0, 2: 32.0, 3: 30.0},
    ("1xGP", "m1", DECODE): {1: 0.0, 2: 0.0, 3: 0.0},
    ("1xGP", "m2", DECODE): {1: 0.0, 2: 0.0, 3: 0.0},
    ("1xGP", "m1", PREFILL): {1: 30000.0, 2: 30000.0, 3: 30000.0},
    ("1xGP", "m2", PREFILL): {1: 30000.0, 2: 30000.0, 3: 30000.0},
    ("1xGA", "m1", PREFILL): {1: 0.0, 2: 0.0, 3: 0.0},
    ("1xGB", "m1", PREFILL): {1: 0.0, 2: 0.0, 3: 0.0},
    ("1xGA", "m2", PREFILL): {1: 0.0, 2: 0.0, 3: 0.0},
    ("1xGB", "m2", PREFILL): {1: 0.0, 2: 0.0, 3: 0.0},
}

CONTENTION_DEMAND = {"m1": 170.0, "m2": 130.0}  # decode tokens/s


def contention_profile() -> ProfileTable:
    table = ProfileTable()
    for (cfg, model, phase), by_j in CONTENTION_PROFILE.items():
        for j, tps in by_j.items():
            table.add(cfg, model, phase, j, -1, tps)
    return table


def contention_scenario(tmp_path, rps1=0.65, rps2=0.50):
    """Pool: 2x GA, 3x GB (decode-contended) plus plentiful GP for prefill.

    Decode demand at the default output length (256 tokens/request):
    m1 ~ rps1*256 = 170 tok/s, m2 ~ rps2*256 = 130 tok/s.
    """
    ga = GpuSpec("GA", mem_gb=40, bw_tbps=1.0, tflops=300, rel_cost=1.0)
    gb = GpuSpec("GB", mem_gb=40, bw_tbps=1.0, tflops=300, rel_cost=1.0)
    gp = GpuSpec("GP", mem_gb=40, bw_tbps=1.0, tflops=300, rel_cost=1.0)
    configs = [NodeConfig(ga, 1, 64.0), NodeConfig(gb, 1, 64.0), NodeConfig(gp, 1, 64.0)]
    models = [
        ModelSpec("m1", num_layers=3, params_total_b=10, params_active_b=10,
                  hidden_size=1024, kv_bytes_per_token_per_layer=1024),
        ModelSpec("m2", num_layers=3, params_total_b=10, params_active_b=10,
                  hidden_size=1024, kv_bytes_per_token_per_layer=1024),
    ]
    slos = {"m1": SloSpec(4000, 600), "m2": SloSpec(4000, 600)}
    regions = [Region("r1")]
    profile_path = str(tmp_path / "contention_profile.tsv")
    contention_profile().dump(profile_path)
    scen = SimScenario(
        name="contention",
        gpus=[ga, gb, gp],
        configs=configs,
        regions=regions,
        models=models,
        slos=slos,
        prices={("r1", "1xGA"): 1.0, ("r1", "1xGB"): 1.0, ("r1", "1xGP"): 0.5},
        availability=AvailabilityTimeline({(-1, "r1", "1xGA"): 2,
                                           (-1, "r1", "1xGB"): 3,
                                           (-1, "r1", "1xGP"): 8}),
        epoch_s=300.0,
        epochs=6,
        caps=LibraryCaps(2, 5.0),
        perf=PerfParams(avg_prompt_tokens=32, avg_output_tokens=256,
                        avg_ctx_tokens=160),
        knobs=PlannerKnobs(headroom=1.0),
        synthetic={
            "m1": {"rps": rps1, "cv": 0.4, "prompt_median": 32.0, "prompt_sigma": 0.0,
                   "output_median": 256.0, "output_sigma": 0.0},
            "m2": {"rps": rps2, "cv": 0.4, "prompt_median": 32.0, "prompt_sigma": 0.0,
                   "output_median": 256.0, "output_sigma": 0.0},
        },
        profile_file=profile_path,
    )
    scen.validate()
    return scen


def contention_library(scen) -> TemplateLibrary:
    from hetserve.perf import ProfileTable

    ctx = GenContext(perf=scen.perf, profile=ProfileTable.load(scen.profile_file),
                     net_gbps=12.5, net_latency_ms=0.5)
    return build_library(scen.configs, scen.models, scen.slos, scen.caps, ctx)


# ---------------------------------------------------------------------------
# seeded random feasible scenarios for planner dominance comparisons
# ---------------------------------------------------------------------------

def random_planner_inputs(seed: int):
    """A small random market + demand + library where every planner is feasible."""
    from hetserve.allocation import RunningState
    from hetserve.domain import DemandSpec, MarketState

    rng = np.random.default_rng(seed)
    gpus = [
        GpuSpec("big", mem_gb=float(rng.integers(60, 90)),
                bw_tbps=float(rng.uniform(2.0, 3.5)),
                tflops=float(rng.uniform(600, 1000)), rel_cost=7.6),
        GpuSpec("mid", mem_gb=float(rng.integers(40, 50)),
                bw_tbps=float(rng.uniform(0.7, 1.2)),
                tflops=float(rng.uniform(250, 400)), rel_cost=2.2),
        GpuSpec("small", mem_gb=24.0, bw_tbps=float(rng.uniform(0.3, 0.7)),
                tflops=float(rng.uniform(80, 140)), rel_cost=1.0),
    ]
    configs = []
    for g in gpus:
        for n in (1, 2, 4):
            configs.append(NodeConfig(g, n, 64.0))
    n_models = int(rng.integers(1, 3))
    models = []
    slos = {}
    for i in range(n_models):
        layers = int(rng.choice([16, 24, 32]))
        size_b = float(rng.uniform(4, 30))
        models.append(ModelSpec(f"mod{i}", num_layers=layers, params_total_b=size_b,
                                params_active_b=size_b, hidden_size=4096))
        slos[f"mod{i}"] = SloSpec(float(rng.uniform(900, 2000)),
                                  float(rng.uniform(50, 120)))
    regions = [Region("ra"), Region("rb")][: int(rng.integers(1, 3))]
    price_jitter = {r.name: float(rng.uniform(0.9, 1.1)) for r in regions}
    prices = {(r.name, c.name): round(c.gpu.rel_cost * c.gpu_count
                                      * price_jitter[r.name], 3)
              for r in regions for c in configs}
    avail = {(r.name, c.name): int(rng.integers(6, 16))
             for r in regions for c in configs}
    market = MarketState(availability=avail, prices=prices)
    library = build_library(configs, models, slos, LibraryCaps(3, 8.0), GenContext())
    demand = {}
    for m in models:
        rps = float(rng.uniform(1.0, 6.0))
        demand[(m.name, PREFILL)] = rps * float(rng.uniform(400, 1200))
        demand[(m.name, DECODE)] = rps * float(rng.uniform(80, 300))
    return library, DemandSpec(demand), market, RunningState()
