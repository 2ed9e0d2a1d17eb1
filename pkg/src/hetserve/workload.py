"""Traces, availability timelines, prices, and scenario bundles.

File formats are deliberately diff-able: traces/availability/prices are
delimited text with headers, the scenario bundle is a single JSON document
with self-describing keys that either embeds the workload (synthetic spec) or
references a trace file.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import (DECODE, PREFILL, DomainError, GpuSpec, MarketState, ModelSpec,
                     NodeConfig, Region, SloSpec)
from .perf import PerfParams
from .templates import LibraryCaps


@dataclass(frozen=True)
class TraceEvent:
    arrival_s: float
    model: str
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise DomainError("token counts must be >= 1")


def save_trace(events: list[TraceEvent], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("arrival_s,model,prompt_tokens,output_tokens\n")
        for e in events:
            fh.write(f"{e.arrival_s!r},{e.model},{e.prompt_tokens},{e.output_tokens}\n")


def load_trace(path: str) -> list[TraceEvent]:
    events = []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("arrival_s"):
            raise DomainError(f"{path}: missing trace header")
        for line in fh:
            if not line.strip():
                continue
            t, m, p, o = line.strip().split(",")
            events.append(TraceEvent(float(t), m, int(p), int(o)))
    events.sort(key=lambda e: (e.arrival_s, e.model))
    return events


def _model_rng(seed: int, name: str) -> np.random.Generator:
    salt = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def synth_trace(model: str, rps: float, burstiness_cv: float,
                prompt_dist: tuple[float, float], output_dist: tuple[float, float],
                horizon_s: float, seed: int) -> list[TraceEvent]:
    """Gamma-renewal arrivals (cv=1 is Poisson) with log-normal token lengths.

    prompt_dist/output_dist are (median, sigma) of the log-normal.
    """
    if rps <= 0:
        raise DomainError("rps must be > 0")
    if burstiness_cv <= 0:
        raise DomainError("burstiness_cv must be > 0")
    pm, ps = prompt_dist
    om, osig = output_dist
    if pm < 1 or om < 1 or ps < 0 or osig < 0:
        raise DomainError("invalid token length distribution")
    if horizon_s <= 0:
        return []
    rng = _model_rng(seed, model)
    shape = 1.0 / burstiness_cv**2
    scale = (1.0 / rps) / shape
    n_est = int(rps * horizon_s * 1.5 + 20)
    out: list[TraceEvent] = []
    t = 0.0
    while True:
        gaps = rng.gamma(shape, scale, size=n_est)
        prompts = np.maximum(1, np.round(rng.lognormal(math.log(pm), ps, size=n_est)))
        outputs = np.maximum(1, np.round(rng.lognormal(math.log(om), osig, size=n_est)))
        for g, p, o in zip(gaps, prompts, outputs):
            t += float(g)
            if t >= horizon_s:
                return out
            out.append(TraceEvent(float(t), model, int(p), int(o)))


def measured_rps(trace: list[TraceEvent]) -> float:
    if not trace:
        raise DomainError("empty trace")
    span = max(e.arrival_s for e in trace)
    if span <= 0:
        raise DomainError("trace span is zero")
    return len(trace) / span


def scale_trace(trace: list[TraceEvent], model: str,
                target_rps: float) -> list[TraceEvent]:
    """Uniformly rescale arrival times so the trace's rate hits target_rps."""
    mine = [e for e in trace if e.model == model]
    if not mine:
        raise DomainError(f"trace has no events for model {model!r}")
    if target_rps <= 0:
        raise DomainError("target_rps must be > 0")
    factor = measured_rps(mine) / target_rps
    return [TraceEvent(e.arrival_s * factor, e.model, e.prompt_tokens, e.output_tokens)
            for e in mine]


def apply_imbalance(traces: dict[str, list[TraceEvent]], split: str,
                    model_sizes: dict[str, float]) -> dict[str, list[TraceEvent]]:
    """Skew per-model request rates: the top (large_heavy) or bottom
    (small_heavy) third of models by size receives 80% of total requests,
    split equally inside the group; total rate is preserved."""
    if split == "balanced":
        return dict(traces)
    if split not in ("large_heavy", "small_heavy"):
        raise DomainError(f"unknown split {split!r}")
    names = sorted(traces, key=lambda n: (model_sizes[n], n))
    if len(names) < 3:
        raise DomainError("imbalance needs at least 3 models")
    third = max(1, len(names) // 3)
    heavy = names[-third:] if split == "large_heavy" else names[:third]
    rest = [n for n in names if n not in heavy]
    total = sum(measured_rps(traces[n]) for n in names)
    out = {}
    for n in names:
        share = 0.8 / len(heavy) if n in heavy else 0.2 / len(rest)
        out[n] = scale_trace(traces[n], n, total * share)
    return out


def merge_traces(traces: dict[str, list[TraceEvent]]) -> list[TraceEvent]:
    merged = [e for evs in traces.values() for e in evs]
    merged.sort(key=lambda e: (e.arrival_s, e.model))
    return merged


def window_token_rates(trace: list[TraceEvent], t0: float, t1: float
                       ) -> dict[tuple[str, str], float]:
    """Observed token rates per (model, phase) over [t0, t1)."""
    if t1 <= t0:
        raise DomainError("empty window")
    rates: dict[tuple[str, str], float] = {}
    for e in trace:
        if t0 <= e.arrival_s < t1:
            rates[(e.model, PREFILL)] = rates.get((e.model, PREFILL), 0.0) + e.prompt_tokens
            rates[(e.model, DECODE)] = rates.get((e.model, DECODE), 0.0) + e.output_tokens
    return {k: v / (t1 - t0) for k, v in rates.items()}


@dataclass
class AvailabilityTimeline:
    """Per-epoch node availability; epoch -1 rows are defaults."""

    rows: dict[tuple[int, str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        for key, n in self.rows.items():
            if n < 0:
                raise DomainError(f"negative availability at {key}")

    def for_epoch(self, epoch: int) -> dict[tuple[str, str], int]:
        out = {(r, c): n for (e, r, c), n in self.rows.items() if e == -1}
        out.update({(r, c): n for (e, r, c), n in self.rows.items() if e == epoch})
        return out


@dataclass
class PlannerKnobs:
    k_init: float = 300.0 / 3600.0   # init-time : adjustment-interval ratio
    init_delay_s: float = 300.0
    patience_s: float = 30.0
    headroom: float = 1.1
    warm_start: bool = True          # first reconfiguration applies instantly
    chunk_tokens: int = 2048         # prefill tokens per engine iteration
    amortization_epochs: int = 10    # init cost divided by this per epoch
    solve_budget_s: float = 60.0
    prune_ratio: float = 3.0         # cost/throughput prune factor (0 disables)


@dataclass
class SimScenario:
    name: str
    gpus: list[GpuSpec]
    configs: list[NodeConfig]
    regions: list[Region]
    models: list[ModelSpec]
    slos: dict[str, SloSpec]
    prices: dict[tuple[str, str], float]
    availability: AvailabilityTimeline
    epoch_s: float = 360.0
    epochs: int = 5
    caps: LibraryCaps = field(default_factory=LibraryCaps)
    perf: PerfParams = field(default_factory=PerfParams)
    knobs: PlannerKnobs = field(default_factory=PlannerKnobs)
    synthetic: dict[str, dict] | None = None   # per-model synth spec
    trace_file: str | None = None
    profile_file: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon_s(self) -> float:
        return self.epoch_s * self.epochs

    def region(self, name: str) -> Region:
        return next(r for r in self.regions if r.name == name)

    def model(self, name: str) -> ModelSpec:
        return next(m for m in self.models if m.name == name)

    def config(self, name: str) -> NodeConfig:
        return next(c for c in self.configs if c.name == name)

    def market_at(self, epoch: int) -> MarketState:
        return MarketState(availability=self.availability.for_epoch(epoch),
                           prices=dict(self.prices))

    def build_trace(self, seed: int) -> list[TraceEvent]:
        if self.trace_file:
            return load_trace(self.trace_file)
        if not self.synthetic:
            return []
        traces = {}
        for mname, spec in sorted(self.synthetic.items()):
            traces[mname] = synth_trace(
                mname, spec["rps"], spec.get("cv", 1.0),
                (spec.get("prompt_median", 1024.0), spec.get("prompt_sigma", 0.8)),
                (spec.get("output_median", 256.0), spec.get("output_sigma", 0.8)),
                self.horizon_s, seed)
        split = self.meta.get("imbalance", "balanced")
        if split != "balanced":
            sizes = {m.name: m.params_total_b for m in self.models}
            traces = apply_imbalance(traces, split, sizes)
        return merge_traces(traces)

    def validate(self) -> None:
        cfg_names = {c.name for c in self.configs}
        region_names = {r.name for r in self.regions}
        model_names = {m.name for m in self.models}
        for m in self.models:
            if m.name not in self.slos:
                raise DomainError(f"model {m.name} has no SLO")
        for (r, c) in self.prices:
            if r not in region_names:
                raise DomainError(f"price references unknown region {r!r}")
            if c not in cfg_names:
                raise DomainError(f"price references unknown config {c!r}")
        for (_, r, c) in self.availability.rows:
            if r not in region_names or c not in cfg_names:
                raise DomainError(f"availability references unknown ({r}, {c})")
        if self.synthetic:
            for mname in self.synthetic:
                if mname not in model_names:
                    raise DomainError(f"synthetic workload for unknown model {mname!r}")
        gpu_names = {g.name for g in self.gpus}
        for c in self.configs:
            if c.gpu.name not in gpu_names:
                raise DomainError(f"config {c.name} uses unknown GPU {c.gpu.name!r}")

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": "hetserve-scenario",
            "version": 1,
            "name": self.name,
            "epoch_s": self.epoch_s,
            "epochs": self.epochs,
            "caps": {"n_max": self.caps.n_max, "rho": self.caps.rho},
            "perf": dict(self.perf.__dict__),
            "knobs": asdict(self.knobs),
            "gpus": [dict(g.__dict__) for g in self.gpus],
            "configs": [{"gpu": c.gpu.name, "gpu_count": c.gpu_count,
                         "intra_node_interconnect_gbps": c.intra_node_interconnect_gbps}
                        for c in self.configs],
            "regions": [dict(r.__dict__) for r in self.regions],
            "models": [dict(m.__dict__) for m in self.models],
            "slos": {k: [v.prefill_ms, v.decode_ms] for k, v in self.slos.items()},
            "prices": [[r, c, p] for (r, c), p in sorted(self.prices.items())],
            "availability": [[e, r, c, n] for (e, r, c), n
                             in sorted(self.availability.rows.items())],
            "synthetic": self.synthetic,
            "trace_file": self.trace_file,
            "profile_file": self.profile_file,
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def save(self, path: str) -> None:
        self.validate()
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "SimScenario":
        doc = json.loads(text)
        if doc.get("format") != "hetserve-scenario":
            raise DomainError("not a scenario file")
        gpus = [GpuSpec(**g) for g in doc["gpus"]]
        by_gpu = {g.name: g for g in gpus}
        configs = [NodeConfig(by_gpu[c["gpu"]], c["gpu_count"],
                              c["intra_node_interconnect_gbps"])
                   for c in doc["configs"]]
        scenario = cls(
            name=doc["name"],
            gpus=gpus,
            configs=configs,
            regions=[Region(**r) for r in doc["regions"]],
            models=[ModelSpec(**m) for m in doc["models"]],
            slos={k: SloSpec(*v) for k, v in doc["slos"].items()},
            prices={(r, c): float(p) for r, c, p in doc["prices"]},
            availability=AvailabilityTimeline(
                {(int(e), r, c): int(n) for e, r, c, n in doc["availability"]}),
            epoch_s=doc["epoch_s"],
            epochs=doc["epochs"],
            caps=LibraryCaps(**doc["caps"]),
            perf=PerfParams(**doc["perf"]),
            knobs=PlannerKnobs(**doc["knobs"]),
            synthetic=doc.get("synthetic"),
            trace_file=doc.get("trace_file"),
            profile_file=doc.get("profile_file"),
            meta=doc.get("meta", {}),
        )
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path: str) -> "SimScenario":
        with open(path) as fh:
            return cls.from_json(fh.read())


def save_availability(timeline: AvailabilityTimeline, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,region,config,count\n")
        for (e, r, c), n in sorted(timeline.rows.items()):
            fh.write(f"{e},{r},{c},{n}\n")


def load_availability(path: str) -> AvailabilityTimeline:
    rows = {}
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("epoch"):
            raise DomainError(f"{path}: missing availability header")
        for line in fh:
            if not line.strip():
                continue
            e, r, c, n = line.strip().split(",")
            rows[(int(e), r, c)] = int(n)
    return AvailabilityTimeline(rows)


def save_prices(prices: dict[tuple[str, str], float], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("region,config,usd_per_h\n")
        for (r, c), p in sorted(prices.items()):
            fh.write(f"{r},{c},{p!r}\n")


def load_prices(path: str) -> dict[tuple[str, str], float]:
    prices = {}
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("region"):
            raise DomainError(f"{path}: missing prices header")
        for line in fh:
            if not line.strip():
                continue
            r, c, p = line.strip().split(",")
            prices[(r, c)] = float(p)
    return prices
