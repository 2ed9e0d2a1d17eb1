"""Per-epoch, per-model simulation metrics and their serialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_COLUMNS = [
    "epoch", "model",
    "provision_usd_per_h", "init_usd_per_h", "hourly_cost_usd",
    "prefill_goodput_tps", "decode_goodput_tps",
    "prefill_slo_attainment", "decode_slo_attainment",
    "prefill_e2e_mean_s", "prefill_e2e_p50_s", "prefill_e2e_p95_s",
    "tpot_mean_s", "tpot_p50_s", "tpot_p95_s",
    "arrivals", "completions", "rejections", "in_flight_end",
]


def _percentiles(vals: list[float]) -> tuple[float, float, float]:
    if not vals:
        return 0.0, 0.0, 0.0
    arr = np.asarray(vals)
    return float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95))


@dataclass
class EpochAccumulator:
    epoch: int
    t0: float
    t1: float
    arrivals: dict[str, int] = field(default_factory=dict)
    completions: dict[str, int] = field(default_factory=dict)
    rejections: dict[str, int] = field(default_factory=dict)
    prefill_ok_tokens: dict[str, float] = field(default_factory=dict)
    prefill_all_tokens: dict[str, float] = field(default_factory=dict)
    decode_ok_tokens: dict[str, float] = field(default_factory=dict)
    decode_all_tokens: dict[str, float] = field(default_factory=dict)
    prefill_lat: dict[str, list[float]] = field(default_factory=dict)
    tpot: dict[str, list[float]] = field(default_factory=dict)
    prefill_done: dict[str, int] = field(default_factory=dict)
    prefill_met: dict[str, int] = field(default_factory=dict)
    decode_done: dict[str, int] = field(default_factory=dict)
    decode_met: dict[str, int] = field(default_factory=dict)
    provision_usd: dict[str, float] = field(default_factory=dict)  # USD in epoch
    init_usd: dict[str, float] = field(default_factory=dict)

    def bump(self, table: dict, model: str, amount=1) -> None:
        table[model] = table.get(model, 0) + amount


@dataclass
class SimMetrics:
    rows: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def add_epoch(self, acc: EpochAccumulator, models: list[str],
                  in_flight_by_model: dict[str, int]) -> None:
        hours = (acc.t1 - acc.t0) / 3600.0
        secs = acc.t1 - acc.t0
        for model in sorted(models):
            pmean, p50, p95 = _percentiles(acc.prefill_lat.get(model, []))
            tmean, t50, t95 = _percentiles(acc.tpot.get(model, []))
            prov = acc.provision_usd.get(model, 0.0) / hours
            init = acc.init_usd.get(model, 0.0) / hours
            pf_done = acc.prefill_done.get(model, 0)
            dc_done = acc.decode_done.get(model, 0)
            self.rows.append({
                "epoch": acc.epoch, "model": model,
                "provision_usd_per_h": prov,
                "init_usd_per_h": init,
                "hourly_cost_usd": prov + init,
                "prefill_goodput_tps": acc.prefill_ok_tokens.get(model, 0.0) / secs,
                "decode_goodput_tps": acc.decode_ok_tokens.get(model, 0.0) / secs,
                "prefill_slo_attainment":
                    acc.prefill_met.get(model, 0) / pf_done if pf_done else 0.0,
                "decode_slo_attainment":
                    acc.decode_met.get(model, 0) / dc_done if dc_done else 0.0,
                "prefill_e2e_mean_s": pmean, "prefill_e2e_p50_s": p50,
                "prefill_e2e_p95_s": p95,
                "tpot_mean_s": tmean, "tpot_p50_s": t50, "tpot_p95_s": t95,
                "arrivals": acc.arrivals.get(model, 0),
                "completions": acc.completions.get(model, 0),
                "rejections": acc.rejections.get(model, 0),
                "in_flight_end": in_flight_by_model.get(model, 0),
            })

    def finalize(self) -> None:
        tot = {"hourly_cost_usd": 0.0, "provision_usd_per_h": 0.0,
               "init_usd_per_h": 0.0, "prefill_goodput_tps": 0.0,
               "decode_goodput_tps": 0.0, "arrivals": 0, "completions": 0,
               "rejections": 0}
        epochs = {r["epoch"] for r in self.rows}
        n = max(1, len(epochs))
        for r in self.rows:
            tot["hourly_cost_usd"] += r["hourly_cost_usd"] / n
            tot["provision_usd_per_h"] += r["provision_usd_per_h"] / n
            tot["init_usd_per_h"] += r["init_usd_per_h"] / n
            tot["prefill_goodput_tps"] += r["prefill_goodput_tps"] / n
            tot["decode_goodput_tps"] += r["decode_goodput_tps"] / n
            tot["arrivals"] += r["arrivals"]
            tot["completions"] += r["completions"]
            tot["rejections"] += r["rejections"]
        self.totals = tot

    def model_rows(self, model: str) -> list[dict]:
        return [r for r in self.rows if r["model"] == model]

    def mean(self, column: str) -> float:
        if not self.rows:
            return 0.0
        return sum(r[column] for r in self.rows) / len(self.rows)

    def to_csv_text(self) -> str:
        lines = [",".join(_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(
                repr(r[c]) if isinstance(r[c], float) else str(r[c])
                for c in _COLUMNS))
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        self.finalize()
        lines = ["metric,value"]
        for k in sorted(self.totals):
            v = self.totals[k]
            lines.append(f"{k},{v!r}" if isinstance(v, float) else f"{k},{v}")
        return "\n".join(lines) + "\n"
