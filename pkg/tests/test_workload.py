import numpy as np
import pytest

from hetserve.domain import DECODE, PREFILL, DomainError
from hetserve.workload import (AvailabilityTimeline, SimScenario, TraceEvent,
                               apply_imbalance, load_availability, load_prices,
                               load_trace, measured_rps, merge_traces,
                               save_availability, save_prices, save_trace,
                               scale_trace, synth_trace, window_token_rates)

import conftest as C


class TestSynth:
    def test_deterministic(self):
        a = synth_trace("m", 5.0, 1.0, (512, 0.5), (64, 0.5), 100.0, seed=3)
        b = synth_trace("m", 5.0, 1.0, (512, 0.5), (64, 0.5), 100.0, seed=3)
        assert a == b

    def test_zero_horizon(self):
        assert synth_trace("m", 5.0, 1.0, (512, 0.5), (64, 0.5), 0.0, seed=3) == []

    def test_poisson_dispersion(self):
        # cv = 1: index of dispersion of per-second counts ~ 1
        trace = synth_trace("m", 20.0, 1.0, (512, 0.0), (64, 0.0), 2000.0, seed=5)
        counts = np.bincount([int(e.arrival_s) for e in trace], minlength=2000)
        iod = counts.var() / counts.mean()
        assert 0.9 <= iod <= 1.1

    def test_invalid_params(self):
        with pytest.raises(DomainError):
            synth_trace("m", 0.0, 1.0, (512, 0.5), (64, 0.5), 10.0, seed=0)
        with pytest.raises(DomainError):
            synth_trace("m", 1.0, 1.0, (0, 0.5), (64, 0.5), 10.0, seed=0)

    def test_rate_near_target(self):
        trace = synth_trace("m", 10.0, 1.0, (512, 0.5), (64, 0.5), 1000.0, seed=7)
        assert measured_rps(trace) == pytest.approx(10.0, rel=0.05)


class TestScale:
    def trace(self):
        return synth_trace("m", 4.0, 1.0, (512, 0.5), (64, 0.5), 500.0, seed=11)

    def test_identity(self):
        t = self.trace()
        current = measured_rps(t)
        scaled = scale_trace(t, "m", current)
        assert [e.arrival_s for e in scaled] == pytest.approx(
            [e.arrival_s for e in t])

    def test_halving_target_doubles_gaps(self):
        t = self.trace()
        current = measured_rps(t)
        scaled = scale_trace(t, "m", current / 2)
        gaps = np.diff([e.arrival_s for e in t])
        gaps2 = np.diff([e.arrival_s for e in scaled])
        assert gaps2 == pytest.approx(2 * gaps)

    def test_hits_target_within_1pct(self):
        scaled = scale_trace(self.trace(), "m", 9.0)
        assert measured_rps(scaled) == pytest.approx(9.0, rel=0.01)

    def test_lengths_untouched_order_preserved(self):
        t = self.trace()
        scaled = scale_trace(t, "m", 1.0)
        assert [(e.prompt_tokens, e.output_tokens) for e in scaled] == \
               [(e.prompt_tokens, e.output_tokens) for e in t]
        assert all(a.arrival_s <= b.arrival_s for a, b in zip(scaled, scaled[1:]))

    def test_empty_trace_error(self):
        with pytest.raises(DomainError):
            scale_trace([], "m", 1.0)


class TestImbalance:
    def traces(self, names, rps=3.0):
        return {n: synth_trace(n, rps, 1.0, (256, 0.3), (32, 0.3), 400.0, seed=13)
                for n in names}

    def test_balanced_identity(self):
        traces = self.traces(["a", "b", "c"])
        out = apply_imbalance(traces, "balanced", {"a": 1, "b": 2, "c": 3})
        assert out == traces

    def test_three_models_large_heavy(self):
        traces = self.traces(["a", "b", "c"])
        sizes = {"a": 10, "b": 20, "c": 30}
        out = apply_imbalance(traces, "large_heavy", sizes)
        total = sum(measured_rps(t) for t in out.values())
        assert measured_rps(out["c"]) == pytest.approx(0.8 * total, rel=1e-6)
        assert measured_rps(out["a"]) == pytest.approx(0.1 * total, rel=1e-6)

    def test_six_models_small_heavy(self):
        names = [f"m{i}" for i in range(6)]
        traces = self.traces(names)
        sizes = {f"m{i}": 10 + i for i in range(6)}
        out = apply_imbalance(traces, "small_heavy", sizes)
        total = sum(measured_rps(t) for t in out.values())
        for n in ("m0", "m1"):  # bottom third shares 80% equally
            assert measured_rps(out[n]) == pytest.approx(0.4 * total, rel=1e-6)
        for n in ("m2", "m3", "m4", "m5"):
            assert measured_rps(out[n]) == pytest.approx(0.05 * total, rel=1e-6)

    def test_preserves_total_count(self):
        traces = self.traces(["a", "b", "c"])
        out = apply_imbalance(traces, "large_heavy", {"a": 1, "b": 2, "c": 3})
        assert sum(len(t) for t in out.values()) == sum(len(t) for t in traces.values())

    def test_total_rate_preserved(self):
        traces = self.traces(["a", "b", "c"])
        out = apply_imbalance(traces, "small_heavy", {"a": 1, "b": 2, "c": 3})
        assert sum(measured_rps(t) for t in out.values()) == pytest.approx(
            sum(measured_rps(t) for t in traces.values()), rel=1e-6)

    def test_needs_three_models(self):
        with pytest.raises(DomainError):
            apply_imbalance(self.traces(["a", "b"]), "large_heavy", {"a": 1, "b": 2})


class TestFiles:
    def test_trace_roundtrip(self, tmp_path):
        t = synth_trace("m", 3.0, 1.0, (128, 0.4), (16, 0.4), 60.0, seed=1)
        path = str(tmp_path / "trace.csv")
        save_trace(t, path)
        assert load_trace(path) == t

    def test_availability_roundtrip(self, tmp_path):
        timeline = AvailabilityTimeline({(-1, "r1", "1xg"): 5, (2, "r1", "1xg"): 1})
        path = str(tmp_path / "avail.csv")
        save_availability(timeline, path)
        assert load_availability(path).rows == timeline.rows
        assert timeline.for_epoch(0) == {("r1", "1xg"): 5}
        assert timeline.for_epoch(2) == {("r1", "1xg"): 1}

    def test_prices_roundtrip(self, tmp_path):
        prices = {("r1", "1xg"): 2.25, ("r2", "1xg"): 1.0}
        path = str(tmp_path / "prices.csv")
        save_prices(prices, path)
        assert load_prices(path) == prices

    def test_scenario_roundtrip_identity(self, tmp_path, tiny_model, tiny_slo):
        scen = C.mini_scenario(tiny_model, tiny_slo)
        p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        scen.save(p1)
        loaded = SimScenario.load(p1)
        loaded.save(p2)
        assert open(p1).read() == open(p2).read()
        assert loaded.build_trace(3) == scen.build_trace(3)

    def test_validation_catches_bad_refs(self, tmp_path, tiny_model, tiny_slo):
        scen = C.mini_scenario(tiny_model, tiny_slo)
        scen.prices[("nowhere", "1xL4")] = 1.0
        with pytest.raises(DomainError, match="unknown region"):
            scen.validate()


class TestWindowRates:
    def test_token_rates(self):
        trace = [TraceEvent(1.0, "m", 100, 10), TraceEvent(2.0, "m", 50, 20),
                 TraceEvent(9.5, "m", 999, 99)]
        rates = window_token_rates(trace, 0.0, 5.0)
        assert rates[("m", PREFILL)] == pytest.approx(150 / 5)
        assert rates[("m", DECODE)] == pytest.approx(30 / 5)

    def test_merge_sorted(self):
        a = [TraceEvent(2.0, "a", 1, 1)]
        b = [TraceEvent(1.0, "b", 1, 1)]
        merged = merge_traces({"a": a, "b": b})
        assert [e.model for e in merged] == ["b", "a"]
