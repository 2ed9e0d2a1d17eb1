"""Smooth weighted round-robin: over any dispatch window, per-target counts
track the weight proportions to within one dispatch."""

from __future__ import annotations


class SmoothWRR:
    def __init__(self):
        self._weights: dict[str, float] = {}
        self._credit: dict[str, float] = {}

    def set_weight(self, key: str, weight: float) -> None:
        if weight <= 0:
            raise ValueError("weights must be > 0")
        self._weights[key] = weight
        self._credit.setdefault(key, 0.0)

    def remove(self, key: str) -> None:
        self._weights.pop(key, None)
        self._credit.pop(key, None)

    def keys(self) -> list[str]:
        return sorted(self._weights)

    def __len__(self) -> int:
        return len(self._weights)

    def pick(self, eligible: set[str] | None = None) -> str | None:
        """Each dispatch adds every member's weight to its credit, picks the
        max-credit member (smallest key on ties), then subtracts the total."""
        pool = self.keys() if eligible is None else sorted(k for k in self._weights
                                                           if k in eligible)
        if not pool:
            return None
        total = sum(self._weights[k] for k in pool)
        best = None
        for k in pool:
            self._credit[k] += self._weights[k]
            if best is None or self._credit[k] > self._credit[best] + 1e-12:
                best = k
        self._credit[best] -= total
        return best
