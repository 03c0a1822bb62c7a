"""Retrieval metrics and evaluation reports.

Recall@N counts a query as correct when any of its first N results lies within
a planar distance threshold (metres) of the ground truth. Height recall does
the same with ``|label - true height|``. Memory usage is the mean fraction of
database entries scanned per query, and the performance ratio compares the
summed R@1 + R@5 + R@10 of a method against the full-database baseline.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, SchemaError

RATIO_NS = (1, 5, 10)


def round_half_up(value: float, places: int = 2) -> float:
    """Round the shortest decimal form of ``value`` half-up (86.115 -> 86.12)."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def _check(n: int, threshold: float, count: int) -> None:
    if count == 0:
        raise InputError("metric is undefined for zero queries")
    if n < 1:
        raise InputError("N must be >= 1")
    if not threshold > 0:
        raise InputError(f"threshold must be positive, got {threshold}")


def recall_at_n(
    retrieved_positions: Sequence[np.ndarray],
    true_positions: np.ndarray,
    n: int,
    threshold_m: float,
) -> float:
    """Percentage of queries with a result within ``threshold_m`` among their top ``n``."""
    true_positions = np.asarray(true_positions, dtype=np.float64).reshape(-1, 2)
    _check(n, threshold_m, len(retrieved_positions))
    if len(true_positions) != len(retrieved_positions):
        raise InputError("one ground-truth position per query is required")
    hits = 0
    for found, truth in zip(retrieved_positions, true_positions):
        found = np.asarray(found, dtype=np.float64).reshape(-1, 2)[:n]
        if len(found) and np.min(np.hypot(*(found - truth).T)) <= threshold_m:
            hits += 1
    return 100.0 * hits / len(retrieved_positions)


def height_recall(
    retrieved_labels: Sequence[np.ndarray],
    true_heights: Sequence[float],
    n: int,
    threshold_m: float,
) -> float:
    _check(n, threshold_m, len(retrieved_labels))
    if len(true_heights) != len(retrieved_labels):
        raise InputError("one true height per query is required")
    hits = 0
    for labels, truth in zip(retrieved_labels, true_heights):
        labels = np.asarray(labels, dtype=np.float64)[:n]
        if len(labels) and np.min(np.abs(labels - truth)) <= threshold_m:
            hits += 1
    return 100.0 * hits / len(retrieved_labels)


def avg_height_error(retrieved_labels: Sequence[np.ndarray], true_heights: Sequence[float]) -> float:
    """Mean absolute error of the top-1 height label."""
    if len(retrieved_labels) == 0:
        raise InputError("average height error is undefined for zero queries")
    if len(true_heights) != len(retrieved_labels):
        raise InputError("one true height per query is required")
    errors = []
    for labels, truth in zip(retrieved_labels, true_heights):
        if len(labels) == 0:
            raise InputError("a query has no height candidates")
        errors.append(abs(float(labels[0]) - float(truth)))
    return float(np.mean(errors))


def memory_usage_pct(searched_counts: Sequence[int], total_count: int) -> float:
    if len(searched_counts) == 0:
        raise InputError("memory usage is undefined for zero queries")
    if total_count <= 0:
        raise InputError("database is empty")
    return 100.0 * float(np.mean(np.asarray(searched_counts, dtype=np.float64) / total_count))


def performance_ratio_pct(method_recalls: Sequence[float], baseline_recalls: Sequence[float]) -> float:
    """``100 * sum(method R@1, R@5, R@10) / sum(baseline R@1, R@5, R@10)``."""
    if len(method_recalls) != 3 or len(baseline_recalls) != 3:
        raise InputError("performance ratio needs (R@1, R@5, R@10) triples")
    baseline = float(sum(baseline_recalls))
    if not baseline > 0:
        raise InputError("baseline recall sum must be positive")
    return 100.0 * float(sum(method_recalls)) / baseline


def ratio_delta(ratio_pct: float) -> str:
    """Signed change versus the baseline, computed from the rounded ratio."""
    delta = Decimal(repr(round_half_up(ratio_pct))) - Decimal(100)
    return f"{delta:+.2f}"


@dataclass
class MethodReport:
    recall: dict[float, dict[int, float]]
    memory_usage_pct: float
    performance_ratio_pct: float | None = None


@dataclass
class HeightReport:
    recall: dict[float, dict[int, float]]
    e_avg_m: float


@dataclass
class EvalReport:
    queries: int
    ns: list[int]
    thresholds_m: list[float]
    ratio_threshold_m: float
    methods: dict[str, MethodReport] = field(default_factory=dict)
    height: dict[str, HeightReport] = field(default_factory=dict)
    baseline: str = "full"

    def validate(self) -> None:
        """Raise if a recall table breaks monotonicity in N or threshold, or a bound."""
        tables = [(name, m.recall) for name, m in self.methods.items()]
        tables += [(f"height:{name}", h.recall) for name, h in self.height.items()]
        for name, table in tables:
            thresholds = sorted(table)
            for thr in thresholds:
                values = [table[thr][n] for n in sorted(table[thr])]
                if any(not 0 <= v <= 100 for v in values):
                    raise InputError(f"{name}: recall outside [0, 100]")
                if any(b < a for a, b in zip(values, values[1:])):
                    raise InputError(f"{name}: recall decreases with N at {thr} m")
            for lo, hi in zip(thresholds, thresholds[1:]):
                if any(table[hi][n] < table[lo][n] for n in table[lo]):
                    raise InputError(f"{name}: recall decreases with threshold")
        for name, m in self.methods.items():
            if not 0 < m.memory_usage_pct <= 100:
                raise InputError(f"{name}: memory usage {m.memory_usage_pct} outside (0, 100]")

    def to_dict(self) -> dict:
        def table(t):
            return {
                f"{thr:g}": {str(n): round_half_up(v) for n, v in sorted(row.items())}
                for thr, row in sorted(t.items())
            }

        methods = {}
        for name, m in self.methods.items():
            entry = {"recall": table(m.recall), "memory_usage_pct": round_half_up(m.memory_usage_pct)}
            if m.performance_ratio_pct is not None:
                entry["performance_ratio_pct"] = round_half_up(m.performance_ratio_pct)
                entry["performance_delta"] = ratio_delta(m.performance_ratio_pct)
            methods[name] = entry
        return {
            "queries": self.queries,
            "ns": list(self.ns),
            "thresholds_m": [float(t) for t in self.thresholds_m],
            "ratio_threshold_m": float(self.ratio_threshold_m),
            "baseline": self.baseline,
            "methods": methods,
            "height": {
                name: {"recall": table(h.recall), "e_avg_m": round_half_up(h.e_avg_m)}
                for name, h in self.height.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvalReport":
        try:
            report = cls(
                queries=int(doc["queries"]),
                ns=[int(n) for n in doc["ns"]],
                thresholds_m=[float(t) for t in doc["thresholds_m"]],
                ratio_threshold_m=float(doc["ratio_threshold_m"]),
                baseline=str(doc["baseline"]),
            )
            for name, m in doc["methods"].items():
                report.methods[name] = MethodReport(
                    recall=_parse_table(m["recall"]),
                    memory_usage_pct=float(m["memory_usage_pct"]),
                    performance_ratio_pct=m.get("performance_ratio_pct"),
                )
            for name, h in doc["height"].items():
                report.height[name] = HeightReport(_parse_table(h["recall"]), float(h["e_avg_m"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed report: {exc!r}") from None
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "method", "n", "threshold_m", "recall_pct"])
        for kind, items in (("place", self.methods.items()), ("height", self.height.items())):
            for name, entry in items:
                for thr, row in sorted(entry.recall.items()):
                    for n, value in sorted(row.items()):
                        writer.writerow([kind, name, n, f"{thr:g}", f"{round_half_up(value):.2f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        thresholds = sorted(self.thresholds_m)
        lines = [f"Queries: {self.queries}", ""]
        if self.height:
            hthr = sorted(next(iter(self.height.values())).recall)
            lines.append(
                "Height estimation (R@N at " + " / ".join(f"{t:g} m" for t in hthr) + ", E_avg in m)"
            )
            header = f"{'Method':<14}" + "".join(f"{'R@' + str(n):>16}" for n in self.ns) + f"{'E_avg':>10}"
            lines += [header, "-" * len(header)]
            for name, h in self.height.items():
                cells = "".join(
                    f"{'/'.join(f'{round_half_up(h.recall[t][n]):.2f}' for t in hthr):>16}" for n in self.ns
                )
                lines.append(f"{name:<14}{cells}{round_half_up(h.e_avg_m):>10.2f}")
            lines.append("")
        lines.append("Place recognition (R@N at " + " / ".join(f"{t:g} m" for t in thresholds) + ")")
        header = f"{'Method':<14}" + "".join(f"{'R@' + str(n):>16}" for n in self.ns)
        lines += [header, "-" * len(header)]
        for name, m in self.methods.items():
            cells = "".join(
                f"{'/'.join(f'{round_half_up(m.recall[t][n]):.2f}' for t in thresholds):>16}" for n in self.ns
            )
            lines.append(f"{name:<14}{cells}")
        lines.append("")
        names = list(self.methods)
        lines.append(f"Search cost and performance ratio (at {self.ratio_threshold_m:g} m)")
        header = f"{'':<26}" + "".join(f"{name:>16}" for name in names)
        lines += [header, "-" * len(header)]
        lines.append(
            f"{'Memory Usage (%)':<26}"
            + "".join(f"{round_half_up(self.methods[n].memory_usage_pct):>16.2f}" for n in names)
        )
        ratios = []
        for name in names:
            r = self.methods[name].performance_ratio_pct
            ratios.append("n/a" if r is None else f"{round_half_up(r):.2f} ({ratio_delta(r)})")
        lines.append(f"{'Performance Ratio (%)':<26}" + "".join(f"{r:>16}" for r in ratios))
        return "\n".join(lines) + "\n"


def _parse_table(raw: Mapping) -> dict[float, dict[int, float]]:
    return {float(thr): {int(n): float(v) for n, v in row.items()} for thr, row in raw.items()}


def recall_table(
    retrieved_positions: Sequence[np.ndarray],
    true_positions: np.ndarray,
    ns: Sequence[int],
    thresholds_m: Sequence[float],
) -> dict[float, dict[int, float]]:
    return {
        float(thr): {int(n): recall_at_n(retrieved_positions, true_positions, n, thr) for n in ns}
        for thr in thresholds_m
    }


def height_recall_table(
    retrieved_labels: Sequence[np.ndarray],
    true_heights: Sequence[float],
    ns: Sequence[int],
    thresholds_m: Sequence[float],
) -> dict[float, dict[int, float]]:
    return {
        float(thr): {int(n): height_recall(retrieved_labels, true_heights, n, thr) for n in ns}
        for thr in thresholds_m
    }
