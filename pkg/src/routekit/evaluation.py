"""The four evaluation dimensions and the baseline aggregations.

Every method (standalone expert or router) reduces to one MethodMetrics
tuple: total querying cost, mean per-query throughput, mean similarity
score, mean NLL. Costs are integer picodollars internally so summation is
exact; USD floats appear only at the reporting edge.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from routekit.dataprep import PredictionRecord, Query
from routekit.errors import DataError
from routekit.routers import RoutingDecision

PICO_PER_USD = 10**12
_MICRO_PER_USD = 10**6


@dataclass(frozen=True)
class PricingEntry:
    family: str
    input_usd_per_million: float
    output_usd_per_million: float

    def __post_init__(self):
        if self.input_usd_per_million < 0 or self.output_usd_per_million < 0:
            raise DataError(f"pricing for {self.family!r} must be non-negative")

    @property
    def input_micro_per_million(self) -> int:
        return round(self.input_usd_per_million * _MICRO_PER_USD)

    @property
    def output_micro_per_million(self) -> int:
        return round(self.output_usd_per_million * _MICRO_PER_USD)


# Price per million input/output tokens by model architecture family.
DEFAULT_PRICING: dict[str, PricingEntry] = {
    "DeepSeek-8B": PricingEntry("DeepSeek-8B", 0.14, 0.28),
    "Fox-1.6B": PricingEntry("Fox-1.6B", 0.20, 0.20),
    "Llama-8B": PricingEntry("Llama-8B", 0.20, 0.20),
    "Mistral-8B": PricingEntry("Mistral-8B", 0.25, 0.25),
    "Qwen-7B": PricingEntry("Qwen-7B", 0.20, 0.20),
}


def pricing_for_family(family: str,
                       table: dict[str, PricingEntry] | None = None) -> PricingEntry:
    table = table if table is not None else DEFAULT_PRICING
    entry = table.get(family)
    if entry is None:
        raise DataError(f"unknown model family in pricing map: {family!r}")
    return entry


def query_cost(input_tokens: int, output_tokens: int, pricing: PricingEntry) -> int:
    """Exact cost in integer picodollars: tokens x (micro-USD per million
    tokens). (T/1e6) * usd_per_million == T * micro_per_million picodollars."""
    if input_tokens < 0 or output_tokens < 0:
        raise DataError("token counts must be non-negative")
    return (input_tokens * pricing.input_micro_per_million
            + output_tokens * pricing.output_micro_per_million)


def pico_to_usd(pico: int) -> float:
    return pico / PICO_PER_USD


def usd_to_pico(usd: float) -> int:
    return round(usd * PICO_PER_USD)


@dataclass(frozen=True)
class MethodMetrics:
    """(total cost, mean throughput, mean similarity, mean NLL) for one
    expert or routing method."""

    total_cost_pico: int
    mean_throughput: float
    mean_bertsim: float
    mean_nll: float

    @property
    def total_cost_usd(self) -> float:
        return pico_to_usd(self.total_cost_pico)

    @classmethod
    def from_usd(cls, cost_usd: float, throughput: float, bertsim: float,
                 nll: float) -> "MethodMetrics":
        return cls(usd_to_pico(cost_usd), throughput, bertsim, nll)


def summarize(records: list[PredictionRecord],
              pricing_by_expert: dict[str, PricingEntry]) -> MethodMetrics:
    """Aggregate per-query outcome records into one metrics tuple.

    Cost sums in (query_id, expert) order; throughput is the mean of
    per-query token/second ratios, not total/total."""
    if not records:
        raise DataError("summarize needs at least one record")
    ordered = sorted(records, key=lambda r: (r.query_id, r.expert_name))
    cost = 0
    throughputs = []
    sims = []
    nlls = []
    for rec in ordered:
        if rec.inference_seconds <= 0:
            raise DataError(f"record {rec.query_id}/{rec.expert_name} has "
                            f"non-positive inference_seconds")
        entry = pricing_by_expert.get(rec.expert_name)
        if entry is None:
            raise DataError(f"no pricing entry for expert {rec.expert_name!r}")
        cost += query_cost(rec.input_tokens, rec.output_tokens, entry)
        throughputs.append(rec.output_tokens / rec.inference_seconds)
        sims.append(rec.bert_sim)
        if rec.nll is not None:
            nlls.append(rec.nll)
    return MethodMetrics(
        total_cost_pico=cost,
        mean_throughput=float(np.mean(throughputs)),
        mean_bertsim=float(np.mean(sims)),
        mean_nll=float(np.mean(nlls)) if nlls else float("nan"),
    )


def _invariant_mean(values: list[float]) -> float:
    # summing in sorted order makes the mean exactly permutation-invariant
    return math.fsum(sorted(values)) / len(values)


def zero_router(rows: list[MethodMetrics]) -> MethodMetrics:
    """No-routing baseline: the componentwise arithmetic mean of the expert
    tuples."""
    if not rows:
        raise DataError("zero_router needs at least one expert tuple")
    return MethodMetrics(
        total_cost_pico=round(sum(r.total_cost_pico for r in rows) / len(rows)),
        mean_throughput=_invariant_mean([r.mean_throughput for r in rows]),
        mean_bertsim=_invariant_mean([r.mean_bertsim for r in rows]),
        mean_nll=_invariant_mean([r.mean_nll for r in rows]),
    )


def optimal_bounds(rows: list[MethodMetrics]) -> MethodMetrics:
    """Unattainable bound: min cost, max throughput, max similarity, min NLL
    over every expert and router row."""
    if not rows:
        raise DataError("optimal_bounds needs at least one row")
    return MethodMetrics(
        total_cost_pico=min(r.total_cost_pico for r in rows),
        mean_throughput=max(r.mean_throughput for r in rows),
        mean_bertsim=max(r.mean_bertsim for r in rows),
        mean_nll=min(r.mean_nll for r in rows),
    )


RecordLookup = dict[tuple[str, str], PredictionRecord]


def record_lookup(records: list[PredictionRecord]) -> RecordLookup:
    return {(r.query_id, r.expert_name): r for r in records}


def records_for_decisions(decisions: list[RoutingDecision],
                          lookup: RecordLookup) -> list[PredictionRecord]:
    chosen = []
    for d in decisions:
        rec = lookup.get((d.query_id, d.chosen_expert))
        if rec is None:
            raise DataError(f"no prediction record for ({d.query_id}, {d.chosen_expert})")
        chosen.append(rec)
    return chosen


def oracle_bertsim(records: list[PredictionRecord]) -> float:
    """Mean over queries of the best similarity any expert recorded."""
    best: dict[str, float] = {}
    for rec in records:
        prev = best.get(rec.query_id)
        if prev is None or rec.bert_sim > prev:
            best[rec.query_id] = rec.bert_sim
    if not best:
        raise DataError("oracle_bertsim needs at least one record")
    return float(np.mean(list(best.values())))


def optimal_bertsim_by_dataset(records: list[PredictionRecord],
                               queries: list[Query]) -> dict[str, float]:
    tag_by_id = {q.id: q.dataset_tag for q in queries}
    by_tag: dict[str, list[PredictionRecord]] = defaultdict(list)
    for rec in records:
        tag = tag_by_id.get(rec.query_id)
        if tag is not None:
            by_tag[tag].append(rec)
    return {tag: oracle_bertsim(recs) for tag, recs in sorted(by_tag.items())}


def random_protocol(
    test_queries: list[Query],
    lookup: RecordLookup,
    expert_names: list[str],
    pricing_by_expert: dict[str, PricingEntry],
    trials: int = 10,
    seed: int = 42,
) -> MethodMetrics:
    """Route every test query uniformly at random, score the run, and repeat
    for `trials` rounds; the result is the mean tuple over rounds."""
    if trials < 1:
        raise DataError(f"trials must be >= 1, got {trials}")
    if not test_queries:
        raise DataError("random protocol needs a non-empty test set")
    names = sorted(expert_names)
    ordered = sorted(test_queries, key=lambda q: q.id)
    rng = np.random.default_rng(seed)
    tuples: list[MethodMetrics] = []
    for _ in range(trials):
        picks = rng.integers(len(names), size=len(ordered))
        chosen = []
        for q, k in zip(ordered, picks):
            rec = lookup.get((q.id, names[int(k)]))
            if rec is None:
                raise DataError(f"no prediction record for ({q.id}, {names[int(k)]})")
            chosen.append(rec)
        tuples.append(summarize(chosen, pricing_by_expert))
    return MethodMetrics(
        total_cost_pico=round(sum(t.total_cost_pico for t in tuples) / trials),
        mean_throughput=float(np.mean([t.mean_throughput for t in tuples])),
        mean_bertsim=float(np.mean([t.mean_bertsim for t in tuples])),
        mean_nll=float(np.mean([t.mean_nll for t in tuples])),
    )


@dataclass(frozen=True)
class QueryCountMatrix:
    """method -> (expert -> number of test queries allocated)."""

    counts: dict[str, dict[str, int]]
    test_size: int


def query_counts(decisions_by_method: dict[str, list[RoutingDecision]],
                 test_size: int) -> QueryCountMatrix:
    counts: dict[str, dict[str, int]] = {}
    for method in sorted(decisions_by_method):
        decisions = decisions_by_method[method]
        seen: set[str] = set()
        tally: Counter[str] = Counter()
        for d in decisions:
            if d.query_id in seen:
                raise DataError(f"duplicate decision for ({method}, {d.query_id})")
            seen.add(d.query_id)
            tally[d.chosen_expert] += 1
        if sum(tally.values()) != test_size:
            raise DataError(f"method {method!r} covered {sum(tally.values())} "
                            f"of {test_size} test queries")
        counts[method] = dict(sorted(tally.items()))
    return QueryCountMatrix(counts=counts, test_size=test_size)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_COLUMNS = (
    ("total_cost", "total_cost_usd", False),   # lower is better
    ("throughput", "mean_throughput", True),
    ("bertsim", "mean_bertsim", True),
    ("nll", "mean_nll", False),
)


def _rankings(rows: list[tuple[str, MethodMetrics]]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for column, attr, higher_better in _COLUMNS:
        ordered = sorted(rows, key=lambda kv: (
            -getattr(kv[1], attr) if higher_better else getattr(kv[1], attr), kv[0]))
        out[column] = [name for name, _ in ordered[:3]]
    return out


def emit_report(
    rows: list[tuple[str, MethodMetrics]],
    baselines: dict[str, MethodMetrics],
    counts: QueryCountMatrix | None,
    breakdowns: dict[str, dict[str, dict[str, float]]] | None,
    fmt: str,
    path: str | Path,
    meta: dict | None = None,
) -> bytes:
    """Render the evaluation report; output bytes are a pure function of the
    inputs. `rows` are the ranked table (experts + routers); `baselines`
    (e.g. zero-router / optimal) are listed after it, unranked. `breakdowns`
    maps metric -> dataset -> method -> value."""
    if fmt == "structured":
        payload = {
            "metrics": {name: _metrics_dict(m) for name, m in rows},
            "baselines": {name: _metrics_dict(m) for name, m in sorted(baselines.items())},
            "rankings": _rankings(rows),
            "query_counts": None if counts is None else
                {"test_size": counts.test_size, "counts": counts.counts},
            "breakdowns": breakdowns or {},
            "meta": meta or {},
        }
        blob = json.dumps(payload, sort_keys=True, indent=2).encode("utf-8")
    elif fmt == "tabular":
        blob = _render_tabular(rows, baselines, counts, breakdowns, meta).encode("utf-8")
    else:
        raise DataError(f"unknown report format: {fmt!r}")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    return blob


def _metrics_dict(m: MethodMetrics) -> dict:
    return {
        "total_cost_usd": m.total_cost_usd,
        "total_cost_pico": m.total_cost_pico,
        "mean_throughput": m.mean_throughput,
        "mean_bertsim": m.mean_bertsim,
        "mean_nll": m.mean_nll,
    }


def _render_tabular(rows, baselines, counts, breakdowns, meta) -> str:
    rankings = _rankings(rows)
    name_w = max([len("model/router")] + [len(n) for n, _ in rows]
                 + [len(n) for n in baselines])
    lines = []
    if meta:
        lines.append("# " + ", ".join(f"{k}={meta[k]}" for k in sorted(meta)))
    header = (f"{'model/router':<{name_w}}  {'total_cost':>14}  "
              f"{'throughput':>14}  {'bertsim':>11}  {'nll':>11}")
    lines.append(header)
    lines.append("-" * len(header))

    def cell(value: str, name: str, column: str) -> str:
        ranked = rankings[column]
        mark = f" [{ranked.index(name) + 1}]" if name in ranked else "    "
        return value + mark

    for name, m in rows:
        lines.append(
            f"{name:<{name_w}}  "
            f"{cell(f'${m.total_cost_usd:.3f}', name, 'total_cost'):>14}  "
            f"{cell(f'{m.mean_throughput:.3f}', name, 'throughput'):>14}  "
            f"{cell(f'{m.mean_bertsim:.3f}', name, 'bertsim'):>11}  "
            f"{cell(f'{m.mean_nll:.3f}', name, 'nll'):>11}")
    if baselines:
        lines.append("-" * len(header))
        for name in sorted(baselines):
            m = baselines[name]
            lines.append(f"{name:<{name_w}}  {f'${m.total_cost_usd:.3f}':>14}  "
                         f"{m.mean_throughput:>14.3f}  {m.mean_bertsim:>11.3f}  "
                         f"{m.mean_nll:>11.3f}")

    lines.append("")
    lines.append("query counts (test queries per expert, by method)")
    if counts is None or not counts.counts:
        lines.append("  (no data)")
    else:
        experts = sorted({e for row in counts.counts.values() for e in row})
        for method in sorted(counts.counts):
            row = counts.counts[method]
            body = "  ".join(f"{e}={row.get(e, 0)}" for e in experts)
            lines.append(f"  {method}: {body}")

    lines.append("")
    lines.append("per-dataset breakdowns")
    if not breakdowns:
        lines.append("  (no data)")
    else:
        for metric in sorted(breakdowns):
            lines.append(f"  {metric}:")
            table = breakdowns[metric]
            if not table:
                lines.append("    (no data)")
                continue
            for tag in sorted(table):
                body = "  ".join(f"{method}={value:.3f}"
                                 for method, value in sorted(table[tag].items()))
                lines.append(f"    {tag}: {body}")
    lines.append("")
    return "\n".join(lines)
