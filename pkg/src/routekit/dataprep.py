"""Dataset ingestion, expert prediction dataset, soft labels, splits, and
sample weighting.

The pipeline here is: ingest instruction corpora -> run every query through
every expert adaptor to build the prediction dataset -> turn a picked metric
into per-query soft labels via temperature softmax -> stratified train/test
split -> inverse-class-count sample weights.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from routekit.embed import EmbeddingProvider, cosine
from routekit.errors import AdaptorError, DataError
from routekit.experts import ExpertAdaptor, GenerationParams

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 10.0
DEFAULT_TRAIN_FRACTION = 0.8
DEFAULT_SEED = 42


@dataclass(frozen=True)
class Query:
    """One instruction record: the unit that gets routed and scored."""

    id: str
    text: str
    reference: str
    dataset_tag: str

    def __post_init__(self):
        if not self.id:
            raise DataError("query id must be non-empty")
        if not self.text:
            raise DataError(f"query {self.id!r} has empty text")
        if not self.dataset_tag:
            raise DataError(f"query {self.id!r} has empty dataset_tag")


@dataclass(frozen=True)
class PredictionRecord:
    """One (query, expert) observation from a forward pass."""

    query_id: str
    expert_name: str
    nll: float | None
    bert_sim: float
    inference_seconds: float
    input_tokens: int
    output_tokens: int
    response_text: str

    def __post_init__(self):
        if self.inference_seconds <= 0:
            raise DataError(f"inference_seconds must be > 0 ({self.query_id}/{self.expert_name})")
        if not -1.0 - 1e-9 <= self.bert_sim <= 1.0 + 1e-9:
            raise DataError(f"bert_sim out of [-1, 1]: {self.bert_sim}")
        if self.nll is not None and self.nll < 0:
            raise DataError(f"nll must be >= 0, got {self.nll}")
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise DataError("token counts must be non-negative")


@dataclass(frozen=True)
class SoftLabelRow:
    """Per-query probability vector over the expert set."""

    query_id: str
    probs: dict[str, float]

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"soft label for {self.query_id!r} sums to {total}")
        if any(p <= 0.0 for p in self.probs.values()):
            raise DataError(f"soft label for {self.query_id!r} has a non-positive entry")

    def vector(self, expert_names: list[str]) -> np.ndarray:
        return np.array([self.probs[name] for name in expert_names], dtype=np.float64)


@dataclass(frozen=True)
class SampleWeights:
    """Normalized inverse-class-count weights (sum to 1)."""

    per_class: dict[str, float]


@dataclass(frozen=True)
class QuerySplit:
    train: list[Query]
    test: list[Query]


@dataclass(frozen=True)
class TrainExample:
    query: Query
    soft_label: SoftLabelRow
    weight: float


@dataclass(frozen=True)
class TrainingSet:
    rows: list[TrainExample]
    class_weights: SampleWeights
    expert_names: list[str]


@dataclass(frozen=True)
class SkippedLine:
    line_number: int
    reason: str


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def ingest_dataset_with_report(
    path: str | Path, dataset_tag: str
) -> tuple[list[Query], list[SkippedLine]]:
    """Read a line-delimited corpus (fields id/instruction/reference).

    Malformed lines are skipped and reported with their 1-based line number;
    blank lines are ignored."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    queries: list[Query] = []
    skipped: list[SkippedLine] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                query = Query(
                    id=str(raw["id"]),
                    text=str(raw["instruction"]),
                    reference=str(raw["reference"]),
                    dataset_tag=dataset_tag,
                )
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                skipped.append(SkippedLine(lineno, f"{type(exc).__name__}: {exc}"))
                continue
            if query.id in seen_ids:
                skipped.append(SkippedLine(lineno, f"duplicate id {query.id!r}"))
                continue
            seen_ids.add(query.id)
            queries.append(query)
    if skipped:
        log.warning("ingest %s: skipped %d of %d lines (first: line %d, %s)",
                    path, len(skipped), len(skipped) + len(queries),
                    skipped[0].line_number, skipped[0].reason)
    return queries, skipped


def ingest_dataset(path: str | Path, dataset_tag: str) -> list[Query]:
    queries, _ = ingest_dataset_with_report(path, dataset_tag)
    return queries


# ---------------------------------------------------------------------------
# Prediction dataset
# ---------------------------------------------------------------------------

def build_prediction_dataset(
    queries: list[Query],
    adaptors: dict[str, ExpertAdaptor],
    embedder: EmbeddingProvider,
    params: GenerationParams | None = None,
    max_workers: int = 1,
) -> list[PredictionRecord]:
    """Forward-pass every query through every expert and score the replies.

    bert_sim is the cosine of the embedded reference against the embedded
    response. A failed (query, expert) pair is logged and omitted; queries
    where every expert failed are reported for downstream exclusion. Output
    is sorted by (query_id, expert_name) regardless of dispatch order.
    """
    if not adaptors:
        raise DataError("at least one expert adaptor is required")
    params = params or GenerationParams()
    records: list[PredictionRecord] = []
    failures: Counter[str] = Counter()

    def run_one(query: Query, name: str, adaptor: ExpertAdaptor) -> PredictionRecord | None:
        try:
            reply = adaptor.generate(query.text, params, query=query)
        except AdaptorError as exc:
            log.warning("expert %s failed on query %s: %s", name, query.id, exc)
            failures[query.id] += 1
            return None
        sim = cosine(embedder.embed(query.reference), embedder.embed(reply.response_text))
        return PredictionRecord(
            query_id=query.id,
            expert_name=name,
            nll=reply.mean_nll,
            bert_sim=sim,
            inference_seconds=reply.elapsed_seconds,
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            response_text=reply.response_text,
        )

    for query in queries:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(lambda kv: run_one(query, *kv), adaptors.items()))
        else:
            results = [run_one(query, name, adaptor) for name, adaptor in adaptors.items()]
        records.extend(r for r in results if r is not None)

    dead = [qid for qid, n in failures.items() if n == len(adaptors)]
    if dead:
        log.warning("%d queries failed on every expert and will be excluded: %s",
                    len(dead), ", ".join(sorted(dead)[:5]))
    records.sort(key=lambda r: (r.query_id, r.expert_name))
    return records


# ---------------------------------------------------------------------------
# Soft labels
# ---------------------------------------------------------------------------

def soft_labels(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax of a metric-score vector.

    Sums to 1 within 1e-9 and preserves the argmax of its input."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise DataError("soft_labels needs at least one score")
    if not np.all(np.isfinite(scores)):
        raise DataError("soft_labels scores must be finite")
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    z = scores / temperature
    z = z - z.max()
    out = np.exp(z)
    out /= out.sum()
    return out


def build_soft_label_rows(
    records: list[PredictionRecord],
    expert_names: list[str],
    temperature: float = DEFAULT_TEMPERATURE,
    metric: str = "bert_sim",
) -> tuple[list[SoftLabelRow], list[str]]:
    """Soft labels per query from the prediction dataset.

    metric "bert_sim" uses similarities as-is; "nll" negates them so higher
    probability still means better expert. Queries lacking a record for every
    expert are excluded (soft labels need a complete score vector) and their
    ids returned."""
    if metric not in ("bert_sim", "nll"):
        raise DataError(f"unknown soft-label metric: {metric!r}")
    names = sorted(expert_names)
    by_query: dict[str, dict[str, PredictionRecord]] = defaultdict(dict)
    for rec in records:
        by_query[rec.query_id][rec.expert_name] = rec

    rows: list[SoftLabelRow] = []
    excluded: list[str] = []
    for qid in sorted(by_query):
        per_expert = by_query[qid]
        if set(per_expert) != set(names):
            excluded.append(qid)
            continue
        if metric == "bert_sim":
            scores = np.array([per_expert[n].bert_sim for n in names])
        else:
            vals = [per_expert[n].nll for n in names]
            if any(v is None for v in vals):
                raise DataError(f"query {qid!r} lacks NLL values for the nll metric")
            scores = -np.array(vals, dtype=np.float64)
        probs = soft_labels(scores, temperature)
        rows.append(SoftLabelRow(query_id=qid, probs=dict(zip(names, probs.tolist()))))
    if excluded:
        log.warning("excluded %d queries with incomplete expert coverage", len(excluded))
    return rows, excluded


# ---------------------------------------------------------------------------
# Split and weights
# ---------------------------------------------------------------------------

def stratified_split(
    queries: list[Query],
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
    seed: int = DEFAULT_SEED,
) -> QuerySplit:
    """Split independently within each dataset_tag; deterministic per seed.

    Per-tag train size is round(fraction * n), clamped so both sides stay
    non-empty for n >= 2. A tag with a single record cannot be stratified:
    it goes to train and is reported."""
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_tag: dict[str, list[Query]] = defaultdict(list)
    for q in queries:
        by_tag[q.dataset_tag].append(q)

    rng = np.random.default_rng(seed)
    train: list[Query] = []
    test: list[Query] = []
    for tag in sorted(by_tag):
        group = by_tag[tag]
        if len(group) < 2:
            log.warning("dataset_tag %r has %d record(s); cannot stratify, kept in train",
                        tag, len(group))
            train.extend(group)
            continue
        order = rng.permutation(len(group))
        n_train = min(max(round(train_fraction * len(group)), 1), len(group) - 1)
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    train.sort(key=lambda q: q.id)
    test.sort(key=lambda q: q.id)
    return QuerySplit(train=train, test=test)


def sample_weights(class_counts: dict[str, int]) -> SampleWeights:
    """Inverse-proportion class weights: w_i = total/count_i, then normalized
    to sum to 1."""
    if not class_counts:
        raise DataError("sample_weights needs at least one class")
    for name, count in class_counts.items():
        if count < 1:
            raise DataError(f"class {name!r} has zero count; cannot weight")
    total = sum(class_counts.values())
    names = sorted(class_counts)
    raw = {name: total / class_counts[name] for name in names}
    raw_sum = sum(raw[name] for name in names)
    return SampleWeights(per_class={name: raw[name] / raw_sum for name in names})


def best_expert_label(records: list[PredictionRecord]) -> str:
    """Expert with the highest bert_sim; ties go to the smallest name."""
    if not records:
        raise DataError("best_expert_label needs at least one record")
    best = min(records, key=lambda r: (-r.bert_sim, r.expert_name))
    return best.expert_name


def best_labels_by_query(records: list[PredictionRecord]) -> dict[str, str]:
    by_query: dict[str, list[PredictionRecord]] = defaultdict(list)
    for rec in records:
        by_query[rec.query_id].append(rec)
    return {qid: best_expert_label(recs) for qid, recs in by_query.items()}


def build_training_set(
    train_queries: list[Query],
    soft_rows: list[SoftLabelRow],
    best_labels: dict[str, str],
) -> TrainingSet:
    """Attach soft labels and per-sample weights to the train split.

    The per-sample weight is the normalized inverse-count weight of the
    sample's best-expert class. Train queries without a soft label (excluded
    upstream) are dropped."""
    rows_by_id = {row.query_id: row for row in soft_rows}
    usable = [q for q in train_queries if q.id in rows_by_id and q.id in best_labels]
    if not usable:
        raise DataError("no usable training rows (labels missing for every train query)")
    expert_names = sorted(next(iter(rows_by_id.values())).probs)
    counts = Counter(best_labels[q.id] for q in usable)
    weights = sample_weights(dict(counts))
    rows = [
        TrainExample(query=q, soft_label=rows_by_id[q.id],
                     weight=weights.per_class[best_labels[q.id]])
        for q in usable
    ]
    return TrainingSet(rows=rows, class_weights=weights, expert_names=expert_names)


# ---------------------------------------------------------------------------
# File formats (round-trip lossless)
# ---------------------------------------------------------------------------

def write_queries(queries: list[Query], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(
                {"id": q.id, "instruction": q.text, "reference": q.reference,
                 "dataset_tag": q.dataset_tag},
                sort_keys=True) + "\n")


def read_queries(path: str | Path) -> list[Query]:
    queries = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            queries.append(Query(id=raw["id"], text=raw["instruction"],
                                 reference=raw["reference"],
                                 dataset_tag=raw["dataset_tag"]))
    return queries


def write_prediction_records(records: list[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "query_id": r.query_id,
                "expert_name": r.expert_name,
                "nll": r.nll,
                "bert_sim": r.bert_sim,
                "inference_seconds": r.inference_seconds,
                "input_tokens": r.input_tokens,
                "output_tokens": r.output_tokens,
                "response_text": r.response_text,
            }, sort_keys=True) + "\n")


def read_prediction_records(path: str | Path) -> list[PredictionRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            records.append(PredictionRecord(**raw))
    return records


def write_soft_labels(rows: list[SoftLabelRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({"query_id": row.query_id, "probs": row.probs},
                                sort_keys=True) + "\n")


def read_soft_labels(path: str | Path) -> list[SoftLabelRow]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            rows.append(SoftLabelRow(query_id=raw["query_id"], probs=raw["probs"]))
    return rows


def write_split(split: QuerySplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps({
        "train": [q.id for q in split.train],
        "test": [q.id for q in split.test],
    }, sort_keys=True), encoding="utf-8")


def read_split(path: str | Path, queries: list[Query]) -> QuerySplit:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {q.id: q for q in queries}
    return QuerySplit(train=[by_id[i] for i in raw["train"]],
                      test=[by_id[i] for i in raw["test"]])
