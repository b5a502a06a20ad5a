"""End-to-end orchestration behind the CLI: prepare -> train -> evaluate,
plus the fully synthetic `simulate` run.

Every step reads and writes flat artifacts in one directory, so each command
is reproducible in isolation and byte-identical for a fixed (config, seed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import yaml

from routekit import dataprep, evaluation, learn, routers, simx
from routekit.embed import HashEmbedder, fit_vectorizer, with_cache
from routekit.errors import ConfigError, DataError
from routekit.evaluation import MethodMetrics
from routekit.experts import ExpertAdaptor
from routekit.routers import RoutingDecision

log = logging.getLogger(__name__)

LEARNED_METHODS = ("mlp", "head")
ALL_METHODS = ("random", "knn", "mlp", "head")
DEFAULT_EMBED_DIM = 64


@dataclass
class ArtifactPaths:
    root: Path

    @property
    def queries(self) -> Path: return self.root / "queries.jsonl"
    @property
    def predictions(self) -> Path: return self.root / "predictions.jsonl"
    @property
    def soft_labels(self) -> Path: return self.root / "soft_labels.jsonl"
    @property
    def split(self) -> Path: return self.root / "split.json"
    @property
    def fleet(self) -> Path: return self.root / "fleet.yaml"
    @property
    def gateway_config(self) -> Path: return self.root / "gateway.yaml"
    @property
    def report_json(self) -> Path: return self.root / "report.json"
    @property
    def report_txt(self) -> Path: return self.root / "report.txt"

    def router_manifest(self, method: str) -> Path:
        return self.root / f"router-{method}.json"


def _embedder(dimension: int = DEFAULT_EMBED_DIM):
    return with_cache(HashEmbedder(dimension=dimension))


def prepare(
    queries: list[dataprep.Query],
    adaptors: dict[str, ExpertAdaptor],
    out_dir: str | Path,
    temperature: float = dataprep.DEFAULT_TEMPERATURE,
    train_fraction: float = dataprep.DEFAULT_TRAIN_FRACTION,
    seed: int = dataprep.DEFAULT_SEED,
    metric: str = "bert_sim",
    embed_dim: int = DEFAULT_EMBED_DIM,
) -> ArtifactPaths:
    """Phase 1: prediction dataset, soft labels, and the stratified split."""
    paths = ArtifactPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    embedder = _embedder(embed_dim)

    log.info("building prediction dataset: %d queries x %d experts",
             len(queries), len(adaptors))
    records = dataprep.build_prediction_dataset(queries, adaptors, embedder)
    soft_rows, excluded = dataprep.build_soft_label_rows(
        records, sorted(adaptors), temperature=temperature, metric=metric)
    usable = [q for q in queries if q.id not in set(excluded)]
    split = dataprep.stratified_split(usable, train_fraction, seed)

    dataprep.write_queries(queries, paths.queries)
    dataprep.write_prediction_records(records, paths.predictions)
    dataprep.write_soft_labels(soft_rows, paths.soft_labels)
    dataprep.write_split(split, paths.split)
    log.info("prepared %d records, %d soft labels (%d excluded), split %d/%d",
             len(records), len(soft_rows), len(excluded),
             len(split.train), len(split.test))
    return paths


def _load_artifacts(paths: ArtifactPaths):
    for p in (paths.queries, paths.predictions, paths.soft_labels, paths.split):
        if not p.exists():
            raise DataError(f"missing artifact {p}; run prepare first")
    queries = dataprep.read_queries(paths.queries)
    records = dataprep.read_prediction_records(paths.predictions)
    soft_rows = dataprep.read_soft_labels(paths.soft_labels)
    split = dataprep.read_split(paths.split, queries)
    return queries, records, soft_rows, split


def train(
    out_dir: str | Path,
    method: str,
    config: learn.TrainConfig | None = None,
    hidden: int = learn.HIDDEN_SIZE,
    embed_dim: int = DEFAULT_EMBED_DIM,
    vectorizer_kind: str = "bow",
) -> Path:
    """Phase 2 training for one learned method; writes the router artifact
    (and its loss trace inside the model header)."""
    if method not in LEARNED_METHODS:
        raise ConfigError(f"train supports {LEARNED_METHODS}, got {method!r}")
    paths = ArtifactPaths(Path(out_dir))
    _, records, soft_rows, split = _load_artifacts(paths)

    train_ids = {q.id for q in split.train}
    train_records = [r for r in records if r.query_id in train_ids]
    best = dataprep.best_labels_by_query(train_records)
    training_set = dataprep.build_training_set(split.train, soft_rows, best)

    if method == "mlp":
        vectorizer = fit_vectorizer([row.query.text for row in training_set.rows],
                                    kind=vectorizer_kind)
        model = learn.train_classifier(training_set, "mlp", vectorizer,
                                       config=config, hidden=hidden)
        router = routers.LearnedRouter(model, vectorizer)
    else:
        embedder = _embedder(embed_dim)
        model = learn.train_classifier(training_set, "head", embedder,
                                       config=config or learn.head_config())
        router = routers.LearnedRouter(model, embedder.provider)

    manifest = routers.save_router(router, paths.root)
    log.info("trained %s router (final epoch loss %.6f) -> %s",
             method, model.loss_trace[-1], manifest)
    return manifest


def _build_router(method: str, paths: ArtifactPaths, split, records,
                  seed: int, embed_dim: int):
    if method == "random":
        experts = sorted({r.expert_name for r in records})
        return routers.RandomRouter(experts, seed=seed)
    if method == "knn":
        embedder = _embedder(embed_dim)
        train_ids = {q.id for q in split.train}
        train_records = [r for r in records if r.query_id in train_ids]
        best = dataprep.best_labels_by_query(train_records)
        index = routers.build_knn(split.train, best, embedder)
        return routers.KnnRouter(index, embedder)
    manifest = paths.router_manifest(method)
    if not manifest.exists():
        raise DataError(f"no trained router artifact for {method!r} "
                        f"({manifest} missing); run train first")
    return routers.load_router(manifest)


def evaluate(
    out_dir: str | Path,
    methods: tuple[str, ...] = ALL_METHODS,
    trials: int = 10,
    seed: int = dataprep.DEFAULT_SEED,
    embed_dim: int = DEFAULT_EMBED_DIM,
    pricing_by_expert: dict[str, evaluation.PricingEntry] | None = None,
) -> dict:
    """Score every requested method on the held-out split and emit reports.

    Returns the structured report payload pieces for programmatic use."""
    paths = ArtifactPaths(Path(out_dir))
    queries, records, _, split = _load_artifacts(paths)
    expert_names = sorted({r.expert_name for r in records})
    if pricing_by_expert is None:
        pricing_by_expert = _pricing_from_fleet(paths, expert_names)

    test_ids = {q.id for q in split.test}
    test_records = [r for r in records if r.query_id in test_ids]
    if not test_records:
        raise DataError("empty test split; nothing to evaluate")
    lookup = evaluation.record_lookup(test_records)

    rows: list[tuple[str, MethodMetrics]] = []
    for name in expert_names:
        rows.append((name, evaluation.summarize(
            [r for r in test_records if r.expert_name == name], pricing_by_expert)))
    expert_rows = list(rows)

    decisions_by_method: dict[str, list[RoutingDecision]] = {}
    per_method_records: dict[str, list] = {}
    for method in methods:
        if method == "random":
            metrics = evaluation.random_protocol(
                split.test, lookup, expert_names, pricing_by_expert,
                trials=trials, seed=seed)
            # The counts matrix wants one allocation per query; use a seeded
            # single pass (the protocol itself averages over trials).
            router = routers.RandomRouter(expert_names, seed=seed)
            decisions = [router.route(q.id, q.text) for q in split.test]
        else:
            router = _build_router(method, paths, split, records, seed, embed_dim)
            decisions = [router.route(q.id, q.text) for q in split.test]
            metrics = evaluation.summarize(
                evaluation.records_for_decisions(decisions, lookup), pricing_by_expert)
        if method in ("random", "knn"):
            # Persist the rule-based routers too, so `serve` can offer them.
            routers.save_router(router, paths.root)
        rows.append((method, metrics))
        decisions_by_method[method] = decisions
        per_method_records[method] = evaluation.records_for_decisions(decisions, lookup)

    baselines = {
        "zero-router": evaluation.zero_router([m for _, m in expert_rows]),
        "optimal": evaluation.optimal_bounds([m for _, m in rows]),
    }

    counts = evaluation.query_counts(decisions_by_method, len(split.test))
    breakdowns = _breakdowns(per_method_records, test_records, queries)

    meta = {"seed": seed, "trials": trials, "test_size": len(split.test)}
    evaluation.emit_report(rows, baselines, counts, breakdowns,
                           "structured", paths.report_json, meta=meta)
    evaluation.emit_report(rows, baselines, counts, breakdowns,
                           "tabular", paths.report_txt, meta=meta)
    log.info("evaluation reports written to %s and %s",
             paths.report_json, paths.report_txt)
    return {
        "rows": rows,
        "baselines": baselines,
        "counts": counts,
        "breakdowns": breakdowns,
        "oracle_bertsim": evaluation.oracle_bertsim(test_records),
    }


def _breakdowns(per_method_records, test_records, queries):
    tag_by_id = {q.id: q.dataset_tag for q in queries}
    bertsim: dict[str, dict[str, float]] = {}
    nll: dict[str, dict[str, float]] = {}
    for method, recs in sorted(per_method_records.items()):
        by_tag: dict[str, list] = {}
        for r in recs:
            by_tag.setdefault(tag_by_id[r.query_id], []).append(r)
        for tag, tag_recs in by_tag.items():
            sims = [r.bert_sim for r in tag_recs]
            nlls = [r.nll for r in tag_recs if r.nll is not None]
            bertsim.setdefault(tag, {})[method] = sum(sims) / len(sims)
            if nlls:
                nll.setdefault(tag, {})[method] = sum(nlls) / len(nlls)
    for tag, value in evaluation.optimal_bertsim_by_dataset(test_records, queries).items():
        bertsim.setdefault(tag, {})["optimal"] = value
    return {"bertsim": bertsim, "nll": nll}


def _pricing_from_fleet(paths: ArtifactPaths, expert_names: list[str]):
    if paths.fleet.exists():
        fleet = simx.load_sim_fleet(paths.fleet)
        return {cfg.expert_name: evaluation.pricing_for_family(cfg.pricing_family)
                for cfg, _ in fleet}
    raise DataError(f"no pricing information: {paths.fleet} missing and no "
                    "explicit pricing map given")


def simulate(
    out_dir: str | Path,
    n_queries: int = 2400,
    seed: int = dataprep.DEFAULT_SEED,
    temperature: float = dataprep.DEFAULT_TEMPERATURE,
    trials: int = 10,
    shares: dict[str, float] | None = None,
    methods: tuple[str, ...] = ALL_METHODS,
) -> dict:
    """Fully synthetic end-to-end run against the canonical simulated fleet:
    generate a corpus, prepare, train both learned routers, evaluate all
    methods, and write a ready-to-serve gateway config."""
    paths = ArtifactPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)

    queries = simx.generate_corpus(n_queries, seed=seed, shares=shares)
    fleet = simx.canonical_fleet(seed=seed)
    adaptors: dict[str, ExpertAdaptor] = {
        cfg.expert_name: simx.SimulatedExpert(cfg) for cfg in fleet}
    simx.fleet_to_yaml(fleet, paths.fleet,
                       locality={"fox-sim": "local"})

    prepare(queries, adaptors, paths.root, temperature=temperature, seed=seed)
    for method in LEARNED_METHODS:
        if method in methods:
            train(paths.root, method)
    result = evaluate(paths.root, methods=methods, trials=trials, seed=seed)
    _write_gateway_config(paths, methods)
    return result


def _write_gateway_config(paths: ArtifactPaths, methods: tuple[str, ...]) -> None:
    manifests = {m: paths.router_manifest(m).name for m in methods
                 if paths.router_manifest(m).exists()}
    if not manifests:
        return
    fleet_raw = yaml.safe_load(paths.fleet.read_text(encoding="utf-8"))
    config = {
        "router": {
            "manifests": manifests,
            "default_method": "head" if "head" in manifests else sorted(manifests)[0],
        },
        "experts": fleet_raw["experts"],
        "timeout_seconds": 60.0,
        "fallback_expert": None,
        "host": "127.0.0.1",
        "port": 8080,
    }
    paths.gateway_config.write_text(yaml.safe_dump(config, sort_keys=True),
                                    encoding="utf-8")
