"""Routing decision functions: Random, 1NN, and the learned classifiers,
behind one `route(query_id, text)` interface, plus artifact save/load.

All routers are immutable after construction and safe to share across
threads; the random router's generator is the one stateful piece and is
guarded by a lock.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from routekit import _kernels
from routekit.dataprep import Query
from routekit.embed import EmbeddingProvider, HashEmbedder, VectorizerModel, vectorize
from routekit.errors import ConfigError, DataError
from routekit.learn import TrainedModel, load_model, save_model

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RoutingDecision:
    """One routing outcome. chosen_expert is always a member of the argmax
    set of `scores`; deterministic routers break score ties by smallest
    expert name, the random router by its seeded draw (all scores tie)."""

    query_id: str
    chosen_expert: str
    scores: dict[str, float]
    method_name: str
    decision_latency_seconds: float


def argmax_expert(scores: dict[str, float]) -> str:
    """Highest-scoring expert; ties broken lexicographically."""
    if not scores:
        raise DataError("cannot take the argmax of an empty score map")
    return min(scores.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def decision_is_consistent(decision: RoutingDecision) -> bool:
    """chosen_expert must be in the argmax set of the decision's own scores."""
    best = max(decision.scores.values())
    return decision.scores.get(decision.chosen_expert) == best


class RandomRouter:
    method_name = "random"

    def __init__(self, expert_names: list[str], seed: int):
        if not expert_names:
            raise DataError("random router needs a non-empty expert set")
        self.expert_names = sorted(expert_names)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def route(self, query_id: str, text: str = "") -> RoutingDecision:
        started = time.perf_counter()
        with self._lock:
            choice = self.expert_names[int(self._rng.integers(len(self.expert_names)))]
        uniform = 1.0 / len(self.expert_names)
        return RoutingDecision(
            query_id=query_id,
            chosen_expert=choice,
            scores={name: uniform for name in self.expert_names},
            method_name=self.method_name,
            decision_latency_seconds=max(time.perf_counter() - started, 1e-9),
        )


@dataclass
class KnnIndex:
    """Parallel arrays sorted by query_id; row order is the neighbor
    tie-break (earliest row wins, i.e. smallest query_id)."""

    query_ids: list[str]
    labels: list[str]
    embeddings: np.ndarray  # (n, dim)
    norms: np.ndarray       # (n,)

    def __len__(self) -> int:
        return len(self.query_ids)


def build_knn(train_queries: list[Query], best_labels: dict[str, str],
              provider: EmbeddingProvider) -> KnnIndex:
    """Embed every train query and pair it with its best-expert label."""
    usable = sorted((q for q in train_queries if q.id in best_labels),
                    key=lambda q: q.id)
    if not usable:
        raise DataError("cannot build a 1NN index from an empty train set")
    embeddings = np.ascontiguousarray(
        np.stack([provider.embed(q.text) for q in usable]))
    return KnnIndex(
        query_ids=[q.id for q in usable],
        labels=[best_labels[q.id] for q in usable],
        embeddings=embeddings,
        norms=np.linalg.norm(embeddings, axis=1),
    )


class KnnRouter:
    method_name = "knn"

    def __init__(self, index: KnnIndex, provider: EmbeddingProvider):
        if len(index) == 0:
            raise DataError("1NN index is empty")
        self.index = index
        self.provider = provider
        self.expert_names = sorted(set(index.labels))

    def route(self, query_id: str, text: str) -> RoutingDecision:
        started = time.perf_counter()
        q = np.ascontiguousarray(self.provider.embed(text))
        best_i, _ = _kernels.argmax_cosine(self.index.embeddings, self.index.norms, q)
        if best_i < 0:
            log.warning("query %s has a zero-norm embedding; falling back to the "
                        "first index entry", query_id)
            best_i = 0
        chosen = self.index.labels[best_i]
        # 1NN yields no calibrated distribution; emit an indicator vector.
        scores = {name: 1.0 if name == chosen else 0.0 for name in self.expert_names}
        return RoutingDecision(
            query_id=query_id,
            chosen_expert=chosen,
            scores=scores,
            method_name=self.method_name,
            decision_latency_seconds=max(time.perf_counter() - started, 1e-9),
        )


class LearnedRouter:
    def __init__(self, model: TrainedModel,
                 vector_source: VectorizerModel | EmbeddingProvider):
        self.model = model
        self.method_name = model.kind
        self.vector_source = vector_source
        self.expert_names = model.expert_names  # sorted at training time

    def route(self, query_id: str, text: str) -> RoutingDecision:
        started = time.perf_counter()
        if self.model.kind == "mlp":
            x = vectorize(text, self.vector_source)
        else:
            x = self.vector_source.embed(text)
        probs = self.model.predict_proba(x)
        scores = dict(zip(self.expert_names, probs.tolist()))
        return RoutingDecision(
            query_id=query_id,
            chosen_expert=argmax_expert(scores),
            scores=scores,
            method_name=self.method_name,
            decision_latency_seconds=max(time.perf_counter() - started, 1e-9),
        )


Router = RandomRouter | KnnRouter | LearnedRouter


# ---------------------------------------------------------------------------
# Artifacts: a JSON manifest naming the method, vector source, and expert set
# ---------------------------------------------------------------------------

def _provider_info(provider: EmbeddingProvider) -> dict:
    inner = getattr(provider, "provider", provider)  # unwrap caching adapter
    if isinstance(inner, HashEmbedder):
        return {"type": "hash", "dimension": inner.dimension}
    return {"type": "named", "name": inner.name, "dimension": inner.dimension}


def provider_from_info(info: dict) -> EmbeddingProvider:
    if info.get("type") == "hash":
        return HashEmbedder(dimension=int(info["dimension"]))
    raise ConfigError(f"cannot reconstruct embedding provider from {info!r}; "
                      "pass one explicitly")


def save_router(router: Router, out_dir: str | Path, stem: str | None = None) -> Path:
    """Write a router's artifacts under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"router-{router.method_name}"
    manifest: dict = {"version": MANIFEST_VERSION, "method": router.method_name}

    if isinstance(router, RandomRouter):
        manifest["experts"] = router.expert_names
        manifest["seed"] = router.seed
    elif isinstance(router, KnnRouter):
        emb_path = out_dir / f"{stem}-embeddings.bin"
        emb_path.write_bytes(np.ascontiguousarray(
            router.index.embeddings, dtype="<f8").tobytes())
        manifest.update({
            "experts": router.expert_names,
            "query_ids": router.index.query_ids,
            "labels": router.index.labels,
            "dimension": int(router.index.embeddings.shape[1]),
            "embeddings_file": emb_path.name,
            "provider": _provider_info(router.provider),
        })
    elif isinstance(router, LearnedRouter):
        model_path = out_dir / f"{stem}-model.bin"
        save_model(router.model, model_path)
        manifest.update({
            "experts": router.expert_names,
            "model_file": model_path.name,
        })
        if router.model.kind == "mlp":
            vec_path = out_dir / f"{stem}-vectorizer.json"
            router.vector_source.save(vec_path)
            manifest["vectorizer_file"] = vec_path.name
        else:
            manifest["provider"] = _provider_info(router.vector_source)
    else:
        raise ConfigError(f"cannot serialize router of type {type(router).__name__}")

    manifest_path = out_dir / f"{stem}.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")
    return manifest_path


def load_router(manifest_path: str | Path,
                provider: EmbeddingProvider | None = None) -> Router:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"router manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported router manifest version: {manifest.get('version')}")
    method = manifest["method"]
    base = manifest_path.parent

    if method == "random":
        return RandomRouter(manifest["experts"], seed=manifest["seed"])
    if method == "knn":
        dim = manifest["dimension"]
        raw = (base / manifest["embeddings_file"]).read_bytes()
        embeddings = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(-1, dim)
        index = KnnIndex(
            query_ids=manifest["query_ids"],
            labels=manifest["labels"],
            embeddings=np.ascontiguousarray(embeddings),
            norms=np.linalg.norm(embeddings, axis=1),
        )
        return KnnRouter(index, provider or provider_from_info(manifest["provider"]))
    if method in ("mlp", "head"):
        model = load_model(base / manifest["model_file"])
        if method == "mlp":
            source: VectorizerModel | EmbeddingProvider = VectorizerModel.load(
                base / manifest["vectorizer_file"])
        else:
            source = provider or provider_from_info(manifest["provider"])
        return LearnedRouter(model, source)
    raise ConfigError(f"unknown router method in manifest: {method!r}")
