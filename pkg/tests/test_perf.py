"""Performance budgets asserted as tests (see also benchmarks/)."""

import time

import numpy as np

from routekit.embed import VectorizerModel
from routekit.learn import TrainConfig, TrainedModel, mlp_init
from routekit.routers import LearnedRouter


def test_bow_mlp_decision_under_50ms_on_30k_vocabulary():
    vocab = {f"tok{i:05d}": i for i in range(30_000)}
    model_vec = VectorizerModel(kind="bow", vocabulary=vocab,
                                min_frequency=1, max_size=30_000)
    params = mlp_init(30_000, 256, 7, seed=0)
    model = TrainedModel(kind="mlp", params=params,
                         expert_names=[f"e{i}" for i in range(7)],
                         loss_trace=[], config=TrainConfig(),
                         vector_source={})
    router = LearnedRouter(model, model_vec)
    rng = np.random.default_rng(0)
    texts = [" ".join(f"tok{i:05d}" for i in rng.integers(0, 30_000, size=12))
             for _ in range(60)]
    router.route("warmup", texts[0])
    latencies = []
    for i, text in enumerate(texts):
        started = time.perf_counter()
        router.route(f"q{i}", text)
        latencies.append(time.perf_counter() - started)
    p50 = sorted(latencies)[len(latencies) // 2]
    assert p50 < 0.050, f"p50 decision latency {p50 * 1000:.2f} ms"
