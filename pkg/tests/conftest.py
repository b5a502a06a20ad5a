import logging

import pytest

from routekit import dataprep, simx
from routekit.embed import HashEmbedder, with_cache
from routekit.evaluation import pricing_for_family

logging.getLogger("routekit").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def embedder():
    return with_cache(HashEmbedder(dimension=64))


@pytest.fixture(scope="session")
def canonical_fleet():
    return simx.canonical_fleet(seed=42)


@pytest.fixture(scope="session")
def canonical_adaptors(canonical_fleet):
    return {cfg.expert_name: simx.SimulatedExpert(cfg) for cfg in canonical_fleet}


@pytest.fixture(scope="session")
def canonical_pricing(canonical_fleet):
    return {cfg.expert_name: pricing_for_family(cfg.pricing_family)
            for cfg in canonical_fleet}


@pytest.fixture(scope="session")
def medium_corpus():
    """560 synthetic queries over the 4 canonical domains."""
    return simx.generate_corpus(560, seed=42)


@pytest.fixture(scope="session")
def medium_records(medium_corpus, canonical_adaptors, embedder):
    return dataprep.build_prediction_dataset(medium_corpus, canonical_adaptors, embedder)


def make_fleet(names_affinities, seed=42, base_latency=0.5, jitter=0.0,
               tokens_mean=80, tokens_spread=0, family="Fox-1.6B"):
    """Small ad-hoc fleets for unit tests."""
    configs = {}
    for name, affinity in names_affinities.items():
        configs[name] = simx.SimExpertConfig(
            expert_name=name, affinity=affinity,
            base_latency_seconds=base_latency, latency_jitter=jitter,
            output_tokens_mean=tokens_mean, output_tokens_spread=tokens_spread,
            pricing_family=family, seed=seed)
    return configs
