"""Deterministic simulated experts.

Each simulated expert has a per-domain affinity in [0, 1]. A reply blends
the query's reference tokens with noise tokens in proportion to affinity, so
the hashing embedder's similarity score rises monotonically with affinity,
and token log-probabilities are emitted with mean -(1 - affinity) * nll_scale
so NLL falls with affinity. Replies are pure functions of
(config seed, expert name, query id), which is what makes every pipeline
stage reproducible offline.

Latency is virtual: replies carry a sampled elapsed time instead of
sleeping, so building thousands of records takes milliseconds and timing
fields stay deterministic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from routekit.dataprep import Query
from routekit.errors import ConfigError
from routekit.embed import tokenize
from routekit.experts import ExpertReply, GenerationParams

AFFINITY_FLOOR = 0.1
NOISE_POOL_SIZE = 512
NOISE_TOKENS_PER_QUERY = 6


@dataclass(frozen=True)
class SimExpertConfig:
    expert_name: str
    affinity: dict[str, float]
    base_latency_seconds: float
    latency_jitter: float
    output_tokens_mean: float
    output_tokens_spread: float
    pricing_family: str
    seed: int = 42
    affinity_floor: float = AFFINITY_FLOOR
    nll_scale: float = 4.0

    def __post_init__(self):
        if self.base_latency_seconds <= 0:
            raise ConfigError(f"{self.expert_name}: base latency must be > 0")
        for tag, value in self.affinity.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{self.expert_name}: affinity[{tag!r}]={value} outside [0, 1]")


def _derived_rng(config: SimExpertConfig, query_id: str) -> np.random.Generator:
    digest = hashlib.sha256(
        f"{config.seed}:{config.expert_name}:{query_id}".encode("utf-8")
    ).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _noise_token(query_id: str, slot: int) -> str:
    """Synthetic filler token, disjoint from any natural vocabulary.

    Each query cycles a small block of the pool, so noise carries real
    embedding mass and similarity degrades sharply as affinity drops."""
    h = hashlib.sha256(query_id.encode("utf-8")).digest()
    base = int.from_bytes(h[:2], "little")
    return f"nz{(base + slot % NOISE_TOKENS_PER_QUERY) % NOISE_POOL_SIZE:03d}"


def simulate_reply(
    config: SimExpertConfig,
    query: Query,
    rng: np.random.Generator | None = None,
    params: GenerationParams | None = None,
) -> ExpertReply:
    """Deterministic simulated completion for one query.

    Affinity 1.0 returns the reference verbatim; affinity 0.0 returns pure
    noise. The draw order (latency, token count, per-token logprobs) is fixed
    so replies for the same (seed, query) differ across affinities only in
    how many slots hold reference tokens.
    """
    if rng is None:
        rng = _derived_rng(config, query.id)
    params = params or GenerationParams()
    affinity = config.affinity.get(query.dataset_tag, config.affinity_floor)

    elapsed = config.base_latency_seconds * float(
        np.exp(config.latency_jitter * rng.standard_normal()))
    raw_count = rng.normal(config.output_tokens_mean, config.output_tokens_spread)
    out_count = int(np.clip(round(raw_count), 1, params.max_tokens))

    ref_tokens = tokenize(query.reference)
    if affinity >= 1.0 and ref_tokens:
        response = query.reference
        out_count = len(ref_tokens)
    else:
        n_ref = int(np.clip(round(affinity * out_count), 0, out_count))
        if not ref_tokens:
            n_ref = 0
        tokens = [
            ref_tokens[j % len(ref_tokens)] if j < n_ref else _noise_token(query.id, j)
            for j in range(out_count)
        ]
        response = " ".join(tokens)

    noise_floor = (1.0 - affinity) * config.nll_scale
    logprobs = tuple(-(noise_floor + u) for u in rng.uniform(0.0, 0.2, size=out_count))

    return ExpertReply(
        response_text=response,
        input_tokens=max(1, len(tokenize(query.text))),
        output_tokens=out_count,
        elapsed_seconds=elapsed,
        token_logprobs=logprobs,
    )


@dataclass
class SimulatedExpert:
    """Adaptor wrapper; pluggable anywhere a remote adaptor is.

    On serving paths (no ground-truth query) the prompt itself acts as the
    reference with floor affinity, so replies stay deterministic per prompt.
    """

    config: SimExpertConfig
    name: str = field(init=False)

    def __post_init__(self):
        self.name = self.config.expert_name

    def generate(self, prompt: str, params: GenerationParams,
                 query: Query | None = None) -> ExpertReply:
        if query is None:
            pseudo_id = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
            query = Query(id=pseudo_id, text=prompt, reference=prompt, dataset_tag="_adhoc")
        return simulate_reply(self.config, query, params=params)


def expert_config_from_mapping(raw: dict) -> SimExpertConfig:
    try:
        latency = raw.get("latency", {})
        tokens = raw.get("tokens", {})
        return SimExpertConfig(
            expert_name=raw["name"],
            affinity={str(k): float(v) for k, v in raw.get("affinity", {}).items()},
            base_latency_seconds=float(latency.get("base_seconds", 0.5)),
            latency_jitter=float(latency.get("jitter", 0.0)),
            output_tokens_mean=float(tokens.get("mean", 100)),
            output_tokens_spread=float(tokens.get("spread", 0)),
            pricing_family=raw["pricing_family"],
            seed=int(raw.get("seed", 42)),
        )
    except KeyError as exc:
        raise ConfigError(f"simulated expert entry missing field {exc}") from exc


def load_sim_fleet(path: str | Path) -> list[tuple[SimExpertConfig, SimulatedExpert]]:
    """Load a fleet config file: one adaptor per expert entry."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"fleet config not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    entries = (raw or {}).get("experts") or []
    if not entries:
        raise ConfigError(f"fleet config {path} defines no experts")
    fleet: list[tuple[SimExpertConfig, SimulatedExpert]] = []
    seen: set[str] = set()
    for entry in entries:
        config = expert_config_from_mapping(entry)
        if config.expert_name in seen:
            raise ConfigError(f"duplicate expert name: {config.expert_name!r}")
        seen.add(config.expert_name)
        fleet.append((config, SimulatedExpert(config)))
    return fleet


# ---------------------------------------------------------------------------
# Canonical fixture: 7 experts over 4 domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    tag: str
    share: float
    cue_words: tuple[str, ...]
    answer_words: tuple[str, ...]


_FILLERS = (
    "please", "explain", "describe", "consider", "the", "a", "of", "about",
    "what", "how", "why", "does", "would", "could", "given", "following",
    "example", "detail", "short", "simple", "best", "way", "is", "are",
)

_DOMAINS = (
    DomainSpec(
        tag="science",
        share=0.40,
        cue_words=(
            "gravity", "quantum", "molecule", "photon", "orbit", "magnet",
            "voltage", "entropy", "fossil", "mineral", "climate", "velocity",
            "plasma", "neutron", "crystal", "isotope",
        ),
        answer_words=(
            "energy", "force", "field", "mass", "charge", "wave", "particle",
            "reaction", "pressure", "temperature", "density", "spectrum",
            "acceleration", "equilibrium", "conservation", "experiment",
            "observation", "measurement", "theory", "phenomenon", "electron",
            "nucleus", "frequency", "amplitude", "gradient", "thermal",
            "kinetic", "potential", "magnetic", "electric",
        ),
    ),
    DomainSpec(
        tag="math",
        share=0.20,
        cue_words=(
            "integral", "derivative", "polynomial", "fraction", "theorem",
            "prime", "matrix", "vector", "equation", "inequality", "geometry",
            "algebra", "probability", "factorial", "logarithm", "exponent",
        ),
        answer_words=(
            "solve", "compute", "multiply", "divide", "add", "subtract",
            "simplify", "factor", "substitute", "evaluate", "result",
            "answer", "total", "product", "difference", "ratio", "percent",
            "digits", "value", "count", "steps", "proof", "formula",
            "solution", "variable", "constant", "term", "expression",
            "numerator", "denominator",
        ),
    ),
    DomainSpec(
        tag="code",
        share=0.20,
        cue_words=(
            "function", "variable", "loop", "array", "string", "integer",
            "boolean", "recursion", "compile", "debug", "syntax", "runtime",
            "algorithm", "pointer", "stack", "queue",
        ),
        answer_words=(
            "return", "print", "input", "output", "index", "element", "list",
            "dictionary", "class", "method", "argument", "parameter",
            "import", "define", "assign", "append", "iterate", "sort",
            "filter", "slice", "exception", "assert", "test", "case",
            "condition", "branch", "byte", "char", "null", "true",
        ),
    ),
    DomainSpec(
        tag="bio",
        share=0.20,
        cue_words=(
            "enzyme", "protein", "neuron", "antibody", "genome", "bacteria",
            "virus", "chromosome", "hormone", "membrane", "mitochondria",
            "ribosome", "synapse", "antigen", "mutation", "metabolism",
        ),
        answer_words=(
            "cell", "tissue", "organ", "dna", "rna", "gene", "acid",
            "molecule", "binding", "signal", "pathway", "expression",
            "regulation", "synthesis", "transport", "diffusion", "infection",
            "immune", "response", "treatment", "dose", "patient", "clinical",
            "trial", "symptom", "diagnosis", "therapy", "chronic", "acute",
            "benign",
        ),
    ),
)

# Affinity per (expert, domain), latency and token models chosen so the
# small cheap generalist is the clear winner on the dominant general-science
# slice: learned routers should rediscover that allocation.
_CANONICAL_EXPERTS: tuple[dict, ...] = (
    {"name": "fox-sim", "family": "Fox-1.6B",
     "affinity": {"science": 0.95, "math": 0.45, "code": 0.40, "bio": 0.35},
     "latency": (0.22, 0.05), "tokens": (50, 8)},
    {"name": "qwen-sim", "family": "Qwen-7B",
     "affinity": {"science": 0.50, "math": 0.50, "code": 0.50, "bio": 0.45},
     "latency": (0.80, 0.10), "tokens": (110, 15)},
    {"name": "mistral-sim", "family": "Mistral-8B",
     "affinity": {"science": 0.45, "math": 0.35, "code": 0.40, "bio": 0.40},
     "latency": (1.30, 0.10), "tokens": (120, 15)},
    {"name": "codellama-sim", "family": "Llama-8B",
     "affinity": {"science": 0.40, "math": 0.40, "code": 0.95, "bio": 0.30},
     "latency": (1.10, 0.10), "tokens": (120, 15)},
    {"name": "mathdeepseek-sim", "family": "DeepSeek-8B",
     "affinity": {"science": 0.45, "math": 0.95, "code": 0.45, "bio": 0.30},
     "latency": (0.70, 0.10), "tokens": (115, 15)},
    {"name": "biollama-sim", "family": "Llama-8B",
     "affinity": {"science": 0.35, "math": 0.30, "code": 0.35, "bio": 0.95},
     "latency": (0.75, 0.10), "tokens": (105, 15)},
    {"name": "biomistral-sim", "family": "Mistral-8B",
     "affinity": {"science": 0.30, "math": 0.25, "code": 0.30, "bio": 0.50},
     "latency": (0.55, 0.10), "tokens": (100, 15)},
)


def canonical_domains() -> tuple[DomainSpec, ...]:
    return _DOMAINS


def canonical_fleet(seed: int = 42) -> list[SimExpertConfig]:
    """The 7-expert fixture: two bio, one code, one math, three general
    (including the cheap fast small model)."""
    return [
        SimExpertConfig(
            expert_name=spec["name"],
            affinity=dict(spec["affinity"]),
            base_latency_seconds=spec["latency"][0],
            latency_jitter=spec["latency"][1],
            output_tokens_mean=spec["tokens"][0],
            output_tokens_spread=spec["tokens"][1],
            pricing_family=spec["family"],
            seed=seed,
        )
        for spec in _CANONICAL_EXPERTS
    ]


def canonical_adaptors(seed: int = 42) -> dict[str, SimulatedExpert]:
    return {cfg.expert_name: SimulatedExpert(cfg) for cfg in canonical_fleet(seed)}


def fleet_to_yaml(configs: list[SimExpertConfig], path: str | Path,
                  locality: dict[str, str] | None = None) -> None:
    """Write a fleet config file that load_sim_fleet / the gateway can read."""
    locality = locality or {}
    entries = []
    for cfg in configs:
        entries.append({
            "name": cfg.expert_name,
            "kind": "simulated",
            "locality": locality.get(cfg.expert_name, "cloud"),
            "pricing_family": cfg.pricing_family,
            "template": "{query}",
            "affinity": dict(sorted(cfg.affinity.items())),
            "latency": {"base_seconds": cfg.base_latency_seconds,
                        "jitter": cfg.latency_jitter},
            "tokens": {"mean": cfg.output_tokens_mean,
                       "spread": cfg.output_tokens_spread},
            "seed": cfg.seed,
        })
    Path(path).write_text(yaml.safe_dump({"experts": entries}, sort_keys=True),
                          encoding="utf-8")


def generate_corpus(
    n: int,
    seed: int = 42,
    domains: tuple[DomainSpec, ...] | None = None,
    shares: dict[str, float] | None = None,
) -> list[Query]:
    """Synthetic instruction corpus: each query mixes domain cue words with
    shared fillers, so the domain is recoverable from text alone."""
    domains = domains or canonical_domains()
    rng = np.random.default_rng(seed)
    queries: list[Query] = []
    weights = [shares[d.tag] if shares else d.share for d in domains]
    total_share = sum(weights)
    counts = [int(round(n * w / total_share)) for w in weights]
    counts[-1] = n - sum(counts[:-1])

    for domain, count in zip(domains, counts):
        for i in range(count):
            cues = list(rng.choice(domain.cue_words, size=4, replace=False))
            fills = list(rng.choice(_FILLERS, size=1, replace=True))
            words = cues + fills
            rng.shuffle(words)
            n_answer = int(rng.integers(18, 30))
            reference = " ".join(rng.choice(domain.answer_words, size=n_answer, replace=True))
            queries.append(Query(
                id=f"{domain.tag}-{i:05d}",
                text=" ".join(words),
                reference=reference,
                dataset_tag=domain.tag,
            ))
    return queries
