"""Expert adaptor contract and the remote-endpoint client.

An adaptor turns a rendered prompt into an ExpertReply with full token and
timing accounting. Simulated adaptors live in routekit.simx; the remote kind
here speaks a minimal JSON wire contract.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import requests

from routekit.errors import AdaptorError, AdaptorTimeout
from routekit.embed import tokenize

if TYPE_CHECKING:
    from routekit.dataprep import Query


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 512
    temperature: float = 0.7
    top_p: float = 0.95

    def validate(self) -> None:
        if self.max_tokens <= 0:
            raise AdaptorError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.temperature <= 0:
            raise AdaptorError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise AdaptorError(f"top_p must be in (0, 1], got {self.top_p}")


@dataclass(frozen=True)
class ExpertReply:
    """One expert completion with token/timing accounting.

    token_logprobs, when present, has one entry (<= 0) per output token;
    remote providers may omit it.
    """

    response_text: str
    input_tokens: int
    output_tokens: int
    elapsed_seconds: float
    token_logprobs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.elapsed_seconds <= 0:
            raise AdaptorError(f"elapsed_seconds must be > 0, got {self.elapsed_seconds}")
        if self.token_logprobs is not None:
            if len(self.token_logprobs) != self.output_tokens:
                raise AdaptorError(
                    f"{len(self.token_logprobs)} logprobs for {self.output_tokens} output tokens"
                )
            if any(lp > 0 for lp in self.token_logprobs):
                raise AdaptorError("token log-probabilities must be <= 0")

    @property
    def mean_nll(self) -> float | None:
        if not self.token_logprobs:
            return None
        return -sum(self.token_logprobs) / len(self.token_logprobs)


class ExpertAdaptor(Protocol):
    """Dispatch contract. `query` is supplied on data-preparation paths where
    the ground-truth record is known; serving paths pass only the prompt."""

    name: str

    def generate(self, prompt: str, params: GenerationParams,
                 query: "Query | None" = None) -> ExpertReply: ...


@dataclass
class RemoteExpertAdaptor:
    """Client for a remote expert endpoint.

    Wire contract: POST {"prompt", "max_tokens", "temperature", "top_p"} ->
    {"text", "input_tokens"?, "output_tokens"?, "logprobs"?}. Token counts
    default to whitespace-token estimates when the provider omits them;
    logprobs stay absent rather than being fabricated.
    """

    name: str
    endpoint: str
    timeout_seconds: float = 60.0
    _session: requests.Session = field(default_factory=requests.Session, repr=False)

    def generate(self, prompt: str, params: GenerationParams,
                 query: "Query | None" = None) -> ExpertReply:
        started = time.perf_counter()
        try:
            resp = self._session.post(
                self.endpoint,
                json={
                    "prompt": prompt,
                    "max_tokens": params.max_tokens,
                    "temperature": params.temperature,
                    "top_p": params.top_p,
                },
                timeout=self.timeout_seconds,
            )
            resp.raise_for_status()
            payload = resp.json()
            text = payload["text"]
        except requests.Timeout as exc:
            raise AdaptorTimeout(
                f"expert {self.name!r} timed out after {self.timeout_seconds}s",
                expert_name=self.name,
            ) from exc
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise AdaptorError(f"expert {self.name!r} failed: {exc}",
                               expert_name=self.name) from exc
        elapsed = time.perf_counter() - started
        logprobs = payload.get("logprobs")
        return ExpertReply(
            response_text=text,
            input_tokens=int(payload.get("input_tokens", max(1, len(tokenize(prompt))))),
            output_tokens=int(payload.get("output_tokens", len(tokenize(text)))),
            elapsed_seconds=max(elapsed, 1e-9),
            token_logprobs=None if logprobs is None else tuple(float(x) for x in logprobs),
        )
