"""Serving gateway: embed -> classify -> dispatch via the chosen expert's
prompt adaptor -> reply, with monitoring.

Endpoints: POST /v1/query (fields `text`, optional `method`), GET /v1/stats,
GET /healthz. The HTTP layer is a thin stdlib ThreadingHTTPServer over the
Gateway class; all request handling is thread-safe (the router models and
vectorizers are immutable, stats updates take a lock).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import yaml

from routekit.errors import AdaptorError, AdaptorTimeout, ConfigError, ServingError
from routekit.evaluation import (PricingEntry, pico_to_usd,
                                 pricing_for_family, query_cost)
from routekit.experts import ExpertAdaptor, ExpertReply, GenerationParams, RemoteExpertAdaptor
from routekit.routers import Router, load_router
from routekit.simx import SimulatedExpert, expert_config_from_mapping

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_SECONDS = 60.0


def render_prompt(template: str, query_text: str) -> str:
    """Substitute the single {query} placeholder verbatim."""
    count = template.count("{query}")
    if count != 1:
        raise ConfigError(f"prompt template must contain exactly one "
                          f"{{query}} placeholder, found {count}")
    return template.replace("{query}", query_text)


@dataclass(frozen=True)
class ExpertEndpointConfig:
    expert_name: str
    kind: str               # "remote" | "simulated"
    locality: str           # "local" | "cloud"
    template: str
    generation: GenerationParams
    pricing_family: str
    endpoint: str = ""      # remote kind only

    def __post_init__(self):
        if self.kind not in ("remote", "simulated"):
            raise ConfigError(f"{self.expert_name}: unknown adaptor kind {self.kind!r}")
        if self.locality not in ("local", "cloud"):
            raise ConfigError(f"{self.expert_name}: unknown locality {self.locality!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ConfigError(f"{self.expert_name}: remote adaptor needs an endpoint")
        self.generation.validate()
        render_prompt(self.template, "")  # placeholder check at startup


def execute(adaptor: ExpertAdaptor, prompt: str, params: GenerationParams,
            timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS, query=None) -> ExpertReply:
    """Dispatch a rendered prompt and enforce the timeout.

    Simulated adaptors report virtual elapsed time, so the deadline is
    checked against the reply's own clock; remote adaptors also enforce a
    socket timeout."""
    reply = adaptor.generate(prompt, params, query=query)
    if reply.elapsed_seconds > timeout_seconds:
        raise AdaptorTimeout(
            f"expert {adaptor.name!r} exceeded the {timeout_seconds}s timeout "
            f"(took {reply.elapsed_seconds:.3f}s)",
            expert_name=adaptor.name)
    return reply


@dataclass
class GatewayStats:
    """Monitoring counters. Hit counts sum to total_requests; failures are
    tracked separately (a failed request reaches no expert)."""

    total_requests: int = 0
    total_failures: int = 0
    hits: dict[str, int] = field(default_factory=dict)
    cost_pico: int = 0
    decision_seconds: float = 0.0
    remote_dispatches: int = 0

    @property
    def mean_decision_ms(self) -> float:
        if self.total_requests == 0:
            return 0.0
        return 1000.0 * self.decision_seconds / self.total_requests

    def to_dict(self) -> dict:
        return {
            "total_requests": self.total_requests,
            "total_failures": self.total_failures,
            "hits": dict(sorted(self.hits.items())),
            "cost_usd": pico_to_usd(self.cost_pico),
            "cost_pico_usd": self.cost_pico,
            "mean_decision_ms": self.mean_decision_ms,
            "remote_dispatches": self.remote_dispatches,
        }


@dataclass(frozen=True)
class GatewayResponse:
    expert: str
    response: str
    scores: dict[str, float]
    cost_pico: int
    decision_seconds: float
    expert_seconds: float
    degraded: bool

    def to_dict(self) -> dict:
        return {
            "expert": self.expert,
            "response": self.response,
            "scores": self.scores,
            "cost_usd": pico_to_usd(self.cost_pico),
            "decision_ms": self.decision_seconds * 1000.0,
            "expert_ms": self.expert_seconds * 1000.0,
            "degraded": self.degraded,
        }


class Gateway:
    """The deployed router: receives text, picks an expert, dispatches, and
    keeps monitoring counters consistent under concurrency."""

    def __init__(
        self,
        routers: dict[str, Router],
        default_method: str,
        endpoints: dict[str, ExpertEndpointConfig],
        adaptors: dict[str, ExpertAdaptor],
        pricing: dict[str, PricingEntry] | None = None,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        fallback_expert: str | None = None,
    ):
        if not routers:
            raise ServingError("gateway needs at least one loaded router")
        if default_method not in routers:
            raise ServingError(f"default method {default_method!r} has no loaded router")
        if not endpoints:
            raise ServingError("gateway needs at least one expert endpoint")
        if set(endpoints) != set(adaptors):
            raise ServingError("endpoint and adaptor name sets differ")
        if fallback_expert is not None and fallback_expert not in endpoints:
            raise ServingError(f"fallback expert {fallback_expert!r} is not configured")
        self.routers = routers
        self.default_method = default_method
        self.endpoints = endpoints
        self.adaptors = adaptors
        self.pricing = pricing or {
            name: pricing_for_family(cfg.pricing_family)
            for name, cfg in endpoints.items()
        }
        self.timeout_seconds = timeout_seconds
        self.fallback_expert = fallback_expert
        self._stats = GatewayStats(hits={name: 0 for name in endpoints})
        self._lock = threading.Lock()
        self._request_counter = 0

    def _dispatch(self, expert: str, text: str) -> tuple[ExpertReply, float]:
        cfg = self.endpoints[expert]
        prompt = render_prompt(cfg.template, text)
        started = time.perf_counter()
        reply = execute(self.adaptors[expert], prompt, cfg.generation,
                        self.timeout_seconds)
        wall = time.perf_counter() - started
        # Simulated experts answer on a virtual clock; report that one.
        expert_seconds = reply.elapsed_seconds if cfg.kind == "simulated" else wall
        return reply, expert_seconds

    def handle_query(self, text: str, method: str | None = None) -> GatewayResponse:
        method = method or self.default_method
        router = self.routers.get(method)
        if router is None:
            raise ServingError(f"no router loaded for method {method!r}")
        with self._lock:
            self._request_counter += 1
            request_id = f"req-{self._request_counter:08d}"

        decision = router.route(request_id, text)
        expert = decision.chosen_expert
        degraded = False
        try:
            reply, expert_seconds = self._dispatch(expert, text)
        except AdaptorError as exc:
            if self.fallback_expert is None or self.fallback_expert == expert:
                with self._lock:
                    self._stats.total_failures += 1
                raise
            log.warning("expert %s failed (%s); falling back to %s",
                        expert, exc, self.fallback_expert)
            expert = self.fallback_expert
            degraded = True
            try:
                reply, expert_seconds = self._dispatch(expert, text)
            except AdaptorError:
                with self._lock:
                    self._stats.total_failures += 1
                raise

        cost = query_cost(reply.input_tokens, reply.output_tokens, self.pricing[expert])
        with self._lock:
            self._stats.total_requests += 1
            self._stats.hits[expert] = self._stats.hits.get(expert, 0) + 1
            self._stats.cost_pico += cost
            self._stats.decision_seconds += decision.decision_latency_seconds
            if self.endpoints[expert].locality == "cloud":
                self._stats.remote_dispatches += 1
        return GatewayResponse(
            expert=expert,
            response=reply.response_text,
            scores=decision.scores,
            cost_pico=cost,
            decision_seconds=decision.decision_latency_seconds,
            expert_seconds=expert_seconds,
            degraded=degraded,
        )

    def stats(self) -> GatewayStats:
        with self._lock:
            return replace(self._stats, hits=dict(self._stats.hits))


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

class _GatewayHandler(BaseHTTPRequestHandler):
    gateway: Gateway  # set on the server class

    def _send(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, {"status": "ok"})
        elif self.path == "/v1/stats":
            self._send(200, self.server.gateway.stats().to_dict())
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        if self.path != "/v1/query":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            text = body["text"]
            if not isinstance(text, str) or not text:
                raise KeyError("text")
            method = body.get("method")
        except (KeyError, ValueError, json.JSONDecodeError):
            self._send(400, {"error": "body must be JSON with a non-empty 'text' field"})
            return
        try:
            response = self.server.gateway.handle_query(text, method=method)
        except AdaptorTimeout as exc:
            self._send(504, {"error": str(exc)})
            return
        except AdaptorError as exc:
            self._send(502, {"error": str(exc)})
            return
        except ServingError as exc:
            self._send(400, {"error": str(exc)})
            return
        self._send(200, response.to_dict())

    def log_message(self, fmt, *args):  # route access logs through logging
        log.debug("%s - %s", self.address_string(), fmt % args)


class GatewayServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], gateway: Gateway):
        super().__init__(address, _GatewayHandler)
        self.gateway = gateway


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _generation_from_mapping(raw: dict | None) -> GenerationParams:
    raw = raw or {}
    return GenerationParams(
        max_tokens=int(raw.get("max_tokens", 512)),
        temperature=float(raw.get("temperature", 0.7)),
        top_p=float(raw.get("top_p", 0.95)),
    )


def load_expert_entries(entries: list[dict]) -> tuple[
        dict[str, ExpertEndpointConfig], dict[str, ExpertAdaptor]]:
    if not entries:
        raise ConfigError("config defines no experts")
    endpoints: dict[str, ExpertEndpointConfig] = {}
    adaptors: dict[str, ExpertAdaptor] = {}
    for raw in entries:
        try:
            name = raw["name"]
        except KeyError as exc:
            raise ConfigError(f"expert entry missing field {exc}") from exc
        if name in endpoints:
            raise ConfigError(f"duplicate expert name: {name!r}")
        kind = raw.get("kind", "simulated")
        cfg = ExpertEndpointConfig(
            expert_name=name,
            kind=kind,
            locality=raw.get("locality", "cloud"),
            template=raw.get("template", "{query}"),
            generation=_generation_from_mapping(raw.get("generation")),
            pricing_family=raw["pricing_family"],
            endpoint=raw.get("endpoint", ""),
        )
        endpoints[name] = cfg
        if kind == "simulated":
            adaptors[name] = SimulatedExpert(expert_config_from_mapping(raw))
        else:
            adaptors[name] = RemoteExpertAdaptor(
                name=name, endpoint=cfg.endpoint,
                timeout_seconds=float(raw.get("timeout_seconds", DEFAULT_TIMEOUT_SECONDS)))
    return endpoints, adaptors


def build_gateway(config_path: str | Path) -> tuple[Gateway, str, int]:
    """Construct a Gateway (plus bind host/port) from a config file."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"gateway config not found: {config_path}")
    raw = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}

    router_cfg = raw.get("router") or {}
    manifests = router_cfg.get("manifests") or {}
    if not manifests:
        raise ConfigError("gateway config needs router.manifests "
                          "(method -> manifest path)")
    base = config_path.parent
    routers: dict[str, Router] = {}
    for method, rel in sorted(manifests.items()):
        path = Path(rel)
        if not path.is_absolute():
            path = base / path
        try:
            routers[method] = load_router(path)
        except Exception as exc:
            raise ServingError(f"failed to load router {method!r} from {path}: {exc}") from exc
    default_method = router_cfg.get("default_method") or sorted(routers)[0]

    endpoints, adaptors = load_expert_entries(raw.get("experts") or [])
    gateway = Gateway(
        routers=routers,
        default_method=default_method,
        endpoints=endpoints,
        adaptors=adaptors,
        timeout_seconds=float(raw.get("timeout_seconds", DEFAULT_TIMEOUT_SECONDS)),
        fallback_expert=raw.get("fallback_expert"),
    )
    return gateway, raw.get("host", "127.0.0.1"), int(raw.get("port", 8080))


def serve(config_path: str | Path, port: int | None = None,
          host: str | None = None) -> None:
    """Run the gateway until interrupted."""
    gateway, cfg_host, cfg_port = build_gateway(config_path)
    server = GatewayServer((host or cfg_host, port or cfg_port), gateway)
    bound_host, bound_port = server.server_address[:2]
    log.info("gateway listening on http://%s:%d", bound_host, bound_port)
    print(f"routekit gateway listening on http://{bound_host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
