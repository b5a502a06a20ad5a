"""Exception hierarchy shared across the package.

Exit codes mirror the CLI contract: 2 config, 3 data, 4 training divergence,
5 serving.
"""


class RoutekitError(Exception):
    exit_code = 1
    module = "routekit"


class ConfigError(RoutekitError):
    exit_code = 2
    module = "config"


class DataError(RoutekitError):
    exit_code = 3
    module = "data"


class TrainingDiverged(RoutekitError):
    exit_code = 4
    module = "learn"

    def __init__(self, message: str, loss_trace: list[float] | None = None):
        super().__init__(message)
        self.loss_trace = loss_trace or []


class ServingError(RoutekitError):
    exit_code = 5
    module = "gateway"


class EmbedderError(RoutekitError):
    """Embedding provider failure, with retry metadata for callers."""

    module = "embed"

    def __init__(self, message: str, *, retryable: bool = False, attempts: int = 1):
        super().__init__(message)
        self.retryable = retryable
        self.attempts = attempts


class AdaptorError(RoutekitError):
    """An expert adaptor failed to produce a reply."""

    module = "experts"

    def __init__(self, message: str, *, expert_name: str = ""):
        super().__init__(message)
        self.expert_name = expert_name


class AdaptorTimeout(AdaptorError):
    pass
