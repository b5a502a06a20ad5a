"""routekit: a multi-LLM query routing toolkit.

Learns to send each prompt to the most suitable expert model: builds the
expert prediction dataset, trains soft-label routing classifiers, evaluates
every method on cost / throughput / similarity / NLL, and serves the trained
router behind an HTTP gateway. Ships deterministic simulated experts so the
whole pipeline runs offline.
"""

__version__ = "0.1.0"

from routekit._kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND", "__version__"]
