"""Trainable routing classifiers.

Two model kinds share one training loop: a 2-layer perceptron over sparse
BoW/TF-IDF vectors (ReLU hidden layer, softmax output) and a linear softmax
head over frozen provider embeddings. Both train with weighted soft-label
cross-entropy and Adam with decoupled weight decay. The arithmetic lives in
routekit._kernels so the compiled and fallback backends stay interchangeable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from routekit import _kernels
from routekit.dataprep import TrainingSet
from routekit.embed import EmbeddingProvider, SparseVector, VectorizerModel, vectorize
from routekit.errors import DataError, TrainingDiverged

MODEL_MAGIC = b"RKMODEL1"
MODEL_FORMAT_VERSION = 1

HIDDEN_SIZE = 256
MLP_LEARNING_RATE = 5e-3
HEAD_LEARNING_RATE = 5e-5
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = MLP_LEARNING_RATE
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 5
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")


def head_config(**overrides) -> TrainConfig:
    overrides.setdefault("learning_rate", HEAD_LEARNING_RATE)
    return TrainConfig(**overrides)


@dataclass
class MlpParams:
    w1: np.ndarray  # (n_inputs, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, n_experts)
    b2: np.ndarray  # (n_experts,)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[0]

    @property
    def n_experts(self) -> int:
        return self.b2.shape[0]


@dataclass
class HeadParams:
    w: np.ndarray  # (dim, n_experts)
    b: np.ndarray  # (n_experts,)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [("w", self.w), ("b", self.b)]

    @property
    def n_inputs(self) -> int:
        return self.w.shape[0]

    @property
    def n_experts(self) -> int:
        return self.b.shape[0]


def mlp_init(n_inputs: int, hidden: int, n_experts: int, seed: int) -> MlpParams:
    """Glorot-uniform weights (zero biases), deterministic per seed."""
    if min(n_inputs, hidden, n_experts) < 1:
        raise DataError("all MLP dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (n_inputs + hidden))
    lim2 = np.sqrt(6.0 / (hidden + n_experts))
    return MlpParams(
        w1=rng.uniform(-lim1, lim1, size=(n_inputs, hidden)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(hidden, n_experts)),
        b2=np.zeros(n_experts),
    )


def head_init(dim: int, n_experts: int) -> HeadParams:
    """Zero init; a linear softmax model has no symmetry to break."""
    if min(dim, n_experts) < 1:
        raise DataError("all head dimensions must be >= 1")
    return HeadParams(w=np.zeros((dim, n_experts)), b=np.zeros(n_experts))


def mlp_forward(params: MlpParams, x: SparseVector) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and output probabilities for one sparse sample."""
    if x.dimension != params.n_inputs:
        raise DataError(f"input dimension {x.dimension} != model {params.n_inputs}")
    return _kernels.mlp_forward(params.w1, params.b1, params.w2, params.b2,
                                x.indices, x.values)


def head_forward(params: HeadParams, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (params.n_inputs,):
        raise DataError(f"input shape {x.shape} != model ({params.n_inputs},)")
    return _kernels.head_forward(params.w, params.b, x)


def soft_cross_entropy(y: np.ndarray, target: np.ndarray, weight: float = 1.0) -> float:
    """-weight * sum(target * ln(y)), with y floored at 1e-12 before the log."""
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise DataError(f"length mismatch: {y.shape} vs {target.shape}")
    return float(-weight * (target * np.log(np.maximum(y, PROB_FLOOR))).sum())


MlpBatch = list[tuple[SparseVector, np.ndarray, float]]
HeadBatch = list[tuple[np.ndarray, np.ndarray, float]]


def mlp_gradients(params: MlpParams, batch: MlpBatch) -> MlpParams:
    """Mean over the batch of per-sample gradients of the weighted loss.

    Weight decay is not included here; the optimizer applies it decoupled."""
    if not batch:
        raise DataError("gradient batch must be non-empty")
    grads = MlpParams(w1=np.zeros_like(params.w1), b1=np.zeros_like(params.b1),
                      w2=np.zeros_like(params.w2), b2=np.zeros_like(params.b2))
    scale = 1.0 / len(batch)
    for x, target, weight in batch:
        h, y = mlp_forward(params, x)
        _kernels.mlp_backward(params.w2, h, y, x.indices, x.values,
                              np.ascontiguousarray(target, dtype=np.float64),
                              float(weight), scale,
                              grads.w1, grads.b1, grads.w2, grads.b2)
    return grads


def head_gradients(params: HeadParams, batch: HeadBatch) -> HeadParams:
    if not batch:
        raise DataError("gradient batch must be non-empty")
    grads = HeadParams(w=np.zeros_like(params.w), b=np.zeros_like(params.b))
    scale = 1.0 / len(batch)
    for x, target, weight in batch:
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = head_forward(params, x)
        _kernels.head_backward(x, y,
                               np.ascontiguousarray(target, dtype=np.float64),
                               float(weight), scale, grads.w, grads.b)
    return grads


@dataclass
class OptimizerState:
    """First/second moment accumulators (flat, one pair per tensor) and the
    shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: MlpParams | HeadParams) -> "OptimizerState":
        state = cls()
        for name, tensor in params.tensors():
            state.m[name] = np.zeros(tensor.size)
            state.v[name] = np.zeros(tensor.size)
        return state


def optimizer_step(state: OptimizerState, params: MlpParams | HeadParams,
                   grads: MlpParams | HeadParams, config: TrainConfig) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    for name, grad in grads.tensors():
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(
                f"non-finite gradient in tensor {name!r} at step {state.step + 1}")
    state.step += 1
    tensors = dict(params.tensors())
    for name, grad in grads.tensors():
        _kernels.adam_update(
            tensors[name].reshape(-1), np.ascontiguousarray(grad.reshape(-1)),
            state.m[name], state.v[name], state.step,
            config.learning_rate, config.beta1, config.beta2,
            config.epsilon, config.weight_decay,
        )


@dataclass
class TrainedModel:
    kind: str  # "mlp" | "head"
    params: MlpParams | HeadParams
    expert_names: list[str]
    loss_trace: list[float]
    config: TrainConfig
    vector_source: dict

    def predict_proba(self, x: SparseVector | np.ndarray) -> np.ndarray:
        if self.kind == "mlp":
            return mlp_forward(self.params, x)[1]
        return head_forward(self.params, x)


def train_classifier(
    training_set: TrainingSet,
    kind: str,
    vector_source: VectorizerModel | EmbeddingProvider,
    config: TrainConfig | None = None,
    hidden: int = HIDDEN_SIZE,
) -> TrainedModel:
    """Train an "mlp" (over a fitted vectorizer) or "head" (over an embedding
    provider); returns the model with its per-epoch mean loss trace.

    Deterministic for a fixed (data, config, seed): shuffling, init, and
    updates all derive from config.seed."""
    if not training_set.rows:
        raise DataError("cannot train on an empty split")
    if kind not in ("mlp", "head"):
        raise DataError(f"unknown model kind: {kind!r}")
    if config is None:
        config = TrainConfig() if kind == "mlp" else head_config()

    expert_names = training_set.expert_names
    n_experts = len(expert_names)

    if kind == "mlp":
        if not isinstance(vector_source, VectorizerModel):
            raise DataError("mlp training needs a fitted VectorizerModel")
        inputs = [vectorize(row.query.text, vector_source) for row in training_set.rows]
        params: MlpParams | HeadParams = mlp_init(vector_source.size, hidden,
                                                  n_experts, config.seed)
        source_info = {"type": "vectorizer", "kind": vector_source.kind,
                       "size": vector_source.size}
    else:
        inputs = [np.ascontiguousarray(vector_source.embed(row.query.text))
                  for row in training_set.rows]
        params = head_init(vector_source.dimension, n_experts)
        source_info = {"type": "embedder", "name": vector_source.name,
                       "dimension": vector_source.dimension}

    targets = [row.soft_label.vector(expert_names) for row in training_set.rows]
    weights = [row.weight for row in training_set.rows]

    grads = (MlpParams(np.zeros_like(params.w1), np.zeros_like(params.b1),
                       np.zeros_like(params.w2), np.zeros_like(params.b2))
             if kind == "mlp"
             else HeadParams(np.zeros_like(params.w), np.zeros_like(params.b)))
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)
    n = len(inputs)
    trace: list[float] = []

    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            chunk = order[start:start + config.batch_size]
            scale = 1.0 / len(chunk)
            for _, tensor in grads.tensors():
                tensor.fill(0.0)
            for i in chunk:
                if kind == "mlp":
                    h, y = mlp_forward(params, inputs[i])
                    _kernels.mlp_backward(params.w2, h, y,
                                          inputs[i].indices, inputs[i].values,
                                          targets[i], weights[i], scale,
                                          grads.w1, grads.b1, grads.w2, grads.b2)
                else:
                    y = head_forward(params, inputs[i])
                    _kernels.head_backward(inputs[i], y, targets[i],
                                           weights[i], scale, grads.w, grads.b)
                epoch_loss += soft_cross_entropy(y, targets[i], weights[i])
            optimizer_step(state, params, grads, config)
        mean_loss = epoch_loss / n
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"loss diverged to {mean_loss} at epoch {len(trace) + 1}",
                                   loss_trace=trace)
        trace.append(mean_loss)

    return TrainedModel(kind=kind, params=params, expert_names=expert_names,
                        loss_trace=trace, config=config, vector_source=source_info)


# ---------------------------------------------------------------------------
# Serialization: magic + JSON header + raw float64 little-endian blocks
# ---------------------------------------------------------------------------

def save_model(model: TrainedModel, path: str | Path) -> None:
    header = {
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "expert_names": model.expert_names,
        "loss_trace": model.loss_trace,
        "config": {
            "learning_rate": model.config.learning_rate,
            "weight_decay": model.config.weight_decay,
            "batch_size": model.config.batch_size,
            "epochs": model.config.epochs,
            "seed": model.config.seed,
            "beta1": model.config.beta1,
            "beta2": model.config.beta2,
            "epsilon": model.config.epsilon,
        },
        "vector_source": model.vector_source,
        "tensors": [{"name": name, "shape": list(tensor.shape)}
                    for name, tensor in model.params.tensors()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in model.params.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_model(path: str | Path) -> TrainedModel:
    with Path(path).open("rb") as fh:
        if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
            raise DataError(f"{path}: not a routekit model file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["version"] != MODEL_FORMAT_VERSION:
            raise DataError(f"unsupported model version {header['version']}")
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            arrays[spec["name"]] = data.reshape(shape)
    if header["kind"] == "mlp":
        params: MlpParams | HeadParams = MlpParams(**arrays)
    else:
        params = HeadParams(**arrays)
    return TrainedModel(
        kind=header["kind"],
        params=params,
        expert_names=header["expert_names"],
        loss_trace=header["loss_trace"],
        config=TrainConfig(**header["config"]),
        vector_source=header["vector_source"],
    )
