"""FedAvg training with local mini-batch SGD, plus materialisation of shared data."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstraintViolation, DimensionError, TrainingDiverged
from .partition import ClientDataset, Dataset

INIT_SCALE = 0.05


# -- learners -----------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    """``kind`` is ``softmax`` (multinomial logistic regression) or ``mlp``
    (one ReLU hidden layer of width ``hidden``)."""

    kind: str
    n_features: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("softmax", "mlp"):
            raise ValueError(f"unknown learner {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs a positive hidden width")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "softmax":
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unflatten(self, w: np.ndarray) -> list[np.ndarray]:
        out, off = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(w[off : off + n].reshape(s))
            off += n
        return out


@dataclass(frozen=True)
class ModelParams:
    vector: np.ndarray
    arch: Architecture

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if v.size != self.arch.size:
            raise DimensionError(f"parameter vector has {v.size} entries, architecture needs {self.arch.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def save(self, path):
        """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(self.vector.astype("<f8").tobytes())
        path.with_suffix(".json").write_text(json.dumps(asdict(self.arch), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        arch = Architecture(**json.loads(path.with_suffix(".json").read_text()))
        vec = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        return cls(vec.astype(np.float64), arch)


def init_params(arch: Architecture, seed) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(rng.uniform(-INIT_SCALE, INIT_SCALE, size=arch.size), arch)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(w: np.ndarray, arch: Architecture, x: np.ndarray) -> np.ndarray:
    """Class log-probabilities, shape (n, n_classes)."""
    parts = arch.unflatten(w)
    if arch.kind == "softmax":
        W, b = parts
        return _log_softmax(x @ W + b)
    W1, b1, W2, b2 = parts
    h = np.maximum(x @ W1 + b1, 0.0)
    return _log_softmax(h @ W2 + b2)


def loss_and_grad(w: np.ndarray, arch: Architecture, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat vector."""
    n = y.size
    parts = arch.unflatten(w)
    if arch.kind == "softmax":
        W, b = parts
        logp = _log_softmax(x @ W + b)
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [x.T @ delta, delta.sum(axis=0)]
    else:
        W1, b1, W2, b2 = parts
        pre = x @ W1 + b1
        h = np.maximum(pre, 0.0)
        logp = _log_softmax(h @ W2 + b2)
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        dh = (delta @ W2.T) * (pre > 0)
        grads = [x.T @ dh, dh.sum(axis=0), h.T @ delta, delta.sum(axis=0)]
    loss = -float(logp[np.arange(n), y].mean())
    return loss, np.concatenate([g.reshape(-1) for g in grads])


def evaluate(model: ModelParams, data) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy on a dataset."""
    x, y = data.features, data.labels
    if y.size == 0:
        raise ValueError("empty evaluation set")
    logp = forward(model.vector, model.arch, x)
    loss = -float(logp[np.arange(y.size), y].mean())
    acc = float((logp.argmax(axis=1) == y).mean())
    return loss, acc


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    local_epochs: int = 1
    max_rounds: int = 200
    target_accuracy: float | None = None
    seed: int = 0
    learner: str = "softmax"
    hidden: int = 32
    weighting: str = "effective"  # "effective" uses post-sharing sizes, "native" the original ones

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.weighting not in ("effective", "native"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def architecture(self, n_features: int, n_classes: int) -> Architecture:
        return Architecture(self.learner, n_features, n_classes, self.hidden if self.learner == "mlp" else 0)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss: float
    accuracy: float
    sim_time_s: float


# -- data sharing ---------------------------------------------------------------


def apply_sharing(datasets: Sequence[ClientDataset], clustering, seed, *, stratified: bool = False) -> list[ClientDataset]:
    """Copy each head's shared subset onto every member of its cluster.

    One subset of ``n_m^s`` native samples is drawn per head and the same
    copy is appended to all members, tagged with the head id.
    """
    by_id = {d.client_id: d for d in datasets}
    extra: dict[int, list[tuple[ClientDataset, np.ndarray, int]]] = {}
    for head in clustering.heads:
        n_s = clustering.plan.share_of(head)
        group = clustering.members.get(head, ())
        if n_s <= 0 or not group:
            continue
        src = by_id[head]
        native = np.flatnonzero(src.native_mask)
        if n_s > native.size:
            raise ConstraintViolation(f"head {head} cannot share {n_s} of {native.size} samples")
        rng = np.random.default_rng([int(seed), int(head)])
        pick = _stratified_pick(src.labels[native], n_s, rng) if stratified else rng.choice(native.size, size=n_s, replace=False)
        chosen = native[np.sort(pick)]
        for c in group:
            extra.setdefault(c, []).append((src, chosen, head))

    out = []
    for d in datasets:
        adds = extra.get(d.client_id)
        if not adds:
            out.append(d)
            continue
        xs, ys, os_, ss = [d.features], [d.labels], [d.origin], [d.source_index]
        for src, idx, head in adds:
            xs.append(src.features[idx])
            ys.append(src.labels[idx])
            os_.append(np.full(idx.size, head, dtype=np.int64))
            ss.append(src.source_index[idx])
        out.append(ClientDataset(d.client_id, np.vstack(xs), np.concatenate(ys), d.num_classes, np.concatenate(os_), np.concatenate(ss)))
    return out


def _stratified_pick(labels: np.ndarray, n_s: int, rng) -> np.ndarray:
    """Class-proportional pick of ``n_s`` positions (largest-remainder rounding)."""
    classes, counts = np.unique(labels, return_counts=True)
    raw = counts * n_s / labels.size
    take = np.floor(raw).astype(int)
    order = np.argsort(-(raw - take), kind="stable")
    take[order[: n_s - take.sum()]] += 1
    picks = [rng.choice(np.flatnonzero(labels == c), size=t, replace=False) for c, t in zip(classes, take) if t]
    return np.concatenate(picks) if picks else np.array([], dtype=np.int64)


# -- federated loop -------------------------------------------------------------


def local_sgd(w_global: ModelParams, dataset: ClientDataset, config: TrainConfig, rng) -> ModelParams:
    """``local_epochs`` passes of shuffled mini-batch SGD starting from the global model."""
    if dataset.n_k == 0:
        raise ValueError(f"client {dataset.client_id} has no samples")
    arch = w_global.arch
    w = w_global.vector.copy()
    if config.learning_rate == 0:
        return w_global
    x, y = dataset.features, dataset.labels
    for _ in range(config.local_epochs):
        order = rng.permutation(y.size)
        for start in range(0, y.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = loss_and_grad(w, arch, x[idx], y[idx])
            w -= config.learning_rate * grad
    if not np.all(np.isfinite(w)):
        raise TrainingDiverged(f"client {dataset.client_id} produced non-finite weights")
    return ModelParams(w, arch)


def aggregate(locals_: Iterable[tuple[ModelParams, float]]) -> ModelParams:
    """Weighted average of client models; weights are normalised to sum to one."""
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("nothing to aggregate")
    arch = locals_[0][0].arch
    size = locals_[0][0].vector.size
    total = 0.0
    acc = np.zeros(size)
    for params, weight in locals_:
        if params.vector.size != size:
            raise DimensionError("parameter vectors differ in length")
        if weight < 0:
            raise ValueError("weights must be non-negative")
        acc += weight * params.vector
        total += weight
    if total <= 0:
        raise ValueError("total aggregation weight is zero")
    return ModelParams(acc / total, arch)


def _train_view(datasets: Sequence[ClientDataset]):
    xs = [d.features for d in datasets if d.n_k]
    ys = [d.labels for d in datasets if d.n_k]
    return Dataset(np.vstack(xs), np.concatenate(ys), datasets[0].num_classes)


def train_federated(
    datasets: Sequence[ClientDataset],
    config: TrainConfig,
    test_set,
    *,
    round_cost: float = 0.7,
    time_offset: float = 0.0,
    init: ModelParams | None = None,
) -> list[RoundMetrics]:
    """Synchronous FedAvg with full participation.

    Every round all non-empty clients run :func:`local_sgd` from the current
    global model using a generator seeded by ``(seed, client_id, round)``,
    then the server averages the results. The reported loss is that of the
    new global model on the union of all client training data. Training
    stops after ``max_rounds`` or once ``target_accuracy`` is reached.
    """
    live = [d for d in datasets if d.n_k > 0]
    if not live:
        raise ValueError("no client has samples")
    n_features = live[0].features.shape[1]
    arch = config.architecture(n_features, live[0].num_classes)
    model = init if init is not None else init_params(arch, [int(config.seed), 0x5EED])
    weights = [d.n_k if config.weighting == "effective" else int(d.native_mask.sum()) for d in live]
    train_view = _train_view(live)
    history: list[RoundMetrics] = []
    model_t = model
    for t in range(1, config.max_rounds + 1):
        updates = []
        for d, wt in zip(live, weights):
            rng = np.random.default_rng([int(config.seed), int(d.client_id), t])
            try:
                updates.append((local_sgd(model_t, d, config, rng), wt))
            except (TrainingDiverged, ValueError) as exc:
                raise TrainingDiverged(f"round {t}: {exc}", history) from exc
        model_t = aggregate(updates)
        loss, _ = evaluate(model_t, train_view)
        _, acc = evaluate(model_t, test_set)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"round {t}: non-finite training loss", history)
        history.append(RoundMetrics(t, loss, acc, time_offset + t * round_cost))
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break
    return history


def rounds_to_target(history: Sequence[RoundMetrics], target: float) -> int | None:
    for m in history:
        if m.accuracy >= target:
            return m.round
    return None


def train_centralized(train: Dataset, config: TrainConfig, test_set, epochs: int) -> tuple[ModelParams, float]:
    """Plain mini-batch SGD on pooled data; returns the model and its test accuracy."""
    arch = config.architecture(train.feature_dim, train.num_classes)
    w = init_params(arch, [int(config.seed), 0x5EED])
    pooled = ClientDataset(-1, train.features, train.labels, train.num_classes)
    for e in range(epochs):
        w = local_sgd(w, pooled, config, np.random.default_rng([int(config.seed), e]))
    return w, evaluate(w, test_set)[1]


def write_metrics_csv(history: Sequence[RoundMetrics], path) -> None:
    from .io import atomic_write_text

    lines = ["round,loss,accuracy,sim_time_s"]
    lines += [f"{m.round},{m.loss!r},{m.accuracy!r},{m.sim_time_s!r}" for m in history]
    atomic_write_text(path, "\n".join(lines) + "\n")
