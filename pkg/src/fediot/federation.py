"""Federated training loops, anomaly thresholds, and evaluation.

Two algorithms share the same client and aggregation machinery. Mini-batch
aggregation averages after every single local step, so clients walk their
data in lockstep and the fleet behaves like one SGD run over the union of
batches. Multi-epoch aggregation lets every client train several full local
epochs between the far fewer aggregation rounds.

Both loops are pure functions of their inputs: all randomness derives from
the client seeds and the server seed, and rerunning a configuration
reproduces the model bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, IO

import numpy as np

from .adversary import AttackSpec, alpha_cancel, alpha_gradient, apply_gradient_factor, cancel_update, flip_labels
from .aggregation import AggregationSpec, aggregate
from .dataset import DevicePartition
from .errors import ConfigError, PoisonedUpdateError
from .neuralnet import (
    AUTOENCODER,
    CLASSIFIER,
    ArchitectureSpec,
    ModelParameters,
    backward,
    classify,
    init_model,
    loss,
    mse_per_sample,
    sgd_step,
)
from .preprocess import ScalingBounds, scale

# Sub-seed roles so one client seed yields independent streams.
_SEED_FLIP = 0
_SEED_SHUFFLE = 1

KNOWN_SCOPE = "known"
NEW_DEVICE_SCOPE = "new_device"


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD settings shared by every client."""

    learning_rate: float = 0.05
    l2_lambda: float = 0.0
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class LrSchedule:
    """Initial learning rate decayed once per aggregation round."""

    initial: float
    decay: float = 1.0

    def __post_init__(self) -> None:
        if self.initial < 0 or not 0 < self.decay <= 1:
            raise ConfigError(f"bad schedule: initial={self.initial}, decay={self.decay}")

    def at(self, round_index: int) -> float:
        return self.initial * self.decay**round_index


@dataclass(frozen=True)
class FederationConfig:
    """Everything the server fixes before training starts.

    epochs is the number of passes over local data (per round for the
    multi-epoch algorithm, total for mini-batch). rounds only applies to the
    multi-epoch algorithm. The learning rate schedule decays per round there;
    mini-batch aggregation always uses the constant initial rate.
    """

    arch: ArchitectureSpec
    optimizer: OptimizerConfig = OptimizerConfig()
    aggregation: AggregationSpec = AggregationSpec("avg")
    epochs: int = 4
    rounds: int = 30
    lr_schedule: LrSchedule | None = None
    dropout_prob: float = 0.0
    shuffle: bool = True
    init_seed: int = 0
    server_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.rounds < 1:
            raise ConfigError(f"epochs and rounds must be >= 1, got {self.epochs}, {self.rounds}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")

    def base_lr(self) -> float:
        return self.lr_schedule.initial if self.lr_schedule else self.optimizer.learning_rate

    def lr_at(self, round_index: int) -> float:
        if self.lr_schedule:
            return self.lr_schedule.at(round_index)
        return self.optimizer.learning_rate


@dataclass
class ClientState:
    """One client's ready-to-train view of its device data.

    Features are already scaled with the fleet bounds, and poisoned labels
    are already flipped. The seed drives every random choice the client
    makes, so a client is replayable.
    """

    client_id: str
    x_train: np.ndarray
    y_train: np.ndarray | None
    x_thr: np.ndarray | None = None
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def malicious(self) -> bool:
        return self.attack.kind != "none"


def build_client(
    partition: DevicePartition,
    bounds: ScalingBounds,
    supervised: bool,
    attack: AttackSpec,
    seed: int,
) -> ClientState:
    """Scale a device partition into a ClientState, poisoning labels if told to."""
    train = partition.train
    if attack.kind in ("flip_benign", "flip_attack", "flip_all"):
        train = flip_labels(train, attack.kind, attack.p_poison, np.random.default_rng([seed, _SEED_FLIP]))
    y_train = None
    if supervised:
        if train.labels is None:
            raise ConfigError(f"{partition.device_id}: supervised training needs labels")
        y_train = train.labels
    x_thr = None
    if partition.threshold_sel is not None:
        x_thr = scale(partition.threshold_sel.features, bounds)
    return ClientState(
        client_id=partition.device_id,
        x_train=scale(train.features, bounds),
        y_train=y_train,
        x_thr=x_thr,
        attack=attack,
        seed=seed,
    )


def _validate_fleet(clients: list[ClientState], config: FederationConfig) -> AttackSpec | None:
    if not clients:
        raise ConfigError("cannot train an empty fleet")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {sorted(ids)}")
    sizes = {c.n_train for c in clients}
    if len(sizes) > 1:
        raise ConfigError(f"clients must hold equally many training records, got {sorted(sizes)}")
    supervised = config.arch.kind == CLASSIFIER
    for c in clients:
        if supervised and c.y_train is None:
            raise ConfigError(f"{c.client_id}: classifier training needs labels")
    model_attacks = {c.attack for c in clients if c.attack.kind in ("gradient_factor", "model_cancel")}
    if len(model_attacks) > 1:
        raise ConfigError(f"clients disagree on the model attack: {model_attacks}")
    if model_attacks:
        spec = model_attacks.pop()
        count = sum(1 for c in clients if c.attack == spec)
        if count != spec.f:
            raise ConfigError(f"attack says f={spec.f} but {count} clients are malicious")
        if spec.f >= len(clients):
            raise ConfigError(f"f={spec.f} must be below the fleet size {len(clients)}")
        return spec
    return None


def _epoch_order(rng: np.random.Generator, n: int, do_shuffle: bool) -> np.ndarray:
    return rng.permutation(n) if do_shuffle else np.arange(n)


def _local_sgd_pass(
    model: ModelParameters,
    x: np.ndarray,
    y: np.ndarray | None,
    order: np.ndarray,
    lr: float,
    opt: OptimizerConfig,
    grad_factor: float | None,
) -> ModelParameters:
    b = opt.batch_size
    for start in range(0, order.size, b):
        batch = order[start : start + b]
        yb = None if y is None else y[batch]
        grad = backward(model, x[batch], yb, opt.l2_lambda)
        if grad_factor is not None:
            grad = apply_gradient_factor(grad, grad_factor)
        model = sgd_step(model, grad, lr)
    return model


def _attack_factors(spec: AttackSpec | None, k: int) -> tuple[float | None, float | None]:
    if spec is None:
        return None, None
    if spec.kind == "gradient_factor":
        return alpha_gradient(k, spec.f), None
    return None, alpha_cancel(k, spec.f)


def _survivors(
    updates: list[ModelParameters],
    clients: list[ClientState],
    config: FederationConfig,
    server_rng: np.random.Generator,
) -> tuple[list[ModelParameters], list[str]]:
    if config.dropout_prob <= 0:
        return updates, []
    dropped = server_rng.random(len(clients)) < config.dropout_prob
    kept = [u for u, gone in zip(updates, dropped) if not gone]
    gone_ids = [c.client_id for c, gone in zip(clients, dropped) if gone]
    return kept, gone_ids


OnRound = Callable[[dict, ModelParameters], None]


def _starting_model(config: FederationConfig, initial_model: ModelParameters | None) -> ModelParameters:
    if initial_model is None:
        return init_model(config.arch, config.init_seed)
    if initial_model.arch != config.arch:
        raise ConfigError("initial model architecture does not match the configured one")
    return initial_model


def run_mini_batch(
    clients: list[ClientState],
    config: FederationConfig,
    on_round: OnRound | None = None,
    initial_model: ModelParameters | None = None,
) -> ModelParameters:
    """Train with aggregation after every single local mini-batch step.

    Every client takes exactly one SGD step on its next batch of the shared
    global model, the server aggregates, and the result is broadcast before
    the following step. One pass over the data therefore costs
    ceil(n_train / batch_size) aggregations, and config.epochs passes run.
    """
    attack_spec = _validate_fleet(clients, config)
    k = len(clients)
    grad_alpha, cancel_alpha = _attack_factors(attack_spec, k)
    model = _starting_model(config, initial_model)
    server_rng = np.random.default_rng(config.server_seed)
    client_rngs = [np.random.default_rng([c.seed, _SEED_SHUFFLE]) for c in clients]
    n = clients[0].n_train
    b = config.optimizer.batch_size
    steps_per_epoch = math.ceil(n / b)
    lr = config.base_lr()
    agg_index = 0
    for epoch in range(config.epochs):
        orders = [_epoch_order(rng, n, config.shuffle) for rng in client_rngs]
        for step in range(steps_per_epoch):
            updates = []
            losses: dict[str, float | None] = {}
            for c, order in zip(clients, orders):
                batch = order[step * b : (step + 1) * b]
                if c.attack.kind == "model_cancel":
                    updates.append(cancel_update(model, cancel_alpha))
                    losses[c.client_id] = None
                    continue
                yb = None if c.y_train is None else c.y_train[batch]
                factor = grad_alpha if c.attack.kind == "gradient_factor" else None
                grad = backward(model, c.x_train[batch], yb, config.optimizer.l2_lambda)
                if factor is not None:
                    grad = apply_gradient_factor(grad, factor)
                try:
                    updates.append(sgd_step(model, grad, lr))
                except PoisonedUpdateError as exc:
                    raise PoisonedUpdateError(f"client {c.client_id}: {exc}") from None
                if on_round is not None:
                    losses[c.client_id] = loss(model, c.x_train[batch], yb, config.optimizer.l2_lambda)
            kept, gone = _survivors(updates, clients, config, server_rng)
            if kept:
                model = aggregate(kept, config.aggregation, server_rng)
            if on_round is not None:
                on_round(
                    {
                        "round": agg_index,
                        "epoch": epoch,
                        "lr": lr,
                        "client_losses": losses,
                        "dropped": gone,
                    },
                    model,
                )
            agg_index += 1
    return model


def run_multi_epoch(
    clients: list[ClientState],
    config: FederationConfig,
    on_round: OnRound | None = None,
    initial_model: ModelParameters | None = None,
) -> ModelParameters:
    """Train with config.rounds aggregation rounds of config.epochs local epochs.

    Every round broadcasts the global model, lets each client run its local
    epochs at the round's learning rate, and aggregates the resulting models.
    """
    attack_spec = _validate_fleet(clients, config)
    k = len(clients)
    grad_alpha, cancel_alpha = _attack_factors(attack_spec, k)
    model = _starting_model(config, initial_model)
    server_rng = np.random.default_rng(config.server_seed)
    client_rngs = [np.random.default_rng([c.seed, _SEED_SHUFFLE]) for c in clients]
    n = clients[0].n_train
    for round_index in range(config.rounds):
        lr = config.lr_at(round_index)
        updates = []
        losses: dict[str, float | None] = {}
        for c, rng in zip(clients, client_rngs):
            if c.attack.kind == "model_cancel":
                updates.append(cancel_update(model, cancel_alpha))
                losses[c.client_id] = None
                continue
            factor = grad_alpha if c.attack.kind == "gradient_factor" else None
            local = model
            try:
                for _ in range(config.epochs):
                    order = _epoch_order(rng, n, config.shuffle)
                    local = _local_sgd_pass(
                        local, c.x_train, c.y_train, order, lr, config.optimizer, factor
                    )
            except PoisonedUpdateError as exc:
                raise PoisonedUpdateError(f"client {c.client_id}: {exc}") from None
            updates.append(local)
            if on_round is not None:
                losses[c.client_id] = loss(local, c.x_train, c.y_train, config.optimizer.l2_lambda)
        kept, gone = _survivors(updates, clients, config, server_rng)
        if kept:
            model = aggregate(kept, config.aggregation, server_rng)
        if on_round is not None:
            on_round(
                {
                    "round": round_index,
                    "epoch": None,
                    "lr": lr,
                    "client_losses": losses,
                    "dropped": gone,
                },
                model,
            )
    return model


ALGORITHMS = {"mini_batch": run_mini_batch, "multi_epoch": run_multi_epoch}


def run_federated(
    algorithm: str,
    clients: list[ClientState],
    config: FederationConfig,
    on_round: OnRound | None = None,
    initial_model: ModelParameters | None = None,
) -> ModelParameters:
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}, pick one of {sorted(ALGORITHMS)}")
    return ALGORITHMS[algorithm](clients, config, on_round, initial_model)


@dataclass(frozen=True)
class ThresholdState:
    """Per-client anomaly thresholds and their fleet-level average."""

    local_thresholds: dict[str, float]
    global_threshold: float


def local_threshold(client: ClientState, model: ModelParameters, ddof: int = 0) -> float:
    """Mean reconstruction error on the client's threshold records plus one std.

    ddof=0 uses the population standard deviation; ddof=1 switches to the
    sample estimate.
    """
    if client.x_thr is None:
        raise ConfigError(f"{client.client_id}: no threshold selection records")
    errors = mse_per_sample(model, client.x_thr)
    return float(errors.mean() + errors.std(ddof=ddof))


def global_threshold(local_thresholds: dict[str, float]) -> float:
    """Average the local thresholds; no raw errors leave their clients."""
    if not local_thresholds:
        raise ConfigError("no local thresholds to average")
    return float(np.mean(list(local_thresholds.values())))


def select_thresholds(
    clients: list[ClientState], model: ModelParameters, ddof: int = 0
) -> ThresholdState:
    locals_ = {c.client_id: local_threshold(c, model, ddof) for c in clients}
    return ThresholdState(locals_, global_threshold(locals_))


def detect(model: ModelParameters, threshold: float, x: np.ndarray) -> np.ndarray:
    """Flag records whose reconstruction error strictly exceeds the threshold."""
    return (mse_per_sample(model, x) > threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_counts(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionCounts:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.shape != y_pred.shape:
        raise ConfigError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    return ConfusionCounts(
        tp=int(np.sum(y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


@dataclass(frozen=True)
class RoundMetrics:
    """Detection quality on one evaluation scope."""

    accuracy: float
    tpr: float
    tnr: float
    f1: float
    scope: str
    round_index: int = -1


def metrics_from_counts(
    counts: ConfusionCounts, scope: str, round_index: int = -1
) -> RoundMetrics:
    """Accuracy, true rates, and F1 from pooled confusion counts.

    F1 = TP / (TP + (FP + FN) / 2) and is defined as 0 when TP is 0. Rates
    with an empty denominator are 0 as well.
    """
    if counts.total == 0:
        raise ConfigError("cannot compute metrics over zero records")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    return RoundMetrics(
        accuracy=(tp + tn) / counts.total,
        tpr=tp / (tp + fn) if tp + fn else 0.0,
        tnr=tn / (tn + fp) if tn + fp else 0.0,
        f1=tp / (tp + 0.5 * (fp + fn)) if tp else 0.0,
        scope=scope,
        round_index=round_index,
    )


def predict(model: ModelParameters, x: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Label a batch with whichever decision rule the model kind implies."""
    if model.arch.kind == CLASSIFIER:
        return classify(model, x)
    if threshold is None:
        raise ConfigError("an autoencoder needs a detection threshold")
    return detect(model, threshold, x)


def evaluate(
    model: ModelParameters,
    threshold: float | None,
    known_tests: list[tuple[np.ndarray, np.ndarray]],
    new_device_test: tuple[np.ndarray, np.ndarray] | None = None,
    round_index: int = -1,
) -> dict[str, RoundMetrics]:
    """Score a model on pooled known-device tests and one unseen device.

    known_tests holds (scaled features, labels) per training device; their
    confusion counts are pooled before computing metrics, so larger test
    sets weigh more.
    """
    pooled = ConfusionCounts()
    for x, y in known_tests:
        pooled = pooled + confusion_counts(y, predict(model, x, threshold))
    out = {KNOWN_SCOPE: metrics_from_counts(pooled, KNOWN_SCOPE, round_index)}
    if new_device_test is not None:
        x, y = new_device_test
        counts = confusion_counts(y, predict(model, x, threshold))
        out[NEW_DEVICE_SCOPE] = metrics_from_counts(counts, NEW_DEVICE_SCOPE, round_index)
    return out


@dataclass(frozen=True)
class GridPoint:
    """One hyper-parameter combination: an architecture and an L2 weight."""

    arch: ArchitectureSpec
    l2_lambda: float


def _point_seed(point: GridPoint) -> int:
    # Content-derived so identical points run identically and tie exactly.
    text = f"{point.arch}|{point.l2_lambda!r}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def collaborative_grid_search(
    clients: list[ClientState],
    grid: list[GridPoint],
    config: FederationConfig,
    algorithm: str = "mini_batch",
    val_fraction: float = 0.10,
) -> tuple[GridPoint, list[dict]]:
    """Pick the grid point whose short federated run validates best on average.

    Every client holds out the chronologically last val_fraction of its
    training records. Classifiers compare mean validation accuracy (higher
    wins), autoencoders mean validation loss (lower wins). Ties keep the
    earliest point in the grid.

    Returns the winning point and one report row per grid point.
    """
    if not grid:
        raise ConfigError("grid search needs at least one point")
    if not clients:
        raise ConfigError("grid search needs clients")
    kinds = {p.arch.kind for p in grid}
    if len(kinds) > 1:
        raise ConfigError(f"grid mixes incomparable model kinds: {sorted(kinds)}")
    n = clients[0].n_train
    n_val = int(val_fraction * n)
    if n_val < 1:
        raise ConfigError(f"validation slice is empty: {n} records at {val_fraction}")
    cut = n - n_val
    rows = []
    best: tuple[float, int] | None = None
    for index, point in enumerate(grid):
        supervised = point.arch.kind == CLASSIFIER
        sub_clients = [
            ClientState(
                client_id=c.client_id,
                x_train=c.x_train[:cut],
                y_train=None if c.y_train is None else c.y_train[:cut],
                x_thr=c.x_thr,
                attack=c.attack,
                seed=_point_seed(point) ^ c.seed,
            )
            for c in clients
        ]
        sub_config = replace(
            config,
            arch=point.arch,
            optimizer=replace(config.optimizer, l2_lambda=point.l2_lambda),
        )
        model = run_federated(algorithm, sub_clients, sub_config)
        scores = []
        for c in clients:
            x_val = c.x_train[cut:]
            if supervised:
                counts = confusion_counts(c.y_train[cut:], classify(model, x_val))
                scores.append(metrics_from_counts(counts, KNOWN_SCOPE).accuracy)
            else:
                scores.append(loss(model, x_val))
        mean_score = float(np.mean(scores))
        rows.append(
            {
                "arch": point.arch,
                "l2_lambda": point.l2_lambda,
                "mean_score": mean_score,
                "per_client": {c.client_id: s for c, s in zip(clients, scores)},
            }
        )
        if best is None:
            best = (mean_score, index)
        elif (mean_score > best[0]) if supervised else (mean_score < best[0]):
            best = (mean_score, index)
    return grid[best[1]], rows


class RoundLogger:
    """Append-only JSON-lines log of aggregation rounds."""

    def __init__(self, path: str, every: int = 1):
        if every < 1:
            raise ConfigError(f"log cadence must be >= 1, got {every}")
        self.every = every
        self._handle: IO[str] = open(path, "w")

    def __call__(self, info: dict, model: ModelParameters) -> None:
        if info["round"] % self.every:
            return
        self._handle.write(json.dumps(info, sort_keys=True) + "\n")

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> RoundLogger:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
