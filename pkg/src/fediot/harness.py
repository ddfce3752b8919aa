"""Config-driven experiment harness.

Wires the dataset, preprocessing, and federation layers into the full
comparison protocol: rotate a held-out device over the fleet, repeat with
fresh seeds, train the selected approach (naive per-client, federated, or
centralized), and persist metric tables plus plot-ready CSV. Also hosts the
adversarial sweep over attack kinds, aggregation rules, and attacker counts,
and the closed-form communication / computation cost tables.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .adversary import ATTACK_KINDS, AttackSpec, malicious_ids
from .aggregation import AggregationSpec
from .dataset import (
    BalanceSpec,
    DevicePartition,
    FEATURE_DIM,
    SUPERVISED_FRACTIONS,
    UNSUPERVISED_FRACTIONS,
    chronological_split,
    generate_synthetic_fleet,
    load_manifest,
    partition_from_manifest,
    rebalance,
)
from .errors import ConfigError
from .federation import (
    ClientState,
    FederationConfig,
    GridPoint,
    KNOWN_SCOPE,
    LrSchedule,
    NEW_DEVICE_SCOPE,
    OptimizerConfig,
    RoundLogger,
    RoundMetrics,
    build_client,
    collaborative_grid_search,
    evaluate,
    local_threshold,
    run_federated,
    run_mini_batch,
    select_thresholds,
)
from .neuralnet import (
    ArchitectureSpec,
    autoencoder_preset,
    classifier_preset,
    init_model,
    save_checkpoint,
)
from .preprocess import local_min_max, merge_bounds, scale

RESULTS_ENV_VAR = "FEDIOT_RESULTS_DIR"

MODES = ("supervised", "unsupervised")
APPROACHES = ("naive", "federated", "centralized")

METRIC_NAMES = ("accuracy", "tpr", "tnr", "f1")

# The adversarial comparison always covers these rules, weakest first.
SWEEP_RULES = (
    AggregationSpec("avg"),
    AggregationSpec("med"),
    AggregationSpec("tm", trim_c=1),
    AggregationSpec("tm", trim_c=2),
    AggregationSpec("tm", trim_c=2, resample_s=2),
)

_FLIP_KINDS = ("flip_benign", "flip_attack", "flip_all")


@dataclass(frozen=True)
class DataSource:
    """Where the device streams come from.

    source 'synthetic' draws one non-IID stream per device; 'manifest' reads
    a CSV manifest of per-device capture files.
    """

    source: str = "synthetic"
    devices: int = 9
    samples_per_device: int = 5000
    feature_dim: int = FEATURE_DIM
    benign_fraction: float = 0.5
    attack_patterns: int = 3
    benign_spread: float = 2.0
    attack_shift: float = 4.0
    noise_sigma: float = 1.0
    path: str = ""
    schema: int = FEATURE_DIM
    has_header: bool = False

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data source must be synthetic or manifest, got {self.source!r}")
        if self.source == "synthetic" and self.devices < 2:
            raise ConfigError("a fleet needs at least 2 devices (1 trains, 1 is held out)")
        if self.source == "manifest" and not self.path:
            raise ConfigError("manifest data source needs a path")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data, approach, model, training, and protocol."""

    name: str
    mode: str
    approach: str
    data: DataSource
    balance: BalanceSpec
    algorithm: str = "mini_batch"
    preset: str = "B"
    l2_lambda: float = 0.0
    grid_presets: tuple[str, ...] = ()
    grid_l2: tuple[float, ...] = ()
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 4
    rounds: int = 30
    lr_decay: float = 0.9
    shuffle: bool = True
    dropout_prob: float = 0.0
    log_rounds: bool = False
    aggregation: AggregationSpec = AggregationSpec("avg")
    attack: AttackSpec = field(default_factory=AttackSpec)
    folds: tuple[str, ...] | str = "all"
    repetitions: int = 5
    master_seed: int = 0
    sample_std: bool = False
    model_bytes: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.approach not in APPROACHES:
            raise ConfigError(f"approach must be one of {APPROACHES}, got {self.approach!r}")
        if self.algorithm not in ("mini_batch", "multi_epoch"):
            raise ConfigError(f"algorithm must be mini_batch or multi_epoch, got {self.algorithm!r}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if isinstance(self.folds, str) and self.folds != "all":
            raise ConfigError(f"folds must be 'all' or a list of device ids, got {self.folds!r}")
        if not isinstance(self.folds, str) and not self.folds:
            raise ConfigError("folds list is empty")
        if self.attack.kind != "none" and self.approach != "federated":
            raise ConfigError(f"attacks need the federated approach, not {self.approach}")
        if self.attack.kind in _FLIP_KINDS and self.mode != "supervised":
            raise ConfigError("label flipping needs supervised training labels")
        if bool(self.grid_presets) != bool(self.grid_l2):
            raise ConfigError("grid needs both presets and l2 values")

    @property
    def supervised(self) -> bool:
        return self.mode == "supervised"

    def architecture(self, preset: str | None = None) -> ArchitectureSpec:
        name = self.preset if preset is None else preset
        dim = self.data.feature_dim if self.data.source == "synthetic" else self.data.schema
        if self.supervised:
            return classifier_preset(name, input_dim=dim)
        return autoencoder_preset(name, input_dim=dim)

    @property
    def threshold_ddof(self) -> int:
        return 1 if self.sample_std else 0


def _require_keys(section: dict, allowed: tuple[str, ...], where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    _require_keys(
        raw,
        ("name", "mode", "approach", "algorithm", "data", "balance", "model",
         "training", "aggregation", "attack", "protocol", "report"),
        "config",
    )
    for key in ("name", "mode", "approach", "data", "balance"):
        if key not in raw:
            raise ConfigError(f"config is missing the {key!r} section")

    data_raw = dict(raw["data"])
    _require_keys(
        data_raw,
        ("source", "devices", "samples_per_device", "feature_dim", "benign_fraction",
         "attack_patterns", "benign_spread", "attack_shift", "noise_sigma",
         "path", "schema", "has_header"),
        "data",
    )
    data = DataSource(**data_raw)

    balance_raw = dict(raw["balance"])
    _require_keys(balance_raw, ("benign_fraction", "samples_per_device"), "balance")
    balance = BalanceSpec(**balance_raw)

    model_raw = dict(raw.get("model", {}))
    _require_keys(model_raw, ("preset", "l2_lambda", "grid"), "model")
    grid_raw = dict(model_raw.pop("grid", {}))
    _require_keys(grid_raw, ("presets", "l2_values"), "model.grid")

    training_raw = dict(raw.get("training", {}))
    _require_keys(
        training_raw,
        ("learning_rate", "batch_size", "epochs", "rounds", "lr_decay",
         "shuffle", "dropout_prob", "log_rounds"),
        "training",
    )

    agg_raw = dict(raw.get("aggregation", {"rule": "avg"}))
    _require_keys(agg_raw, ("rule", "trim_c", "resample_s"), "aggregation")
    attack_raw = dict(raw.get("attack", {}))
    _require_keys(attack_raw, ("kind", "f", "p_poison", "colluding"), "attack")

    protocol_raw = dict(raw.get("protocol", {}))
    _require_keys(protocol_raw, ("folds", "repetitions", "master_seed"), "protocol")
    report_raw = dict(raw.get("report", {}))
    _require_keys(report_raw, ("sample_std", "model_bytes"), "report")

    folds = protocol_raw.get("folds", "all")
    if isinstance(folds, list):
        folds = tuple(str(f) for f in folds)

    return ExperimentConfig(
        name=str(raw["name"]),
        mode=raw["mode"],
        approach=raw["approach"],
        algorithm=raw.get("algorithm", "mini_batch"),
        data=data,
        balance=balance,
        preset=model_raw.get("preset", "B"),
        l2_lambda=float(model_raw.get("l2_lambda", 0.0)),
        grid_presets=tuple(grid_raw.get("presets", ())),
        grid_l2=tuple(float(v) for v in grid_raw.get("l2_values", ())),
        learning_rate=float(training_raw.get("learning_rate", 0.05)),
        batch_size=int(training_raw.get("batch_size", 8)),
        epochs=int(training_raw.get("epochs", 4)),
        rounds=int(training_raw.get("rounds", 30)),
        lr_decay=float(training_raw.get("lr_decay", 0.9)),
        shuffle=bool(training_raw.get("shuffle", True)),
        dropout_prob=float(training_raw.get("dropout_prob", 0.0)),
        log_rounds=bool(training_raw.get("log_rounds", False)),
        aggregation=AggregationSpec(**agg_raw),
        attack=AttackSpec(**attack_raw),
        folds=folds,
        repetitions=int(protocol_raw.get("repetitions", 5)),
        master_seed=int(protocol_raw.get("master_seed", 0)),
        sample_std=bool(report_raw.get("sample_std", False)),
        model_bytes=report_raw.get("model_bytes"),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    """Inverse of config_from_dict, for reloadable config echoes."""
    d = config.data
    out = {
        "name": config.name,
        "mode": config.mode,
        "approach": config.approach,
        "algorithm": config.algorithm,
        "data": {
            "source": d.source,
            "devices": d.devices,
            "samples_per_device": d.samples_per_device,
            "feature_dim": d.feature_dim,
            "benign_fraction": d.benign_fraction,
            "attack_patterns": d.attack_patterns,
            "benign_spread": d.benign_spread,
            "attack_shift": d.attack_shift,
            "noise_sigma": d.noise_sigma,
            "path": d.path,
            "schema": d.schema,
            "has_header": d.has_header,
        },
        "balance": {
            "benign_fraction": config.balance.benign_fraction,
            "samples_per_device": config.balance.samples_per_device,
        },
        "model": {"preset": config.preset, "l2_lambda": config.l2_lambda},
        "training": {
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "rounds": config.rounds,
            "lr_decay": config.lr_decay,
            "shuffle": config.shuffle,
            "dropout_prob": config.dropout_prob,
            "log_rounds": config.log_rounds,
        },
        "aggregation": {
            "rule": config.aggregation.rule,
            "trim_c": config.aggregation.trim_c,
            "resample_s": config.aggregation.resample_s,
        },
        "attack": {
            "kind": config.attack.kind,
            "f": config.attack.f,
            "p_poison": config.attack.p_poison,
            "colluding": config.attack.colluding,
        },
        "protocol": {
            "folds": list(config.folds) if not isinstance(config.folds, str) else config.folds,
            "repetitions": config.repetitions,
            "master_seed": config.master_seed,
        },
        "report": {"sample_std": config.sample_std, "model_bytes": config.model_bytes},
    }
    if config.grid_presets:
        out["model"]["grid"] = {
            "presets": list(config.grid_presets),
            "l2_values": list(config.grid_l2),
        }
    return out


def profile_names() -> list[str]:
    root = resources.files("fediot").joinpath("profiles")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_profile(name: str) -> ExperimentConfig:
    path = resources.files("fediot").joinpath("profiles", f"{name}.json")
    if not path.is_file():
        raise ConfigError(f"unknown profile {name!r}, available: {profile_names()}")
    return config_from_dict(json.loads(path.read_text()))


def load_config(path_or_profile: str) -> ExperimentConfig:
    """Load a config from a JSON file path, or a packaged profile by name."""
    if os.path.exists(path_or_profile):
        with open(path_or_profile) as handle:
            try:
                raw = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path_or_profile}: invalid JSON: {exc}") from None
        return config_from_dict(raw)
    return load_profile(path_or_profile)


def derive_seed(*parts) -> int:
    """Stretch a master seed into an independent stream for a named role."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def _fleet_partitions(config: ExperimentConfig, rep: int) -> dict[str, DevicePartition]:
    """Split and rebalance every device's stream for one repetition."""
    if config.data.source == "synthetic":
        streams = generate_synthetic_fleet(
            config.data.devices,
            config.data.samples_per_device,
            feature_dim=config.data.feature_dim,
            seed=derive_seed(config.master_seed, rep, "fleet"),
            benign_fraction=config.data.benign_fraction,
            n_attack_patterns=config.data.attack_patterns,
            benign_spread=config.data.benign_spread,
            attack_shift=config.data.attack_shift,
            noise_sigma=config.data.noise_sigma,
        )
        raw = {
            f"dev-{i}": chronological_split(stream, config.mode, f"dev-{i}")
            for i, stream in enumerate(streams)
        }
    else:
        if not os.path.exists(config.data.path):
            raise ConfigError(f"manifest not found: {config.data.path}")
        entries = load_manifest(config.data.path)
        parts = partition_from_manifest(
            entries, config.mode, schema=config.data.schema, has_header=config.data.has_header
        )
        raw = {p.device_id: p for p in parts}
    return {
        device_id: rebalance(
            part, config.balance, derive_seed(config.master_seed, rep, "balance", device_id)
        )
        for device_id, part in raw.items()
    }


def _resolve_folds(config: ExperimentConfig, device_ids: list[str]) -> list[str]:
    if isinstance(config.folds, str):
        return list(device_ids)
    missing = [f for f in config.folds if f not in device_ids]
    if missing:
        raise ConfigError(f"fold devices not in the fleet: {missing}")
    return list(config.folds)


def _federation_config(
    config: ExperimentConfig, arch: ArchitectureSpec, l2: float, rep: int, fold: str
) -> FederationConfig:
    schedule = None
    if config.algorithm == "multi_epoch":
        schedule = LrSchedule(config.learning_rate, config.lr_decay)
    return FederationConfig(
        arch=arch,
        optimizer=OptimizerConfig(config.learning_rate, l2, config.batch_size),
        aggregation=config.aggregation,
        epochs=config.epochs,
        rounds=config.rounds,
        lr_schedule=schedule,
        dropout_prob=config.dropout_prob,
        shuffle=config.shuffle,
        init_seed=derive_seed(config.master_seed, rep, fold, "init"),
        server_seed=derive_seed(config.master_seed, rep, fold, "server"),
    )


def _grid(config: ExperimentConfig) -> list[GridPoint]:
    return [
        GridPoint(config.architecture(preset), l2)
        for preset in config.grid_presets
        for l2 in config.grid_l2
    ]


def _metric_row(
    fold: str, rep: int, seed: int, metrics: RoundMetrics, n_train: int, aggregations: int
) -> dict:
    return {
        "fold": fold,
        "repetition": rep,
        "seed": seed,
        "scope": metrics.scope,
        "accuracy": metrics.accuracy,
        "tpr": metrics.tpr,
        "tnr": metrics.tnr,
        "f1": metrics.f1,
        "n_train": n_train,
        "aggregations": aggregations,
    }


def _mean_metrics(per_client: list[dict[str, RoundMetrics]], scope: str) -> RoundMetrics:
    values = [m[scope] for m in per_client]
    return RoundMetrics(
        accuracy=float(np.mean([v.accuracy for v in values])),
        tpr=float(np.mean([v.tpr for v in values])),
        tnr=float(np.mean([v.tnr for v in values])),
        f1=float(np.mean([v.f1 for v in values])),
        scope=scope,
    )


class _CountingCallback:
    """Count aggregations, optionally forwarding each record to a logger."""

    def __init__(self, inner=None):
        self.count = 0
        self.inner = inner

    def __call__(self, info: dict, model) -> None:
        self.count += 1
        if self.inner is not None:
            self.inner(info, model)


def _run_federated_cell(
    config: ExperimentConfig,
    partitions: dict[str, DevicePartition],
    train_ids: list[str],
    fold: str,
    rep: int,
    log_path: str | None,
):
    bounds = merge_bounds([local_min_max(partitions[d].train.features) for d in train_ids])
    mal_rng = np.random.default_rng(derive_seed(config.master_seed, rep, fold, "malicious"))
    bad = set(malicious_ids(train_ids, config.attack.f, mal_rng))
    clients = [
        build_client(
            partitions[d],
            bounds,
            config.supervised,
            config.attack if d in bad else AttackSpec(),
            derive_seed(config.master_seed, rep, fold, "client", d),
        )
        for d in train_ids
    ]
    fed_config = _federation_config(config, config.architecture(), config.l2_lambda, rep, fold)
    if config.grid_presets:
        best, _ = collaborative_grid_search(clients, _grid(config), fed_config, config.algorithm)
        fed_config = _federation_config(config, best.arch, best.l2_lambda, rep, fold)

    counter = _CountingCallback()
    if log_path is not None:
        logger = RoundLogger(log_path)
        counter = _CountingCallback(_threshold_logger(logger, clients, config) if not config.supervised else logger)
        with logger:
            model = run_federated(config.algorithm, clients, fed_config, counter)
    else:
        model = run_federated(config.algorithm, clients, fed_config, counter)

    threshold = None
    if not config.supervised:
        threshold = select_thresholds(clients, model, config.threshold_ddof).global_threshold
    return model, threshold, bounds, clients, counter.count


def _threshold_logger(logger: RoundLogger, clients: list[ClientState], config: ExperimentConfig):
    ddof = config.threshold_ddof

    def wrapped(info: dict, model) -> None:
        state = select_thresholds(clients, model, ddof)
        logger({**info, "threshold": state.global_threshold}, model)

    return wrapped


def _pooled_client(
    config: ExperimentConfig,
    partitions: dict[str, DevicePartition],
    train_ids: list[str],
    bounds,
    rep: int,
    fold: str,
) -> ClientState:
    x = np.concatenate([scale(partitions[d].train.features, bounds) for d in train_ids])
    y = None
    if config.supervised:
        y = np.concatenate([partitions[d].train.labels for d in train_ids])
    x_thr = None
    if not config.supervised:
        x_thr = np.concatenate(
            [scale(partitions[d].threshold_sel.features, bounds) for d in train_ids]
        )
    return ClientState(
        "pooled", x, y, x_thr=x_thr,
        seed=derive_seed(config.master_seed, rep, fold, "client", "pooled"),
    )


def _test_pair(partition: DevicePartition, bounds) -> tuple[np.ndarray, np.ndarray]:
    return scale(partition.test.features, bounds), partition.test.labels


def _run_cell(
    config: ExperimentConfig,
    partitions: dict[str, DevicePartition],
    fold: str,
    rep: int,
    rounds_dir: str | None,
) -> tuple[list[dict], list[dict]]:
    """Train and evaluate one (fold, repetition) cell; return metric rows."""
    train_ids = [d for d in partitions if d != fold]
    k = len(train_ids)
    if config.attack.f >= k:
        raise ConfigError(f"f={config.attack.f} attackers need more than {k} clients")
    cell_seed = derive_seed(config.master_seed, rep, fold, "cell")
    log_path = None
    if rounds_dir is not None and config.log_rounds:
        log_path = os.path.join(rounds_dir, f"fold-{fold}-rep-{rep}.jsonl")

    rows: list[dict] = []
    device_rows: list[dict] = []

    if config.approach == "federated":
        model, threshold, bounds, clients, aggregations = _run_federated_cell(
            config, partitions, train_ids, fold, rep, log_path
        )
        n_train = clients[0].n_train
        known = [_test_pair(partitions[d], bounds) for d in train_ids]
        scopes = evaluate(model, threshold, known, _test_pair(partitions[fold], bounds))
        for scope in (KNOWN_SCOPE, NEW_DEVICE_SCOPE):
            rows.append(_metric_row(fold, rep, cell_seed, scopes[scope], n_train, aggregations))
        for d in train_ids:
            own = evaluate(model, threshold, [_test_pair(partitions[d], bounds)])
            device_rows.append(
                {"fold": fold, "repetition": rep, "device_id": d, **_plain(own[KNOWN_SCOPE])}
            )

    elif config.approach == "centralized":
        bounds = merge_bounds([local_min_max(partitions[d].train.features) for d in train_ids])
        client = _pooled_client(config, partitions, train_ids, bounds, rep, fold)
        fed_config = _federation_config(config, config.architecture(), config.l2_lambda, rep, fold)
        if config.grid_presets:
            best, _ = collaborative_grid_search([client], _grid(config), fed_config)
            fed_config = _federation_config(config, best.arch, best.l2_lambda, rep, fold)
        model = run_mini_batch([client], fed_config)
        threshold = None
        if not config.supervised:
            threshold = local_threshold(client, model, config.threshold_ddof)
        known = [_test_pair(partitions[d], bounds) for d in train_ids]
        scopes = evaluate(model, threshold, known, _test_pair(partitions[fold], bounds))
        for scope in (KNOWN_SCOPE, NEW_DEVICE_SCOPE):
            rows.append(_metric_row(fold, rep, cell_seed, scopes[scope], client.n_train, 0))
        for d in train_ids:
            own = evaluate(model, threshold, [_test_pair(partitions[d], bounds)])
            device_rows.append(
                {"fold": fold, "repetition": rep, "device_id": d, **_plain(own[KNOWN_SCOPE])}
            )

    else:  # naive: every client trains and scores alone, metrics are averaged
        per_client: list[dict[str, RoundMetrics]] = []
        n_train = 0
        for d in train_ids:
            local_bounds = local_min_max(partitions[d].train.features)
            client = build_client(
                partitions[d],
                local_bounds,
                config.supervised,
                AttackSpec(),
                derive_seed(config.master_seed, rep, fold, "client", d),
            )
            fed_config = _federation_config(
                config, config.architecture(), config.l2_lambda, rep, fold
            )
            if config.grid_presets:
                best, _ = collaborative_grid_search([client], _grid(config), fed_config)
                fed_config = _federation_config(config, best.arch, best.l2_lambda, rep, fold)
            model = run_mini_batch([client], fed_config)
            threshold = None
            if not config.supervised:
                threshold = local_threshold(client, model, config.threshold_ddof)
            scopes = evaluate(
                model,
                threshold,
                [_test_pair(partitions[d], local_bounds)],
                _test_pair(partitions[fold], local_bounds),
            )
            per_client.append(scopes)
            n_train = client.n_train
            device_rows.append(
                {"fold": fold, "repetition": rep, "device_id": d, **_plain(scopes[KNOWN_SCOPE])}
            )
        for scope in (KNOWN_SCOPE, NEW_DEVICE_SCOPE):
            rows.append(
                _metric_row(fold, rep, cell_seed, _mean_metrics(per_client, scope), n_train, 0)
            )

    return rows, device_rows


def _plain(metrics: RoundMetrics) -> dict:
    return {name: getattr(metrics, name) for name in METRIC_NAMES}


def _collect_runs(config: ExperimentConfig, rounds_dir: str | None = None):
    rows: list[dict] = []
    device_rows: list[dict] = []
    for rep in range(config.repetitions):
        partitions = _fleet_partitions(config, rep)
        for fold in _resolve_folds(config, list(partitions)):
            cell_rows, cell_devices = _run_cell(config, partitions, fold, rep, rounds_dir)
            rows.extend(cell_rows)
            device_rows.extend(cell_devices)
    return rows, device_rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean / min / max of every metric per evaluation scope."""
    out = []
    scopes = sorted({r["scope"] for r in rows})
    for scope in scopes:
        values = [r for r in rows if r["scope"] == scope]
        for metric in METRIC_NAMES:
            series = [v[metric] for v in values]
            out.append(
                {
                    "scope": scope,
                    "metric": metric,
                    "mean": float(np.mean(series)),
                    "min": float(np.min(series)),
                    "max": float(np.max(series)),
                    "runs": len(series),
                }
            )
    return out


def results_dir(out_dir: str | None = None) -> str:
    if out_dir:
        return out_dir
    return os.environ.get(RESULTS_ENV_VAR, "results")


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


RUN_COLUMNS = ["fold", "repetition", "seed", "scope", *METRIC_NAMES, "n_train", "aggregations"]
DEVICE_COLUMNS = ["fold", "repetition", "device_id", *METRIC_NAMES]
SUMMARY_COLUMNS = ["scope", "metric", "mean", "min", "max", "runs"]
SWEEP_COLUMNS = ["attack", "rule", "f", "mean_f1", "min_f1", "max_f1", "runs"]


@dataclass(frozen=True)
class ExperimentResult:
    """In-memory view of one experiment bundle."""

    config: ExperimentConfig
    rows: list[dict]
    device_rows: list[dict]
    summary: list[dict]
    path: str


def run_experiment(config: ExperimentConfig, out_dir: str | None = None) -> ExperimentResult:
    """Run every (fold x repetition) cell and persist the result bundle.

    The bundle directory holds a reloadable config echo, one metrics row per
    run and scope, a per-device breakdown, the mean/min/max summary, and
    (when round logging is on) one JSON-lines trace per cell. Everything but
    timing.json is a pure function of the config and its master seed.
    """
    bundle = os.path.join(results_dir(out_dir), config.name)
    os.makedirs(bundle, exist_ok=True)
    rounds_dir = None
    if config.log_rounds:
        rounds_dir = os.path.join(bundle, "rounds")
        os.makedirs(rounds_dir, exist_ok=True)

    started = time.monotonic()
    rows, device_rows = _collect_runs(config, rounds_dir)
    elapsed = time.monotonic() - started

    summary = summarize(rows)
    with open(os.path.join(bundle, "config.json"), "w") as handle:
        json.dump(config_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")
    _write_csv(os.path.join(bundle, "runs.csv"), rows, RUN_COLUMNS)
    _write_csv(os.path.join(bundle, "devices.csv"), device_rows, DEVICE_COLUMNS)
    _write_csv(os.path.join(bundle, "summary.csv"), summary, SUMMARY_COLUMNS)
    with open(os.path.join(bundle, "timing.json"), "w") as handle:
        json.dump({"wall_seconds": elapsed}, handle)
        handle.write("\n")
    return ExperimentResult(config, rows, device_rows, summary, bundle)


@dataclass(frozen=True)
class SweepResult:
    """In-memory view of one adversarial sweep bundle."""

    config: ExperimentConfig
    rows: list[dict]
    path: str


def attack_sweep(
    config: ExperimentConfig, f_values: list[int], out_dir: str | None = None
) -> SweepResult:
    """Cross attack kinds x aggregation rules x attacker counts.

    Every cell reruns the full fold x repetition protocol and records the
    mean, min, and max F1 on known devices. f=0 runs once per rule as the
    honest baseline.
    """
    if config.approach != "federated":
        raise ConfigError("attack sweeps need the federated approach")
    if not config.supervised:
        raise ConfigError("attack sweeps run on the supervised pipeline")
    if not f_values:
        raise ConfigError("f_values is empty")
    k = (config.data.devices - 1 if config.data.source == "synthetic" else None)
    for f in f_values:
        if f < 0:
            raise ConfigError(f"f must be >= 0, got {f}")
        if k is not None and f >= k:
            raise ConfigError(f"f={f} attackers need more than {k} clients")
    if k is not None:
        deepest = max(rule.trim_c for rule in SWEEP_RULES)
        if k - 2 * deepest < 1:
            raise ConfigError(f"TM({deepest}) needs more than {k} clients")

    rows = []
    for rule in SWEEP_RULES:
        for f in sorted(f_values):
            kinds = ["none"] if f == 0 else [kind for kind in ATTACK_KINDS if kind != "none"]
            for kind in kinds:
                attack = AttackSpec() if f == 0 else AttackSpec(kind=kind, f=f)
                cell = replace(config, aggregation=rule, attack=attack)
                run_rows, _ = _collect_runs(cell)
                f1s = [r["f1"] for r in run_rows if r["scope"] == KNOWN_SCOPE]
                rows.append(
                    {
                        "attack": kind,
                        "rule": rule.describe(),
                        "f": f,
                        "mean_f1": float(np.mean(f1s)),
                        "min_f1": float(np.min(f1s)),
                        "max_f1": float(np.max(f1s)),
                        "runs": len(f1s),
                    }
                )

    bundle = os.path.join(results_dir(out_dir), f"{config.name}-sweep")
    os.makedirs(bundle, exist_ok=True)
    with open(os.path.join(bundle, "config.json"), "w") as handle:
        json.dump(config_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")
    _write_csv(os.path.join(bundle, "sweep.csv"), rows, SWEEP_COLUMNS)
    return SweepResult(config, rows, bundle)


def model_size_bytes(arch: ArchitectureSpec, override: int | None = None) -> int:
    """Serialized model size: a checkpoint measurement, or a stated override."""
    if override is not None:
        return int(override)
    params = init_model(arch, 0)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        save_checkpoint(params, path)
        return os.path.getsize(path)


def human_bytes(n: int) -> str:
    """Decimal units, three significant digits: 2820000 -> '2.82 MB'."""
    value = float(n)
    for unit in ("B", "kB", "MB", "GB", "TB"):
        if value < 1000 or unit == "TB":
            return f"{value:.3g} {unit}"
        value /= 1000.0
    raise AssertionError("unreachable")


def _train_part_size(config: ExperimentConfig) -> int:
    fractions = SUPERVISED_FRACTIONS if config.supervised else UNSUPERVISED_FRACTIONS
    return math.floor(fractions[0] * config.balance.samples_per_device)


def cost_table(config: ExperimentConfig) -> list[dict]:
    """Closed-form per-client communication and computation costs.

    Printed-arithmetic convention: steps per epoch is n_train / B rounded to
    the nearest integer (the training loop itself always takes the ceiling).
    The per-step batch sizes follow the convention that one aggregation
    consumes a full global batch: the single-step algorithm runs B_global / K
    per client while the multi-epoch one runs B_global.
    """
    k = (config.data.devices if config.data.source == "synthetic" else 2) - 1
    if config.algorithm == "mini_batch":
        b_mini = config.batch_size
        b_multi = config.batch_size * k
    else:
        b_multi = config.batch_size
        b_mini = max(1, round(config.batch_size / k))
    n_train = _train_part_size(config)
    size = model_size_bytes(config.architecture(), config.model_bytes)

    mini_steps = config.epochs * round(n_train / b_mini)
    multi_steps_per_round = config.epochs * round(n_train / b_multi)
    rows = [
        {
            "algorithm": "mini_batch",
            "batch_size": b_mini,
            "transmissions": mini_steps,
            "local_steps": mini_steps,
            "model_bytes": size,
            "total_bytes": mini_steps * size,
            "traffic": human_bytes(mini_steps * size),
        },
        {
            "algorithm": "multi_epoch",
            "batch_size": b_multi,
            "transmissions": config.rounds,
            "local_steps": config.rounds * multi_steps_per_round,
            "model_bytes": size,
            "total_bytes": config.rounds * size,
            "traffic": human_bytes(config.rounds * size),
        },
    ]
    return rows


COST_COLUMNS = [
    "algorithm", "batch_size", "transmissions", "local_steps",
    "model_bytes", "total_bytes", "traffic",
]


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _md_table(rows: list[dict], columns: list[str]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        lines.append("| " + " | ".join(_cell(row[c]) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def report(bundle: str, fmt: str = "md") -> list[str]:
    """Render a result bundle into tables and plot-ready CSV files.

    Markdown output writes report.md; CSV output writes metrics.csv plus
    cost.csv, and f1_vs_f.csv / trajectory.csv when the bundle holds sweep
    results or round logs. An empty bundle yields header-only tables.
    """
    if fmt not in ("md", "csv"):
        raise ConfigError(f"report format must be md or csv, got {fmt!r}")
    config_path = os.path.join(bundle, "config.json")
    if not os.path.isfile(config_path):
        raise ConfigError(f"not a result bundle (no config.json): {bundle}")
    with open(config_path) as handle:
        config = config_from_dict(json.load(handle))

    written = []
    sweep_path = os.path.join(bundle, "sweep.csv")
    is_sweep = os.path.isfile(sweep_path)
    summary_rows = []
    if not is_sweep:
        summary_rows = _summary_for_report(bundle)
    costs = cost_table(config)

    if fmt == "csv":
        if is_sweep:
            out = os.path.join(bundle, "f1_vs_f.csv")
            _write_csv(out, _read_csv(sweep_path), SWEEP_COLUMNS)
            written.append(out)
        else:
            out = os.path.join(bundle, "metrics.csv")
            _write_csv(out, summary_rows, SUMMARY_COLUMNS)
            written.append(out)
        out = os.path.join(bundle, "cost.csv")
        _write_csv(out, costs, COST_COLUMNS)
        written.append(out)
        trajectory = _trajectory_rows(bundle)
        if trajectory is not None:
            out = os.path.join(bundle, "trajectory.csv")
            _write_csv(out, trajectory, TRAJECTORY_COLUMNS)
            written.append(out)
        return written

    parts = [f"# {config.name}\n"]
    if is_sweep:
        parts.append("## F1 by attack, rule, and attacker count\n")
        parts.append(_md_table(_sweep_rows_typed(sweep_path), SWEEP_COLUMNS))
    else:
        parts.append("## Detection metrics\n")
        parts.append(_md_table(summary_rows, SUMMARY_COLUMNS))
    parts.append("\n## Per-client cost\n")
    parts.append(_md_table(costs, COST_COLUMNS))
    out = os.path.join(bundle, "report.md")
    with open(out, "w") as handle:
        handle.write("\n".join(parts))
    written.append(out)
    return written


def _summary_for_report(bundle: str) -> list[dict]:
    path = os.path.join(bundle, "summary.csv")
    if not os.path.isfile(path):
        return []
    rows = _read_csv(path)
    for row in rows:
        for key in ("mean", "min", "max"):
            row[key] = float(row[key])
        row["runs"] = int(row["runs"])
    return rows


def _sweep_rows_typed(path: str) -> list[dict]:
    rows = _read_csv(path)
    for row in rows:
        for key in ("mean_f1", "min_f1", "max_f1"):
            row[key] = float(row[key])
    return rows


TRAJECTORY_COLUMNS = ["fold", "repetition", "round", "lr", "mean_loss", "threshold"]


def _trajectory_rows(bundle: str) -> list[dict] | None:
    rounds_dir = os.path.join(bundle, "rounds")
    if not os.path.isdir(rounds_dir):
        return None
    rows = []
    for name in sorted(os.listdir(rounds_dir)):
        if not name.endswith(".jsonl"):
            continue
        stem = name[: -len(".jsonl")]  # fold-<id>-rep-<n>
        fold, rep = stem[len("fold-"):].rsplit("-rep-", 1)
        with open(os.path.join(rounds_dir, name)) as handle:
            for line in handle:
                record = json.loads(line)
                losses = [v for v in record["client_losses"].values() if v is not None]
                rows.append(
                    {
                        "fold": fold,
                        "repetition": int(rep),
                        "round": record["round"],
                        "lr": record["lr"],
                        "mean_loss": float(np.mean(losses)) if losses else "",
                        "threshold": record.get("threshold", ""),
                    }
                )
    return rows
