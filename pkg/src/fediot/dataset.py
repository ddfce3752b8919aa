"""Device traffic streams: CSV ingestion, chronological splits, rebalancing, synthesis."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyPartError, MissingClassError, ParseError, SchemaError

FEATURE_DIM = 115

# Chronological split fractions; every part except the last is floored,
# the last part absorbs the remainder.
SUPERVISED_FRACTIONS = (0.79, 0.01, 0.20)
UNSUPERVISED_FRACTIONS = (0.395, 0.395, 0.01, 0.20)

BENIGN = 0
ATTACK = 1

_MANIFEST_COLUMNS = ("device_id", "path", "class")
_MANIFEST_CLASSES = ("benign", "attack")


@dataclass(frozen=True)
class SampleSet:
    """An ordered block of traffic records from one device.

    Attributes:
        features: (n, F) float array, one row per record.
        labels: (n,) int array with 0 benign / 1 attack, or None when the
            stream is unlabeled.
        seq_index: (n,) int array giving the capture order of each record
            within its source stream.
    """

    features: np.ndarray
    labels: np.ndarray | None
    seq_index: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise SchemaError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.seq_index.shape != (n,):
            raise SchemaError(f"seq_index shape {self.seq_index.shape} != ({n},)")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise SchemaError(f"labels shape {self.labels.shape} != ({n},)")
            bad = ~np.isin(self.labels, (BENIGN, ATTACK))
            if bad.any():
                raise SchemaError(f"labels must be 0 or 1, found {self.labels[bad][:5]}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> SampleSet:
        """Gather records by position, preserving the given order."""
        idx = np.asarray(indices, dtype=np.intp)
        labels = None if self.labels is None else self.labels[idx]
        return SampleSet(self.features[idx], labels, self.seq_index[idx])

    def class_counts(self) -> tuple[int, int]:
        """Return (benign, attack) record counts; requires labels."""
        if self.labels is None:
            raise MissingClassError("class counts require a labeled stream")
        n_attack = int(np.count_nonzero(self.labels))
        return len(self) - n_attack, n_attack

    @staticmethod
    def concat(parts: list[SampleSet]) -> SampleSet:
        if not parts:
            raise ValueError("cannot concatenate zero sample sets")
        labeled = [p.labels is not None for p in parts]
        if any(labeled) != all(labeled):
            raise SchemaError("cannot concatenate labeled and unlabeled streams")
        labels = np.concatenate([p.labels for p in parts]) if all(labeled) else None
        return SampleSet(
            np.concatenate([p.features for p in parts]),
            labels,
            np.concatenate([p.seq_index for p in parts]),
        )


@dataclass(frozen=True)
class DevicePartition:
    """The split data of one device.

    threshold_sel is present only for unsupervised splits, where it feeds
    anomaly threshold selection. The unused part is a chronological gap
    between training and testing data and is never read by training code.
    """

    device_id: str
    train: SampleSet
    unused: SampleSet
    test: SampleSet
    threshold_sel: SampleSet | None = None


@dataclass(frozen=True)
class BalanceSpec:
    """Per-device class balance and size target applied after splitting."""

    benign_fraction: float
    samples_per_device: int

    def __post_init__(self) -> None:
        if not 0.0 < self.benign_fraction < 1.0:
            raise ConfigError(f"benign_fraction must be in (0, 1), got {self.benign_fraction}")
        if self.samples_per_device <= 0:
            raise ConfigError(f"samples_per_device must be positive, got {self.samples_per_device}")


def _parse_rows(path: str, schema: int, labeled: bool | None, has_header: bool) -> SampleSet:
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        for row_no, row in enumerate(reader):
            if has_header and row_no == 0:
                continue
            if not row:
                continue
            if labeled is None:
                if len(row) == schema:
                    labeled = False
                elif len(row) == schema + 1:
                    labeled = True
                else:
                    raise SchemaError(
                        f"{path}: row {row_no}: expected {schema} or {schema + 1} "
                        f"columns, found {len(row)}"
                    )
            expected = schema + 1 if labeled else schema
            if len(row) != expected:
                raise SchemaError(
                    f"{path}: row {row_no}: expected {expected} columns, found {len(row)}"
                )
            try:
                values = [float(cell) for cell in row[:schema]]
            except ValueError as exc:
                raise ParseError(f"{path}: row {row_no}: non-numeric cell: {exc}") from None
            rows.append(values)
            if labeled:
                cell = row[schema].strip()
                if cell not in ("0", "1"):
                    raise ParseError(f"{path}: row {row_no}: label must be 0 or 1, got {cell!r}")
                labels.append(int(cell))
    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), schema)
    label_arr = np.asarray(labels, dtype=np.int64) if labeled else None
    return SampleSet(features, label_arr, np.arange(len(rows), dtype=np.int64))


def load_device_csv(
    path: str,
    schema: int = FEATURE_DIM,
    labeled: bool | None = None,
    has_header: bool = False,
) -> SampleSet:
    """Load one device stream from a CSV file.

    Args:
        path: CSV file with one record per row, in capture order.
        schema: expected number of feature columns.
        labeled: True if a final 0/1 label column is present, False if not,
            None to infer from the first data row.
        has_header: skip the first row when True.

    Raises:
        SchemaError: a row has the wrong number of columns.
        ParseError: a cell is non-numeric or a label is not 0/1.
    """
    return _parse_rows(path, schema, labeled, has_header)


def _part_sizes(n: int, fractions: tuple[float, ...]) -> list[int]:
    # Floor every part except the last; the last absorbs the remainder.
    sizes = [int(f * n) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def chronological_split(samples: SampleSet, mode: str, device_id: str = "device") -> DevicePartition:
    """Split one device stream into time-ordered parts.

    Supervised mode cuts the stream into train / unused / test blocks of
    fractions 0.79 / 0.01 / 0.20. Unsupervised mode applies fractions
    0.395 / 0.395 / 0.01 / 0.20 to the benign records only (train,
    threshold_sel, unused, benign test) and reserves every attack record
    for the test part. An unlabeled stream is treated as all benign.

    Raises:
        EmptyPartError: the stream holds fewer records than parts.
        ConfigError: unknown mode.
    """
    if mode == "supervised":
        n = len(samples)
        if n < len(SUPERVISED_FRACTIONS):
            raise EmptyPartError(f"{device_id}: {n} samples cannot fill 3 split parts")
        sizes = _part_sizes(n, SUPERVISED_FRACTIONS)
        bounds = np.cumsum([0] + sizes)
        train, unused, test = (
            samples.take(np.arange(bounds[i], bounds[i + 1])) for i in range(3)
        )
        return DevicePartition(device_id, train, unused, test)
    if mode == "unsupervised":
        if samples.labels is None:
            benign, attacks = samples, None
        else:
            benign_idx = np.flatnonzero(samples.labels == BENIGN)
            attack_idx = np.flatnonzero(samples.labels == ATTACK)
            benign = samples.take(benign_idx)
            attacks = samples.take(attack_idx) if attack_idx.size else None
        nb = len(benign)
        if nb < len(UNSUPERVISED_FRACTIONS):
            raise EmptyPartError(f"{device_id}: {nb} benign samples cannot fill 4 split parts")
        sizes = _part_sizes(nb, UNSUPERVISED_FRACTIONS)
        bounds = np.cumsum([0] + sizes)
        train, thr_sel, unused, benign_test = (
            benign.take(np.arange(bounds[i], bounds[i + 1])) for i in range(4)
        )
        test = benign_test if attacks is None else SampleSet.concat([benign_test, attacks])
        return DevicePartition(device_id, train, unused, test, thr_sel)
    raise ConfigError(f"unknown split mode {mode!r}")


def _resample(indices: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    # Downsampling keeps a uniform subset; upsampling keeps every original
    # once and adds uniform duplicates.
    n = indices.size
    if target == n:
        return indices
    if target < n:
        return rng.choice(indices, size=target, replace=False)
    extra = rng.choice(indices, size=target - n, replace=True)
    return np.concatenate([indices, extra])


def _rebalance_part(
    part: SampleSet,
    total: int,
    benign_fraction: float,
    rng: np.random.Generator,
    what: str,
) -> SampleSet:
    if part.labels is None:
        raise MissingClassError(f"{what}: rebalancing requires a labeled stream")
    benign_target = int(benign_fraction * total)
    attack_target = total - benign_target
    benign_idx = np.flatnonzero(part.labels == BENIGN)
    attack_idx = np.flatnonzero(part.labels == ATTACK)
    if benign_target > 0 and benign_idx.size == 0:
        raise MissingClassError(f"{what}: no benign samples to reach {benign_target}")
    if attack_target > 0 and attack_idx.size == 0:
        raise MissingClassError(f"{what}: no attack samples to reach {attack_target}")
    chosen = np.concatenate(
        [_resample(benign_idx, benign_target, rng), _resample(attack_idx, attack_target, rng)]
    )
    picked = part.take(chosen)
    order = np.argsort(picked.seq_index, kind="stable")
    return picked.take(order)


def _resize_benign_part(
    part: SampleSet, total: int, rng: np.random.Generator, what: str
) -> SampleSet:
    if len(part) == 0 and total > 0:
        raise MissingClassError(f"{what}: no benign samples to reach {total}")
    picked = part.take(_resample(np.arange(len(part)), total, rng))
    order = np.argsort(picked.seq_index, kind="stable")
    return picked.take(order)


def rebalance(partition: DevicePartition, spec: BalanceSpec, rng_seed: int) -> DevicePartition:
    """Resize every part of a partition to an exact size and class mix.

    Part size targets follow the split fractions applied to
    spec.samples_per_device. Supervised parts each get a benign share of
    floor(benign_fraction * part size). Unsupervised parts are benign by
    construction, so samples_per_device budgets the benign stream and only
    the attack side of the test part is resized, to match benign_fraction
    within the test part. No record ever crosses a part boundary.
    """
    rng = np.random.default_rng(rng_seed)
    spd = spec.samples_per_device
    who = partition.device_id
    if partition.threshold_sel is None:
        if spd < len(SUPERVISED_FRACTIONS):
            raise EmptyPartError(f"{who}: target {spd} cannot fill 3 split parts")
        t_train, t_unused, t_test = _part_sizes(spd, SUPERVISED_FRACTIONS)
        return DevicePartition(
            who,
            _rebalance_part(partition.train, t_train, spec.benign_fraction, rng, f"{who} train"),
            _rebalance_part(partition.unused, t_unused, spec.benign_fraction, rng, f"{who} unused"),
            _rebalance_part(partition.test, t_test, spec.benign_fraction, rng, f"{who} test"),
        )
    if spd < len(UNSUPERVISED_FRACTIONS):
        raise EmptyPartError(f"{who}: target {spd} cannot fill 4 split parts")
    t_train, t_thr, t_unused, t_btest = _part_sizes(spd, UNSUPERVISED_FRACTIONS)
    bf = spec.benign_fraction
    t_atest = round(t_btest * (1.0 - bf) / bf)
    if partition.test.labels is None:
        raise MissingClassError(f"{who} test: rebalancing requires a labeled stream")
    benign_test = partition.test.take(np.flatnonzero(partition.test.labels == BENIGN))
    attack_test = partition.test.take(np.flatnonzero(partition.test.labels == ATTACK))
    if t_atest > 0 and len(attack_test) == 0:
        raise MissingClassError(f"{who} test: no attack samples to reach {t_atest}")
    new_test = SampleSet.concat(
        [
            _resize_benign_part(benign_test, t_btest, rng, f"{who} test"),
            _resize_benign_part(attack_test, t_atest, rng, f"{who} test"),
        ]
    )
    return DevicePartition(
        who,
        _resize_benign_part(partition.train, t_train, rng, f"{who} train"),
        _resize_benign_part(partition.unused, t_unused, rng, f"{who} unused"),
        new_test,
        _resize_benign_part(partition.threshold_sel, t_thr, rng, f"{who} threshold_sel"),
    )


def _striped_labels(n: int, benign_fraction: float) -> np.ndarray:
    # Spread exactly round(f * n) benign records evenly through the stream so
    # that every split part sees both classes.
    n_benign = int(round(benign_fraction * n))
    marks = np.arange(1, n + 1) * n_benign // n
    labels = np.ones(n, dtype=np.int64)
    labels[np.diff(np.concatenate([[0], marks])) > 0] = BENIGN
    return labels


def generate_synthetic_fleet(
    n_devices: int,
    samples_per_device: int,
    feature_dim: int = FEATURE_DIM,
    seed: int = 0,
    benign_fraction: float = 0.5,
    n_attack_patterns: int = 3,
    benign_spread: float = 2.0,
    attack_shift: float = 4.0,
    noise_sigma: float = 1.0,
) -> list[SampleSet]:
    """Generate labeled traffic streams for a synthetic device fleet.

    Every device draws benign records around its own center, so devices are
    not identically distributed. Attack records shift the device center along
    one of a small set of directions shared by the whole fleet, the way one
    malware family produces similar traffic on different devices.

    Returns one stream per device, deterministic in the seed.
    """
    if n_devices <= 0 or samples_per_device <= 0:
        raise ConfigError("n_devices and samples_per_device must be positive")
    fleet_ss, *device_ss = np.random.SeedSequence(seed).spawn(n_devices + 1)
    fleet_rng = np.random.default_rng(fleet_ss)
    directions = fleet_rng.normal(size=(n_attack_patterns, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    streams = []
    for dev_ss in device_ss:
        rng = np.random.default_rng(dev_ss)
        center = benign_spread * rng.normal(size=feature_dim)
        labels = _striped_labels(samples_per_device, benign_fraction)
        noise = noise_sigma * rng.normal(size=(samples_per_device, feature_dim))
        features = center + noise
        attack_rows = np.flatnonzero(labels == ATTACK)
        patterns = rng.integers(0, n_attack_patterns, size=attack_rows.size)
        features[attack_rows] += attack_shift * directions[patterns]
        streams.append(
            SampleSet(features, labels, np.arange(samples_per_device, dtype=np.int64))
        )
    return streams


@dataclass(frozen=True)
class ManifestEntry:
    device_id: str
    path: str
    label: int


def load_manifest(path: str) -> list[ManifestEntry]:
    """Read a fleet manifest: CSV rows of device_id, path, class.

    class is 'benign' or 'attack' and fixes the label of every record in the
    referenced file. Relative paths are resolved against the manifest's
    directory. A header row is skipped when present.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline="") as handle:
        for row_no, row in enumerate(csv.reader(handle)):
            if not row:
                continue
            if row_no == 0 and tuple(c.strip().lower() for c in row) == _MANIFEST_COLUMNS:
                continue
            if len(row) != 3:
                raise SchemaError(f"{path}: row {row_no}: expected 3 columns, found {len(row)}")
            device_id, file_path, cls = (c.strip() for c in row)
            if cls not in _MANIFEST_CLASSES:
                raise ParseError(f"{path}: row {row_no}: class must be benign or attack, got {cls!r}")
            if not os.path.isabs(file_path):
                file_path = os.path.join(base, file_path)
            entries.append(ManifestEntry(device_id, file_path, ATTACK if cls == "attack" else BENIGN))
    if not entries:
        raise SchemaError(f"{path}: manifest lists no files")
    return entries


def partition_from_manifest(
    entries: list[ManifestEntry],
    mode: str,
    schema: int = FEATURE_DIM,
    has_header: bool = False,
) -> list[DevicePartition]:
    """Build one partition per device from per-class capture files.

    Each file is one uninterrupted capture, so the chronological split is
    applied per file and the per-file parts are concatenated. In unsupervised
    mode attack files go to the test part whole.
    """
    by_device: dict[str, list[ManifestEntry]] = {}
    for entry in entries:
        by_device.setdefault(entry.device_id, []).append(entry)
    partitions = []
    for device_id, files in by_device.items():
        trains, unuseds, tests, thrs = [], [], [], []
        for entry in files:
            raw = load_device_csv(entry.path, schema, labeled=None, has_header=has_header)
            if raw.labels is None:
                labeled = SampleSet(
                    raw.features,
                    np.full(len(raw), entry.label, dtype=np.int64),
                    raw.seq_index,
                )
            else:
                labeled = raw
            if mode == "unsupervised" and entry.label == ATTACK:
                tests.append(labeled)
                continue
            part = chronological_split(labeled, mode, device_id)
            trains.append(part.train)
            unuseds.append(part.unused)
            tests.append(part.test)
            if part.threshold_sel is not None:
                thrs.append(part.threshold_sel)
        partitions.append(
            DevicePartition(
                device_id,
                SampleSet.concat(trains),
                SampleSet.concat(unuseds),
                SampleSet.concat(tests),
                SampleSet.concat(thrs) if thrs else None,
            )
        )
    return partitions
