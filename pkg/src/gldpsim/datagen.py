"""Synthetic data generation and long-tailed, multi-stage client partitioning.

Builds Gaussian-mixture classification data, thins it into a long-tailed
class profile controlled by an imbalance factor, and carves it into
per-client timelines of stage tasks whose class composition shifts over
time. All outputs are pure functions of (spec, plan, seed).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# Sub-stream tags keep the rng draws for independent construction steps
# decoupled from each other.
_TAG_CENTERS = 11
_TAG_SAMPLES = 12
_TAG_LONGTAIL = 21
_TAG_PARTITION = 31

_TRAIN_FRACTION = 0.8
PARTITION_FORMAT = "gldpsim-partitions/1"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a balanced synthetic classification dataset."""

    num_classes: int
    input_dim: int
    samples_per_class: int
    class_center_scale: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}")
        _require(self.input_dim >= 2, f"input_dim must be >= 2, got {self.input_dim}")
        _require(
            self.samples_per_class >= 1,
            f"samples_per_class must be >= 1, got {self.samples_per_class}",
        )
        _require(
            self.class_center_scale > 0,
            f"class_center_scale must be positive, got {self.class_center_scale}",
        )
        _require(self.noise_sigma > 0, f"noise_sigma must be positive, got {self.noise_sigma}")
        _require(self.seed >= 0, f"seed must be a non-negative integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Feature matrix with integer class labels and stable sample ids."""

    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"inputs rows ({self.inputs.shape[0]}) != labels length ({self.labels.shape[0]})"
            )
        if self.ids.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"ids length ({self.ids.shape[0]}) != labels length ({self.labels.shape[0]})"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.inputs[index], self.labels[index], self.ids[index])

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def empty_labeled_set(input_dim: int) -> LabeledSet:
    return LabeledSet(
        np.empty((0, input_dim), dtype=np.float64),
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.int64),
    )


@dataclass(frozen=True)
class PartitionPlan:
    """Client/stage layout: N clients, S classes each, M stage tasks."""

    num_clients: int
    classes_per_client: int
    num_stages: int
    imbalance_factor: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.num_clients >= 1, f"num_clients must be >= 1, got {self.num_clients}")
        _require(
            self.classes_per_client >= 1,
            f"classes_per_client must be >= 1, got {self.classes_per_client}",
        )
        _require(self.num_stages >= 1, f"num_stages must be >= 1, got {self.num_stages}")
        _require(
            self.imbalance_factor >= 1,
            f"imbalance_factor must be >= 1, got {self.imbalance_factor}",
        )
        _require(self.seed >= 0, f"seed must be a non-negative integer, got {self.seed}")


@dataclass
class StageTask:
    """One stage of a client's timeline: train/test split over a class subset."""

    stage_index: int
    train: LabeledSet
    test: LabeledSet
    class_set: frozenset[int]

    def __post_init__(self) -> None:
        for name, part in (("train", self.train), ("test", self.test)):
            present = set(int(v) for v in np.unique(part.labels))
            if not present <= set(self.class_set):
                raise DataError(
                    f"stage {self.stage_index} {name} labels {sorted(present)} "
                    f"outside class set {sorted(self.class_set)}"
                )

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class ClientTimeline:
    client_id: int
    stages: list[StageTask] = field(default_factory=list)

    def test_union(self, upto_stage: int | None = None) -> LabeledSet:
        """Union of test sets for stages 1..upto_stage, de-duplicated by id."""
        stages = self.stages if upto_stage is None else self.stages[:upto_stage]
        parts = [s.test for s in stages if len(s.test) > 0]
        if not parts:
            dim = self.stages[0].train.inputs.shape[1] if self.stages else 0
            return empty_labeled_set(dim)
        inputs = np.concatenate([p.inputs for p in parts])
        labels = np.concatenate([p.labels for p in parts])
        ids = np.concatenate([p.ids for p in parts])
        _, first = np.unique(ids, return_index=True)
        keep = np.sort(first)
        return LabeledSet(inputs[keep], labels[keep], ids[keep])


def make_synthetic_dataset(spec: DatasetSpec) -> LabeledSet:
    """Draw a balanced Gaussian-mixture dataset, grouped by class.

    Each class gets an isotropic Gaussian cloud of ``samples_per_class``
    points around a per-class center drawn once from a scaled standard
    Gaussian. Deterministic in ``spec.seed``.
    """
    center_rng = np.random.default_rng([spec.seed, _TAG_CENTERS])
    for _ in range(100):
        centers = center_rng.standard_normal((spec.num_classes, spec.input_dim))
        centers *= spec.class_center_scale
        gaps = centers[:, None, :] - centers[None, :, :]
        distances = np.sqrt((gaps**2).sum(axis=-1))
        np.fill_diagonal(distances, np.inf)
        if distances.min() > 0.0:
            break
    else:  # pragma: no cover - measure-zero event
        raise DataError("could not draw pairwise-distinct class centers")

    sample_rng = np.random.default_rng([spec.seed, _TAG_SAMPLES])
    n = spec.samples_per_class
    blocks = []
    for c in range(spec.num_classes):
        noise = sample_rng.standard_normal((n, spec.input_dim)) * spec.noise_sigma
        blocks.append(centers[c] + noise)
    inputs = np.concatenate(blocks)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), n)
    ids = np.arange(inputs.shape[0], dtype=np.int64)
    return LabeledSet(inputs, labels, ids)


def longtail_class_counts(samples_per_class: int, imbalance_factor: float, num_classes: int) -> list[int]:
    """Per-class retention counts under an exponential long-tail profile.

    Class k keeps round(n_max * IF^(-k / (z-1))) samples (round half up),
    never fewer than one. Class 0 always keeps all its samples.
    """
    if imbalance_factor < 1:
        raise ConfigError(f"imbalance_factor must be >= 1, got {imbalance_factor}")
    counts = []
    for k in range(num_classes):
        raw = samples_per_class * imbalance_factor ** (-k / (num_classes - 1))
        counts.append(max(1, int(math.floor(raw + 0.5))))
    return counts


def apply_longtail(data: LabeledSet, imbalance_factor: float, seed: int) -> LabeledSet:
    """Uniformly subsample each class down to its long-tail count.

    Requires balanced input (equal per-class counts). Sample ids are
    preserved so downstream disjointness checks stay meaningful.
    """
    per_class = data.class_counts()
    num_classes = len(per_class)
    sizes = set(per_class.values())
    if len(sizes) != 1:
        raise DataError(f"apply_longtail requires balanced input, got counts {per_class}")
    n_max = sizes.pop()
    counts = longtail_class_counts(n_max, imbalance_factor, num_classes)

    rng = np.random.default_rng([seed, _TAG_LONGTAIL])
    keep_indices = []
    for c in range(num_classes):
        idx = np.where(data.labels == c)[0]
        chosen = rng.choice(idx, size=counts[c], replace=False)
        keep_indices.append(np.sort(chosen))
    return data.subset(np.concatenate(keep_indices))


def _stage_class_sets(classes: list[int], num_stages: int) -> list[list[int]]:
    """Deal a client's classes to its stages.

    With at least as many classes as stages, classes are dealt round-robin
    so the stages partition them. With fewer classes than stages, stages
    cycle through the classes with a width-2 window so later stages both
    introduce classes and revisit earlier ones.
    """
    count = len(classes)
    if num_stages == 1:
        return [list(classes)]
    if count >= num_stages:
        return [[classes[i] for i in range(count) if i % num_stages == j] for j in range(num_stages)]
    if count >= 3:
        return [[classes[j % count], classes[(j + 1) % count]] for j in range(num_stages)]
    # One or two classes: alternate singletons (degenerate but well-defined).
    return [[classes[j % count]] for j in range(num_stages)]


def partition_clients(data: LabeledSet, plan: PartitionPlan) -> list[ClientTimeline]:
    """Carve a dataset into per-client multi-stage timelines.

    Every client draws ``classes_per_client`` distinct classes (redrawn
    until each class has at least one assignee); each class's samples are
    split disjointly among its assignees; each client's share is then
    spread over its stages, with an 80/20 train/test split per stage.
    A stage left without samples is tolerated here and skipped by the
    training protocol with a warning.
    """
    num_classes = int(data.labels.max()) + 1
    n, s, m = plan.num_clients, plan.classes_per_client, plan.num_stages
    _require(
        s <= num_classes,
        f"classes_per_client ({s}) exceeds number of classes ({num_classes})",
    )
    _require(
        n * s >= num_classes,
        f"{n} clients x {s} classes cannot cover all {num_classes} classes",
    )

    rng = np.random.default_rng([plan.seed, _TAG_PARTITION])
    for _ in range(1000):
        assignments = [rng.choice(num_classes, size=s, replace=False) for _ in range(n)]
        covered: set[int] = set()
        for a in assignments:
            covered.update(int(c) for c in a)
        if len(covered) == num_classes:
            break
    else:
        raise ConfigError(
            f"failed to cover all {num_classes} classes with {n} clients x {s} classes"
        )

    # Split each class's samples disjointly among the clients holding it.
    shares: list[dict[int, np.ndarray]] = [dict() for _ in range(n)]
    assignment_sets = [set(int(c) for c in a) for a in assignments]
    for c in range(num_classes):
        holders = [i for i in range(n) if c in assignment_sets[i]]
        idx = np.where(data.labels == c)[0]
        idx = rng.permutation(idx)
        parts = np.array_split(idx, len(holders))
        roll = int(rng.integers(len(holders)))
        for j, holder in enumerate(holders):
            shares[holder][c] = parts[(j + roll) % len(holders)]

    timelines = []
    for i in range(n):
        drawn_order = [int(c) for c in assignments[i]]
        effective = [c for c in drawn_order if shares[i][c].size > 0]
        if not effective:
            raise DataError(f"client {i} received no samples for any of its classes")
        stage_classes = _stage_class_sets(effective, m)

        per_stage: list[list[np.ndarray]] = [[] for _ in range(m)]
        for c in effective:
            with_c = [j for j in range(m) if c in stage_classes[j]]
            chunk = shares[i][c]
            parts = np.array_split(chunk, len(with_c))
            roll = int(rng.integers(len(with_c))) if len(with_c) > 1 else 0
            for j, stage_j in enumerate(with_c):
                part = parts[(j + roll) % len(with_c)]
                if part.size:
                    per_stage[stage_j].append(part)

        stages = []
        for j in range(m):
            train_parts, test_parts = [], []
            for part in per_stage[j]:
                n_train = max(1, int(math.floor(_TRAIN_FRACTION * part.size + 0.5)))
                train_parts.append(part[:n_train])
                test_parts.append(part[n_train:])
            train_idx = np.concatenate(train_parts) if train_parts else np.empty(0, dtype=np.int64)
            test_idx = np.concatenate(test_parts) if test_parts else np.empty(0, dtype=np.int64)
            if train_idx.size == 0:
                log.warning("client %d stage %d has no training samples", i, j + 1)
            stages.append(
                StageTask(
                    stage_index=j + 1,
                    train=data.subset(train_idx),
                    test=data.subset(test_idx),
                    class_set=frozenset(stage_classes[j]),
                )
            )
        timelines.append(ClientTimeline(client_id=i, stages=stages))
    return timelines


def export_partitions(
    timelines: list[ClientTimeline],
    out_dir: str | Path,
    spec: DatasetSpec,
    plan: PartitionPlan,
) -> Path:
    """Write per-client, per-stage CSVs plus a manifest describing the build."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    input_dim = spec.input_dim
    header = [f"f{j}" for j in range(input_dim)] + ["label"]
    for timeline in timelines:
        client_dir = out / f"client_{timeline.client_id:03d}"
        client_dir.mkdir(exist_ok=True)
        for stage in timeline.stages:
            for split_name, part in (("train", stage.train), ("test", stage.test)):
                path = client_dir / f"stage_{stage.stage_index}_{split_name}.csv"
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(header)
                    for row, label in zip(part.inputs, part.labels):
                        writer.writerow([f"{v:.17g}" for v in row] + [int(label)])
    manifest = {
        "format": PARTITION_FORMAT,
        "dataset": asdict(spec),
        "plan": asdict(plan),
        "num_clients": len(timelines),
        "stage_classes": {
            str(t.client_id): [sorted(s.class_set) for s in t.stages] for t in timelines
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def import_partitions(in_dir: str | Path) -> tuple[list[ClientTimeline], dict]:
    """Load timelines written by :func:`export_partitions`.

    Sample ids are regenerated sequentially; identity tracking is only
    stable within one export/import session.
    """
    root = Path(in_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != PARTITION_FORMAT:
        raise DataError(f"unsupported partition format: {manifest.get('format')!r}")
    input_dim = int(manifest["dataset"]["input_dim"])
    stage_classes = manifest["stage_classes"]

    next_id = 0

    def read_split(path: Path) -> LabeledSet:
        nonlocal next_id
        inputs, labels = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                inputs.append([float(v) for v in row[:input_dim]])
                labels.append(int(row[input_dim]))
        count = len(labels)
        ids = np.arange(next_id, next_id + count, dtype=np.int64)
        next_id += count
        if count == 0:
            return empty_labeled_set(input_dim)
        return LabeledSet(np.array(inputs, dtype=np.float64), np.array(labels, dtype=np.int64), ids)

    timelines = []
    for key in sorted(stage_classes, key=int):
        client_id = int(key)
        client_dir = root / f"client_{client_id:03d}"
        stages = []
        for j, classes in enumerate(stage_classes[key]):
            train = read_split(client_dir / f"stage_{j + 1}_train.csv")
            test = read_split(client_dir / f"stage_{j + 1}_test.csv")
            stages.append(
                StageTask(
                    stage_index=j + 1,
                    train=train,
                    test=test,
                    class_set=frozenset(int(c) for c in classes),
                )
            )
        timelines.append(ClientTimeline(client_id=client_id, stages=stages))
    return timelines, manifest
