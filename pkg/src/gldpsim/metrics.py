"""Accuracy measures over clients, stages, and rounds.

Three accuracies are tracked: A_glo (global model over every client's test
data), A_loc (each personalized model on its own test data), and A_sel (a
participant's model on the union of its test sets up to its current
stage), plus a forgetting diagnostic derived from the A_sel trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import ClientTimeline, LabeledSet
from .model import LayerParams, ModelParams, embed, forward
from .prototypes import PrototypeStore, predict_batch

A_GLOBAL = "A_glo"
A_LOCAL = "A_loc"
A_SELECTED = "A_sel"
FORGETTING = "forgetting"

CSV_HEADER = ["round", "stage", "algorithm", "metric", "scope", "value"]


@dataclass
class MetricRow:
    round_index: int
    stage_index: int
    algorithm: str
    metric: str
    scope: str
    value: float


@dataclass
class MetricsLog:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, round_index, stage_index, algorithm, metric, scope, value) -> None:
        self.rows.append(
            MetricRow(int(round_index), int(stage_index), algorithm, metric, str(scope), float(value))
        )

    def select(self, metric: str, scope: str | None = None) -> list[MetricRow]:
        return [
            r
            for r in self.rows
            if r.metric == metric and (scope is None or r.scope == scope)
        ]

    def final_value(self, metric: str, scope: str = "ALL") -> float:
        rows = self.select(metric, scope)
        if not rows:
            raise KeyError(f"no rows for metric {metric!r} scope {scope!r}")
        rows.sort(key=lambda r: (r.round_index, r.stage_index))
        return rows[-1].value

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                writer.writerow(
                    [r.round_index, r.stage_index, r.algorithm, r.metric, r.scope, repr(r.value)]
                )

    @staticmethod
    def from_csv(path: str | Path) -> "MetricsLog":
        out = MetricsLog()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                out.add(int(row[0]), int(row[1]), row[2], row[3], row[4], float(row[5]))
        return out


def accuracy_prototypes(
    shared: LayerParams, store: PrototypeStore, data: LabeledSet
) -> float | None:
    """Nearest-prototype accuracy on one labeled set; None when empty."""
    if len(data) == 0:
        return None
    predicted = predict_batch(embed(shared, data.inputs), store)
    return float((predicted == data.labels).mean())


def accuracy_softmax(params: ModelParams, data: LabeledSet) -> float | None:
    if len(data) == 0:
        return None
    _, logits = forward(params, data.inputs)
    return float((logits.argmax(axis=1) == data.labels).mean())


def _mean(values: list[float | None]) -> float:
    present = [v for v in values if v is not None]
    if not present:
        raise ValueError("no clients with evaluable test data")
    return float(np.mean(present))


def acc_global(
    shared: LayerParams, global_protos: PrototypeStore, test_sets: Sequence[LabeledSet]
) -> float:
    """Mean per-client accuracy of the global model with global prototypes."""
    return _mean([accuracy_prototypes(shared, global_protos, ts) for ts in test_sets])


def acc_global_softmax(
    params_per_client: Sequence[ModelParams], test_sets: Sequence[LabeledSet]
) -> float:
    return _mean(
        [accuracy_softmax(p, ts) for p, ts in zip(params_per_client, test_sets)]
    )


def acc_local(
    models: Sequence[tuple[LayerParams, PrototypeStore]], test_sets: Sequence[LabeledSet]
) -> float:
    """Mean accuracy of each personalized model on its own test data.

    Clients whose resolved store is still empty (never trained, nothing
    global to fall back on) are skipped.
    """
    values = []
    for (shared, store), ts in zip(models, test_sets):
        values.append(accuracy_prototypes(shared, store, ts) if len(store) else None)
    return _mean(values)


def acc_local_softmax(
    params_per_client: Sequence[ModelParams], test_sets: Sequence[LabeledSet]
) -> float:
    return _mean(
        [accuracy_softmax(p, ts) for p, ts in zip(params_per_client, test_sets)]
    )


def acc_sel_prototypes(
    shared: LayerParams, store: PrototypeStore, timeline: ClientTimeline, stage_index: int
) -> float | None:
    """Accuracy on the union of the client's test sets for stages 1..m."""
    if len(store) == 0:
        return None
    return accuracy_prototypes(shared, store, timeline.test_union(stage_index))


def acc_sel_softmax(
    params: ModelParams, timeline: ClientTimeline, stage_index: int
) -> float | None:
    return accuracy_softmax(params, timeline.test_union(stage_index))


def forgetting(asel_history: Sequence[float]) -> float:
    """Largest drop from any earlier A_sel value to the latest, floored at 0."""
    if len(asel_history) < 2:
        return 0.0
    return max(0.0, max(asel_history[:-1]) - asel_history[-1])
