"""Round/stage protocol: selection, local updates, server aggregation.

Each global round selects a subset of clients and walks their stage tasks
in order. Per stage, the server broadcasts the shared layer (and prototype
snapshot), selected clients train locally and upload, and the server
averages shared layers and folds prototype uploads into the global store.
The shared layer carries from one stage into the next within a round.

FedAvg, FedRep, and FedProx run on the same state machine with different
local updates, payloads, and inference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import (
    ClientTimeline,
    DatasetSpec,
    PartitionPlan,
    apply_longtail,
    make_synthetic_dataset,
    partition_clients,
)
from .errors import ConfigError, ProtocolError
from .metrics import (
    A_GLOBAL,
    A_LOCAL,
    A_SELECTED,
    FORGETTING,
    MetricsLog,
    acc_global,
    acc_global_softmax,
    acc_local,
    acc_local_softmax,
    acc_sel_prototypes,
    acc_sel_softmax,
    forgetting,
)
from .model import (
    LayerParams,
    LossWeights,
    ModelParams,
    OptimizerConfig,
    init_params,
    joint_update,
    local_update,
)
from .prototypes import (
    PrototypeStore,
    compute_counts,
    inference_store,
    update_global,
    update_local,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("GLDP", "FedAvg", "FedRep", "FedProx")
# Algorithms whose head never leaves the client.
PERSONALIZED_ALGORITHMS = ("GLDP", "FedRep")
INFERENCE_MODES = ("gp", "lp")

MESSAGE_FORMAT_VERSION = 1

_TAG_INIT = 43
_TAG_SELECT = 44
_TAG_CLIENT = 45


@dataclass
class ServerState:
    shared: LayerParams
    global_protos: PrototypeStore
    head: LayerParams | None = None
    round_index: int = 0

    def copy(self) -> "ServerState":
        return ServerState(
            shared=self.shared.copy(),
            global_protos=self.global_protos.copy(),
            head=self.head.copy() if self.head is not None else None,
            round_index=self.round_index,
        )


@dataclass
class ClientState:
    client_id: int
    params: ModelParams
    local_protos: PrototypeStore
    timeline: ClientTimeline
    current_stage: int = 0


@dataclass
class RoundMessage:
    direction: str  # "server_to_client" | "client_to_server"
    sender: int | str
    receiver: int | str
    round_index: int
    stage_index: int
    payload: dict

    def to_json_dict(self) -> dict:
        return {
            "version": MESSAGE_FORMAT_VERSION,
            "direction": self.direction,
            "sender": self.sender,
            "receiver": self.receiver,
            "round": self.round_index,
            "stage": self.stage_index,
            "payload": {k: _jsonify(v) for k, v in sorted(self.payload.items())},
        }


def _jsonify(value):
    if isinstance(value, LayerParams):
        return {"weight": value.weight.tolist(), "bias": value.bias.tolist()}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): _jsonify(v) for k, v in sorted(value.items())}
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


def dump_message_log(messages: list[RoundMessage], path: str | Path) -> None:
    """Write one JSON object per message, suitable for offline audits."""
    with open(path, "w") as fh:
        for msg in messages:
            fh.write(json.dumps(msg.to_json_dict(), sort_keys=True))
            fh.write("\n")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "GLDP"
    rounds: int = 50
    clients_per_round: int = 10
    dataset: DatasetSpec = field(
        default_factory=lambda: DatasetSpec(
            num_classes=10, input_dim=16, samples_per_class=100,
            class_center_scale=2.0, noise_sigma=2.5, seed=0,
        )
    )
    plan: PartitionPlan = field(
        default_factory=lambda: PartitionPlan(
            num_clients=20, classes_per_client=4, num_stages=5,
            imbalance_factor=50.0, seed=0,
        )
    )
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    embedding_dim: int = 64
    proto_momentum: float = 0.5
    fedprox_coeff: float = 0.01
    inference_mode: str = "lp"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}"
            )
        if self.rounds < 0:
            raise ConfigError(f"rounds must be non-negative, got {self.rounds}")
        if not 1 <= self.clients_per_round <= self.plan.num_clients:
            raise ConfigError(
                f"clients_per_round must be in [1, {self.plan.num_clients}], "
                f"got {self.clients_per_round}"
            )
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if not 0.0 <= self.proto_momentum <= 1.0:
            raise ConfigError(f"proto_momentum must be in [0, 1], got {self.proto_momentum}")
        if self.fedprox_coeff < 0:
            raise ConfigError(f"fedprox_coeff must be non-negative, got {self.fedprox_coeff}")
        if self.inference_mode not in INFERENCE_MODES:
            raise ConfigError(
                f"inference_mode must be one of {INFERENCE_MODES}, got {self.inference_mode!r}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Re-key every seeded component of the experiment."""
        return replace(
            self,
            seed=seed,
            dataset=replace(self.dataset, seed=seed),
            plan=replace(self.plan, seed=seed),
        )


def aggregates_full_model(algorithm: str) -> bool:
    return algorithm not in PERSONALIZED_ALGORITHMS


def select_clients(num_clients: int, count: int, seed: int, round_index: int) -> list[int]:
    """Uniform sample without replacement, deterministic in (seed, round)."""
    if not 1 <= count <= num_clients:
        raise ConfigError(f"cannot select {count} clients from {num_clients}")
    rng = np.random.default_rng([seed, _TAG_SELECT, round_index])
    chosen = rng.choice(num_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


def aggregate_shared(uploads: list[LayerParams]) -> LayerParams:
    """Coordinate-wise unweighted mean of uploaded layer parameters.

    All-identical uploads short-circuit to an exact copy so that a
    zero-step-size protocol round is a bit-exact fixed point regardless
    of the participant count.
    """
    if not uploads:
        raise ProtocolError("cannot aggregate an empty upload list")
    shape = (uploads[0].weight.shape, uploads[0].bias.shape)
    for up in uploads[1:]:
        if (up.weight.shape, up.bias.shape) != shape:
            raise ProtocolError(
                f"upload shape {(up.weight.shape, up.bias.shape)} does not match {shape}"
            )
    if all(
        np.array_equal(up.weight, uploads[0].weight) and np.array_equal(up.bias, uploads[0].bias)
        for up in uploads[1:]
    ):
        return uploads[0].copy()
    weight = np.mean(np.stack([u.weight for u in uploads]), axis=0)
    bias = np.mean(np.stack([u.bias for u in uploads]), axis=0)
    return LayerParams(weight, bias)


def baseline_update(
    mode: str,
    params: ModelParams,
    broadcast: ModelParams,
    stage,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    fedprox_coeff: float = 0.0,
) -> ModelParams:
    """One client-side baseline update for FedAvg, FedRep, or FedProx."""
    if mode == "FedAvg":
        return joint_update(broadcast.copy(), stage, opt, rng)
    if mode == "FedProx":
        return joint_update(
            broadcast.copy(), stage, opt, rng,
            prox_anchor=broadcast, prox_coeff=fedprox_coeff,
        )
    if mode == "FedRep":
        started = ModelParams(shared=broadcast.shared.copy(), head=params.head.copy())
        plain = LossWeights(use_local_relation=False, use_global_relation=False)
        updated, _ = local_update(started, stage, {}, {}, opt, plain, rng)
        return updated
    raise ConfigError(f"unknown baseline mode {mode!r}")


def run_stage(
    server: ServerState,
    clients: dict[int, ClientState],
    selected: list[int],
    stage_index: int,
    config: ExperimentConfig,
    message_log: list[RoundMessage] | None = None,
) -> list[int]:
    """Run one stage task for the selected clients and aggregate.

    Clients whose stage training set is empty are skipped with a warning.
    The result is independent of the order of ``selected``: client rng
    streams are keyed by (seed, round, stage, client) and the reduction
    iterates clients in ascending id order. Returns the participants.
    """
    algorithm = config.algorithm
    round_index = server.round_index
    global_snapshot = server.global_protos.vectors()
    uploads_shared: dict[int, LayerParams] = {}
    uploads_head: dict[int, LayerParams] = {}
    uploads_protos: dict[int, dict[int, np.ndarray]] = {}
    participating: list[int] = []

    for cid in selected:
        client = clients[cid]
        stage = client.timeline.stages[stage_index - 1]

        down_payload: dict = {
            "shared": server.shared.copy(),
            "global_prototypes": {c: v.copy() for c, v in global_snapshot.items()},
        }
        if aggregates_full_model(algorithm):
            down_payload["head"] = server.head.copy()
        if message_log is not None:
            message_log.append(
                RoundMessage("server_to_client", "server", cid, round_index, stage_index, down_payload)
            )

        if len(stage.train) == 0:
            log.warning(
                "round %d stage %d: client %d has no training data, skipped",
                round_index, stage_index, cid,
            )
            continue

        rng = np.random.default_rng(
            [config.seed, _TAG_CLIENT, round_index, stage_index, cid]
        )
        if algorithm == "GLDP":
            client.params.shared = down_payload["shared"].copy()
            old_protos = client.local_protos.vectors()
            client.params, fresh = local_update(
                client.params, stage, old_protos, down_payload["global_prototypes"],
                config.opt, config.weights, rng,
            )
            counts = compute_counts(stage.train.labels)
            up_payload = {
                "shared": client.params.shared.copy(),
                "prototypes": {c: v.copy() for c, v in fresh.items()},
                "class_counts": counts,
            }
            update_local(client.local_protos, fresh, counts)
            uploads_protos[cid] = up_payload["prototypes"]
        else:
            broadcast = ModelParams(
                shared=down_payload["shared"].copy(),
                head=(down_payload["head"].copy() if aggregates_full_model(algorithm)
                      else client.params.head),
            )
            client.params = baseline_update(
                algorithm, client.params, broadcast, stage, config.opt, rng,
                fedprox_coeff=config.fedprox_coeff,
            )
            up_payload = {"shared": client.params.shared.copy()}
            if aggregates_full_model(algorithm):
                up_payload["head"] = client.params.head.copy()

        client.current_stage = stage_index
        if message_log is not None:
            message_log.append(
                RoundMessage("client_to_server", cid, "server", round_index, stage_index, up_payload)
            )
        uploads_shared[cid] = up_payload["shared"]
        if "head" in up_payload:
            uploads_head[cid] = up_payload["head"]
        participating.append(cid)

    if participating:
        order = sorted(participating)
        server.shared = aggregate_shared([uploads_shared[c] for c in order])
        if aggregates_full_model(algorithm):
            server.head = aggregate_shared([uploads_head[c] for c in order])
        if algorithm == "GLDP":
            update_global(server.global_protos, [(c, uploads_protos[c]) for c in order])
    return sorted(participating)


def initialize_experiment(
    config: ExperimentConfig,
) -> tuple[ServerState, dict[int, ClientState]]:
    """Build data, timelines, and identically initialized client models."""
    data = make_synthetic_dataset(config.dataset)
    longtailed = apply_longtail(data, config.plan.imbalance_factor, config.plan.seed)
    timelines = partition_clients(longtailed, config.plan)

    init = init_params(
        config.dataset.input_dim, config.embedding_dim, config.dataset.num_classes,
        [config.seed, _TAG_INIT],
    )
    clients = {
        t.client_id: ClientState(
            client_id=t.client_id,
            params=init.copy(),
            local_protos=PrototypeStore(momentum=config.proto_momentum),
            timeline=t,
        )
        for t in timelines
    }
    server = ServerState(
        shared=init.shared.copy(),
        global_protos=PrototypeStore(momentum=config.proto_momentum),
        head=init.head.copy() if aggregates_full_model(config.algorithm) else None,
    )
    return server, clients


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    config: ExperimentConfig,
    round_index: int,
    message_log: list[RoundMessage] | None = None,
) -> list[int]:
    """One global round: select clients, then walk every stage in order."""
    server.round_index = round_index
    selected = select_clients(
        config.plan.num_clients, config.clients_per_round, config.seed, round_index
    )
    for stage_index in range(1, config.plan.num_stages + 1):
        run_stage(server, clients, selected, stage_index, config, message_log)
    return selected


def _client_scope(client: ClientState) -> set[int]:
    scope: set[int] = set()
    for stage in client.timeline.stages:
        scope |= set(stage.class_set)
    return scope


def _client_sel_accuracy(
    client: ClientState, server: ServerState, config: ExperimentConfig, stage_index: int
) -> float | None:
    if config.algorithm == "GLDP":
        store = inference_store(
            client.local_protos, server.global_protos, config.inference_mode,
            scope=_client_scope(client),
        )
        return acc_sel_prototypes(client.params.shared, store, client.timeline, stage_index)
    return acc_sel_softmax(client.params, client.timeline, stage_index)


def _log_round_metrics(
    mlog: MetricsLog,
    server: ServerState,
    clients: dict[int, ClientState],
    config: ExperimentConfig,
    round_index: int,
) -> None:
    algorithm = config.algorithm
    stage_count = config.plan.num_stages
    order = sorted(clients)
    test_sets = [clients[c].timeline.test_union() for c in order]

    if algorithm == "GLDP":
        a_glo = acc_global(server.shared, server.global_protos, test_sets)
        models = [
            (
                clients[c].params.shared,
                inference_store(
                    clients[c].local_protos, server.global_protos, config.inference_mode,
                    scope=_client_scope(clients[c]),
                ),
            )
            for c in order
        ]
        a_loc = acc_local(models, test_sets)
    else:
        if aggregates_full_model(algorithm):
            global_models = [ModelParams(server.shared, server.head) for _ in order]
        else:  # FedRep: global representation with each client's own head
            global_models = [ModelParams(server.shared, clients[c].params.head) for c in order]
        a_glo = acc_global_softmax(global_models, test_sets)
        a_loc = acc_local_softmax([clients[c].params for c in order], test_sets)

    mlog.add(round_index, stage_count, algorithm, A_GLOBAL, "ALL", a_glo)
    mlog.add(round_index, stage_count, algorithm, A_LOCAL, "ALL", a_loc)


def run_experiment(
    config: ExperimentConfig,
    message_log: list[RoundMessage] | None = None,
) -> MetricsLog:
    """Run the full protocol and return the metrics log.

    Fully deterministic in the config. With zero rounds, the identically
    initialized model is evaluated with softmax inference (no prototype
    store exists yet), which is algorithm-independent.
    """
    server, clients = initialize_experiment(config)
    mlog = MetricsLog()
    algorithm = config.algorithm
    stage_count = config.plan.num_stages
    order = sorted(clients)

    if config.rounds == 0:
        test_sets = [clients[c].timeline.test_union() for c in order]
        params = [clients[c].params for c in order]
        mlog.add(0, stage_count, algorithm, A_GLOBAL, "ALL", acc_global_softmax(params, test_sets))
        mlog.add(0, stage_count, algorithm, A_LOCAL, "ALL", acc_local_softmax(params, test_sets))
        return mlog

    for round_index in range(1, config.rounds + 1):
        server.round_index = round_index
        selected = select_clients(
            config.plan.num_clients, config.clients_per_round, config.seed, round_index
        )
        sel_history: dict[int, list[float]] = {cid: [] for cid in selected}
        for stage_index in range(1, stage_count + 1):
            participating = run_stage(
                server, clients, selected, stage_index, config, message_log
            )
            stage_values = []
            for cid in participating:
                value = _client_sel_accuracy(clients[cid], server, config, stage_index)
                if value is None:
                    continue
                mlog.add(round_index, stage_index, algorithm, A_SELECTED, cid, value)
                sel_history[cid].append(value)
                stage_values.append(value)
            if stage_values:
                mlog.add(
                    round_index, stage_index, algorithm, A_SELECTED, "ALL",
                    float(np.mean(stage_values)),
                )
        drops = []
        for cid in selected:
            if sel_history[cid]:
                drop = forgetting(sel_history[cid])
                mlog.add(round_index, stage_count, algorithm, FORGETTING, cid, drop)
                drops.append(drop)
        if drops:
            mlog.add(round_index, stage_count, algorithm, FORGETTING, "ALL", float(np.mean(drops)))
        _log_round_metrics(mlog, server, clients, config, round_index)
    return mlog


def audit_message_log(
    messages: list[RoundMessage], clients: dict[int, ClientState], algorithm: str
) -> list[str]:
    """Check client uploads for personalized-layer, input, or label leaks.

    Returns a list of human-readable violations (empty when clean). The
    allowed upload schema depends on the algorithm: personalized
    algorithms never upload the head.
    """
    if algorithm == "GLDP":
        allowed = {"shared", "prototypes", "class_counts"}
    elif algorithm == "FedRep":
        allowed = {"shared"}
    else:
        allowed = {"shared", "head"}
    personalizes = algorithm in PERSONALIZED_ALGORITHMS

    violations = []
    for i, msg in enumerate(messages):
        if msg.direction != "client_to_server":
            continue
        extra = set(msg.payload) - allowed
        if extra:
            violations.append(f"message {i}: unexpected payload keys {sorted(extra)}")
        client = clients[msg.sender]
        head = client.params.head
        for key, value in msg.payload.items():
            for array in _payload_arrays(value):
                if personalizes and array.shape == head.weight.shape and np.array_equal(array, head.weight):
                    violations.append(f"message {i}: key {key!r} carries head weights")
                if personalizes and array.shape == head.bias.shape and np.array_equal(array, head.bias):
                    violations.append(f"message {i}: key {key!r} carries head bias")
                for stage in client.timeline.stages:
                    for part_name, part in (("train", stage.train), ("test", stage.test)):
                        if array.shape == part.inputs.shape and array.size and np.array_equal(array, part.inputs):
                            violations.append(
                                f"message {i}: key {key!r} carries raw {part_name} inputs"
                            )
                        if (
                            np.issubdtype(array.dtype, np.integer)
                            and array.shape == part.labels.shape
                            and array.size
                            and np.array_equal(array, part.labels)
                        ):
                            violations.append(
                                f"message {i}: key {key!r} carries {part_name} labels"
                            )
    return violations


def _payload_arrays(value) -> list[np.ndarray]:
    if isinstance(value, LayerParams):
        return [value.weight, value.bias]
    if isinstance(value, np.ndarray):
        return [value]
    if isinstance(value, dict):
        out = []
        for v in value.values():
            out.extend(_payload_arrays(v))
        return out
    if isinstance(value, (int, float, np.integer, np.floating)):
        return []
    return []
