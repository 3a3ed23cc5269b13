"""Experiment orchestration: partitioning, the round loop, and metrics.

Four algorithm arms share one round loop. ``fedmpq`` runs the full
pipeline (sparsity-promoting local training, MSB pruning, server-side bit
reallocation); ``aqfl`` fixes every client at its own budget; ``fpq-k``
fixes everyone at ``fpq_bits``; ``fp32`` trains full precision. Everything
is deterministic given the master seed: clients own private RNG streams
keyed by (seed, client, round) and aggregation sorts by client id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import _HEADER, write_checkpoint
from .data import DataConfig, Dataset, load_dataset
from .nn import (
    DenseModel,
    ModelConfig,
    ModelSpec,
    QuantizedModel,
    TrainConfig,
    build_model_spec,
    evaluate,
    init_dense_model,
    local_update,
    local_update_dense,
)
from .quant import plane_density, prune_msbs
from .server import (
    BudgetLedger,
    ClientUpdate,
    GlobalModel,
    aggregate,
    aggregation_weights,
    binary_representation,
    pruning_growing,
    round_bitwidths,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("fedmpq", "aqfl", "fpq-k", "fp32")

_SALT_PARTITION = 101
_SALT_INIT = 202
_SALT_CLIENT = 303
_SALT_SAMPLE = 404

_BIAS_WIRE_BITS = 32
_FP_WIRE_BITS = 32
_RECORD_HEADER_BITS = 8 * _HEADER.size

METRICS_COLUMNS = (
    "round",
    "test_loss",
    "test_accuracy",
    "global_bits",
    "client_avg_bits",
    "plane_densities",
    "uploaded_bits",
    "total_uploaded_bits",
)


class PartitionError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedmpq"
    clients: int = 10
    participation: float = 0.5
    rounds: int = 30
    budgets: tuple[int, ...] = (2, 2, 4, 4, 4, 6, 6, 6, 8, 8)
    alpha: float = 0.5
    seed: int = 0
    fpq_bits: int = 8
    use_lasso: bool = True
    use_msb_pruning: bool = True
    use_bit_reallocation: bool = True
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.clients < 1:
            raise ValueError("clients must be at least 1")
        if not (0.0 < self.participation <= 1.0):
            raise ValueError("participation must lie in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if len(self.budgets) != self.clients:
            raise ValueError(
                f"need one budget per client: {len(self.budgets)} budgets, "
                f"{self.clients} clients"
            )
        if any(not (1 <= v <= 8) for v in self.budgets):
            raise ValueError("budgets must lie in [1, 8]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not (1 <= self.fpq_bits <= 8):
            raise ValueError("fpq_bits must lie in [1, 8]")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    test_loss: float
    test_accuracy: float
    global_bits: tuple[float, ...]
    client_avg_bits: tuple[float, ...]
    plane_densities: tuple[tuple[float, ...], ...]
    uploaded_bits: tuple[int, ...]
    total_uploaded_bits: int
    wall_time_sec: float


def dirichlet_partition(
    labels: np.ndarray,
    n_clients: int,
    alpha: float,
    seed: int,
    max_retries: int = 1000,
) -> list[np.ndarray]:
    """Split sample indices across clients, class by class.

    Per class, the client proportions are drawn from a symmetric Dirichlet
    with concentration ``alpha``; smaller alpha means more skew. The whole
    draw is retried until every client holds at least one sample.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, _SALT_PARTITION])
    classes = np.unique(labels)
    for _ in range(max_retries):
        shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for cls in classes:
            idx = rng.permutation(np.flatnonzero(labels == cls))
            proportions = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(np.int64)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        merged = [np.sort(np.concatenate(parts)) for parts in shards]
        if all(len(s) >= 1 for s in merged):
            return merged
    raise PartitionError(
        f"could not give every one of {n_clients} clients a sample after "
        f"{max_retries} draws; use a larger dataset or a larger alpha"
    )


def sample_clients(n_clients: int, fraction: float, round_index: int, seed: int) -> np.ndarray:
    """ceil(fraction * N) distinct ids, uniform without replacement."""
    count = math.ceil(fraction * n_clients)
    rng = np.random.default_rng([seed, _SALT_SAMPLE, round_index])
    return np.sort(rng.choice(n_clients, size=count, replace=False))


@dataclass(frozen=True)
class _ArmSettings:
    quantized: bool
    act_bits: int | None
    use_lasso: bool
    use_msb_pruning: bool
    use_bit_reallocation: bool
    fixed_bits: int | None  # uniform width for every layer and client, or None


def _arm_settings(config: ExperimentConfig) -> _ArmSettings:
    if config.algorithm == "fp32":
        return _ArmSettings(False, None, False, False, False, None)
    if config.algorithm == "fpq-k":
        return _ArmSettings(True, config.fpq_bits, False, False, False, config.fpq_bits)
    if config.algorithm == "aqfl":
        return _ArmSettings(True, config.train.activation_bits, False, False, False, None)
    return _ArmSettings(
        True,
        config.train.activation_bits,
        config.use_lasso,
        config.use_msb_pruning,
        config.use_bit_reallocation,
        None,
    )


@dataclass
class SimState:
    config: ExperimentConfig
    spec: ModelSpec
    dataset: Dataset
    shards: list[np.ndarray]
    global_weights: list[np.ndarray]
    global_biases: list[np.ndarray]
    global_bits: np.ndarray | None
    delivered_bits: dict[int, np.ndarray]
    client_bits: dict[int, np.ndarray]
    ledger: BudgetLedger
    last_updates: dict[int, ClientUpdate]
    round_index: int = 0

    @property
    def param_counts(self) -> np.ndarray:
        return np.asarray(self.spec.param_counts, dtype=np.int64)


def init_state(config: ExperimentConfig, shards: list[np.ndarray] | None = None) -> SimState:
    dataset = load_dataset(config.data, config.seed)
    if shards is None:
        shards = dirichlet_partition(
            dataset.train_y, config.clients, config.alpha, config.seed
        )
    if len(shards) != config.clients:
        raise ValueError("partition does not match the configured client count")
    spec = build_model_spec(config.model, dataset.input_shape, dataset.num_classes)
    rng = np.random.default_rng([config.seed, _SALT_INIT])
    dense = init_dense_model(spec, rng)
    return SimState(
        config=config,
        spec=spec,
        dataset=dataset,
        shards=shards,
        global_weights=dense.weights,
        global_biases=dense.biases,
        global_bits=None,
        delivered_bits={},
        client_bits={},
        ledger=BudgetLedger(),
        last_updates={},
    )


def _delivery_bits(state: SimState, arm: _ArmSettings, client: int) -> np.ndarray:
    """Integer bit widths this client's model is quantized at this round."""
    n_layers = len(state.spec.layers)
    if arm.fixed_bits is not None:
        return np.full(n_layers, arm.fixed_bits, dtype=np.int64)
    budget = state.config.budgets[client]
    default = np.full(n_layers, budget, dtype=np.int64)
    if not arm.use_bit_reallocation:
        # Without server-side reallocation a client keeps whatever widths
        # its own pruning left behind.
        return state.client_bits.get(client, default).copy()
    if state.global_bits is None:
        return default
    return pruning_growing(
        round_bitwidths(state.global_bits),
        state.ledger.get(client, n_layers),
        state.param_counts,
        budget,
    )


def upload_cost_bits(update: ClientUpdate) -> int:
    """Wire cost of one upload under the checkpoint record format.

    Per layer: the record header plus bit_width planes padded to whole
    bytes; biases travel at 32 bits per entry.
    """
    total = 0
    for layer in update.layers:
        plane_bytes = (layer.num_params + 7) // 8
        total += _RECORD_HEADER_BITS + 8 * layer.bit_width * plane_bytes
    total += _BIAS_WIRE_BITS * sum(len(b) for b in update.biases)
    return total


def _dense_upload_cost_bits(spec: ModelSpec) -> int:
    weights = spec.total_params
    biases = sum(s.weight_shape[0] for s in spec.layers)
    return _FP_WIRE_BITS * (weights + biases)


def _aggregate_dense(
    updates: list[tuple[int, DenseModel, int, float]], round_index: int
) -> GlobalModel:
    """FedAvg for the full-precision arm, same weighting as aggregate()."""
    ups = sorted(updates, key=lambda u: u[0])
    mass = np.array([budget * n for _, _, n, budget in ups], dtype=np.float64)
    p = mass / mass.sum()
    first = ups[0][1]
    weights = [np.zeros_like(w) for w in first.weights]
    biases = [np.zeros_like(b) for b in first.biases]
    for p_n, (_, model, _, _) in zip(p, ups):
        for l in range(len(weights)):
            weights[l] += p_n * model.weights[l]
            biases[l] += p_n * model.biases[l]
    bits = np.full(len(weights), float(_FP_WIRE_BITS))
    return GlobalModel(weights, biases, bits, round_index)


def _client_avg_bits(state: SimState, arm: _ArmSettings) -> tuple[float, ...]:
    """Weighted average delivered width per client, budget until first delivery."""
    m = state.param_counts
    out = []
    for n in range(state.config.clients):
        if not arm.quantized:
            out.append(float(_FP_WIRE_BITS))
            continue
        if arm.fixed_bits is not None:
            fallback = np.full(len(m), arm.fixed_bits, dtype=np.int64)
        else:
            fallback = np.full(len(m), state.config.budgets[n], dtype=np.int64)
        widths = state.delivered_bits.get(n, fallback)
        out.append(float(widths @ m) / float(m.sum()))
    return tuple(out)


def _global_densities(state: SimState, arm: _ArmSettings) -> tuple[tuple[float, ...], ...]:
    if not arm.quantized or state.global_bits is None:
        return ()
    widths = round_bitwidths(state.global_bits)
    layers = binary_representation(
        state.global_weights, widths, state.config.train.scale_policy
    )
    return tuple(plane_density(layer).values for layer in layers)


def _evaluate_global(state: SimState) -> tuple[float, float]:
    model = DenseModel(state.spec, state.global_weights, state.global_biases)
    return evaluate(model, state.dataset.test_x, state.dataset.test_y, act_bits=None)


def _round_metrics(
    state: SimState,
    arm: _ArmSettings,
    round_index: int,
    uploaded: dict[int, int],
    started: float,
) -> RoundMetrics:
    loss, acc = _evaluate_global(state)
    per_client = tuple(uploaded.get(n, 0) for n in range(state.config.clients))
    bits = state.global_bits if state.global_bits is not None else ()
    return RoundMetrics(
        round_index=round_index,
        test_loss=loss,
        test_accuracy=acc,
        global_bits=tuple(float(x) for x in bits),
        client_avg_bits=_client_avg_bits(state, arm),
        plane_densities=_global_densities(state, arm),
        uploaded_bits=per_client,
        total_uploaded_bits=int(sum(per_client)),
        wall_time_sec=time.perf_counter() - started,
    )


def run_round(state: SimState, config: ExperimentConfig, round_index: int) -> RoundMetrics:
    """One global round: deliver, train locally, aggregate, reallocate."""
    started = time.perf_counter()
    arm = _arm_settings(config)
    participants = sample_clients(
        config.clients, config.participation, round_index, config.seed
    )
    m = state.param_counts
    slack = float(m.max()) / float(m.sum())

    deliveries: dict[int, np.ndarray] = {}
    for n in participants:
        n = int(n)
        if arm.quantized:
            widths = _delivery_bits(state, arm, n)
            if arm.fixed_bits is None:
                avg = float(widths @ m) / float(m.sum())
                assert avg <= config.budgets[n] + slack + 1e-9, (
                    f"delivered widths for client {n} break the budget: {avg}"
                )
            deliveries[n] = widths
            state.delivered_bits[n] = widths

    train_cfg = replace(config.train, activation_bits=arm.act_bits)

    def train_one(n: int):
        rng = np.random.default_rng([config.seed, _SALT_CLIENT, n, round_index])
        idx = state.shards[n]
        xs, ys = state.dataset.train_x[idx], state.dataset.train_y[idx]
        if arm.quantized:
            layers = binary_representation(
                state.global_weights, deliveries[n], config.train.scale_policy
            )
            model = QuantizedModel(state.spec, layers, [b.copy() for b in state.global_biases])
            trained, widths = local_update(
                model,
                xs,
                ys,
                train_cfg,
                rng,
                use_lasso=arm.use_lasso,
                use_msb_pruning=arm.use_msb_pruning,
            )
            return ClientUpdate(
                client_id=n,
                layers=tuple(trained.layers),
                biases=tuple(trained.biases),
                bit_widths=widths,
                num_samples=len(ys),
                budget=float(config.budgets[n]),
            )
        model = DenseModel(
            state.spec,
            [w.copy() for w in state.global_weights],
            [b.copy() for b in state.global_biases],
        )
        trained = local_update_dense(model, xs, ys, train_cfg, rng)
        return (n, trained, len(ys), float(config.budgets[n]))

    ids = [int(n) for n in participants]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(train_one, ids))
    else:
        results = [train_one(n) for n in ids]

    uploaded: dict[int, int] = {}
    if arm.quantized:
        updates = sorted(results, key=lambda u: u.client_id)
        for u in updates:
            if arm.fixed_bits is None:
                u.check_budget(m)
            uploaded[u.client_id] = upload_cost_bits(u)
        new_global = aggregate(updates, round_index)
        state.global_weights = new_global.weights
        state.global_biases = new_global.biases
        state.global_bits = new_global.bit_widths
        for u in updates:
            state.ledger.record(u.client_id, deliveries[u.client_id], u.bit_widths)
            state.client_bits[u.client_id] = np.asarray(u.bit_widths, dtype=np.int64)
            state.last_updates[u.client_id] = u
    else:
        new_global = _aggregate_dense(results, round_index)
        state.global_weights = new_global.weights
        state.global_biases = new_global.biases
        for n in ids:
            uploaded[n] = _dense_upload_cost_bits(state.spec)

    state.round_index = round_index
    return _round_metrics(state, arm, round_index, uploaded, started)


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    shards: list[np.ndarray] | None = None,
    config_text: str | None = None,
) -> tuple[list[RoundMetrics], SimState]:
    """Full T-round experiment; optionally writes the output directory.

    With zero rounds the single emitted row evaluates the random
    initialization. Two runs with the same config produce byte-identical
    metrics.csv and rounds.jsonl; wall-clock timings go to a separate file.
    """
    state = init_state(config, shards)
    arm = _arm_settings(config)
    metrics: list[RoundMetrics] = []
    if config.rounds == 0:
        metrics.append(_round_metrics(state, arm, 0, {}, time.perf_counter()))
    for r in range(1, config.rounds + 1):
        metrics.append(run_round(state, config, r))
        logger.info(
            "round %d/%d: loss %.4f acc %.4f",
            r,
            config.rounds,
            metrics[-1].test_loss,
            metrics[-1].test_accuracy,
        )
    if out_dir is not None:
        write_outputs(Path(out_dir), config, metrics, state, config_text)
    return metrics, state


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_rows(metrics: list[RoundMetrics]) -> list[str]:
    rows = [",".join(METRICS_COLUMNS)]
    for m in metrics:
        cells = [
            str(m.round_index),
            repr(m.test_loss),
            repr(m.test_accuracy),
            ";".join(_fmt(b) for b in m.global_bits),
            ";".join(_fmt(b) for b in m.client_avg_bits),
            "|".join(";".join(_fmt(d) for d in layer) for layer in m.plane_densities),
            ";".join(str(u) for u in m.uploaded_bits),
            str(m.total_uploaded_bits),
        ]
        rows.append(",".join(cells))
    return rows


def write_outputs(
    out_dir: Path,
    config: ExperimentConfig,
    metrics: list[RoundMetrics],
    state: SimState,
    config_text: str | None = None,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text("\n".join(metrics_csv_rows(metrics)) + "\n")
    with open(out_dir / "rounds.jsonl", "w") as fh:
        for m in metrics:
            record = {
                "round": m.round_index,
                "test_loss": m.test_loss,
                "test_accuracy": m.test_accuracy,
                "global_bits": list(m.global_bits),
                "client_avg_bits": list(m.client_avg_bits),
                "plane_densities": [list(layer) for layer in m.plane_densities],
                "uploaded_bits": list(m.uploaded_bits),
                "total_uploaded_bits": m.total_uploaded_bits,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out_dir / "timings.csv", "w") as fh:
        fh.write("round,wall_time_sec\n")
        for m in metrics:
            fh.write(f"{m.round_index},{m.wall_time_sec!r}\n")

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    if state.global_bits is not None:
        widths = round_bitwidths(state.global_bits)
    else:
        widths = np.full(len(state.spec.layers), 8, dtype=np.int64)
    layers = binary_representation(state.global_weights, widths, config.train.scale_policy)
    write_checkpoint(ckpt_dir / "final.fmpq", layers)
    np.savez(
        ckpt_dir / "final_biases.npz",
        **{f"bias_{i}": b for i, b in enumerate(state.global_biases)},
    )
    if config_text is not None:
        manifest = {
            "algorithm": config.algorithm,
            "seed": config.seed,
            "rounds": config.rounds,
            "budgets": list(config.budgets),
            "config": config_text,
            "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
            "checkpoint_bits": [int(b) for b in widths],
            "param_counts": [int(c) for c in state.spec.param_counts],
            "files": ["metrics.csv", "rounds.jsonl", "timings.csv", "checkpoints/final.fmpq"],
            "version": _package_version(),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _package_version() -> str:
    from . import __version__

    return __version__


def count_prunable_msb_planes(updates: list[ClientUpdate], epsilon: float) -> int:
    """Total planes across uploads that the MSB rule would drop at epsilon."""
    total = 0
    for update in updates:
        for layer in update.layers:
            _, width = prune_msbs(layer, epsilon)
            total += layer.bit_width - width
    return total
