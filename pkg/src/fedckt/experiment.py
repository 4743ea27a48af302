"""Population assembly and experiment execution: build clients from a data
config, run the chosen algorithm, and write the metrics/summary artifacts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ClientDataBundle,
    PartitionSpec,
    PublicPool,
    RawDataset,
    TRAIN_FRACTIONS,
    assign_data_fractions,
    class_means,
    draw_public_pool,
    partition_dirichlet,
    sample_blobs,
    split_train_val_test,
)
from .errors import ConfigurationError
from .federation import (
    ClientRecord,
    FederationConfig,
    RoundMetrics,
    RunResult,
    run_fedavg,
    run_local_only,
    run_perfed_ckt,
)
from .models import (
    ARCH_MLP,
    ARCH_SOFTMAX,
    ModelSpec,
    init_params,
    load_params,
    param_count,
    save_params,
)
from .rng import derive_seed, substream

POPULATION_DIRICHLET = "dirichlet"
POPULATION_TWO_GROUP = "two_group"

MODEL_KINDS = ("softmax_linear", "mlp", "heterogeneous")


@dataclass(frozen=True)
class DataConfig:
    population: str = POPULATION_DIRICHLET
    num_classes: int = 10
    dim: int = 8
    samples_per_class: int = 500
    class_separation: float = 6.0
    alpha: float = 0.01
    num_clients: int = 100
    public_pool_size: int = 2000
    public_offset: float = 1.5

    def __post_init__(self):
        if self.population not in (POPULATION_DIRICHLET, POPULATION_TWO_GROUP):
            raise ConfigurationError(f"unknown population {self.population!r}")
        if self.population == POPULATION_TWO_GROUP:
            if self.num_classes % 2 or self.num_clients % 2:
                raise ConfigurationError(
                    "two_group needs an even class count and client count"
                )
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if self.public_pool_size < 1:
            raise ConfigurationError("public_pool_size must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "softmax_linear"
    hidden: int = 16
    hidden_small: int = 8
    init_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")


def _empty_like(num_classes: int, dim: int) -> RawDataset:
    return RawDataset(np.empty((0, dim)), np.empty(0, dtype=np.int64), num_classes)


def _split_shards(shards: list[RawDataset], partition_seed: int, master_seed: int):
    """Per-client splits; the train-fraction draw consumes one stream from the
    partition seed, in client-index order, so the fractions are independent of
    shard contents."""
    frac_rng = substream(partition_seed, "train-fraction")
    picks = frac_rng.integers(len(TRAIN_FRACTIONS), size=len(shards))
    bundles = []
    for idx, shard in enumerate(shards):
        fraction = TRAIN_FRACTIONS[picks[idx]]
        if len(shard) == 0:
            empty = _empty_like(shard.num_classes, shard.dim)
            bundles.append(
                ClientDataBundle(
                    train=empty, val=empty, test=empty, active=False, train_fraction=fraction
                )
            )
        else:
            bundles.append(
                split_train_val_test(
                    shard, derive_seed(master_seed, "split", idx), train_fraction=fraction
                )
            )
    return assign_data_fractions(bundles)


def _assign_specs(bundles, model_cfg: ModelConfig, dim: int, num_classes: int):
    """Model spec per client; the heterogeneous mode gives larger models to
    clients with larger data shares (p_k terciles)."""
    base = ModelSpec(ARCH_SOFTMAX, dim, num_classes, init_scale=model_cfg.init_scale)
    if model_cfg.kind == "softmax_linear":
        return [base] * len(bundles)
    big = ModelSpec(
        ARCH_MLP, dim, num_classes, hidden=model_cfg.hidden, init_scale=model_cfg.init_scale
    )
    if model_cfg.kind == "mlp":
        return [big] * len(bundles)
    small = ModelSpec(
        ARCH_MLP,
        dim,
        num_classes,
        hidden=model_cfg.hidden_small,
        init_scale=model_cfg.init_scale,
    )
    shares = np.array([b.p_k for b in bundles])
    lo, hi = np.quantile(shares[shares > 0], [1 / 3, 2 / 3])
    specs = []
    for b in bundles:
        if not b.active or b.p_k <= lo:
            specs.append(base)
        elif b.p_k <= hi:
            specs.append(small)
        else:
            specs.append(big)
    return specs


def build_population(
    data_cfg: DataConfig, model_cfg: ModelConfig, master_seed: int
) -> tuple[list[ClientRecord], PublicPool]:
    """Clients plus the shared unlabeled pool.

    The pool is drawn from a held-out source whose class means are the
    private means shifted by a constant offset (domain-shifted relatives of
    the private data, never the private rows themselves).
    """
    if data_cfg.population == POPULATION_TWO_GROUP:
        return _build_two_group(data_cfg, model_cfg, master_seed)
    data_seed = derive_seed(master_seed, "data")
    source = sample_blobs(
        class_means(data_cfg.num_classes, data_cfg.dim, data_cfg.class_separation, data_seed),
        data_cfg.samples_per_class,
        data_cfg.num_classes,
        data_seed,
    )
    partition_seed = derive_seed(master_seed, "partition")
    shards = partition_dirichlet(
        source, PartitionSpec(data_cfg.num_clients, data_cfg.alpha, partition_seed)
    )
    bundles = _split_shards(shards, partition_seed, master_seed)
    specs = _assign_specs(bundles, model_cfg, data_cfg.dim, data_cfg.num_classes)
    records = [
        ClientRecord(
            id=i,
            spec=spec,
            params=init_params(spec, derive_seed(master_seed, "init", i)),
            bundle=bundle,
        )
        for i, (spec, bundle) in enumerate(zip(specs, bundles))
    ]
    pool = _draw_pool(
        class_means(data_cfg.num_classes, data_cfg.dim, data_cfg.class_separation, data_seed)
        + data_cfg.public_offset,
        data_cfg,
        master_seed,
    )
    return records, pool


def _draw_pool(pool_means: np.ndarray, data_cfg: DataConfig, master_seed: int) -> PublicPool:
    per_class = math.ceil(data_cfg.public_pool_size / pool_means.shape[0])
    pool_source = sample_blobs(
        pool_means,
        per_class,
        data_cfg.num_classes,
        derive_seed(master_seed, "pool-source"),
        tag="public-blob-samples",
    )
    return draw_public_pool(
        pool_source, data_cfg.public_pool_size, derive_seed(master_seed, "pool-draw")
    )


def _build_two_group(data_cfg: DataConfig, model_cfg: ModelConfig, master_seed: int):
    """Two groups with disjoint label supports over shared blob locations:
    group A labels [0, N/2) and group B labels [N/2, N) occupy the same
    input regions, so no single model can satisfy both groups while
    within-group personalization can."""
    n_cls = data_cfg.num_classes
    half_cls = n_cls // 2
    half_clients = data_cfg.num_clients // 2
    data_seed = derive_seed(master_seed, "data")
    locations = class_means(half_cls, data_cfg.dim, data_cfg.class_separation, data_seed)

    group_a = sample_blobs(locations, data_cfg.samples_per_class, n_cls, data_seed, tag="group-a")
    raw_b = sample_blobs(locations, data_cfg.samples_per_class, n_cls, data_seed, tag="group-b")
    group_b = RawDataset(raw_b.inputs, raw_b.labels + half_cls, n_cls)

    bundles = []
    for tag, group in (("a", group_a), ("b", group_b)):
        partition_seed = derive_seed(master_seed, "partition", tag)
        shards = partition_dirichlet(
            group, PartitionSpec(half_clients, data_cfg.alpha, partition_seed)
        )
        bundles.extend(_split_shards(shards, partition_seed, master_seed))
    # p_k was normalized per group; renormalize across the full population
    bundles = assign_data_fractions(bundles)
    specs = _assign_specs(bundles, model_cfg, data_cfg.dim, n_cls)
    records = [
        ClientRecord(
            id=i,
            spec=spec,
            params=init_params(spec, derive_seed(master_seed, "init", i)),
            bundle=bundle,
        )
        for i, (spec, bundle) in enumerate(zip(specs, bundles))
    ]
    pool = _draw_pool(locations + data_cfg.public_offset, data_cfg, master_seed)
    return records, pool


ALGORITHMS = ("perfed_ckt", "fedavg", "local")


def run_algorithm(
    algorithm: str,
    records: list[ClientRecord],
    pool: PublicPool,
    fed_cfg: FederationConfig,
) -> RunResult:
    if algorithm == "perfed_ckt":
        return run_perfed_ckt(records, pool, fed_cfg)
    if algorithm == "fedavg":
        return run_fedavg(records, fed_cfg)
    if algorithm == "local":
        return run_local_only(records, fed_cfg)
    raise ConfigurationError(f"unknown algorithm {algorithm!r}")


def write_checkpoints(records: list[ClientRecord], directory) -> None:
    """One binary parameter file per client plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"clients": []}
    for rec in records:
        filename = f"client_{rec.id:04d}.params"
        save_params(directory / filename, rec.spec, rec.params)
        manifest["clients"].append(
            {
                "id": rec.id,
                "file": filename,
                "arch": rec.spec.arch,
                "dim": rec.spec.dim,
                "num_classes": rec.spec.num_classes,
                "hidden": rec.spec.hidden,
                "param_count": param_count(rec.spec),
                "active": rec.bundle.active,
                "last_selected_round": rec.last_selected_round,
            }
        )
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoints(directory) -> dict[int, np.ndarray]:
    """Client id -> parameter vector, verified against the manifest."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    params = {}
    for entry in manifest["clients"]:
        tag, values = load_params(directory / entry["file"])
        if values.size != entry["param_count"]:
            raise ConfigurationError(
                f"checkpoint {entry['file']} length {values.size} does not match manifest"
            )
        params[entry["id"]] = values
    return params


METRICS_HEADER = "round,mean_acc,std_acc,grad_norm,uplink,downlink"


def write_metrics_csv(path, metrics: list[RoundMetrics]) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in metrics:
            fh.write(
                f"{row.round_index},{row.mean_accuracy!r},{row.std_accuracy!r},"
                f"{row.grad_norm_mean!r},{row.uplink_scalars},{row.downlink_scalars}\n"
            )


def summarize_run(result: RunResult, config_echo: dict) -> dict:
    last = result.metrics[-1] if result.metrics else None
    return {
        "config": config_echo,
        "final": None
        if last is None
        else {
            "round": last.round_index,
            "mean_accuracy": last.mean_accuracy,
            "std_accuracy": last.std_accuracy,
            "grad_norm_mean": last.grad_norm_mean,
            "grad_norm_median": last.grad_norm_median,
            "grad_norm_max": last.grad_norm_max,
        },
        "comm": {
            "uplink_scalars": result.ledger.uplink_scalars,
            "downlink_scalars": result.ledger.downlink_scalars,
            "total_scalars": result.ledger.total_scalars,
        },
        "diverged_events": [list(ev) for ev in result.diverged],
    }


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
