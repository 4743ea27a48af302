"""Round orchestration: the clustered co-distillation algorithm, FedAvg and
local-only baselines, communication accounting, and convergence monitoring.

Randomness contract: every stochastic quantity draws from a named substream
of the master seed — client selection from ("select", t), clustering from
("cluster-seed", t), private batches from ("batch", client, t), and public
batches from ("public", client, t). Clients therefore share no streams, so
parallel and sequential execution of a round are bitwise identical, and
algorithms that skip a quantity (e.g. local SGD never touching public
batches) still consume identical private streams.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    CentroidSet,
    LogitStack,
    assign_nearest,
    cmeans_fit,
    stack_from_logits,
)
from .data import ClientDataBundle, PublicPool, minibatch
from .errors import ConfigurationError, DivergedClientError, NumericError
from .models import (
    ModelSpec,
    forward_logits,
    grad_local,
    grad_phi_stochastic,
    init_params,
    param_count,
)
from .rng import derive_seed, substream

LR_CONSTANT = "constant"
LR_ROBBINS_MONRO = "robbins_monro"


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    local_iters: int
    batch_size: int
    public_batch_size: int
    distill_weight: float
    num_clusters: int
    lr: float
    lr_mode: str = LR_CONSTANT
    lr_decay: float = 0.0
    seed: int = 0
    num_selected: int | None = None
    selected_fraction: float | None = None
    eval_interval: int = 1
    parallel: bool = False
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-8

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.local_iters < 1:
            raise ConfigurationError("local_iters must be >= 1")
        if self.batch_size < 1 or self.public_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.distill_weight < 0:
            raise ConfigurationError("distill_weight must be >= 0")
        if self.num_clusters < 1:
            raise ConfigurationError("num_clusters must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.lr_mode not in (LR_CONSTANT, LR_ROBBINS_MONRO):
            raise ConfigurationError(f"unknown lr_mode {self.lr_mode!r}")
        if self.lr_mode == LR_ROBBINS_MONRO and not self.lr_decay > 0:
            raise ConfigurationError("robbins_monro needs lr_decay > 0")
        if self.num_selected is None and self.selected_fraction is None:
            raise ConfigurationError("set num_selected or selected_fraction")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")


def lr_at(config: FederationConfig, round_index: int) -> float:
    """Step size for a round; the decaying mode satisfies sum eta = inf,
    sum eta^2 < inf for any positive decay."""
    if config.lr_mode == LR_CONSTANT:
        return config.lr
    return config.lr / (1.0 + config.lr_decay * round_index)


@dataclass
class ClientRecord:
    """Persistent per-client state; params survive across rounds."""

    id: int
    spec: ModelSpec
    params: np.ndarray
    bundle: ClientDataBundle
    last_selected_round: int = -1


@dataclass
class CommLedger:
    uplink_scalars: int = 0
    downlink_scalars: int = 0

    @property
    def total_scalars(self) -> int:
        return self.uplink_scalars + self.downlink_scalars


@dataclass(frozen=True)
class CommEvent:
    kind: str  # logit_uplink | centroid_downlink | param_uplink | param_downlink
    clients: int = 1
    clusters: int = 1
    pool_rows: int = 0
    num_classes: int = 0
    n_params: int = 0


def account_comm(ledger: CommLedger, event: CommEvent) -> CommLedger:
    if event.kind == "logit_uplink":
        ledger.uplink_scalars += event.clients * event.pool_rows * event.num_classes
    elif event.kind == "centroid_downlink":
        ledger.downlink_scalars += (
            event.clients * event.clusters * event.pool_rows * event.num_classes
        )
    elif event.kind == "param_uplink":
        ledger.uplink_scalars += event.clients * event.n_params
    elif event.kind == "param_downlink":
        ledger.downlink_scalars += event.clients * event.n_params
    else:
        raise ConfigurationError(f"unknown communication event {event.kind!r}")
    return ledger


@dataclass(frozen=True)
class RoundMetrics:
    """Snapshot emitted on eval rounds: accuracy of the post-round models,
    gradient norms of the start-of-round state (the monitored quantity)."""

    round_index: int
    mean_accuracy: float
    std_accuracy: float
    grad_norm_mean: float
    grad_norm_median: float
    grad_norm_max: float
    uplink_scalars: int
    downlink_scalars: int


@dataclass
class ServerState:
    round_index: int
    stack: LogitStack
    centroids: CentroidSet | None
    selected: tuple[int, ...]


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    ledger: CommLedger
    server: ServerState | None = None
    global_params: np.ndarray | None = None
    diverged: list[tuple[int, int]] = field(default_factory=list)  # (client, round)


def sample_clients(weights: np.ndarray, m: int, rng: np.random.Generator) -> list[int]:
    """m successive draws without replacement, each proportional to the
    remaining weights; positions into the weights array, in draw order.

    Exhausted weight mass (possible when m equals the population size but
    some weights are zero) falls back to uniform over the remaining."""
    weights = np.asarray(weights, dtype=np.float64).copy()
    if m > weights.size:
        raise ConfigurationError(f"cannot select {m} of {weights.size} clients")
    if np.any(weights < 0):
        raise ConfigurationError("selection weights must be non-negative")
    chosen: list[int] = []
    for _ in range(m):
        total = weights.sum()
        if total > 0:
            pick = int(rng.choice(weights.size, p=weights / total))
        else:
            remaining = np.flatnonzero(~np.isin(np.arange(weights.size), chosen))
            pick = int(remaining[rng.integers(remaining.size)])
        chosen.append(pick)
        weights[pick] = 0.0
    return chosen


def _resolve_num_selected(config: FederationConfig, num_clients: int, num_active: int) -> int:
    if config.num_selected is not None:
        m = config.num_selected
    else:
        m = int(round(config.selected_fraction * num_clients))
    if not 1 <= m <= num_active:
        raise ConfigurationError(
            f"need 1 <= m <= {num_active} active clients, got m={m}"
        )
    return m


def _local_sgd_steps(
    record: ClientRecord,
    config: FederationConfig,
    round_index: int,
    eta: float,
    pool: PublicPool | None = None,
    sbar_rows: np.ndarray | None = None,
) -> np.ndarray:
    """tau mini-batch steps from the record's current params; the private
    and public batch streams are separate so that a lam=0 run consumes the
    same private randomness as plain local SGD."""
    rng_priv = substream(config.seed, "batch", record.id, round_index)
    lam = config.distill_weight if sbar_rows is not None else 0.0
    rng_pub = (
        substream(config.seed, "public", record.id, round_index) if lam > 0 else None
    )
    train = record.bundle.train
    w = record.params.copy()
    for step in range(config.local_iters):
        idx = minibatch(train, config.batch_size, rng_priv)
        xb, yb = train.inputs[idx], train.labels[idx]
        try:
            if lam > 0:
                pidx = minibatch(pool, config.public_batch_size, rng_pub)
                grad = grad_phi_stochastic(
                    record.spec, w, xb, yb, pool.inputs[pidx], sbar_rows[pidx], lam
                )
            else:
                grad = grad_local(record.spec, w, xb, yb)
        except DivergedClientError:
            raise
        except NumericError as exc:
            # an exploding trajectory can overflow in the forward pass one
            # step before the parameters themselves go non-finite
            raise DivergedClientError(record.id, round_index, step) from exc
        w = w - eta * grad
        if not np.all(np.isfinite(w)):
            raise DivergedClientError(record.id, round_index, step)
    return w


def client_local_round(
    record: ClientRecord,
    sbar_rows: np.ndarray,
    pool: PublicPool,
    config: FederationConfig,
    round_index: int,
) -> tuple[np.ndarray, np.ndarray]:
    """One selected client's round: tau steps against the frozen distillation
    target, then fresh logits of the updated model on the full pool."""
    if sbar_rows is not None and sbar_rows.shape != (len(pool), record.spec.out_width):
        raise ConfigurationError("distillation target must cover the full pool")
    params = _local_sgd_steps(
        record, config, round_index, lr_at(config, round_index), pool, sbar_rows
    )
    try:
        logits = forward_logits(record.spec, params, pool.inputs)
    except NumericError as exc:
        raise DivergedClientError(record.id, round_index, config.local_iters) from exc
    return params, logits


def grad_norm_monitor(
    record: ClientRecord,
    pool: PublicPool | None,
    sbar_rows: np.ndarray | None,
    lam: float,
) -> float:
    """l2 norm of the deterministic full-batch objective gradient (full
    train split, full public pool)."""
    train = record.bundle.train
    if lam > 0 and sbar_rows is not None:
        grad = grad_phi_stochastic(
            record.spec,
            record.params,
            train.inputs,
            train.labels,
            pool.inputs,
            sbar_rows,
            lam,
        )
    else:
        grad = grad_local(record.spec, record.params, train.inputs, train.labels)
    return float(np.linalg.norm(grad))


def accuracy_on(spec: ModelSpec, params: np.ndarray, dataset) -> float:
    """Argmax-class accuracy."""
    probs = forward_logits(spec, params, dataset.inputs)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


def evaluate_clients(records: list[ClientRecord]) -> np.ndarray:
    """Per-client test accuracy of each client's own model (active clients)."""
    return np.array(
        [accuracy_on(r.spec, r.params, r.bundle.test) for r in records if r.bundle.active]
    )


def _metrics_row(round_index, accuracies, grad_norms, ledger) -> RoundMetrics:
    norms = np.asarray(grad_norms, dtype=np.float64)
    return RoundMetrics(
        round_index=round_index,
        mean_accuracy=float(accuracies.mean()),
        std_accuracy=float(accuracies.std()),
        grad_norm_mean=float(norms.mean()),
        grad_norm_median=float(np.median(norms)),
        grad_norm_max=float(norms.max()),
        uplink_scalars=ledger.uplink_scalars,
        downlink_scalars=ledger.downlink_scalars,
    )


def _run_selected(records, worker, parallel: bool) -> dict[int, object]:
    """Run `worker` over records (possibly in threads); exceptions from
    diverging clients are captured as values. Results keyed by client id."""

    def safe(rec):
        try:
            return worker(rec)
        except DivergedClientError as exc:
            return exc

    if parallel and len(records) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(records))) as pool:
            outputs = list(pool.map(safe, records))
    else:
        outputs = [safe(rec) for rec in records]
    return {rec.id: out for rec, out in zip(records, outputs)}


def run_perfed_ckt(
    records: list[ClientRecord],
    pool: PublicPool,
    config: FederationConfig,
) -> RunResult:
    """The clustered co-distillation loop.

    Per round: cluster the previous round's uploaded logits, sample clients
    by data share, send centroids (charged downlink), let each selected
    client pick its nearest centroid as the frozen distillation target and
    run tau local steps, then upload fresh full-pool logits (charged uplink).
    Round 0 bootstraps the stack from the initial models of a bootstrap
    sample, with no communication charged.
    """
    active = [r for r in records if r.bundle.active]
    if not active:
        raise ConfigurationError("no active clients")
    widths = {r.spec.out_width for r in active}
    if len(widths) != 1:
        raise ConfigurationError("all clients must share the output width")
    n_classes = widths.pop()
    weights = np.array([r.bundle.p_k for r in active])
    by_id = {r.id: r for r in active}
    m = _resolve_num_selected(config, len(records), len(active))
    if config.num_clusters > m:
        raise ConfigurationError("num_clusters must not exceed selected clients")
    pool_rows = len(pool)

    boot = sample_clients(weights, m, substream(config.seed, "select", "bootstrap"))
    stack = stack_from_logits(
        {
            active[p].id: forward_logits(active[p].spec, active[p].params, pool.inputs)
            for p in boot
        }
    )

    ledger = CommLedger()
    metrics: list[RoundMetrics] = []
    diverged: list[tuple[int, int]] = []
    server = ServerState(round_index=-1, stack=stack, centroids=None, selected=())

    for t in range(config.rounds):
        c_eff = min(config.num_clusters, len(stack))
        centroids, _ = cmeans_fit(
            stack,
            c_eff,
            max_iters=config.kmeans_max_iters,
            tol=config.kmeans_tol,
            seed=derive_seed(config.seed, "cluster-seed", t),
        )
        positions = sample_clients(weights, m, substream(config.seed, "select", t))
        selected = sorted(active[p].id for p in positions)
        account_comm(
            ledger,
            CommEvent(
                "centroid_downlink",
                clients=len(selected),
                clusters=c_eff,
                pool_rows=pool_rows,
                num_classes=n_classes,
            ),
        )

        eval_round = t % config.eval_interval == 0 or t == config.rounds - 1
        if eval_round:
            grad_norms = [
                _monitor_with_centroids(rec, pool, centroids, config) for rec in active
            ]

        def worker(rec, _centroids=centroids, _t=t):
            own = forward_logits(rec.spec, rec.params, pool.inputs)
            pick = assign_nearest(own.ravel(), _centroids)
            sbar = _centroids.centroids[pick].reshape(pool_rows, rec.spec.out_width)
            return client_local_round(rec, sbar, pool, config, _t)

        outcomes = _run_selected([by_id[i] for i in selected], worker, config.parallel)
        uploaded: dict[int, np.ndarray] = {}
        for cid in selected:
            rec = by_id[cid]
            out = outcomes[cid]
            if isinstance(out, DivergedClientError):
                diverged.append((cid, t))
                rec.params = init_params(rec.spec, derive_seed(config.seed, "reinit", cid, t))
            else:
                rec.params, logits = out
                rec.last_selected_round = t
                uploaded[cid] = logits
        account_comm(
            ledger,
            CommEvent(
                "logit_uplink",
                clients=len(uploaded),
                pool_rows=pool_rows,
                num_classes=n_classes,
            ),
        )
        if uploaded:
            stack = stack_from_logits(uploaded)
        server = ServerState(
            round_index=t, stack=stack, centroids=centroids, selected=tuple(selected)
        )

        if eval_round:
            metrics.append(_metrics_row(t, evaluate_clients(active), grad_norms, ledger))

    return RunResult(metrics=metrics, ledger=ledger, server=server, diverged=diverged)


def _monitor_with_centroids(rec, pool, centroids, config) -> float:
    own = forward_logits(rec.spec, rec.params, pool.inputs)
    pick = assign_nearest(own.ravel(), centroids)
    sbar = centroids.centroids[pick].reshape(len(pool), rec.spec.out_width)
    return grad_norm_monitor(rec, pool, sbar, config.distill_weight)


def run_fedavg(records: list[ClientRecord], config: FederationConfig) -> RunResult:
    """Weighted parameter averaging over selected clients each round; needs a
    homogeneous model spec. Ledger counts params down and up per selected
    client per round."""
    active = [r for r in records if r.bundle.active]
    if not active:
        raise ConfigurationError("no active clients")
    specs = {r.spec for r in active}
    if len(specs) != 1:
        raise ConfigurationError("fedavg requires a homogeneous model spec")
    spec = specs.pop()
    n_par = param_count(spec)
    weights = np.array([r.bundle.p_k for r in active])
    by_id = {r.id: r for r in active}
    m = _resolve_num_selected(config, len(records), len(active))

    if len(active) == 1:
        global_params = active[0].params.copy()
    else:
        global_params = np.zeros(n_par)
        for r, w in zip(active, weights):
            global_params = global_params + w * r.params

    ledger = CommLedger()
    metrics: list[RoundMetrics] = []
    diverged: list[tuple[int, int]] = []

    for t in range(config.rounds):
        positions = sample_clients(weights, m, substream(config.seed, "select", t))
        selected = sorted(active[p].id for p in positions)
        account_comm(ledger, CommEvent("param_downlink", clients=len(selected), n_params=n_par))

        def worker(rec, _t=t):
            staged = ClientRecord(
                id=rec.id, spec=rec.spec, params=global_params, bundle=rec.bundle
            )
            return _local_sgd_steps(staged, config, _t, lr_at(config, _t))

        outcomes = _run_selected([by_id[i] for i in selected], worker, config.parallel)
        returned: list[tuple[float, np.ndarray]] = []
        for cid in selected:
            out = outcomes[cid]
            if isinstance(out, DivergedClientError):
                diverged.append((cid, t))
            else:
                returned.append((by_id[cid].bundle.p_k, out))
        account_comm(ledger, CommEvent("param_uplink", clients=len(returned), n_params=n_par))
        if len(returned) == 1:
            global_params = returned[0][1]
        elif returned:
            total = sum(p for p, _ in returned)
            mixed = np.zeros(n_par)
            for p, w in returned:
                mixed = mixed + (p / total) * w
            global_params = mixed

        if t % config.eval_interval == 0 or t == config.rounds - 1:
            accs = np.array([accuracy_on(spec, global_params, r.bundle.test) for r in active])
            staged = [
                ClientRecord(id=r.id, spec=spec, params=global_params, bundle=r.bundle)
                for r in active
            ]
            norms = [grad_norm_monitor(s, None, None, 0.0) for s in staged]
            metrics.append(_metrics_row(t, accs, norms, ledger))

    return RunResult(metrics=metrics, ledger=ledger, global_params=global_params, diverged=diverged)


def run_local_only(records: list[ClientRecord], config: FederationConfig) -> RunResult:
    """Every active client runs rounds x tau steps on its own split; the
    communication ledger never moves."""
    active = [r for r in records if r.bundle.active]
    if not active:
        raise ConfigurationError("no active clients")
    ledger = CommLedger()
    metrics: list[RoundMetrics] = []
    diverged: list[tuple[int, int]] = []
    for t in range(config.rounds):

        def worker(rec, _t=t):
            return _local_sgd_steps(rec, config, _t, lr_at(config, _t))

        outcomes = _run_selected(active, worker, config.parallel)
        for rec in active:
            out = outcomes[rec.id]
            if isinstance(out, DivergedClientError):
                diverged.append((rec.id, t))
                rec.params = init_params(rec.spec, derive_seed(config.seed, "reinit", rec.id, t))
            else:
                rec.params = out
        if t % config.eval_interval == 0 or t == config.rounds - 1:
            accs = evaluate_clients(active)
            norms = [grad_norm_monitor(r, None, None, 0.0) for r in active]
            metrics.append(_metrics_row(t, accs, norms, ledger))
    return RunResult(metrics=metrics, ledger=ledger, diverged=diverged)
