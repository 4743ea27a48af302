"""Lloyd's c-means over flattened client logit matrices, with k-means++
seeding and deterministic tie-breaking."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .rng import substream

_CENTROID_MAGIC = b"FKCS"


@dataclass(frozen=True)
class LogitStack:
    """Flattened per-client logit vectors, one row per client."""

    client_ids: tuple[int, ...]
    vectors: np.ndarray  # (m, L)

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.client_ids):
            raise ConfigurationError("one vector row per client id required")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "client_ids", tuple(int(c) for c in self.client_ids))

    def __len__(self) -> int:
        return self.vectors.shape[0]


def stack_from_logits(logits_by_client: dict[int, np.ndarray]) -> LogitStack:
    """Build a stack from per-client (|P|, N) logit matrices, flattened
    row-major; rows ordered by client id for determinism."""
    ids = sorted(logits_by_client)
    vectors = np.stack([logits_by_client[i].ravel() for i in ids]) if ids else np.empty((0, 0))
    return LogitStack(client_ids=tuple(ids), vectors=vectors)


@dataclass(frozen=True)
class CentroidSet:
    centroids: np.ndarray  # (c, L)
    member_counts: tuple[int, ...]
    objective_trace: tuple[float, ...] = ()  # per-iteration Lloyd objective

    def __post_init__(self):
        centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] != len(self.member_counts):
            raise ConfigurationError("one member count per centroid required")
        object.__setattr__(self, "centroids", centroids)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    by_client: dict[int, int]

    def __getitem__(self, client_id: int) -> int:
        return self.by_client[client_id]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(m, c) squared euclidean distances via the expanded form."""
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centroids.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp_init(points: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = _sq_dists(points, points[chosen[-1]][None, :])[:, 0]
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0.0:
            nxt = int(rng.integers(m))  # all points coincide with a centroid
        else:
            nxt = int(rng.choice(m, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[nxt][None, :])[:, 0])
    return points[chosen].copy()


def cmeans_fit(
    stack: LogitStack,
    c: int,
    max_iters: int = 100,
    tol: float = 1e-8,
    seed: int = 0,
) -> tuple[CentroidSet, ClusterAssignment]:
    """Lloyd's iterations from k-means++ seeding.

    Stops when the largest centroid shift is <= tol or after max_iters.
    Empty clusters are repaired by reassigning the point farthest from its
    own centroid (drawn from a cluster with at least two members), which
    keeps the objective non-increasing across iterations.
    """
    m = len(stack)
    if not 1 <= c <= m:
        raise ConfigurationError(f"need 1 <= c <= {m}, got c={c}")
    if max_iters < 1:
        raise ConfigurationError("max_iters must be >= 1")
    points = stack.vectors
    rng = substream(seed, "cmeans")
    centroids = _kmeanspp_init(points, c, rng)

    assign = np.zeros(m, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        assign = d2.argmin(axis=1)  # ties resolve to the lowest index
        counts = np.bincount(assign, minlength=c)
        for j in np.flatnonzero(counts == 0):
            own = d2[np.arange(m), assign]
            donors = counts[assign] >= 2
            candidates = np.flatnonzero(donors)
            far = candidates[np.argmax(own[candidates])]
            counts[assign[far]] -= 1
            assign[far] = j
            counts[j] += 1
        new_centroids = np.empty_like(centroids)
        for j in range(c):
            new_centroids[j] = points[assign == j].mean(axis=0)
        move = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        trace.append(float(_objective(points, centroids, assign)))
        if move <= tol:
            break

    counts = np.bincount(assign, minlength=c)
    centroid_set = CentroidSet(
        centroids=centroids,
        member_counts=tuple(int(x) for x in counts),
        objective_trace=tuple(trace),
    )
    mapping = {cid: int(assign[i]) for i, cid in enumerate(stack.client_ids)}
    return centroid_set, ClusterAssignment(by_client=mapping)


def assign_nearest(logit_vec: np.ndarray, centroids: CentroidSet) -> int:
    """Index of the l2-nearest centroid; ties break to the lowest index."""
    vec = np.asarray(logit_vec, dtype=np.float64).ravel()
    if vec.shape[0] != centroids.centroids.shape[1]:
        raise ConfigurationError("logit vector length does not match centroids")
    d2 = _sq_dists(vec[None, :], centroids.centroids)[0]
    return int(d2.argmin())


def _objective(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diffs = points - centroids[assign]
    return float(np.einsum("ij,ij->", diffs, diffs))


def kmeans_objective(
    stack: LogitStack, centroids: CentroidSet, assignment: ClusterAssignment
) -> float:
    """Sum of squared distances from each vector to its assigned centroid."""
    assign = np.array([assignment[cid] for cid in stack.client_ids], dtype=np.int64)
    return _objective(stack.vectors, centroids.centroids, assign)


def save_centroids(path, centroids: CentroidSet) -> None:
    """Binary dump in the parameter-checkpoint format: 16-byte header
    (magic, cluster count, total f64 count) then little-endian values."""
    values = np.ascontiguousarray(centroids.centroids, dtype="<f8")
    header = _CENTROID_MAGIC + struct.pack("<IQ", centroids.num_clusters, values.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def load_centroids(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _CENTROID_MAGIC:
            raise ConfigurationError(f"{path} is not a centroid dump")
        c, count = struct.unpack("<IQ", header[4:])
        values = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if values.size != count or (c and count % c):
            raise ConfigurationError(f"{path} is truncated")
    return values.reshape(c, count // c).astype(np.float64)
