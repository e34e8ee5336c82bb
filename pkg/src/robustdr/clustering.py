"""K-Means over query embeddings, refreshed at episode boundaries.

Embeddings are L2-normalized before clustering by default (dot-product
similarity is unbounded under centroid updates, so clustering runs as squared
Euclidean on the unit sphere); retrieval scoring elsewhere stays unnormalized.
A flag switches to raw-Euclidean K-Means for sensitivity checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EmbeddingMatrix
from .errors import InvariantError

CLUSTER_FORMAT = "robustdr-clusters"
CLUSTER_VERSION = 1


@dataclass
class ClusterModel:
    n_clusters: int
    centroids: np.ndarray  # [K, E]
    assignment: dict[str, int]
    objective: float
    normalized: bool
    objective_history: list[float] = field(default_factory=list)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0.0, norms, 1.0)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clamp tiny negatives from cancellation.
    d = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeanspp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = _sq_dists(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = float(closest.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a centroid
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[j : j + 1]).ravel())
    return centroids


def kmeans_fit(
    embeddings: EmbeddingMatrix,
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 100,
    normalize: bool = True,
) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding; deterministic given the seed.

    The objective (sum of squared distances to assigned centroids, under the
    configured metric) is checked to be non-increasing every iteration; empty
    clusters are repaired by reseeding to the point farthest from its centroid.
    """
    n = len(embeddings)
    if n == 0:
        raise ValueError("cannot cluster an empty embedding matrix")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < n_clusters:
        raise ValueError(f"need at least {n_clusters} points for {n_clusters} clusters, got {n}")

    x = embeddings.matrix.astype(np.float64, copy=True)
    if normalize:
        x = _normalize_rows(x)

    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeanspp_seed(x, n_clusters, rng)

    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        dists = _sq_dists(x, centroids)
        new_labels = np.argmin(dists, axis=1)  # ties -> lowest cluster index
        point_d = dists[np.arange(n), new_labels]

        # Repair empty clusters one at a time by reseeding to the farthest
        # point whose source cluster keeps >= 1 member after the steal.
        while True:
            counts = np.bincount(new_labels, minlength=n_clusters)
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0:
                break
            k = int(empty[0])
            movable = counts[new_labels] >= 2
            far = int(np.argmax(np.where(movable, point_d, -1.0)))
            centroids[k] = x[far]
            new_labels[far] = k
            point_d[far] = 0.0

        objective = float(point_d.sum())
        if history and objective > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise InvariantError("k-means objective increased between iterations")
        history.append(objective)

        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=n_clusters)
        centroids = sums / counts[:, None]

    assignment = {doc_id: int(label) for doc_id, label in zip(embeddings.ids, labels)}
    return ClusterModel(
        n_clusters=n_clusters,
        centroids=centroids,
        assignment=assignment,
        objective=history[-1],
        normalized=normalize,
        objective_history=history,
    )


def assign(model: ClusterModel, embeddings: EmbeddingMatrix) -> dict[str, int]:
    """Map each row to its nearest centroid; ties break to the lowest index."""
    if embeddings.width != model.centroids.shape[1]:
        raise ValueError(
            f"embedding width {embeddings.width} does not match centroid width "
            f"{model.centroids.shape[1]}"
        )
    x = embeddings.matrix.astype(np.float64, copy=True)
    if model.normalized:
        x = _normalize_rows(x)
    labels = np.argmin(_sq_dists(x, model.centroids), axis=1)
    return {item_id: int(label) for item_id, label in zip(embeddings.ids, labels)}


def save_cluster_model(model: ClusterModel, path: str | Path) -> None:
    """One JSON header line, then the raw little-endian float64 centroid block."""
    header = {
        "format": CLUSTER_FORMAT,
        "version": CLUSTER_VERSION,
        "n_clusters": model.n_clusters,
        "width": int(model.centroids.shape[1]),
        "normalized": model.normalized,
        "objective": model.objective,
        "assignment": model.assignment,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.centroids, dtype="<f8").tobytes())
    tmp.replace(path)


def load_cluster_model(path: str | Path) -> ClusterModel:
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if header.get("format") != CLUSTER_FORMAT:
        raise ValueError(f"{path}: not a {CLUSTER_FORMAT} file")
    centroids = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    centroids = centroids.reshape(header["n_clusters"], header["width"])
    return ClusterModel(
        n_clusters=header["n_clusters"],
        centroids=centroids,
        assignment={k: int(v) for k, v in header["assignment"].items()},
        objective=float(header["objective"]),
        normalized=bool(header["normalized"]),
    )
