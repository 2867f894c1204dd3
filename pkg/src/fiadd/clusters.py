"""Per-class K-means subclustering and neighborhood batch sampling.

A ClusterIndex is rebuilt from current projections once per epoch; batches
pair one seed subcluster with M nearby imposter subclusters of other
classes. All choices are deterministic given the caller's generator, with
ties broken by ascending (class, subcluster) id.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import Dataset


class ClusterError(ValueError):
    """Invalid clustering request (for example, too few eligible imposters)."""


_build_counter = itertools.count(1)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = _sq_dists(points, centroids)
    assign = np.argmin(d2, axis=1)
    # keep every cluster populated: move the worst-fit point into each empty one
    own = d2[np.arange(len(points)), assign].copy()
    for k in range(centroids.shape[0]):
        if not np.any(assign == k):
            j = int(np.argmax(own))
            assign[j] = k
            own[j] = -np.inf
    return assign


def _means(points: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    cent = np.empty((k, points.shape[1]))
    for j in range(k):
        cent[j] = points[assign == j].mean(axis=0)
    return cent


def kmeans(
    points: np.ndarray | list,
    k: int,
    max_iter: int = 100,
    seed: int = 0,
    wcss_history: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops when assignments no longer change or after max_iter passes.
    With fewer points than k, every point becomes its own singleton
    cluster. Returns (assignments, centroids); centroids are the means of
    their assigned points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ClusterError("kmeans needs a non-empty 2-d point array")
    if k < 1 or max_iter < 1:
        raise ClusterError("k and max_iter must be positive")
    n = points.shape[0]
    if n <= k:
        if wcss_history is not None:
            wcss_history.append(0.0)
        return np.arange(n), points.copy()

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    assign = _assign(points, centroids)
    for _ in range(max_iter):
        centroids = _means(points, assign, k)
        if wcss_history is not None:
            d2 = _sq_dists(points, centroids)
            wcss_history.append(float(d2[np.arange(n), assign].sum()))
        new_assign = _assign(points, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, _means(points, assign, k)


@dataclass
class ClusterIndex:
    """Per-class subcluster structure over projected training points.

    assignments map sample id to (class, subcluster); centroids, sizes and
    members are keyed by the same pair. loss_stats holds a running mean of
    recent per-sample losses and is the one field the training loop is
    allowed to update in place.
    """

    assignments: dict[str, tuple[int, int]]
    centroids: dict[tuple[int, int], np.ndarray]
    sizes: dict[tuple[int, int], int]
    loss_stats: dict[tuple[int, int], float]
    members: dict[tuple[int, int], list[str]]
    build_id: int = 0

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.centroids)

    def update_loss_stats(self, cluster: tuple[int, int], batch_mean_loss: float, decay: float = 0.9) -> None:
        self.loss_stats[cluster] = decay * self.loss_stats[cluster] + (1.0 - decay) * float(batch_mean_loss)


def build_index(
    projected_train: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    k: int,
    seed: int,
    max_iter: int = 100,
) -> ClusterIndex:
    """Run kmeans independently inside each class and assemble the index.

    loss_stats start uniform; build_id increments on every build so
    rebuilds are observable.
    """
    ids = list(projected_train)
    if not ids:
        raise ClusterError("cannot build an index over zero samples")
    by_class: dict[int, list[str]] = {}
    for sid in ids:
        by_class.setdefault(labels[sid], []).append(sid)

    rng = np.random.default_rng(seed)
    assignments: dict[str, tuple[int, int]] = {}
    centroids: dict[tuple[int, int], np.ndarray] = {}
    sizes: dict[tuple[int, int], int] = {}
    members: dict[tuple[int, int], list[str]] = {}
    for cls in sorted(by_class):
        cls_ids = by_class[cls]
        pts = np.stack([np.asarray(projected_train[sid], dtype=np.float64) for sid in cls_ids])
        assign, cents = kmeans(pts, k, max_iter=max_iter, seed=int(rng.integers(2**63)))
        for sub in range(cents.shape[0]):
            key = (cls, sub)
            centroids[key] = cents[sub]
            members[key] = [cls_ids[i] for i in np.flatnonzero(assign == sub)]
            sizes[key] = len(members[key])
        for i, sid in enumerate(cls_ids):
            assignments[sid] = (cls, int(assign[i]))
    loss_stats = {key: 1.0 for key in sorted(centroids)}
    return ClusterIndex(assignments, centroids, sizes, loss_stats, members, build_id=next(_build_counter))


def dump_index(index: ClusterIndex, path: str | Path) -> None:
    """Line-delimited index dump: one record per subcluster."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as out:
        for key in index.keys():
            rec = {
                "class": key[0],
                "subcluster": key[1],
                "centroid": index.centroids[key].tolist(),
                "size": index.sizes[key],
                "loss_stat": index.loss_stats[key],
                "members": index.members[key],
            }
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_index(path: str | Path) -> ClusterIndex:
    centroids: dict[tuple[int, int], np.ndarray] = {}
    sizes: dict[tuple[int, int], int] = {}
    loss_stats: dict[tuple[int, int], float] = {}
    members: dict[tuple[int, int], list[str]] = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        rec = json.loads(ln)
        key = (int(rec["class"]), int(rec["subcluster"]))
        centroids[key] = np.array(rec["centroid"], dtype=np.float64)
        sizes[key] = int(rec["size"])
        loss_stats[key] = float(rec["loss_stat"])
        members[key] = list(rec["members"])
    assignments = {sid: key for key, mem in members.items() for sid in mem}
    return ClusterIndex(assignments, centroids, sizes, loss_stats, members)


def select_seed(
    index: ClusterIndex,
    epoch: int,
    warmup_epochs: int,
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Pick the batch's seed subcluster.

    During warmup the choice is uniform over all subclusters. Afterwards it
    is restricted to the class with the highest mean loss_stats (ties to
    the lowest class id), sampling that class's subclusters proportionally
    to their loss_stats.
    """
    keys = index.keys()
    if not keys:
        raise ClusterError("empty index")
    if epoch < warmup_epochs:
        return keys[int(rng.integers(len(keys)))]

    class_means: dict[int, float] = {}
    for cls in sorted({c for c, _ in keys}):
        stats = [index.loss_stats[key] for key in keys if key[0] == cls]
        class_means[cls] = float(np.mean(stats))
    best_cls = max(sorted(class_means), key=lambda c: class_means[c])
    cls_keys = [key for key in keys if key[0] == best_cls]
    weights = np.array([index.loss_stats[key] for key in cls_keys], dtype=np.float64)
    if weights.sum() <= 0.0:
        weights = np.ones_like(weights)
    return cls_keys[int(rng.choice(len(cls_keys), p=weights / weights.sum()))]


def select_imposters(index: ClusterIndex, seed_cluster: tuple[int, int], m: int) -> list[tuple[int, int]]:
    """The m other-class subclusters nearest (squared L2) to the seed centroid."""
    seed_centroid = index.centroids[seed_cluster]
    eligible = [key for key in index.keys() if key[0] != seed_cluster[0]]
    if len(eligible) < m:
        raise ClusterError(f"need {m} imposter clusters, only {len(eligible)} eligible")
    ranked = sorted(
        eligible,
        key=lambda key: (float(np.sum((index.centroids[key] - seed_centroid) ** 2)), key[0], key[1]),
    )
    return ranked[:m]


@dataclass
class NeighborhoodBatch:
    """One seed cluster plus M imposter clusters, D sampled points each.

    raw holds the sampled input vectors; points their projections under
    whatever head produced them (reproject to refresh). Implied vectors
    ride along for sampled points that carry them, indexed into the
    cluster's point rows by implied_idx.
    """

    seed: tuple[int, int]
    imposters: list[tuple[int, int]]
    cluster_ids: list[tuple[int, int]]
    classes: list[int]
    sample_ids: list[list[str]]
    points: list[np.ndarray]
    implied_idx: list[np.ndarray]
    implied_points: list[np.ndarray | None]
    raw: list[np.ndarray] | None = None
    implied_raw: list[np.ndarray | None] | None = None

    @property
    def n_points(self) -> int:
        return int(sum(p.shape[0] for p in self.points))

    @staticmethod
    def from_points(
        points: list[np.ndarray],
        classes: list[int],
        implied_points: list[np.ndarray | None] | None = None,
        implied_idx: list[np.ndarray] | None = None,
    ) -> "NeighborhoodBatch":
        """Assemble a purely numeric batch (tests and gradient checks)."""
        n = len(points)
        points = [np.asarray(p, dtype=np.float64) for p in points]
        if implied_points is None:
            implied_points = [None] * n
        implied_points = [None if ip is None else np.asarray(ip, dtype=np.float64) for ip in implied_points]
        if implied_idx is None:
            implied_idx = [
                np.arange(ip.shape[0]) if ip is not None else np.empty(0, dtype=int)
                for ip in implied_points
            ]
        ids = [(classes[i], 0) for i in range(n)]
        sample_ids = [[f"p{i}-{j}" for j in range(points[i].shape[0])] for i in range(n)]
        return NeighborhoodBatch(
            seed=ids[0], imposters=ids[1:], cluster_ids=ids, classes=list(classes),
            sample_ids=sample_ids, points=points, implied_idx=list(implied_idx),
            implied_points=implied_points,
        )

    def reprojected(self, project: Callable[[np.ndarray], np.ndarray]) -> "NeighborhoodBatch":
        """Refresh projected points from the stored raw vectors."""
        if self.raw is None:
            raise ValueError("batch carries no raw vectors to reproject")
        points = [project(r) for r in self.raw]
        implied_points = [
            None if ir is None or ir.shape[0] == 0 else project(ir)
            for ir in (self.implied_raw or [None] * len(self.raw))
        ]
        return replace(self, points=points, implied_points=implied_points)


def sample_batch(
    index: ClusterIndex,
    seed_cluster: tuple[int, int],
    imposters: list[tuple[int, int]],
    d: int,
    rng: np.random.Generator,
    dataset: Dataset,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> NeighborhoodBatch:
    """Draw D points per selected cluster, pairing implied vectors along.

    Sampling is without replacement when the cluster has at least D
    members, with replacement otherwise. points holds project(raw) when a
    projection is supplied, raw copies otherwise.
    """
    if d < 1:
        raise ClusterError("d must be positive")
    by_id = {s.id: s for s in dataset.samples}
    cluster_ids = [seed_cluster] + list(imposters)
    sample_ids: list[list[str]] = []
    raw: list[np.ndarray] = []
    implied_idx: list[np.ndarray] = []
    implied_raw: list[np.ndarray | None] = []
    for key in cluster_ids:
        ids = index.members[key]
        if not ids:
            raise ClusterError(f"cluster {key} is empty")
        chosen_idx = rng.choice(len(ids), size=d, replace=len(ids) < d)
        chosen = [ids[int(i)] for i in np.atleast_1d(chosen_idx)]
        sample_ids.append(chosen)
        raw.append(np.stack([by_id[sid].vector for sid in chosen]))
        with_implied = [j for j, sid in enumerate(chosen) if by_id[sid].implied_vector is not None]
        implied_idx.append(np.array(with_implied, dtype=int))
        if with_implied:
            implied_raw.append(np.stack([by_id[chosen[j]].implied_vector for j in with_implied]))
        else:
            implied_raw.append(None)
    batch = NeighborhoodBatch(
        seed=seed_cluster, imposters=list(imposters), cluster_ids=cluster_ids,
        classes=[key[0] for key in cluster_ids], sample_ids=sample_ids,
        points=[r.copy() for r in raw], implied_idx=implied_idx,
        implied_points=[None if ir is None else ir.copy() for ir in implied_raw],
        raw=raw, implied_raw=implied_raw,
    )
    return batch if project is None else batch.reprojected(project)
