"""Latent-space diagnostics: linkage distances, silhouettes, relative
distance scores, and latent dumps for external plotting.

Group distances come in two flavors: ACLD compares group centers, ALD
averages over all cross-group pairs. Reports over the three-class hate
taxonomy use the L1 metric; loss-space diagnostics default to L2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .clusters import ClusterIndex, kmeans
from .model import TrainedModel, project

METRICS = ("l1", "l2", "sql2")


def _pairwise(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Distance matrix between row sets a (n, d) and b (m, d)."""
    diff = a[:, None, :] - b[None, :, :]
    if metric == "l1":
        return np.abs(diff).sum(axis=2)
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    return sq if metric == "sql2" else np.sqrt(sq)


@dataclass
class LabeledPointSet:
    ids: list[str]
    points: np.ndarray          # (n, d)
    groups: np.ndarray          # (n,) group ids
    metric: str = "l2"

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        self.groups = np.asarray(self.groups)
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.points.ndim != 2 or self.points.shape[0] != self.groups.shape[0]:
            raise ValueError("points must be (n, d) with one group id per point")

    def group_ids(self) -> list:
        return sorted(set(self.groups.tolist()))

    def of(self, group) -> np.ndarray:
        mask = self.groups == group
        if not np.any(mask):
            raise KeyError(f"unknown group {group!r}")
        return self.points[mask]


def acld(pset: LabeledPointSet, a, b, center: str = "mean") -> float:
    """Distance between the two groups' centers (mean or median)."""
    if center not in ("mean", "median"):
        raise ValueError("center must be 'mean' or 'median'")
    reduce = np.mean if center == "mean" else np.median
    ca = reduce(pset.of(a), axis=0)
    cb = reduce(pset.of(b), axis=0)
    return float(_pairwise(ca[None, :], cb[None, :], pset.metric)[0, 0])


def ald(pset: LabeledPointSet, a, b) -> float:
    """Average linkage: mean distance over all cross-group point pairs."""
    return float(_pairwise(pset.of(a), pset.of(b), pset.metric).mean())


def silhouette(pset: LabeledPointSet) -> float:
    """Mean per-point silhouette (q - p) / max(p, q) in [-1, 1].

    p is the mean distance to the point's own group (others excluded),
    q the smallest mean distance to another group. Points in singleton
    groups, and points where both p and q vanish, score 0.
    """
    gids = pset.group_ids()
    if len(gids) < 2:
        raise ValueError("silhouette needs at least two groups")
    members = {g: pset.of(g) for g in gids}
    scores: list[float] = []
    for g in gids:
        own = members[g]
        n_own = own.shape[0]
        for i in range(n_own):
            x = own[i]
            if n_own < 2:
                scores.append(0.0)
                continue
            dist_own = _pairwise(x[None, :], own, pset.metric)[0]
            p = float((dist_own.sum()) / (n_own - 1))
            q = min(
                float(_pairwise(x[None, :], members[h], pset.metric)[0].mean())
                for h in gids if h != g
            )
            denom = max(p, q)
            scores.append(0.0 if denom == 0.0 else (q - p) / denom)
    return float(np.mean(scores))


def relative_explicit_distance(
    implicit_points: np.ndarray,
    nonhate_centers: np.ndarray,
    explicit_centers: np.ndarray,
) -> np.ndarray:
    """Per-point normalized closeness to the explicit side, in [0, 1].

    score = d_exp / (d_exp + d_non) with d_* the mean L1 distance to the
    respective center set; below 0.5 means closer to explicit. An
    all-zero denominator scores 0.5.
    """
    implicit_points = np.atleast_2d(np.asarray(implicit_points, dtype=np.float64))
    if len(nonhate_centers) == 0 or len(explicit_centers) == 0:
        raise ValueError("both center sets must be non-empty")
    d_exp = _pairwise(implicit_points, np.atleast_2d(explicit_centers), "l1").mean(axis=1)
    d_non = _pairwise(implicit_points, np.atleast_2d(nonhate_centers), "l1").mean(axis=1)
    total = d_exp + d_non
    return np.where(total == 0.0, 0.5, d_exp / np.where(total == 0.0, 1.0, total))


MOTIVATION_COLUMNS = ("ALD N-E", "ALD N-I", "ACLD N-E", "ACLD N-I")


def _three_class_roles(ds: Dataset) -> tuple[int, int, int]:
    """(non_hate, explicit, implicit) labels for a three-class dataset."""
    if ds.n_classes != 3:
        raise ValueError("the motivation report needs a three-class taxonomy")
    implicit = sorted(ds.implicit_labels)[0] if ds.implicit_labels else 2
    non_hate = 0 if implicit != 0 else 1
    explicit = next(c for c in range(3) if c not in (non_hate, implicit))
    return non_hate, explicit, implicit


def motivation_report(
    ds: Dataset,
    embedding_source: str = "raw",
    model: TrainedModel | None = None,
) -> dict[str, float]:
    """ALD and ACLD between non-hate/explicit and non-hate/implicit under L1."""
    if embedding_source not in ("raw", "projected"):
        raise ValueError("embedding_source must be 'raw' or 'projected'")
    non_hate, explicit, implicit = _three_class_roles(ds)
    pts = ds.vectors()
    if embedding_source == "projected":
        if model is None:
            raise ValueError("projected source requires a trained model")
        pts = project(model.projection, pts)
    labels = ds.labels()
    for role, cls in (("non-hate", non_hate), ("explicit", explicit), ("implicit", implicit)):
        if not np.any(labels == cls):
            raise ValueError(f"dataset is missing the {role} class (label {cls})")
    pset = LabeledPointSet(ds.ids(), pts, labels, metric="l1")
    return {
        "ALD N-E": ald(pset, non_hate, explicit),
        "ALD N-I": ald(pset, non_hate, implicit),
        "ACLD N-E": acld(pset, non_hate, explicit),
        "ACLD N-I": acld(pset, non_hate, implicit),
    }


def implicit_implied_silhouette(model: TrainedModel, ds: Dataset, metric: str = "l2") -> float:
    """Silhouette between implicit sample projections and the projections
    of their implied counterparts; lower means the two spaces sit closer."""
    implicit = [s for s in ds.samples if s.implied_vector is not None]
    if not implicit:
        raise ValueError("dataset carries no implied vectors")
    surface = project(model.projection, np.stack([s.vector for s in implicit]))
    implied = project(model.projection, np.stack([s.implied_vector for s in implicit]))
    pts = np.concatenate([surface, implied])
    groups = np.array([0] * len(implicit) + [1] * len(implicit))
    ids = [s.id for s in implicit] + [s.id + "~" for s in implicit]
    return silhouette(LabeledPointSet(ids, pts, groups, metric=metric))


def subcluster_silhouettes(
    model: TrainedModel,
    ds: Dataset,
    index: ClusterIndex | None = None,
    metric: str = "l2",
) -> dict[int, float]:
    """Per-class silhouette of that class's subcluster assignment."""
    index = index if index is not None else model.final_index
    latent = {s.id: project(model.projection, s.vector) for s in ds.samples if s.id in index.assignments}
    out: dict[int, float] = {}
    for cls in sorted({key[0] for key in index.keys()}):
        ids = [sid for sid, key in index.assignments.items() if key[0] == cls and sid in latent]
        subs = np.array([index.assignments[sid][1] for sid in ids])
        if len(set(subs.tolist())) < 2:
            out[cls] = 0.0
            continue
        pts = np.stack([latent[sid] for sid in ids])
        out[cls] = silhouette(LabeledPointSet(ids, pts, subs, metric=metric))
    return out


def error_analysis_scores(
    model: TrainedModel,
    ds: Dataset,
    k: int = 3,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Relative position of implicit latents between non-hate and explicit
    local density centers (kmeans centers per class, mean L1 distance)."""
    non_hate, explicit, implicit = _three_class_roles(ds)
    latent = project(model.projection, ds.vectors())
    labels = ds.labels()
    _, centers_non = kmeans(latent[labels == non_hate], k, seed=seed)
    _, centers_exp = kmeans(latent[labels == explicit], k, seed=seed + 1)
    implicit_mask = labels == implicit
    scores = relative_explicit_distance(latent[implicit_mask], centers_non, centers_exp)
    ids = [s.id for s, m in zip(ds.samples, implicit_mask) if m]
    return {"ids": ids, "scores": scores}


def dump_latent(
    model: TrainedModel,
    ds: Dataset,
    path: str | Path,
    index: ClusterIndex | None = None,
) -> None:
    """Write {id, label, subcluster, latent, implied_latent} records for
    external 2-d plotting; subcluster is null for samples outside the index."""
    index = index if index is not None else model.final_index
    path = Path(path)
    with path.open("w", encoding="utf-8") as out:
        for s in ds.samples:
            latent = project(model.projection, s.vector)
            key = index.assignments.get(s.id)
            rec = {
                "id": s.id,
                "label": s.label,
                "subcluster": list(key) if key is not None else None,
                "latent": latent.tolist(),
            }
            if s.implied_vector is not None:
                rec["implied_latent"] = project(model.projection, s.implied_vector).tolist()
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_latent(path: str | Path) -> list[dict]:
    records = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip():
            rec = json.loads(ln)
            rec["latent"] = np.array(rec["latent"], dtype=np.float64)
            if "implied_latent" in rec:
                rec["implied_latent"] = np.array(rec["implied_latent"], dtype=np.float64)
            records.append(rec)
    return records
