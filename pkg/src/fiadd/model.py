"""Projection and classification heads, the training loop, and inference.

Training re-clusters projected embeddings once per epoch, draws
neighborhood batches, and descends the beta-mixed objective with plain or
momentum SGD. Everything is deterministic given the config seed: init,
clustering, seed/imposter choice and sampling all draw from PCG64 streams
derived from that seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import Dataset, SplitPair
from . import clusters as cl
from .objective import (
    ObjectiveConfig,
    ace_loss,
    add_loss,
    batch_stats,
    combined_loss,
    inverse_frequency_weights,
)

ACTIVATIONS = ("identity", "tanh")
OPTIMIZERS = ("sgd", "sgd-momentum")

CHECKPOINT_FORMAT = "fiadd-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (d_in, d_proj)
    bias: np.ndarray    # (d_proj,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return project(self, x)


@dataclass
class ClassificationHead:
    weight: np.ndarray  # (d_proj, n_classes)
    bias: np.ndarray    # (n_classes,)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return classify(self, r)


def project(head: ProjectionHead, x: np.ndarray) -> np.ndarray:
    """Affine map plus the configured activation; accepts one vector or a stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.weight.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} != head d_in {head.weight.shape[0]}")
    pre = x @ head.weight + head.bias
    return np.tanh(pre) if head.activation == "tanh" else pre


def classify(head: ClassificationHead, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != head.weight.shape[0]:
        raise ValueError(f"latent dim {r.shape[-1]} != head d_proj {head.weight.shape[0]}")
    return r @ head.weight + head.bias


@dataclass
class TrainConfig:
    epochs: int = 5000
    k: int = 3
    m: int = 2
    d: int | None = None          # None: per-batch min(8, smallest selected cluster)
    gamma: float = 2.0
    beta: float = 0.5
    alpha: float = 1.0
    learning_rate: float = 0.01
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    seed: int = 1
    eval_every: int = 25
    warmup_epochs: int | None = None  # None: 10% of epochs
    variant: str = "add_inf_foc"
    d_proj: int = 128
    activation: str = "identity"
    epsilon: float = 1e-7
    minority_class: int | None = None  # None: least frequent train class
    class_weights: list[float] | None = None
    kmeans_max_iter: int = 100
    loss_stats_decay: float = 0.9

    def __post_init__(self) -> None:
        self.variant = self.variant.lower()
        self.optimizer = self.optimizer.lower()
        if self.epochs < 0 or self.k < 1 or self.m < 1 or self.d_proj < 1:
            raise ValueError("epochs must be >= 0; k, m, d_proj must be positive")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be positive when set")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")

    @property
    def d_nominal(self) -> int:
        return self.d if self.d is not None else 8

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return max(1, self.epochs // 10)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Metrics:
    class_ids: list[int]
    per_class_f1: list[float]
    macro_f1: float
    absent: list[int]

    def f1_of(self, class_id: int) -> float:
        return self.per_class_f1[self.class_ids.index(class_id)]


def per_class_f1(labels: np.ndarray, preds: np.ndarray, class_ids: list[int]) -> Metrics:
    """F1 per class and their unweighted mean. A class missing from both
    labels and predictions scores 0 and is flagged as absent."""
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    f1s: list[float] = []
    absent: list[int] = []
    for c in class_ids:
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        if tp + fp + fn == 0:
            absent.append(c)
            f1s.append(0.0)
            continue
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0)
    macro = float(np.mean(f1s)) if f1s else 0.0
    return Metrics(list(class_ids), f1s, macro, absent)


def _merged_space(n_classes: int, merge_map: dict[int, int]) -> list[int]:
    return sorted({merge_map.get(c, c) for c in range(n_classes)})


def _evaluate_heads(
    proj: ProjectionHead,
    cls_head: ClassificationHead,
    ds: Dataset,
    merge_map: dict[int, int] | None = None,
) -> Metrics:
    X = ds.vectors()
    labels = ds.labels()
    preds = np.argmax(classify(cls_head, project(proj, X)), axis=1)
    if merge_map:
        labels = np.array([merge_map.get(int(l), int(l)) for l in labels])
        preds = np.array([merge_map.get(int(p), int(p)) for p in preds])
        space = _merged_space(ds.n_classes, merge_map)
    else:
        space = list(range(ds.n_classes))
    return per_class_f1(labels, preds, space)


@dataclass
class TrainedModel:
    projection: ProjectionHead
    classifier: ClassificationHead
    final_index: cl.ClusterIndex
    history: list[dict]
    best_checkpoint: dict
    highest_minority_f1: float
    minority_class: int
    config: TrainConfig
    counters: dict[str, int] = field(default_factory=dict)
    aborted: bool = False


def evaluate(model: TrainedModel, ds: Dataset, merge_map: dict[int, int] | None = None) -> Metrics:
    return _evaluate_heads(model.projection, model.classifier, ds, merge_map)


def predict(model: TrainedModel, x: np.ndarray) -> int:
    """Argmax of the classifier over the projection; ties go to the lowest class id."""
    logits = classify(model.classifier, project(model.projection, np.asarray(x)))
    return int(np.argmax(logits))


def predict_batch(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    logits = classify(model.classifier, project(model.projection, np.asarray(X)))
    return np.argmax(logits, axis=1)


def predict_nearest_cluster(model: TrainedModel, index: cl.ClusterIndex, x: np.ndarray) -> int:
    """Class of the subcluster centroid nearest to the projected input."""
    r = project(model.projection, np.asarray(x))
    keys = index.keys()
    d2 = np.array([float(np.sum((index.centroids[key] - r) ** 2)) for key in keys])
    return keys[int(np.argmin(d2))][0]


def init_heads(d_in: int, d_proj: int, n_classes: int, activation: str, seed: int) -> tuple[ProjectionHead, ClassificationHead]:
    """Xavier-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng([seed, 0])
    lim_p = np.sqrt(6.0 / (d_in + d_proj))
    proj = ProjectionHead(rng.uniform(-lim_p, lim_p, size=(d_in, d_proj)), np.zeros(d_proj), activation)
    lim_c = np.sqrt(6.0 / (d_proj + n_classes))
    cls_head = ClassificationHead(rng.uniform(-lim_c, lim_c, size=(d_proj, n_classes)), np.zeros(n_classes))
    return proj, cls_head


def _act_backward(head: ProjectionHead, out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if head.activation == "tanh":
        return grad_out * (1.0 - out**2)
    return grad_out


def step_objective(
    proj: ProjectionHead,
    cls_head: ClassificationHead,
    batch: cl.NeighborhoodBatch,
    obj: ObjectiveConfig,
) -> tuple[float, float, float, dict[str, np.ndarray], list[float]]:
    """Forward and backward pass of the mixed objective on one batch.

    Returns (total, ce, add, parameter gradients, per-cluster mean losses).
    Cross-entropy runs over the sampled original points only; the
    discrimination term's gradients reach the projection through both the
    sampled and the implied points.
    """
    projected = batch.reprojected(lambda v: project(proj, v))
    stats = batch_stats(projected)
    add = add_loss(projected, stats, obj)

    X = np.concatenate(projected.raw)
    R = np.concatenate(projected.points)
    labels = np.concatenate([
        np.full(p.shape[0], c, dtype=np.int64) for p, c in zip(projected.points, projected.classes)
    ])
    logits = classify(cls_head, R)
    ce_val, grad_logits = ace_loss(logits, labels, obj.class_weights)

    # cross-entropy path into the heads
    grad_r_ce = grad_logits @ cls_head.weight.T
    grad_pre_ce = _act_backward(proj, R, grad_r_ce)
    ce_grads = {
        "cls_w": R.T @ grad_logits,
        "cls_b": grad_logits.sum(axis=0),
        "proj_w": X.T @ grad_pre_ce,
        "proj_b": grad_pre_ce.sum(axis=0),
    }

    # discrimination path: sampled points plus implied points
    grad_r_add = np.concatenate(add.grad_points)
    grad_pre_add = _act_backward(proj, R, grad_r_add)
    add_w = X.T @ grad_pre_add
    add_b = grad_pre_add.sum(axis=0)
    for m, g_imp in enumerate(add.grad_implied):
        if g_imp is None or g_imp.shape[0] == 0:
            continue
        ir = projected.implied_raw[m]
        ipts = projected.implied_points[m]
        grad_pre_imp = _act_backward(proj, ipts, g_imp)
        add_w += ir.T @ grad_pre_imp
        add_b += grad_pre_imp.sum(axis=0)
    add_grads = {"proj_w": add_w, "proj_b": add_b,
                 "cls_w": np.zeros_like(cls_head.weight), "cls_b": np.zeros_like(cls_head.bias)}

    total, grads = combined_loss((ce_val, ce_grads), (add.loss, add_grads), obj.beta)
    cluster_mean_losses = [float(np.mean(ls)) for ls in add.per_sample_loss]
    return total, ce_val, add.loss, grads, cluster_mean_losses


def _ce_only_objective(
    proj: ProjectionHead,
    cls_head: ClassificationHead,
    X: np.ndarray,
    labels: np.ndarray,
    obj: ObjectiveConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    R = project(proj, X)
    logits = classify(cls_head, R)
    ce_val, grad_logits = ace_loss(logits, labels, obj.class_weights)
    grad_r = grad_logits @ cls_head.weight.T
    grad_pre = _act_backward(proj, R, grad_r)
    grads = {
        "cls_w": R.T @ grad_logits,
        "cls_b": grad_logits.sum(axis=0),
        "proj_w": X.T @ grad_pre,
        "proj_b": grad_pre.sum(axis=0),
    }
    return ce_val, grads


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: dict[str, np.ndarray]):
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k in params:
            if self.momentum:
                self.velocity[k] = self.momentum * self.velocity[k] - self.lr * grads[k]
                params[k] += self.velocity[k]
            else:
                params[k] -= self.lr * grads[k]


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def train(split: SplitPair, cfg: TrainConfig) -> TrainedModel:
    """Full training run over the train split, evaluated on the test split.

    Per epoch: project the training set, rebuild the per-class subcluster
    index, then run floor(N / ((M+1) D)) neighborhood-batch steps. The
    ace_only variant skips clustering and consumes shuffled minibatches of
    the same size. Divergence aborts with the last finite parameters.
    """
    ds_tr, ds_te = split.train, split.test
    labels_tr = ds_tr.labels()
    present = set(int(l) for l in labels_tr)
    if present != set(range(ds_tr.n_classes)):
        missing = sorted(set(range(ds_tr.n_classes)) - present)
        raise ValueError(f"train split is missing classes {missing}")

    proj, cls_head = init_heads(ds_tr.d_in, cfg.d_proj, ds_tr.n_classes, cfg.activation, cfg.seed)
    params = {"proj_w": proj.weight, "proj_b": proj.bias,
              "cls_w": cls_head.weight, "cls_b": cls_head.bias}
    weights = (
        np.asarray(cfg.class_weights, dtype=np.float64)
        if cfg.class_weights is not None
        else inverse_frequency_weights(labels_tr, ds_tr.n_classes)
    )
    obj = ObjectiveConfig(
        alpha=cfg.alpha, gamma=cfg.gamma, beta=cfg.beta, epsilon=cfg.epsilon,
        variant=cfg.variant, class_weights=weights,
    )
    counts = np.bincount(labels_tr, minlength=ds_tr.n_classes)
    minority = cfg.minority_class if cfg.minority_class is not None else int(np.argmin(counts))

    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = _Optimizer(cfg, params)
    counters = {"neighborhood_batches": 0}
    label_map = {s.id: s.label for s in ds_tr.samples}
    ids_tr = ds_tr.ids()
    X_tr = ds_tr.vectors()
    n = len(ds_tr)
    batch_size = (cfg.m + 1) * cfg.d_nominal
    steps = n // batch_size

    history: list[dict] = []
    best: dict = {}
    highest_minority = -1.0

    def record(epoch: int, ce_losses: list[float], add_losses: list[float]) -> None:
        nonlocal highest_minority, best
        metrics = _evaluate_heads(proj, cls_head, ds_te)
        entry = {
            "epoch": epoch,
            "per_class_f1": [float(f) for f in metrics.per_class_f1],
            "macro_f1": float(metrics.macro_f1),
            "ce_loss": float(np.mean(ce_losses)) if ce_losses else None,
            "add_loss": float(np.mean(add_losses)) if add_losses else None,
        }
        history.append(entry)
        minority_f1 = metrics.f1_of(minority)
        highest_minority = max(highest_minority, minority_f1)
        if not best or metrics.macro_f1 > best["macro_f1"]:
            best = {"epoch": epoch, "macro_f1": float(metrics.macro_f1),
                    "params": _snapshot(params)}

    record(0, [], [])
    aborted = False
    prev_class_loss: dict[int, float] | None = None
    for epoch in range(1, cfg.epochs + 1):
        ce_losses: list[float] = []
        add_losses: list[float] = []
        if cfg.variant == "ace_only":
            perm = rng.permutation(n)
            for s in range(steps):
                idx = perm[s * batch_size:(s + 1) * batch_size]
                ce_val, grads = _ce_only_objective(proj, cls_head, X_tr[idx], labels_tr[idx], obj)
                if not np.isfinite(ce_val):
                    aborted = True
                    break
                prev = _snapshot(params)
                optimizer.step(params, grads)
                if not all(np.all(np.isfinite(v)) for v in params.values()):
                    for key in params:
                        params[key][...] = prev[key]
                    aborted = True
                    break
                ce_losses.append(ce_val)
        else:
            proj_all = project(proj, X_tr)
            proj_map = {sid: proj_all[i] for i, sid in enumerate(ids_tr)}
            index = cl.build_index(proj_map, label_map, cfg.k, seed=int(rng.integers(2**63)),
                                   max_iter=cfg.kmeans_max_iter)
            if prev_class_loss is not None:
                # carry the loss signal across rebuilds: new subclusters start
                # at their class's running mean from the previous epoch
                for key in index.keys():
                    index.loss_stats[key] = prev_class_loss.get(key[0], 1.0)
            for s in range(steps):
                seed_cluster = cl.select_seed(index, epoch - 1, cfg.effective_warmup, rng)
                imposters = cl.select_imposters(index, seed_cluster, cfg.m)
                d_eff = cfg.d if cfg.d is not None else min(
                    8, min(index.sizes[key] for key in [seed_cluster] + imposters))
                batch = cl.sample_batch(index, seed_cluster, imposters, d_eff, rng, ds_tr)
                counters["neighborhood_batches"] += 1
                total, ce_val, add_val, grads, cluster_losses = step_objective(proj, cls_head, batch, obj)
                if not np.isfinite(total):
                    aborted = True
                    break
                prev = _snapshot(params)
                optimizer.step(params, grads)
                if not all(np.all(np.isfinite(v)) for v in params.values()):
                    for key in params:
                        params[key][...] = prev[key]
                    aborted = True
                    break
                ce_losses.append(ce_val)
                add_losses.append(add_val)
                for key, mean_loss in zip(batch.cluster_ids, cluster_losses):
                    index.update_loss_stats(key, mean_loss, cfg.loss_stats_decay)
            classes_seen = sorted({key[0] for key in index.keys()})
            prev_class_loss = {
                c: float(np.mean([index.loss_stats[key] for key in index.keys() if key[0] == c]))
                for c in classes_seen
            }
        if aborted:
            record(epoch, ce_losses, add_losses)
            break
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch, ce_losses, add_losses)

    final_proj = project(proj, X_tr)
    final_map = {sid: final_proj[i] for i, sid in enumerate(ids_tr)}
    final_seed = int(np.random.default_rng([cfg.seed, 2]).integers(2**63))
    final_index = cl.build_index(final_map, label_map, cfg.k, seed=final_seed,
                                 max_iter=cfg.kmeans_max_iter)

    best_params = best["params"]
    best_checkpoint = {
        "epoch": best["epoch"],
        "macro_f1": best["macro_f1"],
        "projection_weight": best_params["proj_w"],
        "projection_bias": best_params["proj_b"],
        "classifier_weight": best_params["cls_w"],
        "classifier_bias": best_params["cls_b"],
    }
    return TrainedModel(
        projection=proj, classifier=cls_head, final_index=final_index,
        history=history, best_checkpoint=best_checkpoint,
        highest_minority_f1=float(highest_minority), minority_class=minority,
        config=cfg, counters=counters, aborted=aborted,
    )


def _array_line(name: str, arr: np.ndarray) -> str:
    arr = np.asarray(arr, dtype=np.float64)
    return json.dumps({"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()},
                      separators=(",", ":"))


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Versioned line-delimited checkpoint: header, parameter arrays
    (final and best), the final cluster index, and the training history."""
    path = Path(path)
    idx = model.final_index
    keys = idx.keys()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d_in": int(model.projection.weight.shape[0]),
        "d_proj": int(model.projection.weight.shape[1]),
        "n_classes": int(model.classifier.weight.shape[1]),
        "activation": model.projection.activation,
        "minority_class": model.minority_class,
        "highest_minority_f1": model.highest_minority_f1,
        "aborted": model.aborted,
        "best_epoch": model.best_checkpoint["epoch"],
        "best_macro_f1": model.best_checkpoint["macro_f1"],
        "config": model.config.to_dict(),
    }
    with path.open("w", encoding="utf-8") as out:
        out.write(json.dumps(header, separators=(",", ":")) + "\n")
        out.write(_array_line("projection.weight", model.projection.weight) + "\n")
        out.write(_array_line("projection.bias", model.projection.bias) + "\n")
        out.write(_array_line("classifier.weight", model.classifier.weight) + "\n")
        out.write(_array_line("classifier.bias", model.classifier.bias) + "\n")
        out.write(_array_line("best.projection.weight", model.best_checkpoint["projection_weight"]) + "\n")
        out.write(_array_line("best.projection.bias", model.best_checkpoint["projection_bias"]) + "\n")
        out.write(_array_line("best.classifier.weight", model.best_checkpoint["classifier_weight"]) + "\n")
        out.write(_array_line("best.classifier.bias", model.best_checkpoint["classifier_bias"]) + "\n")
        out.write(json.dumps({
            "name": "index",
            "keys": [list(key) for key in keys],
            "centroids": [idx.centroids[key].tolist() for key in keys],
            "sizes": [idx.sizes[key] for key in keys],
            "loss_stats": [idx.loss_stats[key] for key in keys],
            "members": [idx.members[key] for key in keys],
        }, separators=(",", ":")) + "\n")
        out.write(json.dumps({"name": "history", "records": model.history},
                             separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    lines = [json.loads(ln) for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    header = lines[0]
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays: dict[str, np.ndarray] = {}
    index_rec = None
    history: list[dict] = []
    for rec in lines[1:]:
        if rec["name"] == "index":
            index_rec = rec
        elif rec["name"] == "history":
            history = rec["records"]
        else:
            arrays[rec["name"]] = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
    proj = ProjectionHead(arrays["projection.weight"], arrays["projection.bias"], header["activation"])
    cls_head = ClassificationHead(arrays["classifier.weight"], arrays["classifier.bias"])
    keys = [tuple(key) for key in index_rec["keys"]]
    centroids = {key: np.array(c, dtype=np.float64) for key, c in zip(keys, index_rec["centroids"])}
    sizes = dict(zip(keys, index_rec["sizes"]))
    loss_stats = dict(zip(keys, index_rec["loss_stats"]))
    members = {key: list(mem) for key, mem in zip(keys, index_rec["members"])}
    assignments = {sid: key for key, mem in members.items() for sid in mem}
    index = cl.ClusterIndex(assignments, centroids, sizes, loss_stats, members)
    cfg = TrainConfig(**header["config"])
    best = {
        "epoch": header["best_epoch"],
        "macro_f1": header["best_macro_f1"],
        "projection_weight": arrays["best.projection.weight"],
        "projection_bias": arrays["best.projection.bias"],
        "classifier_weight": arrays["best.classifier.weight"],
        "classifier_bias": arrays["best.classifier.bias"],
    }
    return TrainedModel(
        projection=proj, classifier=cls_head, final_index=index, history=history,
        best_checkpoint=best, highest_minority_f1=header["highest_minority_f1"],
        minority_class=header["minority_class"], config=cfg, aborted=header["aborted"],
    )
