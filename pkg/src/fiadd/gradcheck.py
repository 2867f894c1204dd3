"""Self-contained finite-difference verification of every analytic gradient.

Builds seeded random neighborhood batches and compares the analytic
gradients of the cross-entropy, discrimination (all variants), combined,
and end-to-end parameter paths against central differences. The corrupt
hook deliberately perturbs one operation's analytic gradient so the
harness's failure path stays testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clusters import NeighborhoodBatch
from .model import ClassificationHead, ProjectionHead, step_objective
from .objective import (
    ObjectiveConfig,
    ace_loss,
    add_loss,
    batch_stats,
    combined_loss,
    grad_check,
)

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    operation: str
    max_rel_err: float
    passed: bool


def _random_batch(rng: np.random.Generator, dim: int = 3, d: int = 4,
                  with_implied: bool = True) -> NeighborhoodBatch:
    """Three well-spread clusters of distinct classes, seed cluster implicit."""
    centers = rng.uniform(-4.0, 4.0, size=(3, dim))
    points = [c + rng.normal(scale=0.8, size=(d, dim)) for c in centers]
    implied = [None, None, None]
    if with_implied:
        implied = [rng.uniform(-4.0, 4.0, size=dim) + rng.normal(scale=0.8, size=(d, dim)), None, None]
    return NeighborhoodBatch.from_points(points, classes=[2, 0, 1], implied_points=implied)


def _flatten_batch(batch: NeighborhoodBatch) -> np.ndarray:
    parts = [p.ravel() for p in batch.points]
    parts += [ip.ravel() for ip in batch.implied_points if ip is not None]
    return np.concatenate(parts)


def _rebuild_batch(template: NeighborhoodBatch, flat: np.ndarray) -> NeighborhoodBatch:
    points = []
    pos = 0
    for p in template.points:
        points.append(flat[pos:pos + p.size].reshape(p.shape))
        pos += p.size
    implied = []
    for ip in template.implied_points:
        if ip is None:
            implied.append(None)
        else:
            implied.append(flat[pos:pos + ip.size].reshape(ip.shape))
            pos += ip.size
    return NeighborhoodBatch.from_points(points, classes=template.classes,
                                         implied_points=implied,
                                         implied_idx=template.implied_idx)


def _check_add_variant(variant: str, n_batches: int, step: float, corrupt: bool) -> float:
    worst = 0.0
    cfg = ObjectiveConfig(alpha=0.5, gamma=2.0, epsilon=1e-7, variant=variant)
    for i in range(n_batches):
        rng = np.random.default_rng([7, i])
        template = _random_batch(rng, with_implied=(variant == "add_inf_foc"))

        def fn(flat: np.ndarray):
            batch = _rebuild_batch(template, flat)
            stats = batch_stats(batch)
            res = add_loss(batch, stats, cfg)
            grad = _flatten_batch(
                NeighborhoodBatch.from_points(
                    res.grad_points, classes=template.classes,
                    implied_points=[g if g is not None else None for g in res.grad_implied],
                    implied_idx=template.implied_idx,
                )
            )
            if corrupt:
                grad = grad.copy()
                grad[0] += 0.05
            return res.loss, grad

        worst = max(worst, grad_check(fn, _flatten_batch(template), step))
    return worst


def _check_ace(n_batches: int, step: float, corrupt: bool) -> float:
    worst = 0.0
    for i in range(n_batches):
        rng = np.random.default_rng([11, i])
        logits0 = rng.normal(size=(8, 3))
        labels = rng.integers(0, 3, size=8)
        weights = rng.uniform(0.5, 2.0, size=3)

        def fn(flat: np.ndarray):
            loss, grad = ace_loss(flat.reshape(8, 3), labels, weights)
            grad = grad.ravel()
            if corrupt:
                grad = grad.copy()
                grad[0] += 0.05
            return loss, grad

        worst = max(worst, grad_check(fn, logits0.ravel(), step))
    return worst


def _check_combined(n_batches: int, step: float, corrupt: bool) -> float:
    """Combined loss over a shared variable feeding both parts linearly."""
    worst = 0.0
    for i in range(n_batches):
        rng = np.random.default_rng([13, i])
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        beta = float(rng.uniform(0.1, 0.9))

        def fn(x: np.ndarray):
            ce = (float(a @ x + 0.5 * x @ x), {"x": a + x})
            add = (float(b @ x), {"x": b.copy()})
            total, grads = combined_loss(ce, add, beta)
            grad = grads["x"]
            if corrupt:
                grad = grad.copy()
                grad[0] += 0.05
            return total, grad

        worst = max(worst, grad_check(fn, rng.normal(size=6), step))
    return worst


def _check_end_to_end(n_batches: int, step: float, corrupt: bool) -> float:
    d_in, d_proj, n_cls = 5, 4, 3
    worst = 0.0
    cfg = ObjectiveConfig(alpha=0.5, gamma=2.0, beta=0.5, variant="add_inf_foc")
    shapes = {"proj_w": (d_in, d_proj), "proj_b": (d_proj,),
              "cls_w": (d_proj, n_cls), "cls_b": (n_cls,)}
    order = ["proj_w", "proj_b", "cls_w", "cls_b"]
    for i in range(n_batches):
        rng = np.random.default_rng([17, i])
        centers = rng.uniform(-3.0, 3.0, size=(3, d_in))
        raw = [c + rng.normal(scale=0.7, size=(4, d_in)) for c in centers]
        implied_raw = [rng.uniform(-3.0, 3.0, size=d_in) + rng.normal(scale=0.7, size=(4, d_in)), None, None]
        batch = NeighborhoodBatch.from_points(raw, classes=[2, 0, 1], implied_points=implied_raw)
        batch.raw = batch.points
        batch.implied_raw = batch.implied_points
        x0 = rng.normal(scale=0.4, size=sum(np.prod(s) for s in shapes.values()))

        def fn(flat: np.ndarray):
            pos = 0
            vals = {}
            for name in order:
                size = int(np.prod(shapes[name]))
                vals[name] = flat[pos:pos + size].reshape(shapes[name])
                pos += size
            proj = ProjectionHead(vals["proj_w"], vals["proj_b"], "tanh")
            cls_head = ClassificationHead(vals["cls_w"], vals["cls_b"])
            total, _, _, grads, _ = step_objective(proj, cls_head, batch, cfg)
            grad = np.concatenate([grads[name].ravel() for name in order])
            if corrupt:
                grad = grad.copy()
                grad[0] += 0.05
            return total, grad

        worst = max(worst, grad_check(fn, x0, step))
    return worst


def run_gradcheck(n_batches: int = 20, step: float = 1e-5, corrupt: str | None = None) -> list[CheckRow]:
    """One row per checked operation; corrupt names an operation whose
    analytic gradient is deliberately broken."""
    checks = [
        ("ace_loss", lambda c: _check_ace(n_batches, step, c)),
        ("add_loss[add]", lambda c: _check_add_variant("add", n_batches, step, c)),
        ("add_loss[add_foc]", lambda c: _check_add_variant("add_foc", n_batches, step, c)),
        ("add_loss[add_inf_foc]", lambda c: _check_add_variant("add_inf_foc", n_batches, step, c)),
        ("combined_loss", lambda c: _check_combined(n_batches, step, c)),
        ("end_to_end_params", lambda c: _check_end_to_end(n_batches, step, c)),
    ]
    rows = []
    for name, runner in checks:
        err = runner(corrupt == name)
        rows.append(CheckRow(name, float(err), bool(err < TOLERANCE)))
    return rows
