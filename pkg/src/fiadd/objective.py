"""Neighborhood-batch objectives with analytic gradients.

Implements the cluster-assignment probability p_add, its inferential
extension p_add_inf, the focally weighted discrimination loss over a
neighborhood batch, class-weighted cross-entropy, and the beta-mixed
combination of the two. Every loss returns gradients derived by hand;
grad_check compares any of them against central finite differences.

Conventions baked in here (and mirrored by the test oracles):
  * the denominator of p sums exponentiated similarities over
    imposter-class cluster means only, so p may exceed 1 and is clamped to
    [eps, 1 - eps] before the log and the focal factor;
  * the shared variance is the batch-wide mean squared distance of sampled
    points to their own cluster mean with normalizer T - 1 (T = total
    sampled points), floored at 1e-12;
  * the implied-side variance is computed the same way over implied
    points, falling back to the primary variance when any implied cluster
    has fewer than two implied points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clusters import NeighborhoodBatch

VARIANTS = ("add", "add_foc", "add_inf_foc", "ace_only")

SIGMA_FLOOR = 1e-12


@dataclass
class ObjectiveConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    beta: float = 0.5
    epsilon: float = 1e-7
    variant: str = "add_inf_foc"
    class_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0) or not np.all(np.isfinite(self.class_weights)):
                raise ValueError("class_weights must be positive and finite")

    @property
    def effective_gamma(self) -> float:
        """The plain variant is the unfocused loss regardless of gamma."""
        return 0.0 if self.variant == "add" else self.gamma

    @property
    def uses_implied(self) -> bool:
        return self.variant == "add_inf_foc"


@dataclass
class BatchStats:
    """Per-cluster means and batch-level variances of a neighborhood batch."""

    mu: list[np.ndarray]
    mu_tilde: list[np.ndarray | None]
    sigma2: float
    sigma2_tilde: float
    sigma2_floored: bool = False
    tilde_floored: bool = False
    tilde_fallback: bool = False
    n_points: int = 0
    n_implied: int = 0


def batch_stats(batch: NeighborhoodBatch) -> BatchStats:
    """Means and variances used by the discrimination probabilities."""
    mu = [p.mean(axis=0) for p in batch.points]
    t = sum(p.shape[0] for p in batch.points)
    ssd = sum(float(np.sum((p - m) ** 2)) for p, m in zip(batch.points, mu))
    raw_sigma2 = ssd / (t - 1) if t > 1 else 0.0
    sigma2_floored = raw_sigma2 < SIGMA_FLOOR
    sigma2 = max(raw_sigma2, SIGMA_FLOOR)

    mu_tilde: list[np.ndarray | None] = []
    implied_counts = []
    for ip in batch.implied_points:
        if ip is None or ip.shape[0] == 0:
            mu_tilde.append(None)
        else:
            mu_tilde.append(ip.mean(axis=0))
            implied_counts.append(ip.shape[0])
    t_tilde = sum(implied_counts)
    tilde_fallback = not implied_counts or min(implied_counts) < 2
    tilde_floored = False
    if tilde_fallback:
        sigma2_tilde = sigma2
    else:
        ssd_tilde = sum(
            float(np.sum((ip - mt) ** 2))
            for ip, mt in zip(batch.implied_points, mu_tilde)
            if ip is not None and ip.shape[0] > 0
        )
        raw = ssd_tilde / (t_tilde - 1)
        tilde_floored = raw < SIGMA_FLOOR
        sigma2_tilde = max(raw, SIGMA_FLOOR)
    return BatchStats(
        mu=mu, mu_tilde=mu_tilde, sigma2=sigma2, sigma2_tilde=sigma2_tilde,
        sigma2_floored=sigma2_floored, tilde_floored=tilde_floored,
        tilde_fallback=tilde_fallback, n_points=t, n_implied=t_tilde,
    )


def p_add(
    r: np.ndarray,
    own_mean: np.ndarray,
    imposter_means: list[np.ndarray] | np.ndarray,
    sigma2: float,
    alpha: float,
) -> float:
    """Unclamped own-cluster assignment ratio; can exceed 1.

    exp(-|r - own|^2 / 2 sigma2 - alpha) over the sum of
    exp(-|r - imposter|^2 / 2 sigma2) across imposter-class means.
    """
    r = np.asarray(r, dtype=np.float64)
    imposters = np.atleast_2d(np.asarray(imposter_means, dtype=np.float64))
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if imposters.shape[0] < 1:
        raise ValueError("need at least one imposter mean")
    num = np.exp(-float(np.sum((r - own_mean) ** 2)) / (2.0 * sigma2) - alpha)
    den = float(np.sum(np.exp(-np.sum((r - imposters) ** 2, axis=1) / (2.0 * sigma2))))
    return float(num / den)


def p_add_inf(
    r: np.ndarray,
    own_mean: np.ndarray,
    implied_mean: np.ndarray | None,
    sigma2: float,
    sigma2_tilde: float,
    imposter_means: list[np.ndarray] | np.ndarray,
    alpha: float,
) -> float:
    """p_add plus a pull term toward the cluster's implied mean.

    Without an implied mean this is exactly p_add.
    """
    base = p_add(r, own_mean, imposter_means, sigma2, alpha)
    if implied_mean is None:
        return base
    r = np.asarray(r, dtype=np.float64)
    imposters = np.atleast_2d(np.asarray(imposter_means, dtype=np.float64))
    extra = np.exp(-float(np.sum((r - implied_mean) ** 2)) / (2.0 * sigma2_tilde) - alpha)
    den = float(np.sum(np.exp(-np.sum((r - imposters) ** 2, axis=1) / (2.0 * sigma2))))
    return float(base + extra / den)


@dataclass
class AddLossResult:
    loss: float
    grad_points: list[np.ndarray]
    grad_implied: list[np.ndarray | None]
    per_sample_loss: list[np.ndarray]
    p_hat: list[np.ndarray]


def _focal_terms(p_hat: float, gamma: float) -> tuple[float, float]:
    """Loss value and d(loss)/d(p_hat) for -(1 - p)^gamma log(p)."""
    one_m = 1.0 - p_hat
    logp = np.log(p_hat)
    if gamma == 0.0:
        return -logp, -1.0 / p_hat
    loss = -(one_m**gamma) * logp
    dloss = gamma * one_m ** (gamma - 1.0) * logp - one_m**gamma / p_hat
    return float(loss), float(dloss)


def add_loss(
    batch: NeighborhoodBatch,
    stats: BatchStats,
    config: ObjectiveConfig,
) -> AddLossResult:
    """Focal discrimination loss over a batch, averaged over sampled points.

    Gradients flow to every sampled point and implied point through the
    point itself, its cluster mean, the imposter means, both variances and
    (for the inferential variant) the implied mean. Clamped probabilities
    contribute zero gradient, matching the clamp's flat regions.
    """
    n_clusters = len(batch.points)
    t = stats.n_points
    gamma = config.effective_gamma
    eps = config.epsilon
    use_inf = config.uses_implied

    grad_points = [np.zeros_like(p) for p in batch.points]
    grad_implied = [None if ip is None else np.zeros_like(ip) for ip in batch.implied_points]
    grad_mu = [np.zeros_like(m) for m in stats.mu]
    grad_mu_tilde = [None if mt is None else np.zeros_like(mt) for mt in stats.mu_tilde]
    grad_sigma2 = 0.0
    grad_sigma2_tilde = 0.0
    per_sample = [np.zeros(p.shape[0]) for p in batch.points]
    p_hats = [np.zeros(p.shape[0]) for p in batch.points]

    total = 0.0
    for m in range(n_clusters):
        own_cls = batch.classes[m]
        imposter_ids = [o for o in range(n_clusters) if batch.classes[o] != own_cls]
        mu_m = stats.mu[m]
        mt = stats.mu_tilde[m] if use_inf else None
        for d in range(batch.points[m].shape[0]):
            r = batch.points[m][d]
            diff_own = r - mu_m
            s_own = float(diff_own @ diff_own)
            n1 = np.exp(-s_own / (2.0 * stats.sigma2) - config.alpha)
            diffs_imp = [r - stats.mu[o] for o in imposter_ids]
            s_imp = [float(dv @ dv) for dv in diffs_imp]
            e_imp = [np.exp(-s / (2.0 * stats.sigma2)) for s in s_imp]
            den = float(sum(e_imp))
            if mt is not None:
                diff_t = r - mt
                s_t = float(diff_t @ diff_t)
                n2 = np.exp(-s_t / (2.0 * stats.sigma2_tilde) - config.alpha)
            else:
                n2 = 0.0
            # a vanishing denominator means the imposters sit astronomically
            # far away: p saturates high and the clamp flattens the gradient
            with np.errstate(over="ignore", divide="ignore"):
                p = (n1 + n2) / den if den > 0.0 else np.inf
            p_hat = min(max(p, eps), 1.0 - eps)
            loss_d, dloss_dp = _focal_terms(p_hat, gamma)
            per_sample[m][d] = loss_d
            p_hats[m][d] = p_hat
            total += loss_d
            if not eps < p < 1.0 - eps:
                continue  # clamp is flat

            g_p = dloss_dp / t
            g_n1 = g_p / den
            g_den = -g_p * p / den
            g_a1 = -g_n1 * n1  # a1 = s_own / 2 sigma2 + alpha
            grad_points[m][d] += g_a1 * diff_own / stats.sigma2
            grad_mu[m] += -g_a1 * diff_own / stats.sigma2
            grad_sigma2 += -g_a1 * s_own / (2.0 * stats.sigma2**2)
            if mt is not None:
                g_n2 = g_p / den
                g_a2 = -g_n2 * n2
                grad_points[m][d] += g_a2 * diff_t / stats.sigma2_tilde
                grad_mu_tilde[m] += -g_a2 * diff_t / stats.sigma2_tilde
                grad_sigma2_tilde += -g_a2 * s_t / (2.0 * stats.sigma2_tilde**2)
            for o, dv, s_o, e_o in zip(imposter_ids, diffs_imp, s_imp, e_imp):
                g_b = -g_den * e_o  # b = s_o / 2 sigma2
                grad_points[m][d] += g_b * dv / stats.sigma2
                grad_mu[o] += -g_b * dv / stats.sigma2
                grad_sigma2 += -g_b * s_o / (2.0 * stats.sigma2**2)

    # fall back before distributing: sigma2_tilde is literally sigma2 then
    if stats.tilde_fallback:
        grad_sigma2 += grad_sigma2_tilde
        grad_sigma2_tilde = 0.0

    for m in range(n_clusters):
        d_m = batch.points[m].shape[0]
        grad_points[m] += grad_mu[m] / d_m
        if not stats.sigma2_floored and t > 1:
            grad_points[m] += grad_sigma2 * 2.0 * (batch.points[m] - stats.mu[m]) / (t - 1)
        ip = batch.implied_points[m]
        if ip is None or ip.shape[0] == 0:
            continue
        if grad_mu_tilde[m] is not None:
            grad_implied[m] += grad_mu_tilde[m] / ip.shape[0]
        if not stats.tilde_fallback and not stats.tilde_floored and stats.n_implied > 1:
            grad_implied[m] += grad_sigma2_tilde * 2.0 * (ip - stats.mu_tilde[m]) / (stats.n_implied - 1)

    return AddLossResult(
        loss=total / t,
        grad_points=grad_points,
        grad_implied=grad_implied,
        per_sample_loss=per_sample,
        p_hat=p_hats,
    )


def ace_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy, weights renormalized to mean 1.

    Returns the mean weighted negative log-likelihood and its gradient with
    respect to the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if class_weights is None:
        w = np.ones(c)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        w = w * c / w.sum()
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    norm = expd.sum(axis=1, keepdims=True)
    probs = expd / norm
    log_picked = shifted[np.arange(n), labels] - np.log(norm[:, 0])
    sample_w = w[labels]
    loss = float(np.mean(sample_w * -log_picked))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (sample_w / n)[:, None]
    return loss, grad


def inverse_frequency_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """w_c proportional to N / (C * N_c), renormalized to mean 1; absent
    classes get the largest observed weight."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    n = counts.sum()
    w = np.where(counts > 0, n / (n_classes * np.maximum(counts, 1.0)), 0.0)
    if np.any(w == 0):
        w[w == 0] = w.max() if w.max() > 0 else 1.0
    return w * n_classes / w.sum()


GradDict = dict[str, np.ndarray]


def combined_loss(
    ce: tuple[float, GradDict],
    add: tuple[float, GradDict],
    beta: float,
) -> tuple[float, GradDict]:
    """beta * cross-entropy + (1 - beta) * discrimination loss, gradients linear."""
    ce_loss, ce_grads = ce
    add_loss_val, add_grads = add
    total = beta * ce_loss + (1.0 - beta) * add_loss_val
    combined: GradDict = {}
    for key in sorted(set(ce_grads) | set(add_grads)):
        parts = []
        if key in ce_grads:
            parts.append(beta * ce_grads[key])
        if key in add_grads:
            parts.append((1.0 - beta) * add_grads[key])
        combined[key] = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return total, combined


def grad_check(fn, x0: np.ndarray, step: float = 1e-5) -> float:
    """Max coordinate-wise relative error of fn's analytic gradient against
    central finite differences; relative with a unit floor on the scale."""
    x0 = np.asarray(x0, dtype=np.float64)
    _, grad = fn(x0)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    flat = x0.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp, _ = fn(xp.reshape(x0.shape))
        fm, _ = fn(xm.reshape(x0.shape))
        numeric = (fp - fm) / (2.0 * step)
        analytic = grad.ravel()[i]
        scale = max(1.0, abs(numeric), abs(analytic))
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
