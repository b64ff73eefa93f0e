"""Contrastive loss variants and false-negative handling strategies.

The vanilla loss contrasts one positive score against N negative scores:

    -log[ e^{s+} / (e^{s+} + sum_n e^{s_n}) ].

The debiased variant replaces the plain negative sum with N * g, where g
estimates the clean-negative expectation from N marginal scores and M
same-class scores:

    g0 = (1/(1-eta)) * mean_n e^{s_n}  -  (eta/(1-eta)) * mean_m e^{t_m},
    g  = max(g0, e^{-gamma^2}),

with eta the (possibly sample-specific) class-probability estimate.  The
clamp floor is the theoretical minimum of the estimated expectation; the
subgradient through an active clamp is taken from the constant side, so
scores get zero gradient there while the floor's own gamma dependence is
kept.

``in_batch_loss`` assembles either objective over a batch with in-batch
negatives (every other positive in the batch) and returns exact gradients
with respect to all embeddings, including through similarity-derived
reweighting factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SCORE_SLACK = 1e-9


@dataclass(frozen=True)
class EstimatorInputs:
    """Scores and parameters feeding one estimator/loss evaluation."""

    pos_score: float
    neg_scores: np.ndarray
    pos_set_scores: np.ndarray
    eta: float
    gamma: float

    def __post_init__(self):
        neg = np.asarray(self.neg_scores, dtype=np.float64)
        pos_set = np.asarray(self.pos_set_scores, dtype=np.float64)
        if neg.ndim != 1 or neg.size < 1:
            raise ValueError("need at least one negative score")
        if pos_set.ndim != 1 or pos_set.size < 1:
            raise ValueError("need at least one positive-set score")
        bound = self.gamma**2 + SCORE_SLACK
        all_scores = np.concatenate([neg, pos_set, [self.pos_score]])
        if np.any(np.abs(all_scores) > bound):
            raise ValueError("scores exceed the gamma^2 bound")
        object.__setattr__(self, "neg_scores", neg)
        object.__setattr__(self, "pos_set_scores", pos_set)


@dataclass(frozen=True)
class NegativeHandling:
    """Tagged strategy for filtering or reweighting the negative set."""

    kind: str = "none"  # none | remove_by_sim | reweight_by_sim | resample_by_sim | remove_by_label
    threshold: float = np.inf
    temperature: float = 1.0
    keep_count: int = 1

    def __post_init__(self):
        kinds = {"none", "remove_by_sim", "reweight_by_sim", "resample_by_sim", "remove_by_label"}
        if self.kind not in kinds:
            raise ValueError(f"unknown negative handling kind {self.kind!r}")
        if self.kind == "remove_by_sim" and not np.isfinite(self.threshold):
            if self.threshold != np.inf:
                raise ValueError("threshold must be finite or +inf (identity)")
        if self.kind == "reweight_by_sim" and self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class HandlingResult:
    kept: np.ndarray            # indices into the original negative list
    weights: Optional[np.ndarray]  # aligned with kept; None means unit weights
    fallback: bool              # True when everything was removed and one negative was retained


def contrastive_loss(pos_score: float, neg_scores: np.ndarray,
                     weights: Optional[np.ndarray] = None) -> float:
    """Vanilla contrastive loss; ``weights`` cover the reweighting baseline."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if neg_scores.size < 1:
        raise ValueError("need at least one negative score")
    expn = np.exp(neg_scores)
    z = float(np.sum(expn if weights is None else np.asarray(weights) * expn))
    return float(np.log(np.exp(pos_score) + z) - pos_score)


def g_estimate(inputs: EstimatorInputs) -> float:
    """Clean-negative expectation estimate, clamped at its minimum e^{-gamma^2}."""
    eta = inputs.eta
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    g0 = (np.mean(np.exp(inputs.neg_scores)) - eta * np.mean(np.exp(inputs.pos_set_scores))) / (
        1.0 - eta
    )
    return float(max(g0, np.exp(-inputs.gamma**2)))


def g_estimate_many(
    neg_scores: np.ndarray,
    pos_set_scores: np.ndarray,
    eta: np.ndarray,
    gamma: np.ndarray | float,
) -> np.ndarray:
    """Vectorized ``g_estimate`` over rows; used by the bound verifier and fuzz tests."""
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta < 0.0) or np.any(eta >= 1.0):
        raise ValueError("eta must lie in [0, 1)")
    mean_neg = np.exp(np.asarray(neg_scores, dtype=np.float64)).mean(axis=-1)
    mean_pos = np.exp(np.asarray(pos_set_scores, dtype=np.float64)).mean(axis=-1)
    g0 = (mean_neg - eta * mean_pos) / (1.0 - eta)
    return np.maximum(g0, np.exp(-np.asarray(gamma, dtype=np.float64) ** 2))


def debiased_loss(inputs: EstimatorInputs) -> float:
    """Debiased loss -log[e^{s+} / (e^{s+} + N*g)].

    N*g0 is assembled from sums rather than means so that eta = 0 with an
    inactive clamp reproduces ``contrastive_loss`` bitwise.
    """
    eta = inputs.eta
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    n = inputs.neg_scores.size
    m = inputs.pos_set_scores.size
    sum_neg = float(np.sum(np.exp(inputs.neg_scores)))
    sum_pos = float(np.sum(np.exp(inputs.pos_set_scores)))
    n_g0 = sum_neg / (1.0 - eta) - (eta / (1.0 - eta)) * (n / m) * sum_pos
    n_g = max(n_g0, n * np.exp(-inputs.gamma**2))
    return float(np.log(np.exp(inputs.pos_score) + n_g) - inputs.pos_score)


def asymptotic_loss(
    spec,
    params,
    n_negatives: int,
    mc_pairs: Optional[int] = None,
    mc_negatives: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Debiased loss in the infinite-sample limit: the denominator uses the
    exact clean-negative expectation E_{x- ~ E_c}[e^{s(x, x-)}].

    Discrete specs are enumerated exactly; continuous specs need Monte Carlo
    sizes (mc_pairs outer pairs, mc_negatives inner draws per pair).
    """
    from . import encoder as enc
    from . import mixture as mix

    if spec.num_classes < 2:
        raise ValueError("asymptotic loss needs >= 2 classes (E_c undefined otherwise)")
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    if spec.mode == "discrete":
        cond = spec.conditionals
        emb, _ = enc.forward_features(params, cond.points)
        scores = emb @ emb.T
        return float(asymptotic_loss_from_scores(scores, spec.class_dist.probs, cond.pmfs, n_negatives))
    if mc_pairs is None or mc_negatives is None or rng is None:
        raise ValueError("continuous mode needs mc_pairs, mc_negatives, and rng")
    total = 0.0
    for _ in range(mc_pairs):
        c = mix.sample_class(spec.class_dist, rng)
        x = mix.sample_conditional(spec, c, rng, with_tokens=False)
        x_pos = mix.sample_conditional(spec, c, rng, with_tokens=False)
        e_x = enc.encode(params, x)
        e_pos = enc.encode(params, x_pos)
        negs = [mix.sample_true_negative(spec, c, rng, with_tokens=False) for _ in range(mc_negatives)]
        e_negs, _ = enc.forward_features(params, np.stack([p.features for p in negs]))
        inner = float(np.mean(np.exp(e_negs @ e_x)))
        s = float(e_x @ e_pos)
        total += np.log(np.exp(s) + n_negatives * inner) - s
    return total / mc_pairs


def asymptotic_loss_from_scores(
    scores: np.ndarray, class_probs: np.ndarray, pmfs: np.ndarray, n_negatives: int
) -> float:
    """Exact enumeration of the asymptotic loss given a point score matrix."""
    exp_scores = np.exp(scores)
    total = 0.0
    for c, rho_c in enumerate(class_probs):
        neg_prior = class_probs.copy()
        neg_prior[c] = 0.0
        neg_prior /= 1.0 - rho_c
        neg_pmf = neg_prior @ pmfs
        inner = exp_scores @ neg_pmf  # per anchor point i
        loss_ij = np.log(exp_scores + n_negatives * inner[:, None]) - scores
        total += rho_c * float(pmfs[c] @ loss_ij @ pmfs[c])
    return total


def apply_negative_handling(
    strategy: NegativeHandling,
    anchor_emb: np.ndarray,
    pos_emb: np.ndarray,
    neg_embs: np.ndarray,
    neg_classes: Optional[np.ndarray] = None,
    anchor_class: Optional[int] = None,
) -> HandlingResult:
    """Filter or reweight the negative set per the configured baseline.

    Similarity-based strategies compare each negative against the positive.
    If a removal strategy empties the set, the single least-similar negative
    is retained and the event flagged.
    """
    n = neg_embs.shape[0]
    sims = neg_embs @ pos_emb
    if strategy.kind == "none":
        return HandlingResult(kept=np.arange(n), weights=None, fallback=False)
    if strategy.kind == "remove_by_sim":
        kept = np.flatnonzero(sims <= strategy.threshold)
    elif strategy.kind == "resample_by_sim":
        if not 1 <= strategy.keep_count <= n:
            raise ValueError("keep_count must lie in [1, N]")
        order = np.argsort(sims, kind="stable")
        kept = np.sort(order[: strategy.keep_count])
    elif strategy.kind == "remove_by_label":
        if neg_classes is None or anchor_class is None:
            raise ValueError("remove_by_label needs latent classes")
        kept = np.flatnonzero(np.asarray(neg_classes) != anchor_class)
    elif strategy.kind == "reweight_by_sim":
        logits = -sims / strategy.temperature
        logits = logits - logits.max()
        q = np.exp(logits)
        q /= q.sum()
        return HandlingResult(kept=np.arange(n), weights=n * q, fallback=False)
    else:  # pragma: no cover - guarded in NegativeHandling
        raise ValueError(strategy.kind)
    if kept.size == 0:
        kept = np.array([int(np.argmin(sims))])
        return HandlingResult(kept=kept, weights=None, fallback=True)
    return HandlingResult(kept=kept, weights=None, fallback=False)


# ---------------------------------------------------------------------------
# Batch objective with exact embedding gradients
# ---------------------------------------------------------------------------


@dataclass
class BatchLossResult:
    loss: float
    d_anchor: np.ndarray
    d_positive: np.ndarray
    d_gamma: float          # clamp-floor term only; embedding-path gamma grads come from the encoder
    clamp_fraction: float
    fallback_count: int
    mean_eta: float


def in_batch_loss(
    anchor_embs: np.ndarray,
    pos_embs: np.ndarray,
    *,
    objective: str,
    gamma: float,
    etas: Optional[np.ndarray] = None,
    handling: Optional[NegativeHandling] = None,
    classes: Optional[np.ndarray] = None,
    max_negatives: Optional[int] = None,
) -> BatchLossResult:
    """Mean loss over a batch where anchor i's negatives are the other
    positives {P_j : j != i}, with exact gradients w.r.t. all embeddings.

    For the debiased objective the positive itself serves as the single
    same-class sample (M = 1).  ``max_negatives`` caps each anchor's negative
    pool at its first entries (batch order is already random).  Reductions
    run in batch order so results are reproducible.
    """
    if objective not in ("cl", "dcl"):
        raise ValueError(f"unknown objective {objective!r}")
    a = np.asarray(anchor_embs, dtype=np.float64)
    p = np.asarray(pos_embs, dtype=np.float64)
    b = a.shape[0]
    if b < 2:
        raise ValueError("need batch size >= 2 for in-batch negatives")
    if max_negatives is not None and not 1 <= max_negatives <= b - 1:
        raise ValueError("max_negatives must lie in [1, batch_size - 1]")
    if objective == "dcl":
        if etas is None:
            raise ValueError("dcl objective needs per-sample eta values")
        etas = np.asarray(etas, dtype=np.float64)
        if np.any(etas < 0.0) or np.any(etas >= 1.0):
            raise ValueError("eta values must lie in [0, 1)")
    handling = handling or NegativeHandling()
    floor = np.exp(-(gamma**2))
    if handling.kind == "none" and max_negatives is None:
        return _in_batch_loss_plain(a, p, objective, etas, floor, gamma)

    loss_total = 0.0
    d_a = np.zeros_like(a)
    d_p = np.zeros_like(p)
    d_gamma = 0.0
    clamp_hits = 0
    fallbacks = 0

    for i in range(b):
        neg_idx_all = np.concatenate([np.arange(i), np.arange(i + 1, b)])
        if max_negatives is not None:
            neg_idx_all = neg_idx_all[:max_negatives]
        res = apply_negative_handling(
            handling,
            a[i],
            p[i],
            p[neg_idx_all],
            neg_classes=None if classes is None else np.asarray(classes)[neg_idx_all],
            anchor_class=None if classes is None else int(np.asarray(classes)[i]),
        )
        fallbacks += int(res.fallback)
        neg_idx = neg_idx_all[res.kept]
        w = np.ones(neg_idx.size) if res.weights is None else res.weights
        reweight = handling.kind == "reweight_by_sim"

        s_pos = float(a[i] @ p[i])
        s_neg = a[i] @ p[neg_idx].T
        exp_neg = np.exp(s_neg)
        exp_pos = np.exp(s_pos)
        w_sum = float(w.sum())

        if objective == "cl":
            z = float(np.sum(w * exp_neg))
            dz_ds = w * exp_neg
            dz_dw = exp_neg
            dz_da_score = 0.0
            dz_dgamma = 0.0
            clamped = False
        else:
            eta_i = float(etas[i])
            coef = 1.0 / (1.0 - eta_i)
            z0 = coef * float(np.sum(w * exp_neg)) - (eta_i * coef) * w_sum * exp_pos
            z_floor = w_sum * floor
            clamped = z0 < z_floor
            if clamped:
                z = z_floor
                dz_ds = np.zeros_like(s_neg)
                dz_dw = np.full(neg_idx.size, floor)
                dz_da_score = 0.0
                dz_dgamma = -2.0 * gamma * floor * w_sum
            else:
                z = z0
                dz_ds = coef * w * exp_neg
                dz_dw = coef * exp_neg - (eta_i * coef) * exp_pos
                dz_da_score = -(eta_i * coef) * w_sum * exp_pos
                dz_dgamma = 0.0
            clamp_hits += int(clamped)

        denom = exp_pos + z
        loss_total += np.log(denom) - s_pos

        dl_dspos = (exp_pos + dz_da_score) / denom - 1.0
        dl_dsneg = dz_ds / denom
        d_gamma += dz_dgamma / denom

        d_a[i] += dl_dspos * p[i]
        d_p[i] += dl_dspos * a[i]
        d_a[i] += dl_dsneg @ p[neg_idx]
        d_p[neg_idx] += np.outer(dl_dsneg, a[i])

        if reweight:
            # w = N * softmax(-sims / T): gradients flow through the weights
            dl_dw = dz_dw / denom
            q = w / neg_idx.size  # softmax probabilities (weights sum to N)
            dl_dr = neg_idx.size * q * (dl_dw - float(q @ dl_dw))
            dsims = -dl_dr / handling.temperature
            d_p[i] += dsims @ p[neg_idx]
            d_p[neg_idx] += np.outer(dsims, p[i])

    inv_b = 1.0 / b
    return BatchLossResult(
        loss=loss_total * inv_b,
        d_anchor=d_a * inv_b,
        d_positive=d_p * inv_b,
        d_gamma=d_gamma * inv_b,
        clamp_fraction=clamp_hits * inv_b if objective == "dcl" else 0.0,
        fallback_count=fallbacks,
        mean_eta=float(np.mean(etas)) if objective == "dcl" else 0.0,
    )


def _in_batch_loss_plain(
    a: np.ndarray,
    p: np.ndarray,
    objective: str,
    etas: Optional[np.ndarray],
    floor: float,
    gamma: float,
) -> BatchLossResult:
    """Vectorized path for the unfiltered negative set (matrix form of the
    per-anchor loop; results agree to rounding)."""
    b = a.shape[0]
    n = b - 1
    scores = a @ p.T
    exp_scores = np.exp(scores)
    diag = np.arange(b)
    exp_pos = exp_scores[diag, diag]
    off_sum = exp_scores.sum(axis=1) - exp_pos

    if objective == "cl":
        z = off_sum
        denom = exp_pos + z
        dl_dscores = exp_scores / denom[:, None]
        dl_dscores[diag, diag] = exp_pos / denom - 1.0
        d_gamma = 0.0
        clamp_fraction = 0.0
        loss = float(np.mean(np.log(denom) - scores[diag, diag]))
    else:
        coef = 1.0 / (1.0 - etas)
        z0 = coef * off_sum - (etas * coef) * n * exp_pos
        z_floor = n * floor
        clamped = z0 < z_floor
        z = np.where(clamped, z_floor, z0)
        denom = exp_pos + z
        active = ~clamped
        dl_dscores = np.where(
            active[:, None], coef[:, None] * exp_scores / denom[:, None], 0.0
        )
        dz_da = np.where(active, -(etas * coef) * n * exp_pos, 0.0)
        dl_dscores[diag, diag] = (exp_pos + dz_da) / denom - 1.0
        d_gamma = float(np.sum(np.where(clamped, -2.0 * gamma * floor * n / denom, 0.0))) / b
        clamp_fraction = float(np.mean(clamped))
        loss = float(np.mean(np.log(denom) - scores[diag, diag]))

    d_a = dl_dscores @ p / b
    d_p = dl_dscores.T @ a / b
    return BatchLossResult(
        loss=loss,
        d_anchor=d_a,
        d_positive=d_p,
        d_gamma=d_gamma,
        clamp_fraction=clamp_fraction,
        fallback_count=0,
        mean_eta=float(np.mean(etas)) if objective == "dcl" else 0.0,
    )
