"""Latent-class mixture simulator.

Each data point carries an unobserved class c drawn from a prior rho over a
finite alphabet; features are then drawn from the class conditional D_c, so a
training set consists of i.i.d. draws from the marginal

    D(x) = sum_c rho(c) * D_c(x).

Two modes:

* continuous — isotropic Gaussian conditionals, used for training runs;
* discrete   — categorical conditionals over a small shared point alphabet,
  so every expectation downstream can be enumerated exactly.

For an anchor of class c the clean-negative distribution E_c excludes class c
and renormalizes the prior over the remaining classes.  The marginal then
decomposes exactly as D = rho(c) * D_c + (1 - rho(c)) * E_c, which
``decomposition_residual`` verifies by enumeration in discrete mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

TOL = 1e-12

TokenSeq = tuple[int, ...]


def _frozen_array(a, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(a, dtype=dtype).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ClassDistribution:
    """Prior over latent classes; entries strictly positive and summing to 1."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_array(self.probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("class prior must be a nonempty 1-d vector")
        if np.any(probs <= 0):
            raise ValueError("class prior entries must be strictly positive")
        if abs(probs.sum() - 1.0) > TOL:
            raise ValueError(f"class prior sums to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @property
    def rho_min(self) -> float:
        return float(self.probs.min())


@dataclass(frozen=True)
class GaussianConditionals:
    """Per-class isotropic Gaussians: means (K, d), stddevs (K,)."""

    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        means = _frozen_array(self.means)
        stddevs = _frozen_array(self.stddevs)
        if means.ndim != 2:
            raise ValueError("means must be (num_classes, dim)")
        if stddevs.shape != (means.shape[0],):
            raise ValueError("stddevs must be one scalar per class")
        if np.any(stddevs < 0):
            raise ValueError("stddevs must be nonnegative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stddevs)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class DiscreteConditionals:
    """Per-class pmfs (K, P) over a shared finite point alphabet (P, d)."""

    points: np.ndarray
    pmfs: np.ndarray

    def __post_init__(self):
        points = _frozen_array(self.points)
        pmfs = _frozen_array(self.pmfs)
        if points.ndim != 2:
            raise ValueError("points must be (num_points, dim)")
        if pmfs.ndim != 2 or pmfs.shape[1] != points.shape[0]:
            raise ValueError("pmfs must be (num_classes, num_points)")
        if np.any(pmfs < 0):
            raise ValueError("pmf entries must be nonnegative")
        rowsums = pmfs.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > TOL):
            raise ValueError("each class pmf must sum to 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "pmfs", pmfs)

    @property
    def num_classes(self) -> int:
        return self.pmfs.shape[0]

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class MixtureSpec:
    """Full generative model: prior, conditionals, and per-class text templates.

    ``templates[c]`` is a nonempty tuple of token sequences for class c and
    ``template_weights[c]`` the matching draw weights.  In discrete mode an
    optional ``point_tokens`` table fixes one token sequence per alphabet
    point, making the text a deterministic function of the point (required
    for exact enumeration of text-derived quantities).
    """

    class_dist: ClassDistribution
    conditionals: GaussianConditionals | DiscreteConditionals
    templates: tuple[tuple[TokenSeq, ...], ...]
    template_weights: tuple[tuple[float, ...], ...]
    vocab_size: int
    point_tokens: Optional[tuple[TokenSeq, ...]] = None
    report_perturb_prob: float = 0.0

    def __post_init__(self):
        k = self.class_dist.num_classes
        if self.conditionals.num_classes != k:
            raise ValueError("conditionals do not match number of classes")
        if len(self.templates) != k or len(self.template_weights) != k:
            raise ValueError("templates must be given for every class")
        for c in range(k):
            if len(self.templates[c]) == 0:
                raise ValueError(f"class {c} has no templates")
            if len(self.templates[c]) != len(self.template_weights[c]):
                raise ValueError(f"class {c}: template/weight length mismatch")
            for seq in self.templates[c]:
                if len(seq) == 0 or any(t < 0 or t >= self.vocab_size for t in seq):
                    raise ValueError(f"class {c}: template tokens out of vocab")
        if not 0.0 <= self.report_perturb_prob <= 1.0:
            raise ValueError("report_perturb_prob must be in [0, 1]")
        if self.point_tokens is not None:
            if self.mode != "discrete":
                raise ValueError("point_tokens only apply to discrete mode")
            if len(self.point_tokens) != self.conditionals.num_points:
                raise ValueError("point_tokens must cover the full alphabet")

    @property
    def mode(self) -> str:
        return "discrete" if isinstance(self.conditionals, DiscreteConditionals) else "continuous"

    @property
    def num_classes(self) -> int:
        return self.class_dist.num_classes

    @property
    def dim(self) -> int:
        return self.conditionals.dim


@dataclass(frozen=True)
class DataPoint:
    """One sample: features, optional tokens, and its simulator-side class.

    ``latent_class`` is visible to the simulator and oracle baselines only;
    objectives never consume it.  ``point_index`` is set in discrete mode.
    """

    features: np.ndarray
    tokens: Optional[TokenSeq]
    latent_class: int
    point_index: Optional[int] = None


@dataclass(frozen=True)
class PairSample:
    """Anchor/positive pair (same latent class) plus marginal negatives."""

    anchor: DataPoint
    positive: DataPoint
    negatives: tuple[DataPoint, ...]

    def __post_init__(self):
        if self.anchor.latent_class != self.positive.latent_class:
            raise ValueError("anchor and positive must share a latent class")


# ---------------------------------------------------------------------------
# Sampling operations
# ---------------------------------------------------------------------------


def sample_class(dist: ClassDistribution, rng: np.random.Generator) -> int:
    return int(rng.choice(dist.num_classes, p=dist.probs))


def sample_class_array(dist: ClassDistribution, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(dist.num_classes, size=size, p=dist.probs)


def _sample_template_tokens(spec: MixtureSpec, c: int, rng: np.random.Generator) -> TokenSeq:
    weights = np.asarray(spec.template_weights[c], dtype=np.float64)
    idx = int(rng.choice(len(weights), p=weights / weights.sum()))
    tokens = list(spec.templates[c][idx])
    if spec.report_perturb_prob > 0.0 and rng.random() < spec.report_perturb_prob:
        pos = int(rng.integers(len(tokens)))
        # replace with a uniformly random *different* token so the expected
        # hamming distance to the template equals report_perturb_prob exactly
        offset = int(rng.integers(1, spec.vocab_size))
        tokens[pos] = (tokens[pos] + offset) % spec.vocab_size
    return tuple(tokens)


def sample_conditional(
    spec: MixtureSpec, c: int, rng: np.random.Generator, with_tokens: bool = True
) -> DataPoint:
    """Draw one point from class c's conditional (tokens included by default)."""
    if not 0 <= c < spec.num_classes:
        raise ValueError(f"invalid class id {c}")
    point_index = None
    if spec.mode == "continuous":
        cond = spec.conditionals
        features = cond.means[c] + cond.stddevs[c] * rng.standard_normal(cond.dim)
    else:
        cond = spec.conditionals
        point_index = int(rng.choice(cond.num_points, p=cond.pmfs[c]))
        features = cond.points[point_index].copy()
    tokens = None
    if with_tokens:
        if spec.point_tokens is not None:
            tokens = spec.point_tokens[point_index]
        else:
            tokens = _sample_template_tokens(spec, c, rng)
    return DataPoint(features=features, tokens=tokens, latent_class=c, point_index=point_index)


def sample_marginal(spec: MixtureSpec, rng: np.random.Generator, with_tokens: bool = True) -> DataPoint:
    return sample_conditional(spec, sample_class(spec.class_dist, rng), rng, with_tokens)


def true_negative_prior(dist: ClassDistribution, c_x: int) -> np.ndarray:
    """Renormalized prior over classes other than c_x: rho(c) / (1 - rho(c_x))."""
    rho = dist.probs
    if not 0 <= c_x < dist.num_classes:
        raise ValueError(f"invalid class id {c_x}")
    rest = 1.0 - rho[c_x]
    if rest <= TOL:
        raise ValueError(f"class {c_x} has probability 1; no other class to draw from")
    out = rho.copy()
    out[c_x] = 0.0
    return out / rest


def sample_true_negative(spec: MixtureSpec, c_x: int, rng: np.random.Generator,
                         with_tokens: bool = True) -> DataPoint:
    """Draw from E_{c_x}: class c != c_x with probability rho(c)/(1-rho(c_x))."""
    probs = true_negative_prior(spec.class_dist, c_x)
    c = int(rng.choice(spec.num_classes, p=probs))
    return sample_conditional(spec, c, rng, with_tokens)


def sample_features_for_classes(
    spec: MixtureSpec, classes: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Vectorized conditional feature draws; returns (features, point_indices)."""
    classes = np.asarray(classes)
    if spec.mode == "continuous":
        cond = spec.conditionals
        noise = rng.standard_normal((classes.size, cond.dim))
        feats = cond.means[classes] + cond.stddevs[classes, None] * noise
        return feats, None
    cond = spec.conditionals
    cum = np.cumsum(cond.pmfs, axis=1)
    u = rng.random(classes.size)
    idx = np.minimum((cum[classes] < u[:, None]).sum(axis=1), cond.num_points - 1)
    return cond.points[idx], idx


# ---------------------------------------------------------------------------
# Exact pmfs and the marginal decomposition check (discrete mode)
# ---------------------------------------------------------------------------


def _require_discrete(spec: MixtureSpec) -> DiscreteConditionals:
    if spec.mode != "discrete":
        raise ValueError("operation requires a discrete-mode spec")
    return spec.conditionals


def exact_marginal_pmf(spec: MixtureSpec) -> np.ndarray:
    cond = _require_discrete(spec)
    return spec.class_dist.probs @ cond.pmfs


def exact_negative_pmf(spec: MixtureSpec, c_x: int) -> np.ndarray:
    """Exact pmf of E_{c_x} over the point alphabet."""
    cond = _require_discrete(spec)
    return true_negative_prior(spec.class_dist, c_x) @ cond.pmfs


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def decomposition_residual(spec: MixtureSpec, c: int) -> float:
    """TV distance between D and rho(c) * D_c + (1 - rho(c)) * E_c, by enumeration.

    Zero (to rounding) for every valid spec; nonzero only if one side is
    deliberately perturbed.
    """
    cond = _require_discrete(spec)
    rho_c = spec.class_dist.probs[c]
    recon = rho_c * cond.pmfs[c] + (1.0 - rho_c) * exact_negative_pmf(spec, c)
    return tv_distance(exact_marginal_pmf(spec), recon)


# ---------------------------------------------------------------------------
# Spec surgery and pair sampling
# ---------------------------------------------------------------------------


def subsample_classes(spec: MixtureSpec, selected: Sequence[int], r: float) -> MixtureSpec:
    """Reweight the prior as if keeping an r fraction of each selected class.

    Each selected class's prior mass is scaled by r, unselected classes keep
    weight 1, and the prior is renormalized; conditionals and templates are
    preserved exactly.  From a uniform prior over 10 classes with 5 selected
    this gives 0.2*r/(1+r) per selected class and 0.2/(1+r) per other class.
    """
    selected = set(int(s) for s in selected)
    if not selected:
        raise ValueError("selected class set must be nonempty")
    if not all(0 <= s < spec.num_classes for s in selected):
        raise ValueError("selected class id out of range")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"r must be in (0, 1], got {r}")
    weights = np.array(
        [r if k in selected else 1.0 for k in range(spec.num_classes)], dtype=np.float64
    )
    probs = spec.class_dist.probs * weights
    probs = probs / probs.sum()
    return replace(spec, class_dist=ClassDistribution(probs))


def sample_pair_batch(
    spec: MixtureSpec,
    n_neg: int,
    rng: np.random.Generator,
    cross_modal: bool = False,
) -> PairSample:
    """Draw (anchor, positive, negatives): positive is an independent redraw
    from the anchor's conditional; negatives are marginal draws.

    In cross-modal mode the anchor carries tokens and the positive only
    features (text anchor, feature positive).
    """
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    anchor = sample_marginal(spec, rng, with_tokens=True)
    positive = sample_conditional(spec, anchor.latent_class, rng, with_tokens=not cross_modal)
    if cross_modal:
        positive = replace(positive, tokens=None)
    negatives = tuple(sample_marginal(spec, rng, with_tokens=True) for _ in range(n_neg))
    return PairSample(anchor=anchor, positive=positive, negatives=negatives)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def spec_to_dict(spec: MixtureSpec) -> dict:
    d = {
        "class_probs": spec.class_dist.probs.tolist(),
        "vocab_size": spec.vocab_size,
        "templates": [[list(t) for t in ts] for ts in spec.templates],
        "template_weights": [list(ws) for ws in spec.template_weights],
        "report_perturb_prob": spec.report_perturb_prob,
        "mode": spec.mode,
    }
    if spec.mode == "continuous":
        d["gaussian"] = {
            "means": spec.conditionals.means.tolist(),
            "stddevs": spec.conditionals.stddevs.tolist(),
        }
    else:
        d["discrete"] = {
            "points": spec.conditionals.points.tolist(),
            "pmfs": spec.conditionals.pmfs.tolist(),
        }
        if spec.point_tokens is not None:
            d["point_tokens"] = [list(t) for t in spec.point_tokens]
    return d


def spec_from_dict(d: dict) -> MixtureSpec:
    dist = ClassDistribution(np.array(d["class_probs"], dtype=np.float64))
    if d["mode"] == "continuous":
        cond = GaussianConditionals(
            means=np.array(d["gaussian"]["means"], dtype=np.float64),
            stddevs=np.array(d["gaussian"]["stddevs"], dtype=np.float64),
        )
        point_tokens = None
    elif d["mode"] == "discrete":
        cond = DiscreteConditionals(
            points=np.array(d["discrete"]["points"], dtype=np.float64),
            pmfs=np.array(d["discrete"]["pmfs"], dtype=np.float64),
        )
        point_tokens = (
            tuple(tuple(int(t) for t in seq) for seq in d["point_tokens"])
            if "point_tokens" in d
            else None
        )
    else:
        raise ValueError(f"unknown mode {d['mode']!r}")
    return MixtureSpec(
        class_dist=dist,
        conditionals=cond,
        templates=tuple(tuple(tuple(int(t) for t in seq) for seq in ts) for ts in d["templates"]),
        template_weights=tuple(tuple(float(w) for w in ws) for ws in d["template_weights"]),
        vocab_size=int(d["vocab_size"]),
        point_tokens=point_tokens,
        report_perturb_prob=float(d.get("report_perturb_prob", 0.0)),
    )


def save_spec(spec: MixtureSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(spec_to_dict(spec), f, indent=2)


def load_spec(path) -> MixtureSpec:
    with open(path) as f:
        return spec_from_dict(json.load(f))
