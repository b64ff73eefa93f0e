"""Experiment pipelines: the class-imbalance analog study, the constant-eta
tradeoff study on long-tailed cross-modal data, and the randomized bound
verification sweep.

The analog study trains four objective variants (plain contrastive, debiased
with the true per-sample class probability, and debiased with each of the two
constants that are each correct for only one class group) on a Gaussian
mixture whose five "subsampled" classes have their prior scaled by r, then
compares linear probes across label fractions.  Positive pairs are two
jittered views of one draw, the augmentation analog; with independent
same-class redraws the false-negative correction has nothing to repair (the
pair itself carries the full class signal) and the variants are
indistinguishable.

The tradeoff study trains cross-modal text/image encoders on a long-tailed
prior (two head classes at 0.25, eight tails) and sweeps the constant
correction strength against the language-model estimate, scoring head-class
prompt classification and tail-class retrieval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import encoder as enc
from . import evaluate as ev
from . import mixture as mix
from . import textsim as ts
from . import train as tr
from .bounds import BoundReport, verify_prop1
from .eta import EtaConfig, calibrate_log_linear, make_provider
from .rngstream import stream

# ---------------------------------------------------------------------------
# Class-imbalance analog (10-class Gaussian mixture, subsampled prior)
# ---------------------------------------------------------------------------

ANALOG_VARIANTS = ("cl", "dcl_eta_true", "dcl_eta_rare", "dcl_eta_common")


@dataclass(frozen=True)
class AnalogConfig:
    n_classes: int = 10
    dim: int = 16
    separation: float = 3.0
    sigma: float = 0.8
    spec_seed: int = 123
    subsampled: tuple = (0, 1, 2, 3, 4)
    view_noise: float = 0.05
    batch_size: int = 128
    epochs: int = 40
    samples_per_epoch: int = 2048
    learning_rate: float = 1e-3
    gamma: float = math.sqrt(2.0)
    n_probe: int = 40000
    n_test_per_class: int = 300
    label_fractions: tuple = (0.01, 0.1, 1.0)
    r_values: tuple = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9)
    seeds: tuple = (0, 1, 2, 3, 4)


def analog_spec(config: AnalogConfig = AnalogConfig()) -> mix.MixtureSpec:
    """Uniform 10-class mixture with random equal-norm means."""
    rng = stream(config.spec_seed, 0)
    means = rng.standard_normal((config.n_classes, config.dim))
    means *= config.separation / np.linalg.norm(means, axis=1, keepdims=True)
    return mix.MixtureSpec(
        class_dist=mix.ClassDistribution(np.full(config.n_classes, 1.0 / config.n_classes)),
        conditionals=mix.GaussianConditionals(
            means=means, stddevs=np.full(config.n_classes, config.sigma)
        ),
        templates=tuple(((c,),) for c in range(config.n_classes)),
        template_weights=tuple((1.0,) for _ in range(config.n_classes)),
        vocab_size=config.n_classes,
    )


def analog_train_config(
    variant: str, sub: mix.MixtureSpec, config: AnalogConfig, seed: int
) -> tr.TrainConfig:
    rare_eta = float(sub.class_dist.probs[config.subsampled[0]])
    common = next(c for c in range(sub.num_classes) if c not in config.subsampled)
    common_eta = float(sub.class_dist.probs[common])
    base = dict(
        mode="unimodal",
        positive_mode="view",
        view_noise=config.view_noise,
        batch_size=config.batch_size,
        epochs=config.epochs,
        samples_per_epoch=config.samples_per_epoch,
        learning_rate=config.learning_rate,
        gamma=config.gamma,
        seed=seed,
    )
    if variant == "cl":
        return tr.TrainConfig(objective="cl", **base)
    if variant == "dcl_eta_true":
        return tr.TrainConfig(objective="dcl", eta=EtaConfig(kind="true_oracle"), **base)
    if variant == "dcl_eta_rare":
        return tr.TrainConfig(
            objective="dcl", eta=EtaConfig(kind="constant", value=rare_eta), **base
        )
    if variant == "dcl_eta_common":
        return tr.TrainConfig(
            objective="dcl", eta=EtaConfig(kind="constant", value=common_eta), **base
        )
    raise ValueError(f"unknown analog variant {variant!r}")


def run_analog_cell(
    base_spec: mix.MixtureSpec, config: AnalogConfig, r: float, variant: str, seed: int
) -> dict:
    """Train one variant at one r and probe it across label fractions.

    The probe pool is drawn from the (nonuniform) training marginal; the test
    set is balanced across classes, mirroring subsampled-train/full-test
    evaluation.
    """
    sub = mix.subsample_classes(base_spec, config.subsampled, r)
    result = tr.train(sub, analog_train_config(variant, sub, config, seed))

    pool_rng = stream(seed, 2, 0)
    pool_classes = mix.sample_class_array(sub.class_dist, config.n_probe, pool_rng)
    pool_x, _ = mix.sample_features_for_classes(sub, pool_classes, pool_rng)
    test_classes = np.repeat(np.arange(base_spec.num_classes), config.n_test_per_class)
    test_x, _ = mix.sample_features_for_classes(base_spec, test_classes, stream(seed, 2, 1))
    pool_emb, _ = enc.forward_features(result.params, pool_x)
    test_emb, _ = enc.forward_features(result.params, test_x)

    accuracies = {}
    for fraction in config.label_fractions:
        accuracies[fraction] = ev.linear_probe(
            pool_emb, pool_classes, test_emb, test_classes, fraction, stream(seed, 2, 2)
        )
    return {
        "r": r,
        "variant": variant,
        "seed": seed,
        "accuracies": accuracies,
        "params": result.params,
        "trace": result.trace_array(),
    }


def analog_study(
    config: AnalogConfig = AnalogConfig(),
    r_values: Optional[tuple] = None,
    variants: tuple = ANALOG_VARIANTS,
    keep_params: bool = False,
) -> list[dict]:
    """Full grid of (r, variant, seed) cells; rows sorted for reproducibility."""
    base = analog_spec(config)
    rows = []
    for r in r_values if r_values is not None else config.r_values:
        for variant in variants:
            for seed in config.seeds:
                cell = run_analog_cell(base, config, r, variant, seed)
                if not keep_params:
                    cell.pop("params")
                    cell.pop("trace")
                rows.append(cell)
    return rows


def analog_gaps(rows: list[dict], r: float, fraction: float) -> float:
    """Seed-averaged accuracy edge of the true-eta variant over the best
    alternative, in accuracy points (x100)."""
    means = {}
    for variant in ANALOG_VARIANTS:
        vals = [
            row["accuracies"][fraction]
            for row in rows
            if row["variant"] == variant and row["r"] == r
        ]
        means[variant] = float(np.mean(vals))
    others = max(means[v] for v in ANALOG_VARIANTS if v != "dcl_eta_true")
    return 100.0 * (means["dcl_eta_true"] - others)


def analog_spread(rows: list[dict], r: float, fraction: float) -> float:
    """Max minus min seed-averaged accuracy across the four variants (x100)."""
    means = []
    for variant in ANALOG_VARIANTS:
        vals = [
            row["accuracies"][fraction]
            for row in rows
            if row["variant"] == variant and row["r"] == r
        ]
        means.append(float(np.mean(vals)))
    return 100.0 * (max(means) - min(means))


# ---------------------------------------------------------------------------
# Constant-eta tradeoff on long-tailed cross-modal data
# ---------------------------------------------------------------------------

FILLER_A, FILLER_B = 10, 11


@dataclass(frozen=True)
class TradeoffConfig:
    dim: int = 16
    head_shell: float = 3.0
    head_split: float = 1.2
    head_sigma: float = 0.5
    tail_radius: float = 3.4
    tail_sigma: float = 0.6
    spec_seed: int = 321
    vocab_size: int = 24
    perturb_prob: float = 0.05
    batch_size: int = 128
    epochs: int = 60
    samples_per_epoch: int = 2048
    learning_rate: float = 5e-4
    gamma: float = 4.0
    lm_corpus_size: int = 2000
    calibration_range: tuple = (0.01, 0.2)
    calibration_quantiles: tuple = (0.25, 0.75)
    constant_etas: tuple = (0.01, 0.05, 0.1, 0.2)
    retrieval_per_class: int = 20
    retrieval_ks: tuple = (10, 50, 100)
    prompt_images_per_side: int = 100
    seeds: tuple = (0, 1, 2, 3, 4)

    @property
    def head_classes(self) -> tuple:
        return (0, 1)

    @property
    def tail_classes(self) -> tuple:
        return tuple(range(2, 10))


def tradeoff_spec(config: TradeoffConfig = TradeoffConfig()) -> mix.MixtureSpec:
    """Long-tailed cross-modal toy: two common confusable head classes on a
    shared shell direction, eight rarer tails, one template per class."""
    rng = stream(config.spec_seed, 0)
    dim = config.dim
    u = rng.standard_normal(dim)
    u *= config.head_shell / np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v -= (v @ u) * u / (u @ u)
    v *= (config.head_split / 2) / np.linalg.norm(v)
    means = np.zeros((10, dim))
    means[0] = u + v
    means[1] = u - v
    for c in range(2, 10):
        w = rng.standard_normal(dim)
        means[c] = w * config.tail_radius / np.linalg.norm(w)
    stddevs = np.array([config.head_sigma] * 2 + [config.tail_sigma] * 8)
    probs = np.array([0.25, 0.25] + [0.0625] * 8)
    templates = tuple(((FILLER_A, c, 12 + c, FILLER_B),) for c in range(10))
    return mix.MixtureSpec(
        class_dist=mix.ClassDistribution(probs),
        conditionals=mix.GaussianConditionals(means=means, stddevs=stddevs),
        templates=templates,
        template_weights=tuple((1.0,) for _ in range(10)),
        vocab_size=config.vocab_size,
        report_perturb_prob=config.perturb_prob,
    )


def class_prompts(spec: mix.MixtureSpec, c: int, sibling: int) -> tuple:
    """(negative, positive) prompt pair for a head task: the sibling head's
    canonical template describes the contrasting common state."""
    return spec.templates[sibling][0], spec.templates[c][0]


def tradeoff_train_config(variant: str, config: TradeoffConfig, seed: int) -> tr.TrainConfig:
    base = dict(
        mode="cross_modal",
        batch_size=config.batch_size,
        epochs=config.epochs,
        samples_per_epoch=config.samples_per_epoch,
        learning_rate=config.learning_rate,
        gamma=config.gamma,
        gamma_trainable=True,
        lm_corpus_size=config.lm_corpus_size,
        seed=seed,
    )
    if variant == "cl":
        return tr.TrainConfig(objective="cl", **base)
    if variant == "dcl_eta_lm":
        return tr.TrainConfig(objective="dcl", eta=EtaConfig(kind="lm_log_linear"), **base)
    return tr.TrainConfig(
        objective="dcl", eta=EtaConfig(kind="constant", value=float(variant)), **base
    )


def run_tradeoff_cell(spec: mix.MixtureSpec, config: TradeoffConfig, variant: str, seed: int) -> dict:
    """Train one variant and score head prompt accuracy plus tail retrieval."""
    train_config = tradeoff_train_config(variant, config, seed)
    lm_assets = None
    if variant == "dcl_eta_lm":
        lm, table = tr.build_lm_assets(spec, train_config)
        cal_rng = stream(seed, 11)
        cal_classes = mix.sample_class_array(spec.class_dist, 1000, cal_rng)
        cal_plls = [
            ts.pseudo_log_likelihood(lm, ts.generate_report(spec, int(c), cal_rng))
            for c in cal_classes
        ]
        a, k = calibrate_log_linear(
            cal_plls, eta_range=config.calibration_range, quantiles=config.calibration_quantiles
        )
        train_config = replace(
            train_config, eta=EtaConfig(kind="lm_log_linear", a=a, k=k)
        )
        lm_assets = (lm, table)
    result = tr.train(spec, train_config, lm_assets=lm_assets)
    params = result.params

    # tail-class retrieval over a balanced text/image gallery
    rng = stream(seed, 3, 0)
    classes = np.repeat(np.arange(spec.num_classes), config.retrieval_per_class)
    feats, _ = mix.sample_features_for_classes(spec, classes, rng)
    texts = [ts.generate_report(spec, int(c), rng) for c in classes]
    img_emb, _ = enc.forward_features(params, feats)
    txt_emb, _ = enc.forward_tokens(params, texts)
    retrieval = ev.retrieval_metrics(txt_emb, img_emb, ks=config.retrieval_ks)
    tail_mask = np.isin(classes, config.tail_classes)
    tail_vals = [
        float(np.mean(ranks[tail_mask] <= k))
        for ranks in retrieval.ranks.values()
        for k in config.retrieval_ks
    ]
    tail_recall = float(np.mean(tail_vals))

    # head prompt classification: each head against its confusable sibling
    prompt_rng = stream(seed, 3, 1)
    head_accs = {}
    n_side = config.prompt_images_per_side
    for c in config.head_classes:
        sibling = config.head_classes[1 - config.head_classes.index(c)]
        prompts = {c: class_prompts(spec, c, sibling)}
        test_classes = np.concatenate([np.full(n_side, c), np.full(n_side, sibling)])
        x, _ = mix.sample_features_for_classes(spec, test_classes, prompt_rng)
        embs, _ = enc.forward_features(params, x)
        report = ev.prompt_classify(embs, test_classes, prompts, params)
        head_accs[c] = report.per_class[c]
    return {
        "variant": variant,
        "seed": seed,
        "head_accuracy": float(np.mean(list(head_accs.values()))),
        "tail_avg_recall": tail_recall,
        "avg_recall": retrieval.avg_recall,
        "gamma_final": params.gamma,
        "eta_a": getattr(train_config.eta, "a", None),
        "eta_k": getattr(train_config.eta, "k", None),
    }


def tradeoff_study(
    config: TradeoffConfig = TradeoffConfig(),
    include_cl: bool = True,
) -> list[dict]:
    spec = tradeoff_spec(config)
    variants = (("cl",) if include_cl else ()) + tuple(
        str(v) for v in config.constant_etas
    ) + ("dcl_eta_lm",)
    rows = []
    for variant in variants:
        for seed in config.seeds:
            rows.append(run_tradeoff_cell(spec, config, variant, seed))
    return rows


def tradeoff_summary(rows: list[dict], config: TradeoffConfig = TradeoffConfig()) -> dict:
    """Seed-averaged metrics per variant plus the monotonicity statistics."""
    import warnings

    from scipy.stats import ConstantInputWarning, spearmanr

    def mean_metric(variant, key):
        return float(np.mean([r[key] for r in rows if r["variant"] == variant]))

    constants = [str(v) for v in config.constant_etas]
    head = [mean_metric(v, "head_accuracy") for v in constants]
    tail = [mean_metric(v, "tail_avg_recall") for v in constants]
    etas = [float(v) for v in constants]
    with warnings.catch_warnings():
        # a constant metric column has no defined rank correlation; report nan
        warnings.simplefilter("ignore", ConstantInputWarning)
        head_rho = float(spearmanr(etas, head).statistic)
        tail_rho = float(spearmanr(etas, tail).statistic)
    lm_head = mean_metric("dcl_eta_lm", "head_accuracy")
    lm_tail = mean_metric("dcl_eta_lm", "tail_avg_recall")
    return {
        "constant_etas": etas,
        "head_accuracy": head,
        "tail_avg_recall": tail,
        "head_spearman": head_rho,
        "tail_spearman": tail_rho,
        "lm_head_accuracy": lm_head,
        "lm_tail_avg_recall": lm_tail,
        "best_constant_head": max(head),
        "best_constant_tail": max(tail),
    }


# ---------------------------------------------------------------------------
# Randomized bound-verification sweep
# ---------------------------------------------------------------------------

BOUND_ETA_VARIANTS = ("constant_0.05", "constant_0.5", "true_oracle", "lm_log_linear")


@dataclass(frozen=True)
class BoundSweepConfig:
    n_configs: int = 50
    seed: int = 7
    trials: int = 200
    max_trials: int = 6400
    constants: str = "proof"
    n_grid: tuple = (4, 16, 64, 256)
    m_grid: tuple = (1, 4, 16)
    max_classes: int = 8
    max_points: int = 32


def _random_discrete_spec(rng: np.random.Generator, config: BoundSweepConfig) -> mix.MixtureSpec:
    k = int(rng.integers(2, config.max_classes + 1))
    p = int(rng.integers(max(4, k), config.max_points + 1))
    dim = int(rng.integers(3, 7))
    vocab = 12
    probs = rng.random(k) + 0.15
    probs /= probs.sum()
    pmfs = rng.random((k, p)) + 0.05
    pmfs /= pmfs.sum(axis=1, keepdims=True)
    point_tokens = tuple(
        tuple(int(t) for t in rng.integers(0, vocab, size=4)) for _ in range(p)
    )
    return mix.MixtureSpec(
        class_dist=mix.ClassDistribution(probs),
        conditionals=mix.DiscreteConditionals(
            points=rng.standard_normal((p, dim)), pmfs=pmfs
        ),
        templates=tuple(((int(rng.integers(0, vocab)),),) for _ in range(k)),
        template_weights=tuple((1.0,) for _ in range(k)),
        vocab_size=vocab,
        point_tokens=point_tokens,
    )


def _bound_provider(variant: str, spec: mix.MixtureSpec, rng: np.random.Generator):
    if variant == "constant_0.05":
        return make_provider(EtaConfig(kind="constant", value=0.05))
    if variant == "constant_0.5":
        return make_provider(EtaConfig(kind="constant", value=0.5))
    if variant == "true_oracle":
        return make_provider(EtaConfig(kind="true_oracle"), spec=spec)
    marginal = mix.exact_marginal_pmf(spec)
    corpus_idx = rng.choice(len(spec.point_tokens), size=400, p=marginal)
    corpus = [spec.point_tokens[i] for i in corpus_idx]
    lm = ts.fit_ngram(corpus, alpha=1.0, vocab_size=spec.vocab_size)
    return make_provider(EtaConfig(kind="lm_log_linear", a=0.2, k=0.35), lm=lm)


def bound_sweep(config: BoundSweepConfig = BoundSweepConfig()) -> list[dict]:
    """Randomized configurations cycling the eta variants and (N, M) grid;
    one ``BoundReport`` per configuration."""
    reports = []
    for i in range(config.n_configs):
        rng = stream(config.seed, 5, i)
        spec = _random_discrete_spec(rng, config)
        params = enc.init_params(
            spec.dim, int(rng.integers(4, 10)), int(rng.integers(3, 8)), rng, gamma=1.0
        )
        variant = BOUND_ETA_VARIANTS[i % len(BOUND_ETA_VARIANTS)]
        provider = _bound_provider(variant, spec, rng)
        n = int(config.n_grid[i % len(config.n_grid)])
        m = int(config.m_grid[i % len(config.m_grid)])
        report = verify_prop1(
            spec,
            params,
            provider,
            n=n,
            m=m,
            rng=stream(config.seed, 6, i),
            trials=config.trials,
            max_trials=config.max_trials,
            constants=config.constants,
        )
        row = report.to_dict()
        row.update({"config_index": i, "eta_variant": variant,
                    "classes": spec.num_classes, "points": spec.conditionals.num_points})
        reports.append(row)
    return reports
