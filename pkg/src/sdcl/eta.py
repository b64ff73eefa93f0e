"""Per-sample class-probability estimates eta(x) in (0, 1).

Three strategies: a constant hyperparameter, the simulator-side oracle that
reads the true prior of the sample's latent class, and a log-linear map from
a language-model sentence likelihood,

    eta_LM(x) = a * p_LM(x)^k = a * exp(k * PLL(x)),

optionally length-normalizing PLL first.  Every variant clamps its output to
[eta_min, eta_max] strictly inside (0, 1) because the 1/(1-eta) weights in
the debiased estimator blow up as eta -> 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mixture import DataPoint, MixtureSpec, TokenSeq
from .textsim import NGramLM, pseudo_log_likelihood

DEFAULT_ETA_MIN = 1e-4
DEFAULT_ETA_MAX = 0.9


@dataclass(frozen=True)
class EtaConfig:
    """JSON-facing description of an eta strategy."""

    kind: str = "constant"  # constant | true_oracle | lm_log_linear
    value: float = 0.1
    a: float = 0.2
    k: float = 0.35
    length_normalize: bool = False
    eta_min: float = DEFAULT_ETA_MIN
    eta_max: float = DEFAULT_ETA_MAX

    def __post_init__(self):
        if self.kind not in ("constant", "true_oracle", "lm_log_linear"):
            raise ValueError(f"unknown eta kind {self.kind!r}")
        if not 0.0 < self.eta_min <= self.eta_max < 1.0:
            raise ValueError("need 0 < eta_min <= eta_max < 1")
        if self.kind == "lm_log_linear" and (self.a <= 0 or self.k <= 0):
            raise ValueError("log-linear map needs a > 0 and k > 0")


def _clamp(value: float, lo: float, hi: float) -> float:
    return float(min(max(value, lo), hi))


@dataclass(frozen=True)
class ConstantEta:
    value: float
    eta_min: float = DEFAULT_ETA_MIN
    eta_max: float = DEFAULT_ETA_MAX


@dataclass(frozen=True)
class TrueOracleEta:
    """Reads rho(c_x) from the generating spec; simulator-side only."""

    spec: MixtureSpec
    eta_min: float = DEFAULT_ETA_MIN
    eta_max: float = DEFAULT_ETA_MAX


@dataclass(frozen=True)
class LMLogLinearEta:
    a: float
    k: float
    lm: NGramLM
    length_normalize: bool = False
    eta_min: float = DEFAULT_ETA_MIN
    eta_max: float = DEFAULT_ETA_MAX
    pll_cache: dict = field(default_factory=dict)

    def pll(self, tokens: TokenSeq) -> float:
        key = tuple(int(t) for t in tokens)
        if key not in self.pll_cache:
            self.pll_cache[key] = pseudo_log_likelihood(self.lm, key)
        return self.pll_cache[key]


EtaProvider = ConstantEta | TrueOracleEta | LMLogLinearEta


def make_provider(
    config: EtaConfig,
    spec: Optional[MixtureSpec] = None,
    lm: Optional[NGramLM] = None,
    pll_table: Optional[dict] = None,
) -> EtaProvider:
    bounds = dict(eta_min=config.eta_min, eta_max=config.eta_max)
    if config.kind == "constant":
        return ConstantEta(value=config.value, **bounds)
    if config.kind == "true_oracle":
        if spec is None:
            raise ValueError("true_oracle provider needs the generating spec")
        return TrueOracleEta(spec=spec, **bounds)
    if lm is None:
        raise ValueError("lm_log_linear provider needs a fitted language model")
    provider = LMLogLinearEta(
        a=config.a, k=config.k, lm=lm, length_normalize=config.length_normalize, **bounds
    )
    if pll_table:
        provider.pll_cache.update(pll_table)
    return provider


def eta_of(provider: EtaProvider, x: DataPoint) -> float:
    """Evaluate eta(x); always inside [eta_min, eta_max]."""
    if isinstance(provider, ConstantEta):
        return _clamp(provider.value, provider.eta_min, provider.eta_max)
    if isinstance(provider, TrueOracleEta):
        rho = float(provider.spec.class_dist.probs[x.latent_class])
        return _clamp(rho, provider.eta_min, provider.eta_max)
    if x.tokens is None:
        raise ValueError("lm_log_linear eta needs a data point with tokens")
    pll = provider.pll(x.tokens)
    if provider.length_normalize:
        pll = pll / len(x.tokens)
    return _clamp(provider.a * np.exp(provider.k * pll), provider.eta_min, provider.eta_max)


def calibrate_log_linear(
    pll_values,
    eta_range: tuple[float, float] = (0.05, 0.3),
    quantiles: tuple[float, float] = (0.1, 0.9),
) -> tuple[float, float]:
    """Choose (a, k) so the given PLL quantiles map onto ``eta_range``.

    Uses only the corpus score distribution (no class information): the low
    quantile lands on the low end of the range and the high quantile on the
    high end, preserving the monotone log-linear form.
    """
    lo, hi = float(eta_range[0]), float(eta_range[1])
    if not 0.0 < lo < hi < 1.0:
        raise ValueError("eta_range must satisfy 0 < lo < hi < 1")
    values = np.asarray(list(pll_values), dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two PLL values to calibrate")
    pll_lo, pll_hi = np.quantile(values, quantiles)
    if pll_hi - pll_lo < 1e-9:
        raise ValueError("PLL quantiles are degenerate; cannot calibrate a slope")
    k = float(np.log(hi / lo) / (pll_hi - pll_lo))
    a = float(lo * np.exp(-k * pll_lo))
    return a, k


def eta_for_batch(
    provider: EtaProvider,
    classes: Optional[np.ndarray] = None,
    token_seqs: Optional[list[TokenSeq]] = None,
) -> np.ndarray:
    """Vectorized eta for a batch described by latent classes and/or tokens."""
    if isinstance(provider, ConstantEta):
        size = len(classes) if classes is not None else len(token_seqs)
        return np.full(size, _clamp(provider.value, provider.eta_min, provider.eta_max))
    if isinstance(provider, TrueOracleEta):
        if classes is None:
            raise ValueError("oracle eta needs latent classes")
        rho = provider.spec.class_dist.probs[np.asarray(classes)]
        return np.clip(rho, provider.eta_min, provider.eta_max)
    if token_seqs is None:
        raise ValueError("lm_log_linear eta needs token sequences")
    out = np.empty(len(token_seqs))
    for i, seq in enumerate(token_seqs):
        pll = provider.pll(seq)
        if provider.length_normalize:
            pll = pll / len(seq)
        out[i] = _clamp(provider.a * np.exp(provider.k * pll), provider.eta_min, provider.eta_max)
    return out
