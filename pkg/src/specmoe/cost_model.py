"""Per-iteration execution time for speculative verification on MoE models.

Time is split into attention (flat in the number of in-flight tokens), expert
weight movement (proportional to the number of distinct experts fetched),
drafting and rejection sampling. All times are in the units of
``ExpertConfig.baseline_iter_time``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from specmoe.kernels import mean_routed_active


class ConfigError(ValueError):
    """An invalid model, drafter or scenario configuration."""


@dataclass(frozen=True)
class ExpertConfig:
    """Routing geometry of one MoE model.

    ``experts_per_layer`` counts every expert in a layer, shared ones
    included, matching how model cards list them. Routed experts are drawn
    from the remaining ``experts_per_layer - shared_experts``.
    """

    name: str
    num_layers: int
    experts_per_layer: int
    top_k: int
    shared_experts: int = 0
    affinity: float = 0.0
    baseline_iter_time: float = 1.0
    attention_fraction: float = 0.08

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"{self.name}: num_layers must be >= 1")
        if self.top_k < 1 and self.shared_experts < 1:
            raise ConfigError(f"{self.name}: need at least one active expert")
        if not 1 <= self.top_k + self.shared_experts <= self.experts_per_layer:
            raise ConfigError(
                f"{self.name}: top_k + shared_experts must lie in [1, experts_per_layer]"
            )
        if not 0.0 <= self.affinity <= 1.0:
            raise ConfigError(f"{self.name}: affinity must lie in [0, 1]")
        if not 0.0 < self.attention_fraction < 1.0:
            raise ConfigError(f"{self.name}: attention_fraction must lie in (0, 1)")
        if not self.baseline_iter_time > 0:
            raise ConfigError(f"{self.name}: baseline_iter_time must be > 0")

    @property
    def routed_experts(self) -> int:
        return self.experts_per_layer - self.shared_experts

    @property
    def active_per_token(self) -> int:
        return self.top_k + self.shared_experts


@dataclass(frozen=True)
class DraftCostModel:
    """Drafting and rejection-sampling overheads, as fractions of the baseline.

    ``kind="free"`` is a drafter without model state (n-gram lookup): nothing
    runs when K=0. ``kind="per_token_linear"`` is a model-based drafter whose
    KV cache must stay current, so it keeps running at K=0 and costs
    ``always_on_overhead`` even then.
    """

    name: str = "free"
    kind: str = "free"
    per_k_overhead: float = 0.0
    sampling_overhead: float = 0.0
    always_on_overhead: float = 0.0

    def __post_init__(self):
        if self.kind not in ("free", "per_token_linear"):
            raise ConfigError(f"unknown drafter kind {self.kind!r}")
        for attr in ("per_k_overhead", "sampling_overhead", "always_on_overhead"):
            if getattr(self, attr) < 0:
                raise ConfigError(f"{self.name}: {attr} must be >= 0")


@dataclass(frozen=True)
class CostBreakdown:
    attention_time: float
    expert_time: float
    draft_time: float
    sampling_time: float
    active_experts_per_layer: float
    total: float = field(default=math.nan)

    def __post_init__(self):
        if math.isnan(self.total):
            object.__setattr__(
                self,
                "total",
                self.attention_time + self.expert_time + self.draft_time + self.sampling_time,
            )

    @property
    def verify_time(self) -> float:
        return self.attention_time + self.expert_time


# Architecture shapes: (layers, total experts, top-k, shared). Baseline times
# are in milliseconds. attention_fraction is measured for Mixtral; the other
# models reuse it. Affinity here is the model-intrinsic component only; task
# fixtures add their own (see ``effective_affinity``).
MODEL_PRESETS: dict[str, ExpertConfig] = {
    "mixtral": ExpertConfig("mixtral", 32, 8, 2, 0, affinity=0.0, baseline_iter_time=28.0),
    "phi3.5": ExpertConfig("phi3.5", 32, 16, 2, 0, affinity=0.1, baseline_iter_time=22.0),
    "olmoe": ExpertConfig("olmoe", 16, 64, 8, 0, affinity=0.6, baseline_iter_time=6.0),
    "deepseek": ExpertConfig("deepseek", 28, 66, 6, 2, affinity=0.3, baseline_iter_time=12.0),
    "qwen1.5": ExpertConfig("qwen1.5", 24, 64, 4, 4, affinity=0.3, baseline_iter_time=10.0),
    "dense": ExpertConfig("dense", 32, 1, 1, 0, affinity=0.0, baseline_iter_time=1.0,
                          attention_fraction=0.3),
}

DRAFT_PRESETS: dict[str, DraftCostModel] = {
    "free": DraftCostModel("free"),
    # Drafting plus rejection sampling stays within 1-2% of the baseline.
    "ngram": DraftCostModel("ngram", "free", per_k_overhead=0.0025, sampling_overhead=0.01),
    "eagle": DraftCostModel(
        "eagle", "per_token_linear",
        per_k_overhead=0.05, sampling_overhead=0.01, always_on_overhead=0.025,
    ),
}

NO_DRAFTER = DraftCostModel("none")


def model_preset(name: str, **overrides) -> ExpertConfig:
    try:
        cfg = MODEL_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}"
        ) from None
    return replace(cfg, **overrides) if overrides else cfg


def draft_preset(name: str) -> DraftCostModel:
    try:
        return DRAFT_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown draft preset {name!r}; choose from {sorted(DRAFT_PRESETS)}"
        ) from None


def expected_unique_experts(num_experts: int, k: int, tokens: int) -> float:
    """Expected distinct experts when ``tokens`` tokens each pick ``k`` of
    ``num_experts`` uniformly at random (balls into buckets)."""
    if not 1 <= k <= num_experts:
        raise ValueError(f"need 1 <= k <= num_experts, got k={k}, E={num_experts}")
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    return num_experts * (1.0 - (1.0 - k / num_experts) ** tokens)


def effective_affinity(model_affinity: float, task_affinity: float | None) -> float:
    """Reuse probability when model-level and task-level reuse act independently."""
    if task_affinity is None:
        return model_affinity
    return 1.0 - (1.0 - model_affinity) * (1.0 - task_affinity)


def expected_active_experts(cfg: ExpertConfig, tokens: int, affinity: float | None = None) -> float:
    """Closed-form mean of ``sample_active_experts``.

    The number of fresh draws is ``1 + Binomial(tokens - 1, 1 - a)``; each
    fresh draw misses a given routed expert with probability ``q = 1 - k/R``.
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    a = cfg.affinity if affinity is None else affinity
    if cfg.top_k == 0:
        return float(cfg.shared_experts)
    routed = cfg.routed_experts
    q = 1.0 - cfg.top_k / routed
    missed = q * (a + (1.0 - a) * q) ** (tokens - 1)
    return cfg.shared_experts + routed * (1.0 - missed)


def _uniforms(rng: np.random.Generator, cfg: ExpertConfig, tokens: int, layers: int) -> np.ndarray:
    return rng.random(layers * tokens * (cfg.top_k + 1))


def sample_active_experts(
    cfg: ExpertConfig,
    tokens: int,
    rng: np.random.Generator,
    affinity: float | None = None,
) -> float:
    """Distinct experts fetched by one layer for ``tokens`` in-flight tokens.

    Each token after the first copies its predecessor's expert set with
    probability ``affinity``; otherwise it routes to ``top_k`` distinct
    experts chosen uniformly. Shared experts are always counted once.
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    a = cfg.affinity if affinity is None else affinity
    if cfg.top_k == 0:
        return float(cfg.shared_experts)
    routed = mean_routed_active(
        _uniforms(rng, cfg, tokens, 1), 1, tokens, cfg.routed_experts, cfg.top_k, a
    )
    return cfg.shared_experts + routed


def mean_active_experts(
    cfg: ExpertConfig,
    tokens: int,
    rng: np.random.Generator,
    affinity: float | None = None,
) -> float:
    """Active experts per layer averaged over all ``cfg.num_layers`` layers."""
    a = cfg.affinity if affinity is None else affinity
    if tokens == 1 or cfg.top_k == 0:
        return float(cfg.active_per_token)
    routed = mean_routed_active(
        _uniforms(rng, cfg, tokens, cfg.num_layers),
        cfg.num_layers, tokens, cfg.routed_experts, cfg.top_k, a,
    )
    return cfg.shared_experts + routed


def _assemble(cfg, draft, k, active, overhead_free_k0):
    base = cfg.baseline_iter_time
    # Split B so that attention + expert == B exactly in floating point.
    expert_base = base - cfg.attention_fraction * base
    attention = base - expert_base
    ratio = active / cfg.active_per_token
    expert = expert_base * ratio
    if k == 0:
        draft_time = 0.0 if overhead_free_k0 else draft.always_on_overhead * base
        sampling = 0.0
    else:
        draft_time = draft.per_k_overhead * k * base
        sampling = draft.sampling_overhead * base
    return CostBreakdown(attention, expert, draft_time, sampling, active)


def iteration_cost(
    cfg: ExpertConfig,
    draft: DraftCostModel,
    k: int,
    rng: np.random.Generator,
    affinity: float | None = None,
) -> CostBreakdown:
    """Sample the cost of one decode step that verifies ``k`` draft tokens."""
    if k < 0:
        raise ValueError("k must be >= 0")
    active = mean_active_experts(cfg, k + 1, rng, affinity)
    return _assemble(cfg, draft, k, active, draft.kind == "free")


def expected_iteration_cost(
    cfg: ExpertConfig,
    draft: DraftCostModel,
    k: int,
    affinity: float | None = None,
) -> CostBreakdown:
    """Expected-value counterpart of ``iteration_cost`` (no sampling)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    active = expected_active_experts(cfg, k + 1, affinity)
    return _assemble(cfg, draft, k, active, draft.kind == "free")


class MoECostModel:
    """Samples iteration costs for a fixed (model, drafter) pair."""

    def __init__(self, cfg: ExpertConfig, draft: DraftCostModel = NO_DRAFTER):
        self.cfg = cfg
        self.draft = draft
        self.baseline_iter_time = cfg.baseline_iter_time
        self._k0 = _assemble(cfg, draft, 0, float(cfg.active_per_token), draft.kind == "free")

    def sample(self, k: int, rng: np.random.Generator, affinity: float | None = None) -> CostBreakdown:
        if k == 0:
            return self._k0
        a = effective_affinity(self.cfg.affinity, affinity)
        return iteration_cost(self.cfg, self.draft, k, rng, a)

    def without_drafter(self) -> "MoECostModel":
        return self if self.draft == NO_DRAFTER else MoECostModel(self.cfg, NO_DRAFTER)

    def expected_cost_ratio(self, k: int, affinity: float | None = None) -> float:
        a = effective_affinity(self.cfg.affinity, affinity)
        return expected_iteration_cost(self.cfg, self.draft, k, a).total / self.baseline_iter_time


class FixedCostModel:
    """Deterministic cost ratios per K; handy for exercising the controller.

    ``ratios`` maps K to iteration time relative to the baseline, either as a
    mapping (missing K falls back to the largest key below it) or a callable.
    """

    def __init__(self, ratios: Mapping[int, float] | Callable[[int], float], baseline_iter_time: float = 1.0):
        self.baseline_iter_time = baseline_iter_time
        self._ratios = ratios
        self._cache: dict[int, CostBreakdown] = {}

    def ratio(self, k: int) -> float:
        if callable(self._ratios):
            return float(self._ratios(k))
        if k in self._ratios:
            return float(self._ratios[k])
        below = [key for key in self._ratios if key <= k]
        if not below:
            raise ConfigError(f"no cost ratio for k={k}")
        return float(self._ratios[max(below)])

    def sample(self, k: int, rng=None, affinity=None) -> CostBreakdown:
        hit = self._cache.get(k)
        if hit is None:
            base = self.baseline_iter_time
            hit = CostBreakdown(0.0, self.ratio(k) * base, 0.0, 0.0, math.nan)
            self._cache[k] = hit
        return hit

    def expected_cost_ratio(self, k: int, affinity=None) -> float:
        return self.ratio(k)

    def without_drafter(self) -> "FixedCostModel":
        return self
