# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Multi-seed comparison of the multi-domain baseline and distilled models.

Every seed generates its own synthetic benchmark and trains one teacher per
seen domain, the MDL baseline and one URL model per feature loss, each with
the KL term. The models are then scored by test-episode accuracy and Recall@k
on every domain. ``check_claims`` reduces the rows to pass/fail comparisons.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from src.data import DomainDataset, SyntheticSpec, generate_synthetic
from src.evaluation import DEFAULT_RECALL_KS, AdaptConfig, evaluate_episodes, evaluate_retrieval
from src.losses import FeatureLossKind
from src.nets import MultiDomainModel, NetConfig
from src.optim import SgdConfig
from src.train import DistillConfig, train_mdl, train_single_domain, train_url

logger = logging.getLogger(__name__)

URL_FEATURE_LOSSES: dict[str, FeatureLossKind] = {"url-cka": "cka", "url-l2": "l2", "url-cosine": "cosine"}
METHODS = ("mdl", *URL_FEATURE_LOSSES)
SWEEP_REGIME = "varying"


@dataclass(frozen=True)
class SweepConfig:
    """Settings shared by every seed of a sweep.

    Attributes:
        seeds: Root seeds; each one generates its own benchmark.
        benchmark: Shape of the synthetic benchmark.
        hidden: Hidden widths of every network.
        feature_dim: Feature width of every network.
        sgd: Optimiser and schedule of every training run.
        distill: Base distillation settings; the feature loss is set per method.
        episodes: Test episodes per domain and classifier.
        adapt: Settings of the ``ncc-adapt`` classifier.
        adapt_methods: Methods also scored with ``ncc-adapt``.
        ks: Recall@k cut-offs; must include 1.
        val_episodes: Validation episodes per domain during training.
        workers: Episode worker threads.
    """

    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    benchmark: SyntheticSpec = field(default_factory=SyntheticSpec)
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    sgd: SgdConfig = field(default_factory=SgdConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    episodes: int = 600
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    adapt_methods: tuple[str, ...] = ("mdl", "url-cka")
    ks: tuple[int, ...] = DEFAULT_RECALL_KS
    val_episodes: int = 20
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"A sweep needs distinct seeds, got {self.seeds}")
        unknown = sorted(set(self.adapt_methods) - set(METHODS))
        if unknown:
            raise ValueError(f"Unknown methods {unknown}; choose from {list(METHODS)}")
        if 1 not in self.ks or any(k < 1 for k in self.ks):
            raise ValueError(f"Recall cut-offs must be positive and include 1, got {self.ks}")
        if self.episodes < 1 or self.workers < 1:
            raise ValueError("episodes and workers must be positive")


@dataclass(frozen=True)
class SweepRow:
    """One seed's score of one method on one domain; ``ci`` only for episode metrics."""

    seed: int
    method: str
    dataset: str
    metric: str
    value: float
    ci: float | None = None


@dataclass(frozen=True)
class Claim:
    """``left`` must reach ``right - margin``; ``detail`` adds any extra condition."""

    name: str
    left: float
    right: float
    margin: float
    passed: bool
    detail: str = ""


def train_methods(datasets: Sequence[DomainDataset], config: SweepConfig, seed: int) -> dict[str, MultiDomainModel]:
    """Train the baseline and every URL variant on the seen domains."""
    seen = [ds for ds in datasets if ds.seen]
    net = NetConfig(input_dim=seen[0].input_dim, hidden=config.hidden, feature_dim=config.feature_dim)
    teachers = {ds.name: train_single_domain(ds, net, config.sgd, seed, config.val_episodes)[0] for ds in seen}
    models = {"mdl": train_mdl(seen, net, config.sgd, seed, val_episodes=config.val_episodes)[0]}
    for method, loss in URL_FEATURE_LOSSES.items():
        distill = replace(config.distill, feature_loss=loss, use_kl=True)
        model, _ = train_url(seen, teachers, net, distill, config.sgd, seed, val_episodes=config.val_episodes)
        models[method] = model
    return models


def score_model(
    method: str, model: MultiDomainModel, datasets: Sequence[DomainDataset], config: SweepConfig, seed: int
) -> list[SweepRow]:
    rows: list[SweepRow] = []
    classifiers = ["ncc", "ncc-adapt"] if method in config.adapt_methods else ["ncc"]
    for ds in datasets:
        for clf in classifiers:
            r = evaluate_episodes(
                ds, model, clf, SWEEP_REGIME, config.episodes, seed, config.adapt, workers=config.workers
            )
            rows.append(SweepRow(seed, method, ds.name, clf, r.mean, r.ci))
        recalls = evaluate_retrieval(ds, model, config.ks).recalls
        rows.extend(SweepRow(seed, method, ds.name, f"recall@{k}", v) for k, v in sorted(recalls.items()))
    return rows


def run_sweep(config: SweepConfig) -> list[SweepRow]:
    """Train and score every method for every seed.

    Raises:
        TrainingError: A training run diverged.
        InfeasibleEpisodeError: A test split cannot host the varying regime.
    """
    rows: list[SweepRow] = []
    for i, seed in enumerate(config.seeds, start=1):
        datasets = generate_synthetic(config.benchmark, seed)
        for method, model in train_methods(datasets, config, seed).items():
            rows += score_model(method, model, datasets, config, seed)
        logger.info("Finished sweep seed %d (%d/%d)", seed, i, len(config.seeds))
    return rows


def seed_means(rows: Sequence[SweepRow], method: str, metric: str) -> dict[int, float]:
    """Per-seed mean over domains of one method's metric.

    Examples:
        >>> rows = [SweepRow(0, "mdl", "a", "ncc", 0.5), SweepRow(0, "mdl", "b", "ncc", 0.7)]
        >>> seed_means(rows, "mdl", "ncc")
        {0: 0.6}
    """
    values: dict[int, list[float]] = defaultdict(list)
    for r in rows:
        if r.method == method and r.metric == metric:
            values[r.seed].append(r.value)
    return {seed: float(np.mean(v)) for seed, v in sorted(values.items())}


def _overall(means: dict[int, float]) -> float:
    if not means:
        raise ValueError("No sweep rows for this comparison")
    return float(np.mean(list(means.values())))


def _at_least(name: str, left: float, right: float, margin: float, detail: str = "", extra: bool = True) -> Claim:
    return Claim(name, left, right, margin, left >= right - margin and extra, detail)


def check_claims(rows: Sequence[SweepRow]) -> list[Claim]:
    """Directional comparisons of a finished sweep.

    - URL with CKA+KL is at most 0.5 points below MDL and beats it in a
      majority of seeds.
    - ``ncc-adapt`` is at most 0.3 points below ``ncc`` on the models scored
      with both.
    - CKA+KL is at most 0.5 points below the better of L2+KL and cosine+KL.
    - URL Recall@1 is at most 2 points below MDL.

    Raises:
        ValueError: A comparison has no rows.
    """
    url, mdl = seed_means(rows, "url-cka", "ncc"), seed_means(rows, "mdl", "ncc")
    wins = sum(url[s] > mdl[s] for s in url if s in mdl)
    majority = len(url) // 2 + 1
    claims = [
        _at_least(
            "url-cka vs mdl (ncc)", _overall(url), _overall(mdl), 0.005, f"wins {wins}/{len(url)}", wins >= majority
        )
    ]

    adapted = {(r.seed, r.method, r.dataset): r.value for r in rows if r.metric == "ncc-adapt"}
    plain = [r.value for r in rows if r.metric == "ncc" and (r.seed, r.method, r.dataset) in adapted]
    if not adapted:
        raise ValueError("No sweep rows for this comparison")
    claims.append(
        _at_least("ncc-adapt vs ncc", float(np.mean(list(adapted.values()))), float(np.mean(plain)), 0.003)
    )

    others = {m: _overall(seed_means(rows, m, "ncc")) for m in ("url-l2", "url-cosine")}
    best = max(others, key=others.__getitem__)
    claims.append(_at_least("url-cka vs best other loss (ncc)", _overall(url), others[best], 0.005, best))

    claims.append(
        _at_least(
            "url-cka vs mdl (recall@1)",
            _overall(seed_means(rows, "url-cka", "recall@1")),
            _overall(seed_means(rows, "mdl", "recall@1")),
            0.02,
        )
    )
    for c in claims:
        if not c.passed:
            logger.warning(
                "Claim '%s' failed: %.4f vs %.4f (margin %.3f) %s", c.name, c.left, c.right, c.margin, c.detail
            )
    return claims
