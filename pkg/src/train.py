# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Training loops.

Three objectives share one SGD loop:

- single-domain (SDL): one backbone and head per domain, cross-entropy only;
  the result is a frozen teacher.
- multi-domain (MDL): a shared backbone with one head per domain, summing the
  per-domain cross-entropies of a joint batch.
- universal distillation (URL): MDL plus, per domain, a KL term towards the
  teacher's predictions and a feature term between the adapted student
  features and the teacher features. Both weights anneal linearly to zero.

All three draw initial weights and batches from the same named seed streams
(``init/backbone``, ``init/head/<domain>``, ``batches``), so MDL on one domain
reproduces SDL, and URL with zero distillation weights reproduces MDL.

Every ``anneal_freq`` steps the backbone is scored by NCC accuracy on fixed
validation-split episodes; the best snapshot is restored at the end.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from src.config import stream
from src.data import Batch, DomainDataset, batch_sizes_from_weights, multi_domain_batches
from src.errors import DimensionError, InfeasibleEpisodeError, NumericError, TrainingError
from src.evaluation import classify_ncc, episode_accuracies
from src.losses import FeatureLossKind, KernelSpec, cross_entropy, feature_loss, kl_pred_loss
from src.nets import Backbone, DomainNet, Head, MultiDomainModel, NetConfig, TeacherBank
from src.optim import SgdConfig, SgdState, anneal_lambda, cosine_lr, sgd_step
from src.tensor import Tensor, backward

logger = logging.getLogger(__name__)

VALIDATION_REGIME = "varying"


@dataclass(frozen=True)
class DistillConfig:
    """Distillation weights and losses.

    Attributes:
        feature_loss: Feature-matching loss, or ``none`` to drop the term.
        use_kl: Include the KL prediction term.
        kernel: Kernel for CKA.
        lambda_p: Default initial KL weight.
        lambda_f: Default initial feature weight.
        domain_lambda_p: Per-domain overrides of ``lambda_p``.
        domain_lambda_f: Per-domain overrides of ``lambda_f``.
        anchor_domain: Domain whose weights are scaled by ``anchor_multiplier``.
        anchor_multiplier: Scale for the anchor domain.
        anneal: Anneal the weights to zero; constant weights when False.
        anneal_periods: Default ``k``; weights reach zero after ``k × anneal_freq`` steps.
        domain_anneal_periods: Per-domain overrides of ``anneal_periods``.
        ce_weight: Weight of the cross-entropy term.
    """

    feature_loss: FeatureLossKind = "cka"
    use_kl: bool = True
    kernel: KernelSpec = field(default_factory=KernelSpec)
    lambda_p: float = 1.0
    lambda_f: float = 1.0
    domain_lambda_p: Mapping[str, float] = field(default_factory=dict)
    domain_lambda_f: Mapping[str, float] = field(default_factory=dict)
    anchor_domain: str | None = None
    anchor_multiplier: float = 4.0
    anneal: bool = True
    anneal_periods: int = 1
    domain_anneal_periods: Mapping[str, int] = field(default_factory=dict)
    ce_weight: float = 1.0

    def __post_init__(self) -> None:
        weights = [self.lambda_p, self.lambda_f, self.anchor_multiplier, self.ce_weight]
        weights += list(self.domain_lambda_p.values()) + list(self.domain_lambda_f.values())
        if any(w < 0 for w in weights):
            raise ValueError("Loss weights must be non-negative")
        periods = [self.anneal_periods, *self.domain_anneal_periods.values()]
        if any(k < 1 for k in periods):
            raise ValueError("anneal_periods must be at least 1")

    def initial_lambdas(self, domain: str) -> tuple[float, float]:
        """Initial ``(λp, λf)`` for a domain."""
        scale = self.anchor_multiplier if domain == self.anchor_domain else 1.0
        lp = self.domain_lambda_p.get(domain, self.lambda_p) * scale
        lf = self.domain_lambda_f.get(domain, self.lambda_f) * scale
        return lp, lf

    def lambdas(self, domain: str, t: int, anneal_freq: int) -> tuple[float, float]:
        """``(λp, λf)`` at step ``t``."""
        lp, lf = self.initial_lambdas(domain)
        if not self.anneal:
            return lp, lf
        horizon = self.domain_anneal_periods.get(domain, self.anneal_periods) * anneal_freq
        return anneal_lambda(lp, t, horizon), anneal_lambda(lf, t, horizon)


@dataclass
class TraceRecord:
    """Loss terms of one domain at one step; absent terms are ``None``."""

    iteration: int
    domain: str
    ce: float
    kl: float | None
    feature: float | None
    lambda_p: float
    lambda_f: float
    lr: float


@dataclass
class TrainTrace:
    """Per-step total losses, per-domain records and validation scores."""

    losses: list[float] = field(default_factory=list)
    records: list[TraceRecord] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int | None = None


StepLoss = Callable[[int, dict[str, Batch]], tuple[Tensor, list[Tensor], list[TraceRecord]]]


def _check_inputs(datasets: Sequence[DomainDataset], config: NetConfig) -> None:
    if not datasets:
        raise ValueError("Training needs at least one domain")
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise ValueError(f"Duplicate domain names {names}")
    for ds in datasets:
        if ds.input_dim != config.input_dim:
            raise DimensionError(
                f"Domain '{ds.name}' has input width {ds.input_dim}, network expects {config.input_dim}"
            )


def _validation_score(
    datasets: Sequence[DomainDataset], backbone: Backbone, episodes: int, seed: int
) -> float | None:
    scores = []
    for ds in datasets:
        try:
            accs = episode_accuracies(ds, backbone, classify_ncc, VALIDATION_REGIME, episodes, seed, split="val")
        except InfeasibleEpisodeError as e:
            logger.debug("Skipping validation on %s: %s", ds.name, e)
            continue
        scores.append(float(np.mean(accs)))
    return float(np.mean(scores)) if scores else None


def _fit(
    params: Sequence[Tensor],
    step_loss: StepLoss,
    batches: Iterator[dict[str, Batch]],
    sgd: SgdConfig,
    validate: Callable[[], float | None],
) -> TrainTrace:
    """Run ``sgd.max_iter`` steps, keeping the best-validated snapshot."""
    trace = TrainTrace()
    state = SgdState()
    best_score = -math.inf
    best: list[np.ndarray] | None = None

    for t in range(sgd.max_iter):
        step = next(batches)
        for p in params:
            p.zero_grad()
        try:
            loss, active, records = step_loss(t, step)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"Loss became {value}")
            backward(loss)
        except NumericError as e:
            raise TrainingError(str(e), t) from e
        # A head whose only terms were skipped this step has no gradient.
        active = [p for p in active if p.grad is not None]
        lr = sgd_step(active, state, sgd, t) if active else cosine_lr(sgd, t)
        for r in records:
            r.lr = lr
        trace.losses.append(value)
        trace.records.extend(records)

        if (t + 1) % sgd.anneal_freq == 0 or t + 1 == sgd.max_iter:
            score = validate()
            logger.info("Step %d/%d loss %.4f val %s", t + 1, sgd.max_iter, value, score)
            if score is not None:
                trace.validation.append((t + 1, score))
                if score > best_score:
                    best_score = score
                    best = [p.data.copy() for p in params]
                    trace.best_iteration = t + 1
        else:
            logger.debug("Step %d loss %.6f lr %.5f", t, value, lr)

    if best is not None:
        for p, snapshot in zip(params, best, strict=True):
            p.data[...] = snapshot
        logger.info("Restored snapshot from step %d (val %.4f)", trace.best_iteration, best_score)
    return trace


def _joint_model(
    datasets: Sequence[DomainDataset], config: NetConfig, seed: int, initial: MultiDomainModel | None
) -> MultiDomainModel:
    if initial is not None:
        if sorted(initial.domains) != sorted(ds.name for ds in datasets):
            raise ValueError(f"Initial model covers {initial.domains}, not the training domains")
        return initial
    return MultiDomainModel.init(
        config,
        {ds.name: ds.num_classes("train") for ds in datasets},
        stream(seed, "init/backbone"),
        {ds.name: stream(seed, f"init/head/{ds.name}") for ds in datasets},
    )


def _batches(
    datasets: Sequence[DomainDataset], sgd: SgdConfig, seed: int, batch_weights: Sequence[int] | None
) -> Iterator[dict[str, Batch]]:
    sizes = batch_sizes_from_weights([ds.name for ds in datasets], batch_weights, sgd.batch_size)
    return multi_domain_batches(datasets, sizes, stream(seed, "batches"))


def _accumulate(total: Tensor | None, term: Tensor) -> Tensor:
    return term if total is None else total + term


def train_single_domain(
    dataset: DomainDataset,
    config: NetConfig,
    sgd: SgdConfig,
    seed: int = 0,
    val_episodes: int = 20,
) -> tuple[DomainNet, TrainTrace]:
    """Train a single-domain network and return it frozen.

    Raises:
        DimensionError: Dataset width differs from ``config.input_dim``.
        TrainingError: The loss or a gradient became non-finite.
    """
    _check_inputs([dataset], config)
    backbone = Backbone.init(config, stream(seed, "init/backbone"))
    head = Head.init(config.feature_dim, dataset.num_classes("train"), stream(seed, f"init/head/{dataset.name}"))
    net = DomainNet(dataset.name, backbone, head)
    params = net.parameters()

    def step_loss(t: int, step: dict[str, Batch]) -> tuple[Tensor, list[Tensor], list[TraceRecord]]:
        x, y = step[dataset.name]
        loss = cross_entropy(net.logits(x), y)
        return loss, params, [TraceRecord(t, dataset.name, loss.item(), None, None, 0.0, 0.0, 0.0)]

    logger.info("Training SDL on %s for %d steps", dataset.name, sgd.max_iter)
    trace = _fit(
        params,
        step_loss,
        _batches([dataset], sgd, seed, None),
        sgd,
        lambda: _validation_score([dataset], backbone, val_episodes, seed) if val_episodes > 0 else None,
    )
    return net.frozen(), trace


def train_mdl(
    datasets: Sequence[DomainDataset],
    config: NetConfig,
    sgd: SgdConfig,
    seed: int = 0,
    batch_weights: Sequence[int] | None = None,
    val_episodes: int = 20,
    initial: MultiDomainModel | None = None,
) -> tuple[MultiDomainModel, TrainTrace]:
    """Train a shared backbone on the sum of per-domain cross-entropies.

    Adapters stay at their initial values.
    """
    _check_inputs(datasets, config)
    if len(datasets) == 1:
        logger.warning("Multi-domain training on a single domain is single-domain training")
    model = _joint_model(datasets, config, seed, initial)
    params = model.parameters(include_adapters=False)

    def step_loss(t: int, step: dict[str, Batch]) -> tuple[Tensor, list[Tensor], list[TraceRecord]]:
        total: Tensor | None = None
        records = []
        feats_by_domain = {name: model.backbone(x) for name, (x, _) in step.items()}
        for name, (_, y) in step.items():
            ce = cross_entropy(model.heads[name](feats_by_domain[name]), y)
            total = _accumulate(total, ce)
            records.append(TraceRecord(t, name, ce.item(), None, None, 0.0, 0.0, 0.0))
        assert total is not None
        return total, params, records

    logger.info("Training MDL on %d domains for %d steps", len(datasets), sgd.max_iter)
    trace = _fit(
        params,
        step_loss,
        _batches(datasets, sgd, seed, batch_weights),
        sgd,
        lambda: _validation_score(datasets, model.backbone, val_episodes, seed) if val_episodes > 0 else None,
    )
    return model, trace


def train_url(
    datasets: Sequence[DomainDataset],
    teachers: TeacherBank | Mapping[str, DomainNet],
    config: NetConfig,
    distill: DistillConfig,
    sgd: SgdConfig,
    seed: int = 0,
    batch_weights: Sequence[int] | None = None,
    val_episodes: int = 20,
    initial: MultiDomainModel | None = None,
) -> tuple[MultiDomainModel, TrainTrace]:
    """Distil frozen single-domain teachers into one multi-domain model.

    Per domain ``τ`` the step loss is
    ``w·CE_τ + λp_τ(t)·KL(teacher_τ ‖ student_τ) + λf_τ(t)·feat(θ_τ(φ(x)), φ*_τ(x))``.
    Terms with zero weight are skipped. Teachers are never updated.

    Raises:
        ValueError: A domain has no teacher.
        DimensionError: Teacher and student feature widths or class counts differ.
        TrainingError: The loss or a gradient became non-finite.
    """
    _check_inputs(datasets, config)
    bank = teachers if isinstance(teachers, TeacherBank) else TeacherBank(teachers)
    for ds in datasets:
        if ds.name not in bank:
            raise ValueError(f"No teacher for domain '{ds.name}'")
        teacher = bank[ds.name]
        if teacher.backbone.feature_dim != config.feature_dim:
            raise DimensionError(
                f"Teacher '{ds.name}' emits {teacher.backbone.feature_dim} features, student {config.feature_dim}"
            )
        if teacher.head.num_classes != ds.num_classes("train"):
            raise DimensionError(f"Teacher '{ds.name}' predicts {teacher.head.num_classes} classes")
    model = _joint_model(datasets, config, seed, initial)
    base = model.parameters(include_adapters=False)
    params = model.parameters(include_adapters=True)

    def step_loss(t: int, step: dict[str, Batch]) -> tuple[Tensor, list[Tensor], list[TraceRecord]]:
        total: Tensor | None = None
        active = list(base)
        records = []
        for name, (x, y) in step.items():
            teacher = bank[name]
            lp, lf = distill.lambdas(name, t, sgd.anneal_freq)
            feats = model.backbone(x)
            logits = model.heads[name](feats)
            ce = cross_entropy(logits, y)
            if distill.ce_weight > 0:
                total = _accumulate(total, ce if distill.ce_weight == 1.0 else ce * distill.ce_weight)
            kl_value = None
            if distill.use_kl and lp > 0:
                kl = kl_pred_loss(logits, teacher.logits(x))
                kl_value = kl.item()
                total = _accumulate(total, kl * lp)
            feat_value = None
            if distill.feature_loss != "none" and lf > 0:
                target = teacher.backbone(x)
                fl = feature_loss(distill.feature_loss, model.adapters[name](feats), target, distill.kernel)
                feat_value = fl.item()
                total = _accumulate(total, fl * lf)
                active += model.adapters[name].parameters()
            records.append(TraceRecord(t, name, ce.item(), kl_value, feat_value, lp, lf, 0.0))
        if total is None:
            return Tensor(0.0), [], records
        return total, active, records

    logger.info(
        "Training URL on %d domains for %d steps (feature=%s, kl=%s)",
        len(datasets),
        sgd.max_iter,
        distill.feature_loss,
        distill.use_kl,
    )
    trace = _fit(
        params,
        step_loss,
        _batches(datasets, sgd, seed, batch_weights),
        sgd,
        lambda: _validation_score(datasets, model.backbone, val_episodes, seed) if val_episodes > 0 else None,
    )
    return model, trace
