# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Few-shot and retrieval evaluation of frozen feature extractors.

Classifiers operate on backbone features of an episode:

- ``ncc``: nearest centroid under cosine similarity.
- ``ncc-adapt``: NCC after fitting a linear map ``ϑ`` (initialised to the
  identity) on the support set with Adadelta.
- ``ncc-md``: nearest centroid under a pooled Mahalanobis distance.

References:
    - Snell et al., Prototypical Networks for Few-shot Learning (2017)
    - Musgrave et al., A Metric Learning Reality Check (2020), Recall@k
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from src.config import stream
from src.data import DomainDataset, EpisodeConfig, Regime, sample_episode
from src.errors import DatasetValidationError, DegenerateError, DimensionError, NumericError
from src.losses import cross_entropy
from src.nets import Adapter, Backbone, DomainNet, Model, forward_features
from src.optim import AdadeltaState, adadelta_step
from src.tensor import FloatArray, IntArray, Tensor, matmul, power, row_scale, softmax_logits, sqrt, transpose, tsum

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
CI_Z = 1.96
DEFAULT_RECALL_KS = (1, 2, 4, 8)

Classifier = Callable[[FloatArray, IntArray, FloatArray, int], IntArray]


@dataclass
class CentroidSet:
    """Class means ``c_j``; row ``j`` belongs to ``class_ids[j]``."""

    centroids: FloatArray
    class_ids: list[int]


def averaging_matrix(labels: ArrayLike, num_classes: int) -> FloatArray:
    """``[C×n]`` matrix whose product with features gives class means.

    Raises:
        ValueError: If a class in ``0..C-1`` has no sample.
    """
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=num_classes)
    if counts.shape[0] != num_classes or np.any(counts == 0):
        raise ValueError(f"Every class in 0..{num_classes - 1} needs a sample, counts={counts.tolist()}")
    out: FloatArray = (np.arange(num_classes)[:, None] == y[None, :]) / counts[:, None]
    return out


def compute_centroids(feats: ArrayLike, labels: ArrayLike, num_classes: int | None = None) -> CentroidSet:
    """Per-class means of ``feats``.

    Raises:
        ValueError: If a class has no sample.
    """
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    count = int(y.max()) + 1 if num_classes is None else num_classes
    return CentroidSet(averaging_matrix(y, count) @ x, list(range(count)))


def _unit(x: Tensor) -> Tensor:
    return row_scale(x, power(sqrt(tsum(x * x, axis=1)) + NORM_EPS, -1.0))


def ncc_logits(z: Tensor, centroids: Tensor, scale: float = 1.0) -> Tensor:
    """Cosine similarity of every query to every centroid, times ``scale``."""
    if z.ndim != 2 or centroids.ndim != 2 or z.shape[1] != centroids.shape[1]:
        raise DimensionError(f"NCC needs matching feature widths, got {z.shape} and {centroids.shape}")
    sims = matmul(_unit(z), transpose(_unit(centroids)))
    return sims if scale == 1.0 else sims * scale


def ncc_predict(
    query: ArrayLike, centroids: CentroidSet | ArrayLike, scale: float = 1.0
) -> tuple[FloatArray, IntArray]:
    """Class probabilities and argmax labels for each query.

    Ties go to the lowest class id.

    Raises:
        NumericError: NaN or Inf features.
    """
    c = centroids.centroids if isinstance(centroids, CentroidSet) else np.asarray(centroids, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(c))):
        raise NumericError("NCC received NaN or Inf features")
    logits = ncc_logits(Tensor(q), Tensor(c), scale)
    probs = softmax_logits(logits).data
    return probs, np.argmax(logits.data, axis=1).astype(np.int64)


def classify_ncc(support: FloatArray, support_y: IntArray, query: FloatArray, way: int) -> IntArray:
    return ncc_predict(query, compute_centroids(support, support_y, way))[1]


@dataclass(frozen=True)
class AdaptConfig:
    """Support-set adaptation settings."""

    iterations: int = 40
    lr: float = 0.1
    rho: float = 0.9
    eps: float = 1e-6
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError(f"Invalid adaptation settings {self}")


@dataclass
class AdaptationState:
    """Adapted map ``ϑ`` and its support NLL history.

    ``nll_trace[0]`` is the NLL at the identity and ``nll_trace[i]`` the NLL
    of the accepted ``ϑ`` after step ``i``; the last entry always belongs to
    ``adapter``. ``rejected`` counts steps that were undone.
    """

    adapter: Adapter
    optimizer: AdadeltaState
    lr: float
    nll_trace: list[float] = field(default_factory=list)
    rejected: int = 0

    @property
    def iterations(self) -> int:
        return max(len(self.nll_trace) - 1, 0)


def support_nll(adapter: Adapter, feats: FloatArray, labels: IntArray, way: int, scale: float = 1.0) -> Tensor:
    """NLL of the support labels under NCC on ``feats · ϑ``.

    Centroids are recomputed from the mapped support features so the
    gradient passes through them.
    """
    z = adapter(Tensor(feats))
    centroids = matmul(Tensor(averaging_matrix(labels, way)), z)
    return cross_entropy(ncc_logits(z, centroids, scale), labels)


def fit_adapter(
    support: FloatArray, support_y: IntArray, way: int, config: AdaptConfig | None = None
) -> AdaptationState:
    """Fit ``ϑ`` on frozen support features.

    A step that raises the support NLL is undone and the step size halved,
    so ``nll_trace`` never increases.

    Raises:
        NumericError: The NLL at the identity is NaN or Inf.
    """
    config = config or AdaptConfig()
    adapter = Adapter.identity(support.shape[1])
    state = AdaptationState(adapter, AdadeltaState(rho=config.rho, eps=config.eps), config.lr)

    def evaluate() -> Tensor:
        adapter.matrix.zero_grad()
        return support_nll(adapter, support, support_y, way, config.scale)

    loss = evaluate()
    current = loss.item()
    if not math.isfinite(current):
        raise NumericError("Support NLL is not finite at the identity map")
    state.nll_trace.append(current)
    for _ in range(config.iterations):
        loss.backward()
        accepted = adapter.matrix.data.copy()
        adadelta_step(adapter.parameters(), state.optimizer, state.lr)
        candidate = evaluate()
        value = candidate.item()
        if math.isfinite(value) and value <= current:
            loss, current = candidate, value
        else:
            adapter.matrix.data[...] = accepted
            state.lr *= 0.5
            state.rejected += 1
            loss = evaluate()
        state.nll_trace.append(current)
    if state.rejected:
        logger.debug("Adaptation undid %d of %d steps", state.rejected, config.iterations)
    return state


def adapt_features(
    support_x: FloatArray, support_y: IntArray, way: int, backbone: Backbone, config: AdaptConfig | None = None
) -> AdaptationState:
    """Run the frozen backbone on the support set, then fit ``ϑ``."""
    feats = forward_features(backbone, support_x).data
    return fit_adapter(feats, support_y, way, config)


def make_adapt_classifier(config: AdaptConfig | None = None) -> Classifier:
    def classify(support: FloatArray, support_y: IntArray, query: FloatArray, way: int) -> IntArray:
        state = fit_adapter(support, support_y, way, config)
        mapped = state.adapter(Tensor(support)).data
        centroids = compute_centroids(mapped, support_y, way)
        return ncc_predict(state.adapter(Tensor(query)).data, centroids)[1]

    return classify


@dataclass
class MahalanobisParams:
    """Regularised covariance ``Q``, its inverse and ``L`` with ``Q⁻¹ = L·Lᵀ``."""

    covariance: FloatArray
    precision: FloatArray
    cholesky: FloatArray
    ridge: float


def pooled_covariance(feats: FloatArray, labels: IntArray) -> FloatArray:
    """Within-class covariance pooled over classes, divided by ``max(n - C, 1)``."""
    classes, local = np.unique(labels, return_inverse=True)
    centred = feats - compute_centroids(feats, local, len(classes)).centroids[local]
    out: FloatArray = centred.T @ centred / max(feats.shape[0] - len(classes), 1)
    return out


def fit_mahalanobis(
    support: FloatArray, labels: IntArray, ridge: float | None = None, covariance: FloatArray | None = None
) -> MahalanobisParams:
    """Estimate ``Q = Σ + ridge·I`` and factor its inverse.

    The default ridge is ``1e-3 · tr(Σ)/d``, or ``1.0`` when the trace is zero.

    Raises:
        DegenerateError: ``Q`` is singular (possible only with ``ridge=0``).
    """
    sigma = pooled_covariance(support, labels) if covariance is None else np.asarray(covariance, dtype=np.float64)
    d = sigma.shape[0]
    if ridge is None:
        trace = float(np.trace(sigma))
        ridge = 1e-3 * trace / d if trace > 0 else 1.0
    if ridge < 0:
        raise ValueError(f"ridge must be non-negative, got {ridge}")
    q = sigma + ridge * np.eye(d)
    try:
        np.linalg.cholesky(q)
        precision = np.linalg.inv(q)
        precision = 0.5 * (precision + precision.T)
        lower = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as e:
        raise DegenerateError(f"Covariance is singular (ridge={ridge})") from e
    return MahalanobisParams(covariance=q, precision=precision, cholesky=lower, ridge=ridge)


def mahalanobis_distances(query: FloatArray, centroids: FloatArray, params: MahalanobisParams) -> FloatArray:
    """``½ (z − c)ᵀ Q⁻¹ (z − c)`` for every query/centroid pair."""
    diff = query[:, None, :] - centroids[None, :, :]
    out: FloatArray = 0.5 * np.einsum("ncd,de,nce->nc", diff, params.precision, diff)
    return out


def cholesky_distances(query: FloatArray, centroids: FloatArray, params: MahalanobisParams) -> FloatArray:
    """Same distances as squared Euclidean after mapping ``z ↦ Lᵀz``."""
    zq = query @ params.cholesky
    zc = centroids @ params.cholesky
    diff = zq[:, None, :] - zc[None, :, :]
    out: FloatArray = 0.5 * np.sum(diff * diff, axis=2)
    return out


def mahalanobis_predict(
    query: FloatArray,
    support: FloatArray,
    support_y: IntArray,
    ridge: float | None = None,
    covariance: FloatArray | None = None,
) -> IntArray:
    """Nearest centroid under the pooled Mahalanobis distance; ties to the lowest id."""
    way = int(support_y.max()) + 1
    params = fit_mahalanobis(support, support_y, ridge, covariance)
    centroids = compute_centroids(support, support_y, way).centroids
    return np.argmin(mahalanobis_distances(query, centroids, params), axis=1).astype(np.int64)


def make_mahalanobis_classifier(ridge: float | None = None) -> Classifier:
    def classify(support: FloatArray, support_y: IntArray, query: FloatArray, way: int) -> IntArray:
        return mahalanobis_predict(query, support, support_y, ridge)

    return classify


def resolve_classifier(
    name: str, adapt: AdaptConfig | None = None, ridge: float | None = None
) -> Classifier:
    """Map a classifier name to its implementation."""
    if name == "ncc":
        return classify_ncc
    if name == "ncc-adapt":
        return make_adapt_classifier(adapt)
    if name == "ncc-md":
        return make_mahalanobis_classifier(ridge)
    raise ValueError(f"Unknown classifier '{name}'")


def backbone_of(model: Model | Backbone) -> Backbone:
    return model if isinstance(model, Backbone) else model.backbone


@dataclass
class EvalRow:
    """Mean episode accuracy with a 95% interval (``None`` for fewer than two episodes)."""

    dataset: str
    regime: str
    classifier: str
    episodes: int
    mean: float
    ci: float | None
    seen: bool = True


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def row(self, dataset: str, regime: str, classifier: str) -> EvalRow:
        for r in self.rows:
            if (r.dataset, r.regime, r.classifier) == (dataset, regime, classifier):
                return r
        raise KeyError((dataset, regime, classifier))


def summarize(accuracies: Sequence[float]) -> tuple[float, float | None]:
    """Mean and ``1.96 · std / sqrt(n)`` half-width (sample std).

    Examples:
        >>> summarize([0.5])
        (0.5, None)
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("No accuracies to summarize")
    if acc.size < 2:
        return float(acc[0]), None
    return float(acc.mean()), float(CI_Z * acc.std(ddof=1) / math.sqrt(acc.size))


def episode_accuracies(
    dataset: DomainDataset,
    model: Model | Backbone,
    classifier: Classifier,
    regime: Regime,
    episodes: int,
    seed: int,
    split: str = "test",
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> list[float]:
    """Accuracy of ``classifier`` on ``episodes`` independently seeded episodes."""
    if episodes < 1:
        raise ValueError(f"episodes must be positive, got {episodes}")
    backbone = backbone_of(model)

    def run(i: int) -> float:
        rng = stream(seed, f"episode/{dataset.name}/{split}/{regime}/{i}")
        ep = sample_episode(dataset, regime, rng, split=split, config=episode_config)
        support = forward_features(backbone, ep.support_x).data
        query = forward_features(backbone, ep.query_x).data
        preds = classifier(support, ep.support_y, query, ep.way)
        return float(np.mean(preds == ep.query_y))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(episodes)))
    return [run(i) for i in range(episodes)]


def evaluate_episodes(
    dataset: DomainDataset,
    model: Model | Backbone,
    classifier: str | Classifier = "ncc",
    regime: Regime = "varying",
    episodes: int = 600,
    seed: int = 0,
    adapt: AdaptConfig | None = None,
    ridge: float | None = None,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
    label: str | None = None,
) -> EvalRow:
    """Mean test-split episode accuracy of one classifier on one domain.

    Episode ``i`` draws from its own seed stream, so results do not depend
    on ``workers``.

    Raises:
        InfeasibleEpisodeError: The test split cannot support ``regime``.
    """
    clf = resolve_classifier(classifier, adapt, ridge) if isinstance(classifier, str) else classifier
    name = label or (classifier if isinstance(classifier, str) else getattr(classifier, "__name__", "custom"))
    accs = episode_accuracies(dataset, model, clf, regime, episodes, seed, "test", episode_config, workers)
    mean, ci = summarize(accs)
    logger.info("%s %s %s: %.4f over %d episodes", dataset.name, regime, name, mean, episodes)
    return EvalRow(dataset.name, regime, name, episodes, mean, ci, dataset.seen)


def recall_at_k(feats: ArrayLike, labels: ArrayLike, ks: Sequence[int] = DEFAULT_RECALL_KS) -> dict[int, float]:
    """Fraction of queries whose ``k`` most cosine-similar other samples include a same-class one.

    Every sample is a query against all others; ties rank the lower index first.

    Raises:
        DatasetValidationError: A class has a single sample.
    """
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _, counts = np.unique(y, return_counts=True)
    if np.any(counts < 2):
        raise DatasetValidationError("Recall@k needs at least two samples per class")
    if any(k < 1 for k in ks):
        raise ValueError(f"k must be positive, got {list(ks)}")
    unit = x / (np.linalg.norm(x, axis=1, keepdims=True) + NORM_EPS)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = y[order] == y[:, None]
    first_hit = np.argmax(hits, axis=1)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


@dataclass
class RetrievalRow:
    dataset: str
    recalls: dict[int, float]


def evaluate_retrieval(
    dataset: DomainDataset, model: Model | Backbone, ks: Sequence[int] = DEFAULT_RECALL_KS, split: str = "test"
) -> RetrievalRow:
    data = dataset.splits[split]
    feats = forward_features(backbone_of(model), data.x).data
    return RetrievalRow(dataset.name, recall_at_k(feats, data.y, ks))


def evaluate_sdl_matrix(
    datasets: Sequence[DomainDataset],
    teachers: Mapping[str, DomainNet],
    classifier: str = "ncc",
    regime: Regime = "varying",
    episodes: int = 600,
    seed: int = 0,
    workers: int = 1,
) -> list[EvalRow]:
    """Evaluate every single-domain network on every dataset.

    Rows are labelled ``sdl:<teacher>``.
    """
    return [
        evaluate_episodes(ds, net, classifier, regime, episodes, seed, workers=workers, label=f"sdl:{name}")
        for name, net in teachers.items()
        for ds in datasets
    ]


def best_sdl(rows: Sequence[EvalRow]) -> list[EvalRow]:
    """Per dataset, the best single-domain row, relabelled ``best-sdl``."""
    best: dict[str, EvalRow] = {}
    for row in rows:
        if row.dataset not in best or row.mean > best[row.dataset].mean:
            best[row.dataset] = row
    return [
        EvalRow(r.dataset, r.regime, "best-sdl", r.episodes, r.mean, r.ci, r.seen) for r in best.values()
    ]
