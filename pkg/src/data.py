# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Synthetic multi-domain datasets, episode sampling and dataset files.

Each domain is split into train/val/test with class-disjoint label sets.
Class ids are unique within a domain across all splits.

Dataset directory layout::

    <dir>/manifest.json        text manifest (format version, domain, splits)
    <dir>/<split>_x.f64        little-endian float64 samples, row-major [n×p]
    <dir>/<split>_y.i32        little-endian int32 labels [n]
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from src.config import stream
from src.errors import (
    DatasetFormatError,
    DatasetValidationError,
    InfeasibleEpisodeError,
    MissingPayloadError,
    SizeMismatchError,
)
from src.nets import validate_domain_name
from src.tensor import FloatArray, IntArray

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
Split = Literal["train", "val", "test"]
Regime = Literal["varying", "vw5shot", "5way1shot"]
REGIMES: tuple[Regime, ...] = ("varying", "vw5shot", "5way1shot")
NONLINEARITIES = ("linear", "tanh", "softsign")


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a synthetic multi-domain benchmark.

    ``unseen_domains`` extra domains are generated the same way but flagged
    ``seen=False``; training skips them.
    """

    num_domains: int = 3
    train_classes: int = 10
    val_classes: int = 5
    test_classes: int = 10
    samples_per_class: int = 20
    latent_dim: int = 8
    input_dim: int = 16
    noise_scale: float = 0.3
    domain_mixing: float = 0.5
    unseen_domains: int = 0

    def __post_init__(self) -> None:
        counts = (
            self.num_domains,
            self.train_classes,
            self.val_classes,
            self.test_classes,
            self.samples_per_class,
            self.latent_dim,
            self.input_dim,
        )
        if min(counts) <= 0:
            raise ValueError(f"All synthetic counts must be positive, got {self}")
        if self.input_dim < self.latent_dim:
            raise ValueError(f"input_dim ({self.input_dim}) must be >= latent_dim ({self.latent_dim})")
        if self.noise_scale < 0 or self.unseen_domains < 0 or self.domain_mixing < 0:
            raise ValueError("noise_scale, domain_mixing and unseen_domains must be non-negative")

    @property
    def classes_per_split(self) -> dict[str, int]:
        return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}


@dataclass
class SplitData:
    """Samples and labels of one split."""

    x: FloatArray
    y: IntArray

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DatasetValidationError(f"Split shapes disagree: x {self.x.shape}, y {self.y.shape}")

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.y, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts, strict=True)}

    def __len__(self) -> int:
        return int(self.x.shape[0])


@dataclass
class DomainDataset:
    """One domain with class-disjoint train/val/test splits."""

    name: str
    input_dim: int
    splits: dict[str, SplitData]
    seen: bool = True

    def __post_init__(self) -> None:
        validate_domain_name(self.name)
        validate_dataset(self)

    def split(self, split: str) -> SplitData:
        return self.splits[split]

    def num_classes(self, split: str = "train") -> int:
        return len(self.splits[split].classes)


def validate_dataset(ds: DomainDataset) -> None:
    """Check split shapes, class disjointness and test-class sizes.

    Raises:
        DatasetValidationError: Naming the offending split.
    """
    owner: dict[int, str] = {}
    for split in SPLITS:
        if split not in ds.splits:
            raise DatasetValidationError(f"Domain '{ds.name}' has no '{split}' split", split=split)
        data = ds.splits[split]
        if len(data) and data.x.shape[1] != ds.input_dim:
            raise DatasetValidationError(
                f"Split '{split}' of '{ds.name}' has width {data.x.shape[1]}, expected {ds.input_dim}", split=split
            )
        for cls in data.classes:
            if cls in owner:
                raise DatasetValidationError(
                    f"Class {cls} of '{ds.name}' appears in both '{owner[cls]}' and '{split}'", split=split
                )
            owner[cls] = split
    small = [c for c, n in ds.splits["test"].class_counts().items() if n < 2]
    if small:
        raise DatasetValidationError(f"Test classes {small} of '{ds.name}' have fewer than 2 samples", split="test")


def _domain_transform(
    spec: SyntheticSpec, shared: FloatArray, rng: np.random.Generator
) -> tuple[FloatArray, str, FloatArray]:
    own = rng.normal(size=(spec.input_dim, spec.latent_dim))
    q, _ = np.linalg.qr(shared + spec.domain_mixing * own)
    nonlinearity = NONLINEARITIES[int(rng.integers(len(NONLINEARITIES)))]
    bias = rng.normal(scale=0.5, size=spec.input_dim)
    return q, nonlinearity, bias


def _apply_nonlinearity(kind: str, z: FloatArray) -> FloatArray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softsign":
        return z / (1.0 + np.abs(z))
    return z


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list[DomainDataset]:
    """Generate ``num_domains + unseen_domains`` synthetic domains.

    Per domain: class prototypes in a shared latent space, a fixed domain
    transform ``x = g(Q·(prototype + noise)) + b`` where ``Q`` mixes a shared
    orthonormal basis with a domain-specific one and ``g`` is an elementwise
    nonlinearity chosen per domain. Deterministic given ``seed``.

    Args:
        spec: Benchmark shape.
        seed: Root seed.

    Returns:
        Datasets named ``domain0``, ``domain1``, ...; unseen ones follow the seen ones.
    """
    shared = stream(seed, "synthetic/shared-basis").normal(size=(spec.input_dim, spec.latent_dim))
    datasets = []
    total = spec.num_domains + spec.unseen_domains
    for index in range(total):
        name = f"domain{index}"
        rng = stream(seed, f"synthetic/{name}")
        q, nonlinearity, bias = _domain_transform(spec, shared, rng)
        splits: dict[str, SplitData] = {}
        next_class = 0
        for split in SPLITS:
            num_classes = spec.classes_per_split[split]
            prototypes = rng.normal(size=(num_classes, spec.latent_dim))
            latent = np.repeat(prototypes, spec.samples_per_class, axis=0)
            latent = latent + spec.noise_scale * rng.normal(size=latent.shape)
            x = _apply_nonlinearity(nonlinearity, latent @ q.T) + bias
            y = np.repeat(np.arange(next_class, next_class + num_classes), spec.samples_per_class)
            splits[split] = SplitData(x=x, y=y)
            next_class += num_classes
        seen = index < spec.num_domains
        datasets.append(DomainDataset(name=name, input_dim=spec.input_dim, splits=splits, seen=seen))
        logger.debug("Generated %s (%s, seen=%s)", name, nonlinearity, seen)
    logger.info("Generated %d synthetic domains (%d unseen)", total, spec.unseen_domains)
    return datasets


@dataclass(frozen=True)
class EpisodeConfig:
    """Limits for episode sampling."""

    max_way: int = 50
    max_shot: int = 100
    query_cap: int = 10
    min_way: int = 2

    def __post_init__(self) -> None:
        if self.min_way < 2 or self.max_way < self.min_way or self.max_shot < 1 or self.query_cap < 1:
            raise ValueError(f"Invalid episode limits {self}")


@dataclass
class Episode:
    """A few-shot task. Labels are episode-local, ``0..way-1``."""

    support_x: FloatArray
    support_y: IntArray
    query_x: FloatArray
    query_y: IntArray
    class_ids: list[int]
    regime: str
    support_index: IntArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_index: IntArray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def way(self) -> int:
        return len(self.class_ids)


def _pick_counts(
    regime: Regime, chosen: Sequence[int], counts: Mapping[int, int], config: EpisodeConfig, rng: np.random.Generator
) -> list[tuple[int, int]]:
    if regime == "varying":
        plan = []
        for cls in chosen:
            shots = int(rng.integers(1, min(config.max_shot, counts[cls] - 1) + 1))
            plan.append((shots, min(config.query_cap, counts[cls] - shots)))
        return plan
    shots = 5 if regime == "vw5shot" else 1
    queries = min(config.query_cap, min(counts[c] for c in chosen) - shots)
    return [(shots, queries)] * len(chosen)


def sample_episode(
    ds: DomainDataset,
    regime: Regime,
    rng: np.random.Generator,
    split: str = "test",
    config: EpisodeConfig | None = None,
) -> Episode:
    """Draw one episode from a split.

    Regimes:
        varying: way ~ U[2, min(max_way, #classes)], shots per class ~
            U[1, min(max_shot, n_c - 1)], up to ``query_cap`` of the rest as queries.
        vw5shot: varying way, 5 shots per class, balanced queries.
        5way1shot: 5 ways, 1 shot, balanced queries.

    Raises:
        InfeasibleEpisodeError: If the split cannot support the regime.
    """
    config = config or EpisodeConfig()
    data = ds.splits[split]
    counts = data.class_counts()
    min_per_class = {"varying": 2, "vw5shot": 6, "5way1shot": 2}[regime]
    eligible = sorted(c for c, n in counts.items() if n >= min_per_class)

    if regime == "5way1shot":
        if len(eligible) < 5:
            raise InfeasibleEpisodeError(
                f"5way1shot needs 5 classes with >= 2 samples in '{ds.name}/{split}', found {len(eligible)}"
            )
        way = 5
    else:
        if len(eligible) < config.min_way:
            raise InfeasibleEpisodeError(
                f"{regime} needs {config.min_way} classes with >= {min_per_class} samples "
                f"in '{ds.name}/{split}', found {len(eligible)}"
            )
        way = int(rng.integers(config.min_way, min(config.max_way, len(eligible)) + 1))

    chosen = sorted(int(c) for c in rng.choice(eligible, size=way, replace=False))
    plan = _pick_counts(regime, chosen, counts, config, rng)

    support_idx: list[int] = []
    query_idx: list[int] = []
    support_y: list[int] = []
    query_y: list[int] = []
    for local, (cls, (shots, queries)) in enumerate(zip(chosen, plan, strict=True)):
        members = rng.permutation(np.flatnonzero(data.y == cls))
        support_idx.extend(int(i) for i in members[:shots])
        query_idx.extend(int(i) for i in members[shots : shots + queries])
        support_y.extend([local] * shots)
        query_y.extend([local] * queries)

    s_idx = np.asarray(support_idx, dtype=np.int64)
    q_idx = np.asarray(query_idx, dtype=np.int64)
    return Episode(
        support_x=data.x[s_idx],
        support_y=np.asarray(support_y, dtype=np.int64),
        query_x=data.x[q_idx],
        query_y=np.asarray(query_y, dtype=np.int64),
        class_ids=chosen,
        regime=regime,
        support_index=s_idx,
        query_index=q_idx,
    )


def check_episode(episode: Episode) -> None:
    """Assert the structural invariants of an episode.

    Raises:
        InfeasibleEpisodeError: On the first violated invariant.
    """
    if set(episode.support_index.tolist()) & set(episode.query_index.tolist()):
        raise InfeasibleEpisodeError("Support and query sets overlap")
    if sorted(set(episode.support_y.tolist())) != list(range(episode.way)):
        raise InfeasibleEpisodeError("Some episode class has no support sample")
    if not set(episode.query_y.tolist()) <= set(range(episode.way)):
        raise InfeasibleEpisodeError("Query labels outside the episode classes")
    if episode.way < 2:
        raise InfeasibleEpisodeError("Episodes need at least 2 ways")
    if episode.regime == "5way1shot" and (episode.way != 5 or len(episode.support_y) != 5):
        raise InfeasibleEpisodeError("5way1shot episodes need exactly 5 classes with 1 support sample each")
    if episode.regime == "vw5shot" and np.any(np.bincount(episode.support_y) != 5):
        raise InfeasibleEpisodeError("vw5shot episodes need exactly 5 support samples per class")


class _EpochSampler:
    """Yields sample indices epoch by epoch, reshuffling at each epoch start."""

    def __init__(self, size: int, rng: np.random.Generator) -> None:
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def take(self, count: int) -> IntArray:
        taken: list[IntArray] = []
        while count > 0:
            if self.cursor == self.size:
                self.order = self.rng.permutation(self.size)
                self.cursor = 0
            chunk = self.order[self.cursor : self.cursor + count]
            taken.append(chunk)
            self.cursor += len(chunk)
            count -= len(chunk)
        return np.concatenate(taken).astype(np.int64)


def batch_sizes_from_weights(domains: Sequence[str], weights: Sequence[int] | None, base: int) -> dict[str, int]:
    """Turn per-domain integer weights into batch sizes ``weight × base``.

    Examples:
        >>> batch_sizes_from_weights(["a", "b", "c"], [2, 1, 1], 8)
        {'a': 16, 'b': 8, 'c': 8}
    """
    weights = list(weights) if weights is not None else [1] * len(domains)
    if len(weights) != len(domains):
        raise ValueError(f"{len(weights)} batch weights for {len(domains)} domains")
    return {name: int(w) * base for name, w in zip(domains, weights, strict=True)}


Batch = tuple[FloatArray, IntArray]


def multi_domain_batches(
    datasets: Sequence[DomainDataset],
    batch_sizes: Mapping[str, int],
    rng: np.random.Generator,
    split: str = "train",
) -> Iterator[dict[str, Batch]]:
    """Endless stream of per-domain batches.

    Each domain walks its own shuffled epochs without replacement; labels are
    remapped to ``0..C-1`` in ascending class-id order.

    Raises:
        ValueError: Non-positive batch size.
        DatasetValidationError: Missing or empty split.
    """
    samplers: dict[str, tuple[_EpochSampler, SplitData, dict[int, int]]] = {}
    for ds in datasets:
        size = batch_sizes[ds.name]
        if size <= 0:
            raise ValueError(f"Batch size for '{ds.name}' must be positive, got {size}")
        data = ds.splits.get(split)
        if data is None or len(data) == 0:
            raise DatasetValidationError(f"Split '{split}' of '{ds.name}' is empty", split=split)
        remap = {cls: i for i, cls in enumerate(data.classes)}
        samplers[ds.name] = (_EpochSampler(len(data), rng), data, remap)

    while True:
        step: dict[str, Batch] = {}
        for name, (sampler, data, remap) in samplers.items():
            idx = sampler.take(batch_sizes[name])
            labels = np.asarray([remap[int(c)] for c in data.y[idx]], dtype=np.int64)
            step[name] = (data.x[idx], labels)
        yield step


def _payload_names(split: str) -> tuple[str, str]:
    return f"{split}_x.f64", f"{split}_y.i32"


def save_dataset(ds: DomainDataset, directory: str | Path) -> Path:
    """Write a dataset directory (manifest plus raw payloads)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, object] = {
        "format_version": DATASET_FORMAT_VERSION,
        "domain": ds.name,
        "input_dim": ds.input_dim,
        "seen": ds.seen,
        "splits": {},
    }
    splits: dict[str, object] = {}
    for split in SPLITS:
        data = ds.splits[split]
        x_name, y_name = _payload_names(split)
        (directory / x_name).write_bytes(data.x.astype("<f8").tobytes())
        (directory / y_name).write_bytes(data.y.astype("<i4").tobytes())
        counts = data.class_counts()
        splits[split] = {
            "num_samples": len(data),
            "classes": list(counts),
            "counts": list(counts.values()),
            "x_file": x_name,
            "y_file": y_name,
        }
    manifest["splits"] = splits
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("Saved dataset '%s' to %s", ds.name, directory)
    return directory


def _read_payload(path: Path, dtype: str, count: int, split: str) -> np.ndarray:
    if not path.is_file():
        raise MissingPayloadError(f"Payload '{path}' for split '{split}' is missing")
    blob = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(blob) != count * itemsize:
        raise SizeMismatchError(
            f"Payload '{path.name}' of split '{split}' has {len(blob)} bytes, manifest implies {count * itemsize}"
        )
    return np.frombuffer(blob, dtype=dtype)


def load_dataset(directory: str | Path) -> DomainDataset:
    """Read a dataset directory written by ``save_dataset``.

    Raises:
        DatasetFormatError: Missing, unreadable or mistyped manifest, wrong version.
        MissingPayloadError: A payload file is absent.
        SizeMismatchError: A payload size disagrees with the manifest.
        DatasetValidationError: Manifest class lists or counts disagree with
            the labels, or the splits share classes.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetFormatError(f"No {MANIFEST_NAME} in '{directory}'")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        version = manifest["format_version"]
        name = manifest["domain"]
        input_dim = int(manifest["input_dim"])
        split_entries = manifest["splits"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"Unreadable manifest '{manifest_path}': {e}") from e
    if not isinstance(name, str) or not isinstance(split_entries, dict):
        raise DatasetFormatError(f"Manifest '{manifest_path}' needs a string domain and a splits object")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"Dataset format version {version} is not supported (expected {DATASET_FORMAT_VERSION})"
        )

    splits: dict[str, SplitData] = {}
    for split in SPLITS:
        if split not in split_entries:
            raise DatasetValidationError(f"Manifest of '{name}' lacks split '{split}'", split=split)
        entry = split_entries[split]
        try:
            n = int(entry["num_samples"])
            classes = [int(c) for c in entry["classes"]]
            counts = [int(c) for c in entry["counts"]]
            x_file, y_file = str(entry["x_file"]), str(entry["y_file"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"Bad manifest entry for split '{split}': {e}") from e
        x = _read_payload(directory / x_file, "<f8", n * input_dim, split).reshape(n, input_dim)
        y = _read_payload(directory / y_file, "<i4", n, split)
        data = SplitData(x=x.astype(np.float64), y=y.astype(np.int64))
        actual = data.class_counts()
        if classes != list(actual) or counts != list(actual.values()):
            raise DatasetValidationError(
                f"Split '{split}' of '{name}': manifest declares {len(classes)} classes {classes} "
                f"with counts {counts}, payload has {len(actual)} classes",
                split=split,
            )
        splits[split] = data

    try:
        return DomainDataset(name=name, input_dim=input_dim, splits=splits, seen=bool(manifest.get("seen", True)))
    except ValueError as e:
        raise DatasetFormatError(str(e)) from e


def save_datasets(datasets: Sequence[DomainDataset], root: str | Path) -> Path:
    """Write each dataset to ``root/<name>/``."""
    root = Path(root)
    for ds in datasets:
        save_dataset(ds, root / ds.name)
    logger.info("Saved %d datasets under %s", len(datasets), root)
    return root


def load_datasets(root: str | Path, names: Sequence[str] | None = None) -> list[DomainDataset]:
    """Load every dataset directory under ``root`` (sorted by name), or only ``names``.

    Raises:
        DatasetFormatError: If ``root`` holds no datasets or a name is unknown.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetFormatError(f"Dataset root '{root}' does not exist")
    available = sorted(p.name for p in root.iterdir() if (p / MANIFEST_NAME).is_file())
    if not available:
        raise DatasetFormatError(f"No datasets found under '{root}'")
    wanted = list(names) if names else available
    missing = [n for n in wanted if n not in available]
    if missing:
        raise DatasetFormatError(f"Unknown datasets {missing}; available: {available}")
    return [load_dataset(root / n) for n in wanted]


def save_feature_matrix(features: FloatArray, path: str | Path) -> Path:
    """Write ``"n d\\n"`` followed by ``n·d`` little-endian float64 values."""
    path = Path(path)
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"Feature matrix must be 2-D, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"{arr.shape[0]} {arr.shape[1]}\n".encode("ascii") + arr.astype("<f8").tobytes())
    return path


def load_feature_matrix(path: str | Path) -> FloatArray:
    """Read a feature matrix written by ``save_feature_matrix``.

    Raises:
        MissingPayloadError: File does not exist.
        DatasetFormatError: Malformed header.
        SizeMismatchError: Payload length disagrees with the header.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingPayloadError(f"Feature file '{path}' does not exist")
    blob = path.read_bytes()
    header, sep, payload = blob.partition(b"\n")
    try:
        n, d = (int(v) for v in header.decode("ascii").split())
    except (UnicodeDecodeError, ValueError) as e:
        raise DatasetFormatError(f"Bad feature header in '{path}': {header[:40]!r}") from e
    if not sep or n <= 0 or d <= 0:
        raise DatasetFormatError(f"Bad feature header in '{path}'")
    if len(payload) != 8 * n * d:
        raise SizeMismatchError(f"Feature file '{path}' has {len(payload)} payload bytes, header implies {8 * n * d}")
    out: FloatArray = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, d)
    return out
