"""Shared pytest fixtures for the test suite."""

from collections.abc import Callable

import numpy as np
import pytest

from src.data import DomainDataset, SplitData, SyntheticSpec, generate_synthetic
from src.nets import DomainNet, NetConfig
from src.optim import SgdConfig
from src.tensor import FloatArray, Tensor
from src.train import train_single_domain

TINY_SPEC = SyntheticSpec(
    num_domains=2,
    train_classes=4,
    val_classes=3,
    test_classes=5,
    samples_per_class=8,
    latent_dim=4,
    input_dim=6,
    noise_scale=0.2,
)
TINY_NET = NetConfig(input_dim=6, hidden=(12,), feature_dim=5)
TINY_SGD = SgdConfig(lr=0.05, anneal_freq=20, max_iter=40, batch_size=8)


def numeric_grad(fn: Callable[[FloatArray], float], x: FloatArray, eps: float = 1e-6) -> FloatArray:
    """Central finite-difference gradient of a scalar function.

    This is a shared helper for checking autodiff gradients
    across multiple test modules.

    Args:
        fn: Maps an array shaped like ``x`` to a float.
        x: Point at which to differentiate.
        eps: Step size.
    """
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        bumped = x.copy()
        bumped[idx] += eps
        up = fn(bumped)
        bumped[idx] -= 2 * eps
        down = fn(bumped)
        grad[idx] = (up - down) / (2 * eps)
    return grad


def autodiff_grad(fn: Callable[[Tensor], Tensor], x: FloatArray) -> FloatArray:
    """Gradient of ``fn`` at ``x`` through the tensor engine."""
    leaf = Tensor(x, requires_grad=True)
    fn(leaf).backward()
    return leaf.grad_or_zeros()


def relative_error(a: FloatArray, b: FloatArray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def make_dataset(
    name: str = "toy",
    classes: tuple[int, int, int] = (3, 3, 4),
    per_class: int = 6,
    dim: int = 4,
    seed: int = 0,
) -> DomainDataset:
    """Create a small dataset with well-separated Gaussian classes.

    Class ids run consecutively across train, val and test.
    """
    rng = np.random.default_rng(seed)
    splits = {}
    next_class = 0
    for split, count in zip(("train", "val", "test"), classes, strict=True):
        centres = rng.normal(scale=3.0, size=(count, dim))
        x = np.repeat(centres, per_class, axis=0) + 0.3 * rng.normal(size=(count * per_class, dim))
        y = np.repeat(np.arange(next_class, next_class + count), per_class)
        splits[split] = SplitData(x=x, y=y)
        next_class += count
    return DomainDataset(name=name, input_dim=dim, splits=splits)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dataset() -> DomainDataset:
    return make_dataset()


@pytest.fixture(scope="session")
def tiny_datasets() -> list[DomainDataset]:
    """Two synthetic domains small enough for training tests."""
    return generate_synthetic(TINY_SPEC, seed=7)


@pytest.fixture(scope="session")
def tiny_teachers(tiny_datasets: list[DomainDataset]) -> dict[str, DomainNet]:
    """One briefly trained teacher per tiny domain."""
    return {
        ds.name: train_single_domain(ds, TINY_NET, TINY_SGD, seed=3, val_episodes=0)[0] for ds in tiny_datasets
    }
