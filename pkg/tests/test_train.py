# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Unit tests for the training loops in src/train.py."""

from __future__ import annotations

import hashlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.data import DomainDataset, EpisodeConfig, SyntheticSpec, generate_synthetic
from src.errors import DimensionError, TrainingError
from src.losses import KernelSpec, cross_entropy, feature_loss, kl_pred_loss
from src.nets import Adapter, DomainNet, MultiDomainModel, NetConfig, save_checkpoint, state_dict
from src.optim import SgdConfig
from src.tensor import Tensor
from src.train import DistillConfig, train_mdl, train_single_domain, train_url
from tests.conftest import TINY_NET, TINY_SGD, make_dataset, numeric_grad, relative_error

SHORT_SGD = replace(TINY_SGD, max_iter=10, anneal_freq=5)


def _student_from(teacher: DomainNet) -> MultiDomainModel:
    return MultiDomainModel(
        teacher.backbone.copy(requires_grad=True),
        {teacher.domain: teacher.head.copy(requires_grad=True)},
        {teacher.domain: Adapter.identity(teacher.backbone.feature_dim)},
    )


class TestDistillConfig:
    """Tests for DistillConfig weights and schedules."""

    def test_anchor_multiplier(self) -> None:
        """Test that the anchor domain gets scaled weights."""
        config = DistillConfig(lambda_p=1.0, lambda_f=2.0, anchor_domain="a", anchor_multiplier=4.0)
        assert config.initial_lambdas("a") == (4.0, 8.0)
        assert config.initial_lambdas("b") == (1.0, 2.0)

    def test_per_domain_overrides(self) -> None:
        """Test per-domain initial weights."""
        config = DistillConfig(domain_lambda_p={"a": 3.0}, domain_lambda_f={"b": 0.5})
        assert config.initial_lambdas("a") == (3.0, 1.0)
        assert config.initial_lambdas("b") == (1.0, 0.5)

    def test_annealing_horizon(self) -> None:
        """Test that weights reach zero after k periods."""
        config = DistillConfig(anneal_periods=2, domain_anneal_periods={"b": 1})
        assert config.lambdas("a", 10, 10) == (0.5, 0.5)
        assert config.lambdas("b", 10, 10) == (0.0, 0.0)

    def test_constant_weights(self) -> None:
        """Test that annealing can be switched off."""
        assert DistillConfig(anneal=False).lambdas("a", 1000, 10) == (1.0, 1.0)

    def test_invalid(self) -> None:
        """Test that negative weights and zero periods are refused."""
        with pytest.raises(ValueError):
            DistillConfig(lambda_p=-1.0)
        with pytest.raises(ValueError):
            DistillConfig(anneal_periods=0)


class TestSingleDomain:
    """Tests for train_single_domain()."""

    def test_loss_decreases(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that cross-entropy falls on a learnable domain."""
        _, trace = train_single_domain(tiny_datasets[0], TINY_NET, TINY_SGD, seed=1, val_episodes=0)
        assert len(trace.losses) == TINY_SGD.max_iter
        assert np.mean(trace.losses[-5:]) < np.mean(trace.losses[:5])

    def test_returns_frozen_net(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that the result is frozen and named after its domain."""
        net, _ = train_single_domain(tiny_datasets[0], TINY_NET, SHORT_SGD, val_episodes=0)
        assert net.domain == "domain0"
        assert all(not p.requires_grad for p in net.parameters())

    def test_validation_schedule(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test validation every anneal_freq steps and snapshot tracking."""
        _, trace = train_single_domain(tiny_datasets[0], TINY_NET, SHORT_SGD, val_episodes=2)
        assert [t for t, _ in trace.validation] == [5, 10]
        assert trace.best_iteration in (5, 10)

    def test_deterministic(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that equal seeds give identical networks."""
        a, _ = train_single_domain(tiny_datasets[1], TINY_NET, SHORT_SGD, seed=4, val_episodes=0)
        b, _ = train_single_domain(tiny_datasets[1], TINY_NET, SHORT_SGD, seed=4, val_episodes=0)
        for name, value in state_dict(a).items():
            assert np.array_equal(value, state_dict(b)[name])

    def test_input_width_mismatch(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that the network must match the data width."""
        with pytest.raises(DimensionError):
            train_single_domain(tiny_datasets[0], NetConfig(7, (4,), 3), SHORT_SGD)

    def test_nan_inputs_raise(self) -> None:
        """Test that a non-finite loss stops training with the step number."""
        ds = make_dataset("bad", dim=6)
        ds.split("train").x[:] = np.nan
        with pytest.raises(TrainingError) as info:
            train_single_domain(ds, TINY_NET, SHORT_SGD, val_episodes=0)
        assert info.value.iteration == 0


class TestMultiDomain:
    """Tests for train_mdl()."""

    def test_single_domain_reproduces_sdl(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that MDL on one domain equals SDL with the same seed."""
        sdl, _ = train_single_domain(tiny_datasets[0], TINY_NET, SHORT_SGD, seed=2, val_episodes=2)
        mdl, _ = train_mdl([tiny_datasets[0]], TINY_NET, SHORT_SGD, seed=2, val_episodes=2)
        for p, q in zip(sdl.backbone.parameters(), mdl.backbone.parameters(), strict=True):
            assert np.array_equal(p.data, q.data)
        assert np.array_equal(sdl.head.weight.data, mdl.heads["domain0"].weight.data)

    def test_adapters_untouched(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that MDL leaves adapters at the identity."""
        model, trace = train_mdl(tiny_datasets, TINY_NET, SHORT_SGD, val_episodes=0)
        assert all(np.array_equal(a.matrix.data, np.eye(5)) for a in model.adapters.values())
        assert {r.domain for r in trace.records} == {"domain0", "domain1"}

    def test_val_accuracy_beats_chance(self) -> None:
        """Test that MDL on the three-domain benchmark ends well above random guessing on val episodes."""
        datasets = generate_synthetic(SyntheticSpec(), seed=0)
        config = NetConfig(input_dim=16, hidden=(32,), feature_dim=32)
        sgd = SgdConfig(anneal_freq=100, max_iter=300)
        _, trace = train_mdl(datasets, config, sgd, seed=0, val_episodes=50)
        episodes = EpisodeConfig()
        ways = range(episodes.min_way, SyntheticSpec().val_classes + 1)
        chance = float(np.mean([1.0 / way for way in ways]))
        assert trace.validation[-1][0] == sgd.max_iter
        assert trace.validation[-1][1] >= chance + 0.30

    def test_checkpoint_hash_is_stable(self, tiny_datasets: list[DomainDataset], tmp_path: Path) -> None:
        """Test that two seeded runs write byte-identical checkpoints."""
        digests = []
        for run in ("first", "second"):
            model, _ = train_mdl(tiny_datasets, TINY_NET, SHORT_SGD, seed=6, val_episodes=2)
            path = save_checkpoint(model, tmp_path / f"{run}.ckpt")
            digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_batch_weights(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that weight and domain counts must agree."""
        with pytest.raises(ValueError):
            train_mdl(tiny_datasets, TINY_NET, SHORT_SGD, batch_weights=[1], val_episodes=0)

    def test_duplicate_domains(self, tiny_datasets: list[DomainDataset]) -> None:
        """Test that a domain may appear only once."""
        with pytest.raises(ValueError):
            train_mdl([tiny_datasets[0], tiny_datasets[0]], TINY_NET, SHORT_SGD)


class TestUniversal:
    """Tests for train_url()."""

    def test_zero_lambdas_reproduce_mdl(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test that URL without distillation equals MDL."""
        distill = DistillConfig(lambda_p=0.0, lambda_f=0.0)
        url, trace = train_url(tiny_datasets, tiny_teachers, TINY_NET, distill, SHORT_SGD, seed=5, val_episodes=0)
        mdl, _ = train_mdl(tiny_datasets, TINY_NET, SHORT_SGD, seed=5, val_episodes=0)
        for p, q in zip(url.parameters(include_adapters=False), mdl.parameters(include_adapters=False), strict=True):
            assert np.allclose(p.data, q.data, rtol=0, atol=1e-12)
        assert all(r.kl is None and r.feature is None for r in trace.records)

    def test_teachers_unchanged(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test that distillation never updates the teachers."""
        before = {name: state_dict(net) for name, net in tiny_teachers.items()}
        train_url(tiny_datasets, tiny_teachers, TINY_NET, DistillConfig(), SHORT_SGD, val_episodes=0)
        for name, net in tiny_teachers.items():
            for key, value in state_dict(net).items():
                assert np.array_equal(value, before[name][key])

    def test_student_copy_of_teacher_has_zero_loss(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test that a student equal to its teacher starts with zero distillation loss."""
        teacher = tiny_teachers["domain0"]
        distill = DistillConfig(ce_weight=0.0)
        _, trace = train_url(
            [tiny_datasets[0]],
            tiny_teachers,
            TINY_NET,
            distill,
            SHORT_SGD,
            val_episodes=0,
            initial=_student_from(teacher),
        )
        assert abs(trace.losses[0]) < 1e-8

    def test_lambdas_anneal_in_trace(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test recorded weights fall linearly and terms vanish at zero."""
        _, trace = train_url(
            tiny_datasets, tiny_teachers, TINY_NET, DistillConfig(feature_loss="l2"), SHORT_SGD, val_episodes=0
        )
        first = [r for r in trace.records if r.domain == "domain0"]
        assert first[0].lambda_p == 1.0
        assert first[1].lambda_p == pytest.approx(0.8)
        assert first[0].feature is not None
        assert first[-1].lambda_f == 0.0
        assert first[-1].feature is None

    def test_feature_only_after_anneal(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test training continues when every weighted term is skipped."""
        distill = DistillConfig(ce_weight=0.0, use_kl=False, feature_loss="cosine")
        _, trace = train_url(tiny_datasets, tiny_teachers, TINY_NET, distill, SHORT_SGD, val_episodes=0)
        assert trace.losses[-1] == 0.0

    def test_distilled_student_matches_teacher(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test that a randomly initialised student distilled with cka+kl ends close to its teacher."""
        domain = tiny_datasets[0]
        sgd = SgdConfig(lr=0.05, anneal_freq=600, max_iter=600, batch_size=16)
        distill = DistillConfig(ce_weight=0.0, anneal=False)
        converged = 0
        for seed in range(5):
            _, trace = train_url([domain], tiny_teachers, TINY_NET, distill, sgd, seed=seed, val_episodes=0)
            final = trace.records[-1]
            assert final.kl is not None
            assert final.feature is not None
            converged += final.feature < 0.05 and final.kl < 0.05
        assert converged >= 4

    def test_step_objective_gradient(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test the summed CE, KL and CKA objective against finite differences in every student tensor."""
        x, y = tiny_datasets[0].split("train").x[:10], tiny_datasets[0].split("train").y[:10]
        teacher = tiny_teachers["domain0"]
        labels = y - y.min()
        student = _student_from(teacher)
        rng = np.random.default_rng(0)
        for p in student.parameters():
            p.data += 0.1 * rng.normal(size=p.shape)
        kernel = KernelSpec("linear")

        def objective() -> Tensor:
            feats = student.backbone(x)
            logits = student.heads["domain0"](feats)
            adapted = student.adapters["domain0"](feats)
            return (
                cross_entropy(logits, labels)
                + kl_pred_loss(logits, teacher.logits(x).data) * 0.5
                + feature_loss("cka", adapted, teacher.backbone(x).data, kernel) * 2.0
            )

        objective().backward()
        for p in student.parameters():
            analytic = p.grad_or_zeros().copy()
            start = p.data.copy()

            def value(data: np.ndarray, p: Tensor = p, start: np.ndarray = start) -> float:
                p.data[...] = data
                loss = objective().item()
                p.data[...] = start
                return loss

            assert relative_error(analytic, numeric_grad(value, start)) < 1e-4

    def test_missing_teacher(self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]) -> None:
        """Test that every domain needs a teacher."""
        with pytest.raises(ValueError):
            train_url(tiny_datasets, {"domain0": tiny_teachers["domain0"]}, TINY_NET, DistillConfig(), SHORT_SGD)

    def test_feature_width_mismatch(
        self, tiny_datasets: list[DomainDataset], tiny_teachers: dict[str, DomainNet]
    ) -> None:
        """Test that student and teacher feature widths must agree."""
        wide = NetConfig(input_dim=6, hidden=(12,), feature_dim=7)
        with pytest.raises(DimensionError):
            train_url(tiny_datasets, tiny_teachers, wide, DistillConfig(), SHORT_SGD)
