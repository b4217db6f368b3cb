import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rectflow.datagen import TargetSpec, make_training_batch
from rectflow.distill import (
    L2,
    PATCH,
    SimilarityLoss,
    default_schedule,
    distill,
    distill_loss,
    one_step_generate,
    pooling_matrix,
    widen_params,
)
from rectflow.errors import InputError, UsageError
from rectflow.flow import ONE_STEP, FlowStage, constant_stage, euler_endpoint
from rectflow.nn import MlpVelocityNet
from rectflow.reflow import PairDataset, generate_pairs
from rectflow.training import TrainConfig, train

from oracles import small_net

PROBS = [1 / 3, 1 / 3, 1 / 3]


def cfg(**kw):
    base = dict(steps=200, batch_size=64, lr=3e-3, ema_ratio=0.9, null_dropout=0.0, seed=0, log_every=50)
    base.update(kw)
    return TrainConfig(**base)


class TestSimilarity:
    @pytest.mark.parametrize("loss", [SimilarityLoss(L2), SimilarityLoss(PATCH, grid=(4, 4))])
    def test_identical_is_zero(self, loss):
        a = np.random.default_rng(0).normal(size=(5, 16))
        assert np.all(loss.per_sample(a, a) == 0.0)

    @pytest.mark.parametrize("loss", [SimilarityLoss(L2), SimilarityLoss(PATCH, grid=(4, 4))])
    def test_grows_with_offset(self, loss):
        a = np.random.default_rng(0).normal(size=(5, 16))
        d = np.random.default_rng(1).normal(size=(5, 16))
        vals = [loss(a, a + s * d) for s in (0.1, 0.5, 1.0, 2.0)]
        assert all(b > x for x, b in zip(vals, vals[1:]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_patch_positive_for_distinct(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
        assert np.all(SimilarityLoss(PATCH, grid=(4, 4)).per_sample(a, b) > 0)

    def test_patch_without_grid_is_l2(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
        patch = SimilarityLoss(PATCH)
        assert patch.name == L2
        assert np.array_equal(patch.per_sample(a, b), SimilarityLoss(L2).per_sample(a, b))

    def test_patch_formula(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 16)), rng.normal(size=(2, 16))
        loss = SimilarityLoss(PATCH, grid=(4, 4), scales=(1, 2), weights=(1.0, 3.0))
        diff = (a - b).reshape(2, 4, 4)
        pooled = diff.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))
        expect = 0.25 * (diff ** 2).sum(axis=(1, 2)) + 0.75 * 4 * (pooled ** 2).sum(axis=(1, 2))
        np.testing.assert_allclose(loss.per_sample(a, b), expect, rtol=1e-13)

    def test_pooling_matrix_averages_patches(self):
        img = np.arange(16.0)
        pooled = img @ pooling_matrix((4, 4), 2)
        np.testing.assert_allclose(pooled, [2.5, 4.5, 10.5, 12.5])

    def test_patch_requires_scale_one(self):
        with pytest.raises(InputError):
            SimilarityLoss(PATCH, grid=(4, 4), scales=(2, 4))
        with pytest.raises(InputError):
            SimilarityLoss("cosine")

    def test_tensor_matches_numpy(self):
        net = small_net(0, dim=16, vocab=4)
        rng = np.random.default_rng(0)
        x0, x1 = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
        loss = SimilarityLoss(PATCH, grid=(4, 4))
        t = distill_loss(net, x0, x1, np.ones(6, int), loss).item()
        pred = x0 + net(x0, 0.0, 1)
        assert t == pytest.approx(loss(pred, x1), rel=1e-12)


class TestDistillLoss:
    def test_zero_student(self):
        net = small_net(0, zero_last=True)
        rng = np.random.default_rng(0)
        x0, x1 = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        val = distill_loss(net, x0, x1, np.ones(10, int), SimilarityLoss()).item()
        assert val == pytest.approx(np.mean(np.sum((x1 - x0) ** 2, axis=1)), rel=1e-14)

    def test_student_sees_time_zero(self):
        net = small_net(5)
        x0 = np.ones((3, 2))
        expect = np.mean(np.sum(net(x0, 0.0, 1) ** 2, axis=1))
        assert distill_loss(net, x0, x0, np.ones(3, int), SimilarityLoss()).item() == pytest.approx(expect)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            distill_loss(small_net(0), np.zeros((2, 2)), np.zeros((2, 3)), np.ones(2, int), SimilarityLoss())


def test_one_step_equals_single_euler_step():
    net = small_net(7, vocab=4)
    one = FlowStage(net, role=ONE_STEP, teacher_k=1)
    flow = FlowStage(net)
    z0 = np.random.default_rng(0).normal(size=(20, 2))
    c = np.random.default_rng(1).integers(1, 4, 20)
    assert np.array_equal(one_step_generate(one, z0, c), euler_endpoint(flow, z0, c, 1, 1.0))
    assert one_step_generate(one, z0[0], c[0]).shape == (2,)


def test_one_step_generate_rejects_flow():
    with pytest.raises(UsageError):
        one_step_generate(FlowStage(small_net(0)), np.zeros(2), 1)


def test_straight_teacher_distills_quickly():
    u = np.array([1.5, -0.5])
    teacher = constant_stage(u, hidden=(16,))
    pairs = generate_pairs(teacher, PROBS, 500, n_steps=10)
    student, losses, labels = distill(teacher, pairs, default_schedule(40), cfg(steps=40))
    assert losses[0] < 1e-20 and student.role == ONE_STEP and student.teacher_k == 1
    z0 = np.random.default_rng(5).normal(size=(50, 2))
    # Adam normalises the near-zero gradients, so the weights wander slightly
    np.testing.assert_allclose(one_step_generate(student, z0, 1), z0 + u, atol=1e-2)
    assert labels[:20] == ["1:l2"] * 20 and labels[-1] == "2:l2"


def test_distill_reduces_loss_on_curved_coupling():
    teacher = FlowStage(small_net(3, vocab=4, hidden=(16,)))
    pairs = generate_pairs(teacher, PROBS, 2000, n_steps=20)
    _, losses, _ = distill(teacher, pairs, default_schedule(300), cfg(steps=300))
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


def test_grid_schedule_phases():
    spec = TargetSpec(family="grid-image", labels=[[0, 1], [2, 3]], grid=(4, 4))
    rng = np.random.default_rng(0)
    net = MlpVelocityNet(16, (8,), vocab=3, cond_dim=2, time_freqs=2).init_params(rng)
    teacher = FlowStage(net)
    batch = make_training_batch(spec, 64, 0.0, 1)
    pairs = PairDataset(batch.x0, batch.x1, batch.cond)
    sched = default_schedule(10, grid=spec.grid, l2_fraction=0.3)
    assert [loss.name for loss, _ in sched] == [L2, PATCH] and [n for _, n in sched] == [3, 7]
    student, losses, labels = distill(teacher, pairs, sched, cfg(steps=10, batch_size=8))
    assert labels == ["1:l2"] * 3 + ["2:patch"] * 7 and len(losses) == 10
    assert student.provenance["schedule"][1][0]["variant"] == PATCH


def test_distill_rejects_one_step_teacher():
    one = FlowStage(small_net(0, vocab=4), role=ONE_STEP, teacher_k=1)
    pairs = PairDataset(np.zeros((4, 2)), np.zeros((4, 2)), np.ones(4))
    with pytest.raises(UsageError):
        distill(one, pairs, default_schedule(5), cfg(steps=5))


def test_widen_preserves_function_and_trains():
    net = small_net(1, vocab=4, hidden=(6, 5))
    wide = widen_params(net, (10, 9), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    x, t, c = rng.normal(size=(30, 2)), rng.random(30), rng.integers(0, 4, 30)
    np.testing.assert_allclose(wide(x, t, c), net(x, t, c), atol=1e-14)
    with pytest.raises(InputError):
        widen_params(net, (4, 5), rng)

    batch = make_training_batch(TargetSpec(centers=[[2.0, 0.0]], weights=[1.0], stds=[0.1], labels=[[0]] * 3),
                                32, 0.0, 0)

    def batch_loss(r):
        return distill_loss(wide, batch.x0, batch.x1, batch.cond, SimilarityLoss())

    before = wide.params.views()["W0"][:, 6:].copy()
    train(wide, batch_loss, cfg(steps=20))
    assert np.any(wide.params.views()["W0"][:, 6:] != before)
