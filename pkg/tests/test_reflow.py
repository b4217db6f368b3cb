import numpy as np
import pytest

from rectflow.errors import FormatError, InputError, LineageError, SimulationError, UsageError
from rectflow.flow import ONE_STEP, AnalyticField, FlowStage, constant_stage, euler_endpoint, flow_loss
from rectflow.reflow import (
    BLOCK,
    PairDataset,
    block_seed,
    generate_pairs,
    load_pairs,
    pair_sampler,
    read_pair_meta,
    reflow_step,
    run_reflow_chain,
    save_pairs,
    stage_configs,
)
from rectflow.training import TrainConfig

from oracles import small_net

PROBS = [1 / 3, 1 / 3, 1 / 3]


def tiny_cfg(**kw):
    base = dict(steps=30, batch_size=32, lr=1e-3, ema_ratio=0.9, null_dropout=0.1, seed=0, log_every=10)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_field_pairs_are_identity():
    pairs = generate_pairs(constant_stage(np.zeros(2)), PROBS, 100, n_steps=25)
    assert np.array_equal(pairs.x0, pairs.x1)


def test_constant_field_pairs_are_shifted():
    u = np.array([0.5, -1.0])
    pairs = generate_pairs(constant_stage(u), PROBS, 100, n_steps=25)
    np.testing.assert_allclose(pairs.x1, pairs.x0 + u, atol=1e-12)


def test_pairs_match_euler_map():
    stage = FlowStage(small_net(2, vocab=4), alpha=1.5)
    pairs = generate_pairs(stage, PROBS, 50, n_steps=7, seed=3)
    again = euler_endpoint(stage, pairs.x0, pairs.cond, 7, 1.5)
    np.testing.assert_array_equal(pairs.x1, again)
    assert pairs.meta["alpha"] == 1.5 and pairs.meta["n_steps"] == 7


def test_pairs_deterministic_and_thread_independent():
    stage = FlowStage(small_net(4, vocab=4, hidden=(16,)))
    count = 2 * BLOCK + 77
    a = generate_pairs(stage, PROBS, count, n_steps=5, seed=11, threads=1)
    b = generate_pairs(stage, PROBS, count, n_steps=5, seed=11, threads=4)
    for name in ("x0", "x1", "cond"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.meta == b.meta


def test_pairs_block_structure():
    stage = constant_stage(np.zeros(2))
    pairs = generate_pairs(stage, PROBS, BLOCK + 5, seed=4)
    rng = block_seed(4, 1)
    np.testing.assert_array_equal(pairs.x0[BLOCK:], rng.normal(size=(5, 2)))


def test_pairs_conditions_follow_label_probs():
    pairs = generate_pairs(constant_stage(np.zeros(2)), [0.0, 1.0, 0.0], 300)
    assert np.all(pairs.cond == 2)


def test_pairs_count_zero():
    with pytest.raises(InputError):
        generate_pairs(constant_stage(np.zeros(2)), PROBS, 0)


def test_pairs_from_one_step_stage():
    one = FlowStage(small_net(0, vocab=4), role=ONE_STEP, teacher_k=1)
    with pytest.raises(UsageError):
        generate_pairs(one, PROBS, 10)


def test_pairs_non_finite_reports_pair():
    count = BLOCK + 200
    # replay the noise stream to know which pair blows up
    x0 = np.concatenate([block_seed(0, 0).normal(size=(BLOCK, 2)), block_seed(0, 1).normal(size=(200, 2))])
    bad = np.flatnonzero(x0[:, 0] > 2.5)
    field = AnalyticField(lambda x, t, c: np.where(x[:, :1] > 2.5, np.nan, 0.0), dim=2)
    with pytest.raises(SimulationError) as info:
        generate_pairs(field, PROBS, count, n_steps=3)
    assert info.value.index == bad[0]
    assert info.value.step == 1


def test_save_load_roundtrip(tmp_path):
    pairs = generate_pairs(FlowStage(small_net(1, vocab=4)), PROBS, 40, n_steps=3)
    save_pairs(tmp_path / "p.rfpr", pairs, note="x")
    back = load_pairs(tmp_path / "p.rfpr")
    for name in ("x0", "x1", "cond"):
        assert np.array_equal(getattr(back, name), getattr(pairs, name))
    assert back.meta["note"] == "x" and read_pair_meta(tmp_path / "p.rfpr")["count"] == 40
    assert back[3].cond == pairs.cond[3]


def test_truncated_pair_file(tmp_path):
    pairs = generate_pairs(constant_stage(np.zeros(2)), PROBS, 10)
    save_pairs(tmp_path / "p.rfpr", pairs)
    raw = (tmp_path / "p.rfpr").read_bytes()
    (tmp_path / "p.rfpr").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_pairs(tmp_path / "p.rfpr")


def test_pair_dataset_shape_check():
    with pytest.raises(InputError):
        PairDataset(np.zeros((3, 2)), np.zeros((3, 3)), np.ones(3))


def test_sampler_dropout():
    pairs = generate_pairs(constant_stage(np.zeros(2)), PROBS, 100)
    batch = pair_sampler(pairs, 4000, 0.25)(np.random.default_rng(0))
    frac = np.mean(batch.cond == 0)
    assert abs(frac - 0.25) < 3 * np.sqrt(0.25 * 0.75 / 4000)
    assert np.all(batch.true_cond > 0)


def test_straight_teacher_gives_near_zero_initial_loss():
    u = np.array([1.0, 2.0])
    teacher = constant_stage(u)
    pairs = generate_pairs(teacher, PROBS, 500, n_steps=10)
    net = teacher.net.with_params(teacher.ema)
    batch = pair_sampler(pairs, 256, 0.0)(np.random.default_rng(0))
    assert flow_loss(net, batch, np.random.default_rng(1)).item() < 1e-20
    student, losses = reflow_step(teacher, pairs, tiny_cfg(steps=5, null_dropout=0.0))
    assert losses[0] < 1e-20 and student.k == 2


def test_reflow_student_starts_from_teacher_ema():
    teacher = FlowStage(small_net(0, vocab=4), ema=small_net(9, vocab=4).params.flat)
    pairs = generate_pairs(teacher, PROBS, 64, n_steps=3)
    student, _ = reflow_step(teacher, pairs, tiny_cfg(steps=1, lr=1e-12, ema_ratio=0.0))
    np.testing.assert_allclose(student.net.params.flat, teacher.ema, atol=1e-9)


def test_reflow_rejects_foreign_pairs():
    a = FlowStage(small_net(0, vocab=4))
    b = FlowStage(small_net(1, vocab=4))
    pairs = generate_pairs(a, PROBS, 32, n_steps=2)
    with pytest.raises(LineageError):
        reflow_step(b, pairs, tiny_cfg())


def test_reflow_input_checks():
    teacher = FlowStage(small_net(0, vocab=4))
    pairs = generate_pairs(teacher, PROBS, 32, n_steps=2)
    with pytest.raises(InputError):
        reflow_step(teacher, pairs.subset(np.arange(0)), tiny_cfg())
    one = FlowStage(small_net(0, vocab=4), role=ONE_STEP, teacher_k=1)
    with pytest.raises(UsageError):
        reflow_step(one, pairs, tiny_cfg())
    wide = FlowStage(small_net(0, dim=3, vocab=4))
    with pytest.raises(InputError):
        reflow_step(wide, pairs, tiny_cfg())


def test_stage_configs_decay():
    cfgs = stage_configs(tiny_cfg(lr=1e-3), 4)
    assert [c.lr for c in cfgs] == [1e-3, 1e-4, 1e-4]
    assert len({c.seed for c in cfgs}) == 3


@pytest.mark.parametrize("k_max", [2, 3])
def test_chain_lengths(k_max):
    base = FlowStage(small_net(0, vocab=4, hidden=(8,)))
    saved = []
    stages = run_reflow_chain(base, k_max, tiny_cfg(steps=10), PROBS, 64, n_steps=3,
                              save=lambda s, p, l: saved.append((s.k, p.meta["stage_id"])))
    assert [s.k for s in stages] == list(range(2, k_max + 1))
    assert saved == [(k, f"v{k - 1}") for k in range(2, k_max + 1)]


def test_chain_error_names_stage():
    base = FlowStage(small_net(0, vocab=4))
    with pytest.raises(InputError) as info:
        run_reflow_chain(base, 3, tiny_cfg(steps=5), [1.0, 1.0], 32, n_steps=2)
    assert info.value.stage == 2 and "v2" in str(info.value)


def test_chain_needs_two_stages():
    with pytest.raises(InputError):
        run_reflow_chain(FlowStage(small_net(0, vocab=4)), 1, tiny_cfg(), PROBS, 10)
