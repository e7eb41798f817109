import numpy as np
import pytest

from offmbrl.autodiff import Tensor, no_grad
from offmbrl.dataset import OfflineDataset
from offmbrl.envs import env_config
from offmbrl.errors import ConfigError
from offmbrl.iql import iql_value_loss
from offmbrl.manager import ManagerConfig, ManagerModelSet
from offmbrl.planner import PlannerConfig
from offmbrl.workers import (
    Td3bcWorker,
    WorkerSpec,
    augment_dataset,
    evaluate_worker,
    make_worker,
    train_worker,
)

from test_envdata import make_synthetic


def tiny_manager(rng, state_dim=4):
    return ManagerModelSet(rng, state_dim, ManagerConfig(), hidden=16, enc_hidden=8)


# -- augmentation -----------------------------------------------------------------


def test_augment_none_returns_input(rng):
    ds = make_synthetic(rng, [6, 4], n=4)
    assert augment_dataset(ds, "none", rng) is ds


def test_augment_intent_widths_and_locality(rng):
    ds = make_synthetic(rng, [10, 7], n=4)
    mgr = tiny_manager(rng)
    out = augment_dataset(ds, "intent", np.random.default_rng(0), manager=mgr)
    assert out.state_dim == 14 and out.augmented
    np.testing.assert_array_equal(out.states[:, :4], ds.states)
    np.testing.assert_array_equal(out.next_states[:, :4], ds.next_states)
    assert out.size == ds.size
    rand = augment_dataset(ds, "random", np.random.default_rng(0), manager=mgr)
    np.testing.assert_array_equal(rand.states[:, :4], ds.states)


def test_augment_snext_carries_next_step_intent(rng):
    ds = make_synthetic(rng, [9], n=4)
    mgr = tiny_manager(rng)
    out = augment_dataset(ds, "intent", np.random.default_rng(0), manager=mgr)
    # within an episode, appended part of s_next[t] equals appended s[t+1]
    np.testing.assert_array_equal(out.next_states[:-1, 4:], out.states[1:, 4:])


def test_augment_random_statistics(rng):
    ds = make_synthetic(rng, [50] * 8, n=4)
    out = augment_dataset(ds, "random", np.random.default_rng(1), manager=None)
    appended = out.states[:, 4:]
    assert appended.min() > 0.0 and appended.max() < 1.0
    assert abs(appended.mean() - 0.5) < 0.01


def test_augment_dimension_mismatch_rejected(rng):
    ds = make_synthetic(rng, [10], n=3)
    mgr = tiny_manager(rng, state_dim=4)
    with pytest.raises(ConfigError):
        augment_dataset(ds, "intent", rng, manager=mgr)


def test_augmented_dataset_round_trip(tmp_path, rng):
    from offmbrl.dataset import load_dataset, save_dataset

    ds = make_synthetic(rng, [8, 8], n=4)
    out = augment_dataset(ds, "random", np.random.default_rng(3), manager=None)
    path = tmp_path / "aug.ofrl"
    save_dataset(out, path)
    back = load_dataset(path)
    assert back.augmented and back.state_dim == 14


# -- workers -----------------------------------------------------------------------


def one_state_one_action_dataset(n=3, m=2, size=256):
    s = np.tile(np.array([[0.2, -0.1, 0.4]], dtype=np.float32), (size, 1))
    a = np.tile(np.array([[0.5, -0.3]], dtype=np.float32), (size, 1))
    return OfflineDataset(
        states=s,
        actions=a,
        rewards=np.zeros(size, dtype=np.float32),
        next_states=s.copy(),
        dones=np.zeros(size, dtype=np.float32) + (np.arange(size) == size - 1),
        episode_lengths=np.array([size], dtype=np.int64),
        env_name="fixture",
    )


def test_bc_converges_to_single_action():
    ds = one_state_one_action_dataset()
    spec = WorkerSpec(algorithm="bc", hidden=32, lr=1e-3, batch_size=64)
    worker, _ = train_worker(spec, ds, steps=2000, seed=0)
    act = worker.act(ds.states[0])
    np.testing.assert_allclose(act, [0.5, -0.3], atol=1e-3)


def test_iql_worker_shares_loss_primitives(rng):
    """The worker's value loss equals the shared primitive on the same inputs."""
    ds = make_synthetic(rng, [30, 30], n=4)
    spec = WorkerSpec(algorithm="iql", hidden=16, batch_size=32)
    worker = make_worker(np.random.default_rng(0), 4, 2, spec)
    batch = ds.sample_transitions(32, np.random.default_rng(1))
    q_t = worker._q_target_min(batch["s"], batch["a"])
    with no_grad():
        v = worker.value(Tensor(batch["s"])).data[:, 0]
    expected = float(iql_value_loss(q_t, Tensor(v), spec.tau).data)
    metrics = worker.train_step(batch, np.random.default_rng(2), step=1)
    assert metrics["L_V"] == pytest.approx(expected, rel=1e-5)


def test_td3bc_prefers_better_bandit_action():
    rng = np.random.default_rng(0)
    size = 512
    s = np.zeros((size, 2), dtype=np.float32)
    good = rng.random(size) < 0.5
    a = np.where(good[:, None], 0.8, -0.8).astype(np.float32)
    r = np.where(good, 1.0, 0.0).astype(np.float32)
    ds = OfflineDataset(
        states=s,
        actions=a.reshape(size, 1),
        rewards=r,
        next_states=s.copy(),
        dones=np.ones(size, dtype=np.float32),
        episode_lengths=np.ones(size, dtype=np.int64),
        env_name="bandit",
        terminals=np.ones(size, dtype=bool),
    )
    spec = WorkerSpec(algorithm="td3bc", hidden=32, lr=1e-3, batch_size=64)
    worker, _ = train_worker(spec, ds, steps=1500, seed=0)
    assert worker.act(np.zeros(2, dtype=np.float32))[0] > 0.3


def test_worker_agnostic_augmented_width(rng):
    for algo in ("bc", "iql", "td3bc"):
        spec = WorkerSpec(algorithm=algo, hidden=8)
        worker = make_worker(rng, 14, 2, spec)
        assert worker.act(np.zeros(14, dtype=np.float32)).shape == (2,)


def test_worker_checkpoint_roundtrip(tmp_path, rng):
    from offmbrl.autodiff import load_checkpoint, save_checkpoint

    spec = WorkerSpec(algorithm="td3bc", hidden=8)
    worker = make_worker(rng, 4, 2, spec)
    save_checkpoint(tmp_path / "w.ckpt", worker.named_params(), meta={"algorithm": "td3bc"})
    arrays, meta = load_checkpoint(tmp_path / "w.ckpt")
    assert meta["algorithm"] == "td3bc"
    assert set(arrays) == {n for n, _ in worker.named_params()}


# -- evaluation ---------------------------------------------------------------------


def quick_bc_worker(seed=0, obs_dim=4):
    rng = np.random.default_rng(seed)
    return make_worker(rng, obs_dim, 2, WorkerSpec(algorithm="bc", hidden=8))


def test_evaluate_deterministic():
    cfg = env_config("maze-umaze")
    worker = quick_bc_worker()
    a = evaluate_worker(worker, cfg, "none", episodes=5, seed=3)
    b = evaluate_worker(worker, cfg, "none", episodes=5, seed=3)
    assert a.returns == b.returns and a.score_mean == b.score_mean
    assert a.episodes == 5


def test_evaluate_random_mode_deterministic():
    cfg = env_config("maze-umaze")
    worker = quick_bc_worker(obs_dim=14)
    a = evaluate_worker(worker, cfg, "random", episodes=3, seed=1)
    b = evaluate_worker(worker, cfg, "random", episodes=3, seed=1)
    assert a.returns == b.returns


def test_evaluate_intent_requires_dimensions(rng):
    cfg = env_config("maze-umaze")
    worker = quick_bc_worker(obs_dim=4)
    mgr = tiny_manager(rng)
    with pytest.raises(ConfigError):
        evaluate_worker(
            worker, cfg, "intent", episodes=1, seed=0, manager=mgr,
            planner_cfg=PlannerConfig(num_pi_samples=4, num_random_samples=0, num_elites=2),
        )


def test_intent_eval_source_asymmetry_and_replan_counter(rng):
    """Training uses inverse dynamics; evaluation uses the planner, once per
    replan interval."""
    ds = make_synthetic(rng, [20, 20], n=4)
    mgr = tiny_manager(rng)
    before = dict(mgr.counters)
    augment_dataset(ds, "intent", np.random.default_rng(0), manager=mgr)
    assert mgr.counters["planner"] == before["planner"]
    assert mgr.counters["inverse_dynamics"] > before["inverse_dynamics"]

    cfg = env_config("maze-umaze", max_steps=40)
    worker = quick_bc_worker(obs_dim=14)
    planner_cfg = PlannerConfig(
        horizon=4, num_pi_samples=4, num_random_samples=0, num_elites=2
    )
    inv_before = mgr.counters["inverse_dynamics"]
    plan_before = mgr.counters["planner"]
    report = evaluate_worker(
        worker, cfg, "intent", episodes=2, seed=0, manager=mgr,
        planner_cfg=planner_cfg, replan_interval=8,
    )
    assert mgr.counters["inverse_dynamics"] == inv_before
    expected = sum(-(-length // 8) for length in report.lengths)
    assert mgr.counters["planner"] - plan_before == expected


def test_eval_report_success_rate():
    cfg = env_config("maze-umaze", max_steps=40)
    worker = quick_bc_worker()
    report = evaluate_worker(worker, cfg, "none", episodes=4, seed=0)
    assert 0.0 <= report.success_rate <= 1.0
    assert len(report.scores) == 4
