import numpy as np
import pytest

from offmbrl.errors import ContractError
from offmbrl.manager import ManagerConfig, ManagerModelSet
from offmbrl.planner import (
    PlannerConfig,
    _elite_update,
    plan_mppi,
    plan_policy_shooting,
    policy_rollout_sequences,
    score_sequence,
    score_sequences,
    select_action,
)
from offmbrl.tdmpc import ModelSet


def tiny_models(rng, d=3, m=1, hidden=8, dtype=np.float32):
    return ModelSet(rng, 3, m, latent_dim=d, hidden=hidden, enc_hidden=8, dtype=dtype)


def zero_mlp(mlp, bias_last=None):
    for w, b in mlp.layers:
        w.data[...] = 0.0
        b.data[...] = 0.0
    if bias_last is not None:
        mlp.layers[-1][1].data[...] = bias_last


def test_score_sequence_direct_formula(rng):
    models = tiny_models(rng)
    zero_mlp(models.reward, bias_last=1.0)
    zero_mlp(models.q1, bias_last=4.0)
    zero_mlp(models.q2, bias_last=4.0)
    cfg = PlannerConfig(horizon=2, gamma=0.5, num_pi_samples=1, num_elites=1)
    z0 = rng.standard_normal(3).astype(np.float32)
    actions = rng.uniform(-1, 1, (2, 1)).astype(np.float32)
    # 1 + 0.5*1 + 0.25*4 = 2.5
    assert score_sequence(models, z0, actions, cfg) == pytest.approx(2.5, abs=1e-6)


def test_score_zero_nets(rng):
    models = tiny_models(rng)
    zero_mlp(models.reward)
    zero_mlp(models.q1)
    zero_mlp(models.q2)
    cfg = PlannerConfig(horizon=3, num_pi_samples=1, num_elites=1)
    score = score_sequence(models, np.zeros(3, np.float32), np.zeros((3, 1), np.float32), cfg)
    assert score == 0.0


def test_score_matches_manual_unroll(rng):
    models = tiny_models(rng, dtype=np.float64)
    cfg = PlannerConfig(horizon=3, gamma=0.9, num_pi_samples=1, num_elites=1)
    z0 = rng.standard_normal(3)
    actions = rng.uniform(-1, 1, (4, 3, 1))

    def manual(seq):
        from offmbrl.autodiff import Tensor, no_grad, squashed_mean
        from offmbrl.autodiff import tensor as T

        with no_grad():
            z = Tensor(z0[None])
            total, disc = 0.0, 1.0
            for t in range(3):
                za = T.concat([z, Tensor(seq[t][None])], axis=-1)
                total += disc * float(models.reward(za).data[0, 0])
                z = models.dynamics(za)
                disc *= 0.9
            a = squashed_mean(models.policy.head(z))
            q1 = models.q1(T.concat([z, a], axis=-1)).data[0, 0]
            q2 = models.q2(T.concat([z, a], axis=-1)).data[0, 0]
            return total + disc * min(q1, q2)

    got = score_sequences(models, z0, actions, cfg)
    want = [manual(actions[i]) for i in range(4)]
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_single_iteration_elites_are_ranked_policy_samples(rng):
    models = tiny_models(rng)
    cfg = PlannerConfig(horizon=2, num_pi_samples=6, num_random_samples=0,
                        num_elites=6, iterations=1)
    seed = 1234
    result = plan_mppi(models, np.zeros(3, np.float32), cfg, np.random.default_rng(seed))
    r2 = np.random.default_rng(seed)
    seqs = policy_rollout_sequences(models, np.zeros(3, np.float32), 6, 2, r2)
    scores = score_sequences(models, np.zeros(3, np.float32), seqs, cfg, rng=r2)
    order = np.argsort(-scores, kind="stable")
    np.testing.assert_array_equal(result.elite_sequences, seqs[order])
    np.testing.assert_array_equal(result.elite_scores, scores[order])
    assert np.all(np.diff(result.elite_scores) <= 0)


def test_elite_update_fixed_point():
    cfg = PlannerConfig(num_pi_samples=4, num_elites=4)
    seq = np.full((4, 2, 1), 0.37)
    mean = np.full((2, 1), 0.37)
    std = np.full((2, 1), 0.5)
    new_mean, new_std = _elite_update(mean, std, seq, np.ones(4), cfg)
    np.testing.assert_allclose(new_mean, 0.37, rtol=1e-12)
    np.testing.assert_allclose(new_std, cfg.std_floor)


def brute_force_best(models, z0, cfg, action_grid):
    """Exhaustive enumeration oracle over discretized action sequences."""
    from itertools import product

    best_seq, best_score = None, -np.inf
    for seq in product(action_grid, repeat=cfg.horizon):
        actions = np.array(seq, dtype=np.float64).reshape(cfg.horizon, -1)
        s = score_sequence(models, z0, actions, cfg)
        if s > best_score:
            best_seq, best_score = actions, s
    return best_seq, best_score


@pytest.mark.parametrize("planner", [plan_mppi, plan_policy_shooting])
def test_exhaustive_injection_matches_brute_force(planner):
    grid = [-1.0, 0.0, 1.0]
    for trial in range(20):
        rng = np.random.default_rng(trial)
        models = tiny_models(rng, dtype=np.float64)
        cfg = PlannerConfig(horizon=2, num_pi_samples=4, num_random_samples=0,
                            num_elites=3, iterations=1, bootstrap_mean=True)
        z0 = rng.standard_normal(3)
        from itertools import product

        inject = np.array(
            [list(s) for s in product(grid, repeat=2)], dtype=np.float64
        ).reshape(-1, 2, 1)
        result = planner(models, z0, cfg, np.random.default_rng(trial + 1), inject=inject)
        _, best_score = brute_force_best(models, z0, cfg, grid)
        assert result.elite_scores[0] >= best_score - 1e-9


def test_shooting_equals_single_iteration_mppi(rng):
    models = tiny_models(rng)
    cfg = PlannerConfig(horizon=2, num_pi_samples=16, num_random_samples=0,
                        num_elites=4, iterations=6)
    z0 = rng.standard_normal(3).astype(np.float32)
    a = plan_policy_shooting(models, z0, cfg, np.random.default_rng(42))
    b = plan_mppi(
        models, z0, PlannerConfig(horizon=2, num_pi_samples=16, num_random_samples=0,
                                  num_elites=4, iterations=1),
        np.random.default_rng(42),
    )
    assert a.elite_sequences.tobytes() == b.elite_sequences.tobytes()
    assert a.elite_scores.tobytes() == b.elite_scores.tobytes()
    assert a.selected_index == b.selected_index
    assert a.first_action.tobytes() == b.first_action.tobytes()


def test_plan_deterministic_under_seed(rng):
    models = tiny_models(rng)
    cfg = PlannerConfig(horizon=3, num_pi_samples=8, num_random_samples=8,
                        num_elites=4, iterations=3)
    z0 = rng.standard_normal(3).astype(np.float32)
    a = plan_mppi(models, z0, cfg, np.random.default_rng(5))
    b = plan_mppi(models, z0, cfg, np.random.default_rng(5))
    assert a.elite_scores.tobytes() == b.elite_scores.tobytes()
    assert a.first_action.tobytes() == b.first_action.tobytes()


def test_select_action_single_elite_deterministic(rng):
    cfg = PlannerConfig(num_pi_samples=1, num_elites=1)
    seqs = np.ones((1, 2, 1), dtype=np.float32) * 0.3
    idx, first = select_action(seqs, np.array([1.0]), cfg, rng)
    assert idx == 0
    np.testing.assert_array_equal(first, seqs[0, 0])


def test_select_action_dominant_score():
    cfg = PlannerConfig(num_pi_samples=4, num_elites=4, temperature=0.5)
    seqs = np.zeros((4, 1, 1), dtype=np.float32)
    scores = np.array([100.0, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    hits = sum(select_action(seqs, scores, cfg, rng)[0] == 0 for _ in range(10_000))
    assert hits > 9900


def test_select_action_uniform_when_equal():
    cfg = PlannerConfig(num_pi_samples=4, num_elites=4)
    seqs = np.zeros((4, 1, 1), dtype=np.float32)
    scores = np.zeros(4)
    rng = np.random.default_rng(0)
    counts = np.zeros(4)
    n = 100_000
    for _ in range(n):
        counts[select_action(seqs, scores, cfg, rng)[0]] += 1
    np.testing.assert_allclose(counts / n, 0.25, atol=0.02)


def test_discrete_policy_shooting_block_onehot(rng):
    mgr = ManagerModelSet(rng, 4, ManagerConfig(), hidden=16, enc_hidden=8)
    cfg = PlannerConfig(horizon=4, num_pi_samples=8, num_random_samples=0, num_elites=3)
    z0 = rng.standard_normal(10).astype(np.float32)
    result = plan_policy_shooting(mgr, z0, cfg, np.random.default_rng(0))
    assert result.elite_sequences.shape == (3, 4, 80)
    blocks = result.elite_sequences.reshape(3, 4, 8, 10)
    np.testing.assert_array_equal(blocks.sum(axis=-1), np.ones((3, 4, 8)))
    with pytest.raises(ContractError):
        plan_mppi(mgr, z0, PlannerConfig(num_random_samples=4), np.random.default_rng(0))


def test_planner_config_validation():
    with pytest.raises(ContractError):
        PlannerConfig(num_pi_samples=2, num_random_samples=0, num_elites=4).validate()
    with pytest.raises(ContractError):
        PlannerConfig(iterations=0).validate()
