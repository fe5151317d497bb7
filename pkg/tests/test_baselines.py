import math

import numpy as np
import pytest

from budgetrl.allocator import AllocationProblem, solve_and_assign
from budgetrl.baselines import (
    CheapestPolicy,
    ExpertPolicy,
    RewardModel,
    RewardModelPolicy,
    UniformRandomPolicy,
    greedy_policy,
    reward_model_q_matrix,
    train_reward_model,
)
from budgetrl.core import (
    ActionSet,
    HyperParams,
    StateVector,
    Trajectory,
    Transition,
    day_mask_indices,
)
from budgetrl.envsim import (
    BehaviorPolicyConfig,
    CheckinEnv,
    EnvConfig,
    SegmentParams,
    default_behavior_table,
    generate_dataset,
    oracle_value_iteration,
)
from budgetrl.nets import Mlp

ACTIONS = ActionSet(normal_cents=(65, 87, 105), super_cents=(172,))
FAST = HyperParams(training_steps=800, hidden_sizes=(32, 32), learning_rate=0.01,
                   optimizer="adam", seed=3)


def state(d=2, day=1, bonuses=0, fill=0.5):
    return StateVector(tuple([fill] * d), day_in_cycle=day, bonuses_collected=bonuses)


def constant_model(prob_by_action, actions=ACTIONS, d=2):
    """Reward model emitting a fixed retention probability per action."""
    from budgetrl.bcq import input_size
    n_in = input_size(d) + actions.size
    net = Mlp([n_in, 2])
    # logit of class 1 equals w . onehot(action); chosen to hit the target probs
    for j, p in enumerate(prob_by_action):
        net.weights[0][1, n_in - actions.size + j] = math.log(p / (1 - p))
    return RewardModel(net=net, actions=actions)


class TestTrainRewardModel:
    def test_constant_reward_one(self):
        rng = np.random.default_rng(0)
        trajs = []
        for uid in range(60):
            s = state(fill=float(rng.random()))
            a = int(rng.integers(0, 3))
            trajs.append(Trajectory((Transition(uid, 1, s, a, 1, ACTIONS.cost_cents(a), None, True),)))
        model = train_reward_model(trajs, ACTIONS, FAST)
        for traj in trajs[:20]:
            tr = traj.transitions[0]
            assert model.predict(tr.state, tr.action_index) >= 0.95

    def test_holdout_logloss_near_bayes(self):
        # noise-free features make the true probability recoverable per record
        segs = (SegmentParams(0.6, 0.6, 0.2), SegmentParams(-0.6, 1.8, 0.2))
        cfg = EnvConfig(segments=segs, feature_noise=0.0)
        env = CheckinEnv(cfg, ACTIONS)
        behavior = BehaviorPolicyConfig(table=default_behavior_table(2, ACTIONS), noise=0.5)
        train = generate_dataset(env, behavior, 2500, seed=1)
        held_out = generate_dataset(env, behavior, 600, seed=2)
        model = train_reward_model(train, ACTIONS, FAST.replace(training_steps=2500, seed=4))

        model_ll, bayes_ll, n = 0.0, 0.0, 0
        for traj in held_out:
            last = -1
            for tr in traj.transitions:
                seg = int(np.argmax(tr.state.to_array()[:2]))
                p_true = env.retention_probability(seg, tr.action_index,
                                                   tr.state.bonuses_collected, last)
                p_hat = np.clip(model.predict(tr.state, tr.action_index), 1e-12, 1 - 1e-12)
                model_ll -= tr.reward * math.log(p_hat) + (1 - tr.reward) * math.log(1 - p_hat)
                bayes_ll -= tr.reward * math.log(p_true) + (1 - tr.reward) * math.log(1 - p_true)
                last = tr.action_index
                n += 1
        assert model_ll / n <= 1.10 * (bayes_ll / n)

    def test_separable_feature_auc(self):
        # feature value alone decides the reward
        rng = np.random.default_rng(5)
        trajs = []
        for uid in range(400):
            r = int(rng.random() < 0.5)
            s = state(fill=float(r))
            a = int(rng.integers(0, 3))
            trajs.append(Trajectory((Transition(uid, 1, s, a, r, ACTIONS.cost_cents(a), None, True),)))
        model = train_reward_model(trajs, ACTIONS, FAST.replace(training_steps=1200))
        scores, labels = [], []
        for traj in trajs:
            tr = traj.transitions[0]
            scores.append(model.predict(tr.state, tr.action_index))
            labels.append(tr.reward)
        scores, labels = np.asarray(scores), np.asarray(labels)
        pos, neg = scores[labels == 1], scores[labels == 0]
        auc = np.mean(pos[:, None] > neg[None, :]) + 0.5 * np.mean(pos[:, None] == neg[None, :])
        assert auc >= 0.99

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_reward_model([], ACTIONS, FAST)


class TestGreedyPolicy:
    def test_picks_best_prediction(self):
        model = constant_model([0.2, 0.9, 0.5, 0.5])
        assert greedy_policy(model, state()) == 1

    def test_all_equal_breaks_to_cheapest(self):
        model = constant_model([0.4, 0.4, 0.4, 0.4])
        assert greedy_policy(model, state()) == 0

    def test_final_claim_uses_super_set(self):
        model = constant_model([0.9, 0.9, 0.9, 0.2])
        assert greedy_policy(model, state(bonuses=3, day=4)) == 3

    def test_within_mask_always(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            model = constant_model(rng.uniform(0.1, 0.9, size=4))
            bonuses = int(rng.integers(0, 4))
            a = greedy_policy(model, state(bonuses=bonuses, day=bonuses + 1))
            assert a in day_mask_indices(ACTIONS, bonuses)


class TestQMatrix:
    def test_single_state_single_action(self):
        actions = ActionSet(normal_cents=(87,), super_cents=(172,))
        model = constant_model([0.37, 0.5], actions=actions)
        mat = reward_model_q_matrix(model, [state()])
        assert mat.shape == (1, 2)
        assert mat[0, 0] == pytest.approx(0.37, abs=1e-9)
        assert np.isnan(mat[0, 1])

    def test_rows_match_forward_passes(self):
        rng = np.random.default_rng(7)
        from budgetrl.bcq import input_size
        net = Mlp([input_size(2) + 4, 8, 2], rng=rng)
        model = RewardModel(net=net, actions=ACTIONS)
        states = []
        for _ in range(10):
            bonuses = int(rng.integers(0, 4))
            states.append(state(fill=float(rng.random()), bonuses=bonuses, day=bonuses + 1))
        mat = reward_model_q_matrix(model, states)
        for i, s in enumerate(states):
            np.testing.assert_array_equal(mat[i], model.predict_row(s))

    def test_min_budget_forces_cheapest(self):
        model = constant_model([0.3, 0.6, 0.9, 0.5])
        states = [state(fill=0.1 * i) for i in range(8)]  # all claim-1
        mat = reward_model_q_matrix(model, states)
        problem = AllocationProblem(mat, ACTIONS.all_cents, budget_cents=65)
        result = solve_and_assign(problem)
        assert all(a == 0 for a in result.chosen)


class TestReferencePolicies:
    def test_expert_respects_mask_and_table(self):
        table = default_behavior_table(2, ACTIONS)
        policy = ExpertPolicy(table=table, n_segments=2, actions=ACTIONS)
        s = StateVector((0.1, 0.9), day_in_cycle=2, bonuses_collected=1)
        assert policy.action(s) == table[1][1]

    def test_expert_rejects_mask_violations(self):
        with pytest.raises(ValueError):
            ExpertPolicy(table=((3, 0, 0, 3),), n_segments=1, actions=ACTIONS)

    def test_cheapest_policy(self):
        policy = CheapestPolicy(ACTIONS)
        assert policy.action(state()) == 0
        assert policy.action(state(bonuses=3, day=4)) == 3

    def test_random_policy_masked_and_seeded(self):
        p1 = UniformRandomPolicy(ACTIONS, seed=9)
        p2 = UniformRandomPolicy(ACTIONS, seed=9)
        picks1 = [p1.action(state(bonuses=i % 4, day=i % 4 + 1)) for i in range(40)]
        picks2 = [p2.action(state(bonuses=i % 4, day=i % 4 + 1)) for i in range(40)]
        assert picks1 == picks2
        for i, a in enumerate(picks1):
            assert a in day_mask_indices(ACTIONS, i % 4)


class TestMyopiaWitness:
    def test_greedy_disagrees_with_long_horizon_oracle(self):
        # flat immediate retention, strong carryover: today's generosity only
        # pays off tomorrow, which a one-step reward model cannot see
        segs = (SegmentParams(base_logit=0.0, bonus_sensitivity=0.0,
                              streak_bonus=0.0, carryover=3.0),)
        cfg = EnvConfig(segments=segs, feature_noise=0.0, bonuses_per_cycle=2)
        actions = ActionSet(normal_cents=(65, 105), super_cents=(172,))
        env = CheckinEnv(cfg, actions)

        oracle = oracle_value_iteration(env, gamma=1.0)
        assert oracle.policy[(0, 0, -1)] == 1  # generous first bonus wins long-run

        behavior = BehaviorPolicyConfig(table=((0, 2),), noise=1.0)  # uniform logging
        dataset = generate_dataset(env, behavior, 1500, seed=11)
        model = train_reward_model(dataset, actions, FAST.replace(training_steps=1500, seed=11))
        first_claim_states = [t.transitions[0].state for t in dataset[:50]]
        greedy_picks = {greedy_policy(model, s) for s in first_claim_states}
        assert oracle.policy[(0, 0, -1)] not in greedy_picks

    def test_wrapper_exposes_rows(self):
        model = constant_model([0.3, 0.6, 0.9, 0.5])
        policy = RewardModelPolicy(model)
        s = state()
        assert policy.action(s) == greedy_policy(model, s)
        np.testing.assert_array_equal(policy.q_row(s), model.predict_row(s))
