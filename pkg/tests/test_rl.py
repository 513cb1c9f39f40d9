import numpy as np
import pytest

from relabel_rl.agents import PolicyParams, act_batch
from relabel_rl.embeddings import KGEmbeddings
from relabel_rl.metrics import EvalReport
from relabel_rl.rl import (
    CurriculumQueue,
    Evaluation,
    PPOConfig,
    PPODiverged,
    RewardComponents,
    RewardConfig,
    Trajectory,
    adapt_kl_coef,
    beta_kl,
    compute_rewards,
    curriculum_step,
    gae,
    ppo_objective,
    ppo_update,
)

D_IN = 16
HIDDEN = 6


def test_reward_arithmetic():
    comp = RewardComponents.compute(f1_local=0.5, g_score=0.3, alpha=2.0)
    assert comp.reward == 2.0 * 0.5 - 0.3
    assert RewardComponents.compute(0.0, 0.0, 2.0).reward == 0.0


def test_reward_grid_exact():
    rng = np.random.default_rng(0)
    for alpha in (0.2, 1.0, 2.0, 4.0):
        for _ in range(10):
            f1 = float(rng.random())
            g = float(rng.uniform(0, 3))
            assert RewardComponents.compute(f1, g, alpha).reward == alpha * f1 - g


def test_reward_affine_in_alpha():
    f1, g = 0.73, 1.21
    r1 = RewardComponents.compute(f1, g, 1.0).reward
    r2 = RewardComponents.compute(f1, g, 4.0).reward
    assert r2 - r1 == pytest.approx((4.0 - 1.0) * f1, abs=1e-15)


def _report(entity_micro=0.6, relation_f1=0.4):
    return EvalReport(strict_f1=0.5, macro_f1=0.5, micro_f1=entity_micro,
                      precision=0.4, recall=0.4, f1=relation_f1)


def _kg(n_ent=4, n_rel=3, d=6, seed=0):
    rng = np.random.default_rng(seed)
    return KGEmbeddings(entity_vectors=rng.normal(size=(n_ent, d)),
                        relation_vectors=rng.normal(size=(n_rel, d)), d_k=d)


def _evaluation(view="relation", relation=1, head=0, tail=1):
    return Evaluation(instance_id=0, view=view, agent_index=0,
                      state=np.zeros(4), confidence=0.5, log_prob=0.0,
                      value_estimate=0.0, alpha_old=5.0, beta_old=5.0,
                      head_type=head, tail_type=tail, relation=relation)


def test_compute_rewards_selects_view_f1():
    kg = _kg()
    cfg = RewardConfig(alpha=2.0)
    evs = [_evaluation("relation"), _evaluation("entity")]
    comps = compute_rewards(evs, _report(), kg, cfg, none_relation_id=2)
    assert comps[0].f1_local == 0.4
    assert comps[1].f1_local == 0.6
    assert comps[0].g_score == comps[1].g_score
    assert evs[0].reward == comps[0].reward


def test_compute_rewards_none_relation_scores_zero_g():
    comps = compute_rewards([_evaluation(relation=2)], _report(), _kg(),
                            RewardConfig(), none_relation_id=2)
    assert comps[0].g_score == 0.0


def test_compute_rewards_missing_kg_row():
    with pytest.raises(IndexError):
        compute_rewards([_evaluation(head=99)], _report(), _kg(),
                        RewardConfig(), none_relation_id=2)


def test_gae_single_step():
    adv, ret = gae([1.0], [0.4], gamma=1.0, lam=1.0)
    assert adv[0] == pytest.approx(0.6)
    assert ret[0] == pytest.approx(1.0)


def test_gae_zero():
    adv, ret = gae([0.0, 0.0], [0.0, 0.0], gamma=0.9, lam=0.95)
    assert np.all(adv == 0.0) and np.all(ret == 0.0)


def test_gae_monte_carlo_oracle():
    # At lambda = 1, gamma = 1 the advantage is the Monte-Carlo remaining-sum
    # of rewards minus the value baseline.
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = int(rng.integers(2, 12))
        rewards = rng.normal(size=T)
        values = rng.normal(size=T)
        adv, ret = gae(rewards, values, gamma=1.0, lam=1.0)
        mc = np.array([rewards[t:].sum() for t in range(T)])
        assert np.all(np.abs(adv - (mc - values)) <= 1e-12)
        assert np.all(np.abs(ret - mc) <= 1e-12)


def test_gae_general_against_direct_sum_oracle():
    # Direct evaluation of the exponentially weighted sum of TD residuals.
    rng = np.random.default_rng(2)
    gamma, lam = 0.9, 0.7
    T = 9
    rewards = rng.normal(size=T)
    values = rng.normal(size=T)
    adv, _ = gae(rewards, values, gamma=gamma, lam=lam)
    v_next = np.append(values[1:], 0.0)
    deltas = rewards + gamma * v_next - values
    for t in range(T):
        direct = sum((gamma * lam) ** k * deltas[t + k] for k in range(T - t))
        assert abs(adv[t] - direct) <= 1e-12


def _make_traj(params, n=12, seed=3, advantages=None):
    rng = np.random.default_rng(seed)
    d_t = 8
    states = np.concatenate([rng.normal(size=(n, D_IN)),
                             rng.normal(size=(n, d_t))], axis=1)
    acts = act_batch(params, states, rng=rng)
    if advantages is None:
        advantages = rng.normal(size=n)
    returns = rng.normal(size=n)
    return Trajectory(states=states, actions=acts.confidence,
                      log_prob_old=acts.log_prob, value_old=acts.value,
                      rewards=returns, advantages=np.asarray(advantages, dtype=float),
                      returns=returns, alpha_old=acts.alpha, beta_old=acts.beta)


def test_beta_kl_zero_at_identity():
    a = np.array([2.0, 5.0, 7.5])
    b = np.array([3.0, 5.0, 2.5])
    assert np.allclose(beta_kl(a, b, a, b), 0.0, atol=1e-14)
    assert np.all(beta_kl(a, b, a + 1.0, b) > 0.0)


def test_objective_at_old_policy_is_mean_advantage():
    params = PolicyParams.create(D_IN, HIDDEN, np.random.default_rng(4))
    traj = _make_traj(params)
    objective, kl = ppo_objective(params, traj, kl_coef=0.2)
    assert kl == pytest.approx(0.0, abs=1e-12)
    assert objective == pytest.approx(float(traj.advantages.mean()), abs=1e-9)


def test_zero_advantages_leave_policy_unchanged():
    params = PolicyParams.create(D_IN, HIDDEN, np.random.default_rng(5))
    traj = _make_traj(params, advantages=np.zeros(12))
    before = {name: arr.copy() for name, arr in params.arrays()}
    res = ppo_update(params, traj, PPOConfig(ppo_epochs=3, minibatch=64), lr=0.05)
    for name, arr in params.arrays():
        if name in ("w_val", "b_val"):
            continue
        assert np.array_equal(arr, before[name]), name
    assert res.kl == pytest.approx(0.0, abs=1e-12)


def test_ppo_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    params = PolicyParams.create(D_IN, HIDDEN, rng)
    old = params.clone()
    traj = _make_traj(old, n=8, seed=7)
    # Nudge the evaluated policy away from the sampling policy so the ratio
    # and KL terms are both active.
    for _, arr in params.arrays():
        arr += rng.normal(0.0, 0.01, size=arr.shape)
    coef = 0.2

    from relabel_rl.agents import policy_backward, policy_forward
    from scipy.special import digamma

    fwd = policy_forward(params, traj.states)
    mean = np.clip(fwd.mean, 1e-6, 1 - 1e-6)
    kappa = params.concentration
    alpha, beta = mean * kappa, (1 - mean) * kappa
    from relabel_rl.agents import beta_log_pdf
    ratio = np.exp(beta_log_pdf(traj.actions, alpha, beta) - traj.log_prob_old)
    dlogp_dm = kappa * (np.log(traj.actions) - np.log1p(-traj.actions)
                        - digamma(alpha) + digamma(beta))
    dkl_dm = kappa * (digamma(alpha) - digamma(beta)
                      - digamma(traj.alpha_old) + digamma(traj.beta_old))
    d_obj_dm = (ratio * traj.advantages * dlogp_dm - coef * dkl_dm) / len(traj)
    grads = policy_backward(params, fwd, d_mean=d_obj_dm)

    eps = 1e-6
    for name in ("Wz", "Uh", "w_out"):
        arr = getattr(params, name)
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        hi, _ = ppo_objective(params, traj, coef)
        arr[idx] = orig - eps
        lo, _ = ppo_objective(params, traj, coef)
        arr[idx] = orig
        numeric = (hi - lo) / (2 * eps)
        assert abs(numeric - grads[name][idx]) <= 1e-4 * max(1.0, abs(numeric)), name


def test_ppo_update_improves_objective():
    params = PolicyParams.create(D_IN, HIDDEN, np.random.default_rng(8))
    traj = _make_traj(params, n=32, seed=9)
    before, _ = ppo_objective(params, traj, kl_coef=0.2)
    ppo_update(params, traj, PPOConfig(ppo_epochs=4, minibatch=16), lr=0.01, kl_coef=0.2)
    after, _ = ppo_objective(params, traj, kl_coef=0.2)
    assert after >= before


def test_ppo_value_head_regresses_to_returns():
    params = PolicyParams.create(D_IN, HIDDEN, np.random.default_rng(10))
    traj = _make_traj(params, n=32, seed=11)
    from relabel_rl.agents import policy_forward
    before = float(np.mean((policy_forward(params, traj.states).value - traj.returns) ** 2))
    res = ppo_update(params, traj, PPOConfig(ppo_epochs=8, minibatch=16), lr=0.02)
    assert res.value_loss < before


def test_ppo_diverged_ratio_raises():
    params = PolicyParams.create(D_IN, HIDDEN, np.random.default_rng(12))
    traj = _make_traj(params, n=4, seed=13)
    traj.log_prob_old[...] = -1e6  # forces exp overflow in the ratio
    with pytest.raises(PPODiverged):
        ppo_update(params, traj, PPOConfig(), lr=0.01)


def test_adapt_kl_coef_rules():
    cfg = PPOConfig(kl_target=0.01, coef_adapt_factor=2.0)
    assert adapt_kl_coef(0.2, measured_kl=0.05, cfg=cfg) == 0.4
    assert adapt_kl_coef(0.2, measured_kl=0.001, cfg=cfg) == 0.1
    assert adapt_kl_coef(0.2, measured_kl=0.01, cfg=cfg) == 0.2


def test_adapt_kl_scripted_sequence():
    cfg = PPOConfig(kl_target=0.01, coef_adapt_factor=2.0)
    coef = cfg.kl_init_coef
    seen = [coef]
    for kl in (0.05, 0.05, 0.002, 0.012, 0.0001, 0.2):
        coef = adapt_kl_coef(coef, kl, cfg)
        seen.append(coef)
    assert seen == [0.2, 0.4, 0.8, 0.4, 0.4, 0.2, 0.4]


def test_adapt_kl_bounded_per_update():
    cfg = PPOConfig(kl_target=0.01, coef_adapt_factor=2.0)
    rng = np.random.default_rng(14)
    coef = 0.2
    for _ in range(50):
        new = adapt_kl_coef(coef, float(rng.uniform(0, 0.1)), cfg)
        ratio = new / coef
        assert ratio in (0.5, 1.0, 2.0)
        coef = new


def test_curriculum_immediate_training_above_threshold():
    q = CurriculumQueue(capacity=3, threshold=0.0)
    trained = []
    actions = curriculum_step(q, "a", priority=0.7, train_callback=trained.append)
    assert actions == ["train_current"]
    assert trained == ["a"] and len(q) == 0


def test_curriculum_enqueue_below_threshold():
    q = CurriculumQueue(capacity=3, threshold=0.0)
    trained = []
    actions = curriculum_step(q, "a", priority=-0.5, train_callback=trained.append)
    assert actions == ["enqueued"]
    assert trained == [] and len(q) == 1


def test_curriculum_full_queue_trains_and_pops():
    q = CurriculumQueue(capacity=3, threshold=0.0)
    trained = []
    for name, pri in (("a", -1.0), ("b", -0.2), ("c", -0.6)):
        curriculum_step(q, name, pri, trained.append)
    assert len(q) == 3 and trained == []
    actions = curriculum_step(q, "d", priority=-2.0, train_callback=trained.append)
    assert actions == ["train_current", "train_popped"]
    assert trained == ["d", "b"]  # b held the highest stored priority
    assert len(q) == 2


def test_curriculum_pop_order_matches_sorted_oracle():
    rng = np.random.default_rng(15)
    priorities = rng.normal(size=20).tolist()
    q = CurriculumQueue(capacity=20, threshold=float("inf"))
    for i, p in enumerate(priorities):
        q.insert(i, p)
    popped = [q.pop_max()[1] for _ in range(20)]
    assert popped == sorted(priorities, reverse=True)


def test_curriculum_pops_non_increasing_among_coresident():
    # Every pop must return the maximum of the currently stored priorities;
    # a plain list tracking the live multiset is the oracle.
    rng = np.random.default_rng(16)
    q = CurriculumQueue(capacity=50, threshold=float("inf"))
    live = []
    for step in range(200):
        if len(q) and (q.is_full or rng.random() < 0.4):
            _, p = q.pop_max()
            assert p == max(live)
            live.remove(p)
        else:
            pri = float(rng.normal())
            q.insert(step, pri)
            live.append(pri)


def test_trajectory_from_evaluations_matches_gae():
    evs = []
    rng = np.random.default_rng(17)
    for i in range(10):
        ev = _evaluation()
        ev.state = rng.normal(size=6)
        ev.reward = float(rng.normal())
        ev.value_estimate = float(rng.normal())
        evs.append(ev)
    traj = Trajectory.from_evaluations(evs, RewardConfig(gamma=1.0, gae_lambda=1.0))
    for i, ev in enumerate(evs):
        adv, ret = gae([ev.reward], [ev.value_estimate], 1.0, 1.0)
        assert traj.advantages[i] == pytest.approx(adv[0], abs=1e-15)
        assert traj.returns[i] == pytest.approx(ret[0], abs=1e-15)
