import numpy as np
import pytest

from wpolab._validation import ContractViolation
from wpolab.agent import (
    METRIC_COLUMNS, GaussianActor, MixtureBanditOptimizer, NStepAssembler, ReplayBuffer, TrainingAborted,
    TrajectorySegment, WPOAgent, evaluate, eval_seeds, read_metrics_csv, run_mog_experiment, write_metrics_csv,
)
from wpolab.config import agent_kwargs, preset
from wpolab.envs import BanditEnv, Env, EnvSpec, LQREnv, Transition
from wpolab.nn import load_checkpoint
from conftest import central_diff, rel_err


def bandit_agent(**kw):
    return WPOAgent(**agent_kwargs(preset("bandit", **kw)))


def chain(n, start=0.0):
    out = []
    for i in range(n):
        out.append(Transition(np.array([start + i]), np.zeros(1), float(i), np.array([start + i + 1])))
    return out


def test_segments_must_chain():
    TrajectorySegment(tuple(chain(3)))
    bad = chain(2) + chain(1, start=10.0)
    with pytest.raises(ContractViolation):
        TrajectorySegment(tuple(bad))
    with pytest.raises(ContractViolation):
        TrajectorySegment(())


def test_assembler_emits_one_segment_per_transition():
    asm = NStepAssembler(3)
    trs = chain(5)
    trs[-1] = Transition(trs[-1].state, trs[-1].action, trs[-1].reward, trs[-1].next_state, terminal=True)
    segs = [s for tr in trs for s in asm.push(tr)]
    assert [len(s) for s in segs] == [3, 3, 3, 2, 1]
    assert [float(s.state[0]) for s in segs] == [0, 1, 2, 3, 4]
    assert segs[-1].terminal and not segs[0].terminal
    np.testing.assert_array_equal(segs[1].rewards, [1.0, 2.0, 3.0])


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(4, 1, 1, 1)
    for tr in chain(7):
        buf.insert(TrajectorySegment((tr,)))
    assert len(buf) == 4 and buf.inserts == 7
    assert sorted(buf.ids.tolist()) == [3, 4, 5, 6]
    assert sorted(buf.states[:, 0].tolist()) == [3.0, 4.0, 5.0, 6.0]
    batch = buf.sample(np.random.default_rng(0), 1000)
    assert set(batch["ids"].tolist()) == {3, 4, 5, 6}
    assert buf.samples == 1000
    with pytest.raises(ContractViolation):
        buf.insert(TrajectorySegment(tuple(chain(2))))
    with pytest.raises(ContractViolation):
        ReplayBuffer(4, 1, 1, 1).sample(np.random.default_rng(0), 1)


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(10, 1, 1, 1)
    for tr in chain(10):
        buf.insert(TrajectorySegment((tr,)))
    counts = np.bincount(buf.sample(np.random.default_rng(1), 100_000)["ids"], minlength=10)
    assert np.all(np.abs(counts / 10_000 - 1) < 0.05)


class ConstantRewardEnv(Env):
    def __init__(self, horizon):
        super().__init__(0)
        self.spec = EnvSpec(1, 1, -1.0, 1.0, horizon=horizon)

    def _initial_state(self, rng):
        return np.zeros(1)

    def _dynamics(self, state, action):
        return state.copy(), 1.0, False


def test_evaluate_examples():
    policy = lambda s, rng, det: np.zeros(1)  # noqa: E731
    assert evaluate(ConstantRewardEnv(0), policy, 2)["mean"] == 0.0
    res = evaluate(ConstantRewardEnv(7), policy, 3)
    assert res["mean"] == res["min"] == res["max"] == 7.0
    with pytest.raises(ContractViolation):
        evaluate(ConstantRewardEnv(1), policy, 0)


def test_evaluate_leaves_agent_untouched():
    agent = bandit_agent(total_steps=50).fit(BanditEnv(seed=0))
    before = agent.actor_.net.params.tobytes()
    inserts = agent.buffer_.inserts
    evaluate(BanditEnv(), agent.policy, 5, seeds=eval_seeds(0, 5))
    assert agent.actor_.net.params.tobytes() == before
    assert agent.buffer_.inserts == inserts


def test_eval_seeds_fixed_and_distinct():
    assert eval_seeds(3, 5) == eval_seeds(3, 5)
    assert eval_seeds(3, 5) != eval_seeds(4, 5)
    assert len(set(eval_seeds(0, 10))) == 10


def test_actor_initialisation_and_bounds():
    rng = np.random.default_rng(0)
    actor = GaussianActor.build(3, 2, (16,), "elu", rng, init_mean=0.5, init_stddev=0.3,
                                bounds=(np.full(2, -2.0), np.full(2, 2.0)))
    mean, std, _ = actor.heads(rng.normal(size=(50, 3)))
    np.testing.assert_allclose(mean, 0.5, atol=0.1)
    np.testing.assert_allclose(std, 0.3, atol=0.02)
    mean, _, _ = actor.heads(rng.normal(size=(50, 3)) * 1e3)
    assert np.all(np.abs(mean) <= 2.0)
    with pytest.raises(ContractViolation):
        GaussianActor.build(1, 1, (), "elu", rng, init_mean=3.0, bounds=(np.array([-2.0]), np.array([2.0])))


@pytest.mark.parametrize("bounded", [False, True])
def test_actor_head_vjp_matches_finite_differences(bounded):
    rng = np.random.default_rng(1)
    bounds = (np.full(2, -1.5), np.full(2, 2.0)) if bounded else None
    actor = GaussianActor.build(3, 2, (8,), "silu", rng, bounds=bounds)
    actor.net.set_params(rng.normal(size=actor.net.n_params) * 0.5)
    s = rng.normal(size=(4, 3))
    mc, sc = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))

    def objective(theta):
        twin = actor.copy()
        twin.net.set_params(theta)
        m, sd, _ = twin.heads(s)
        return float(np.sum(mc * m + sc * sd))

    _, _, z = actor.heads(s)
    grad = actor.head_vjp(s, z, mc, sc)
    assert rel_err(grad, central_diff(objective, actor.net.params)) < 1e-5


def test_zero_learning_rates_freeze_parameters():
    agent = WPOAgent(**agent_kwargs(preset("lqr", total_steps=400, warmup_steps=100, actor_lr=0.0, critic_lr=0.0,
                                           eval_interval=2, eval_episodes=1, actor_hidden=(8,),
                                           critic_hidden=(8,))))
    env = LQREnv(seed=0)
    agent._validate()
    agent._setup(env)
    actor0, critic0 = agent.actor_.net.params.copy(), agent.critic_.online.params.copy()
    agent.fit(env)
    assert agent.updates_ > 0
    assert agent.actor_.net.params.tobytes() == actor0.tobytes()
    assert agent.critic_.online.params.tobytes() == critic0.tobytes()
    assert len(agent.metrics_) >= 2


def test_bandit_mean_converges_and_stddev_shrinks():
    agent = bandit_agent().fit(BanditEnv("neg_quadratic", seed=0))
    h = agent.history_
    assert abs(h["mean_mean"][-1]) < 0.05
    sig = np.array(h["sigma_mean"])
    assert sig[-1] < sig[0]
    # decreasing in expectation: block averages fall
    blocks = sig[: len(sig) // 10 * 10].reshape(10, -1).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_cube_root_squash_bounds_logged_norm():
    agent = bandit_agent(squash="cube_root", total_steps=200, init_mean=6.0).fit(BanditEnv(seed=0))
    raw, sq = np.array(agent.history_["q_grad_norm_raw"]), np.array(agent.history_["q_grad_norm"])
    assert np.all(sq <= np.maximum(1.0, raw) + 1e-12)
    assert np.any(raw > 1.0)


@pytest.mark.parametrize("algorithm", ["classic_pg", "dpg", "svg0"])
def test_reference_algorithms_run_on_bandit(algorithm):
    agent = bandit_agent(algorithm=algorithm, total_steps=300).fit(BanditEnv(seed=1))
    assert abs(agent.history_["mean_mean"][-1]) < abs(agent.history_["mean_mean"][0])


def test_target_actor_syncs_on_period():
    agent = bandit_agent(total_steps=60, target_period=7)
    agent.fit(BanditEnv(seed=0))
    assert agent.updates_ % 7 != 0 or agent.target_actor_.net.params.tobytes() == agent.actor_.net.params.tobytes()
    snapshot = agent.target_actor_.net.params.copy()
    rng = np.random.default_rng(0)
    while agent.updates_ % 7 != 6:
        agent.update(rng)
        assert agent.target_actor_.net.params.tobytes() == snapshot.tobytes()
    agent.update(rng)
    assert agent.target_actor_.net.params.tobytes() == agent.actor_.net.params.tobytes()


def test_non_finite_critic_gradient_aborts():
    class NanBandit(BanditEnv):
        def true_q_grad(self, state, action):
            return np.full(np.shape(action), np.nan)

    with pytest.raises(TrainingAborted) as info:
        bandit_agent(total_steps=20).fit(NanBandit(seed=0))
    assert info.value.report is not None


def test_same_seed_same_metrics(tmp_path):
    paths = []
    for i in range(2):
        cfg = preset("lqr", total_steps=600, warmup_steps=100, eval_interval=3, eval_episodes=2,
                     actor_hidden=(8,), critic_hidden=(8,))
        agent = WPOAgent(**agent_kwargs(cfg, seed=5)).fit(LQREnv(seed=5), LQREnv(seed=5))
        paths.append(tmp_path / f"m{i}.csv")
        write_metrics_csv(paths[-1], agent.metrics_)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rows = read_metrics_csv(paths[0])
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[-1]["step"] >= 600


def test_checkpoint_contains_all_networks(tmp_path):
    cfg = preset("lqr", total_steps=200, warmup_steps=100, eval_interval=5, eval_episodes=1,
                 actor_hidden=(8,), critic_hidden=(8,))
    agent = WPOAgent(**agent_kwargs(cfg)).fit(LQREnv(seed=0))
    agent.save(tmp_path / "ck.txt", extra={"seed": 0})
    nets, extra = load_checkpoint(tmp_path / "ck.txt")
    assert set(nets) == {"actor", "target_actor", "critic", "target_critic"}
    assert nets["actor"].params.tobytes() == agent.actor_.net.params.tobytes()


def test_invalid_hyperparameters():
    with pytest.raises(ContractViolation):
        WPOAgent(algorithm="ppo").fit(BanditEnv())
    with pytest.raises(ContractViolation):
        WPOAgent(gamma=0.0).fit(BanditEnv())
    with pytest.raises(ContractViolation):
        WPOAgent(exact_critic=True).fit(LQREnv())


def test_policy_gradient_matches_occupancy_weighted_q():
    # Two-state MDP with Gaussian policies and a smooth action-dependent transition.  The exact
    # gradient of the discounted return equals sum_s d(s) E_pi[grad log pi(a|s) Q(s, a)], i.e. the
    # functional derivative is Q weighted by the discounted occupancy.
    gamma = 0.8
    targets = (1.0, -1.0)
    x, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / w.sum()

    def reward(s, a):
        return -(a - targets[s]) ** 2

    def to_one(a):
        return 1.0 / (1.0 + np.exp(-2.0 * a))

    def actions(theta, s):
        mu, sd = theta[2 * s], np.exp(theta[2 * s + 1])
        return mu, sd, mu + sd * x

    def solve(theta):
        p = np.zeros((2, 2))
        r = np.zeros(2)
        for s in range(2):
            _, _, a = actions(theta, s)
            p[s, 1] = np.sum(w * to_one(a))
            p[s, 0] = 1.0 - p[s, 1]
            r[s] = np.sum(w * reward(s, a))
        return np.linalg.solve(np.eye(2) - gamma * p, r), p

    theta = np.array([0.3, -0.2, -0.4, 0.1])
    v, p = solve(theta)
    fd = central_diff(lambda th: solve(th)[0][0], theta)
    occupancy = np.linalg.solve(np.eye(2) - gamma * p.T, np.array([1.0, 0.0]))
    grad = np.zeros(4)
    for s in range(2):
        mu, sd, a = actions(theta, s)
        q = reward(s, a) + gamma * (v[0] + (v[1] - v[0]) * to_one(a))
        grad[2 * s] = occupancy[s] * np.sum(w * (a - mu) / sd**2 * q)
        grad[2 * s + 1] = occupancy[s] * np.sum(w * (((a - mu) / sd) ** 2 - 1.0) * q)
    assert rel_err(grad, fd) < 1e-6


def test_mixture_runs_for_both_algorithms():
    for algorithm in ("wpo", "classic_pg"):
        res = run_mog_experiment(algorithm, steps=300, batch_size=256, seed=0)
        assert np.all(np.isfinite(res.means_)) and np.all(np.isfinite(res.stddevs_))
        assert res.means_.shape == (31, 2)
    with pytest.raises(ContractViolation):
        MixtureBanditOptimizer(algorithm="dpg").fit()


def test_mixture_stddev_rises_from_moderate_initial_spread():
    # started at sigma = sqrt(10) the components sit where Q is convex and widen first
    res = run_mog_experiment("wpo", steps=2000, stddevs=(np.sqrt(10.0), np.sqrt(10.0)), seed=0)
    quarter = res.stddevs_[: len(res.stddevs_) // 4]
    assert quarter.max() > np.sqrt(10.0)
