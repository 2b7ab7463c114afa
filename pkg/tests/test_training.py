"""Returns, advantages, policy/value updates, stage-1 loop, bundles."""

import logging

import numpy as np
import pytest
from conftest import fd_grad, rel_err

from commdefense import nn
from commdefense.agents import AgentConfig, CommPolicy
from commdefense.attacks import AttackSpec
from commdefense.envs import EnvConfig, make_env
from commdefense.errors import ConfigError, TrainingError
from commdefense.training import (
    Bundle,
    TrainConfig,
    ValueNet,
    advantage,
    assemble_batch,
    attach_returns,
    bundle_metadata,
    build_policy_for_env,
    discounted_returns,
    fill_values,
    load_bundle,
    policy_loss,
    policy_update,
    rollout,
    save_bundle,
    train_stage1,
    value_loss,
    value_update,
)


def pp_env(n=3, grid=5, t_max=20):
    return make_env(EnvConfig(task="predator_prey", n_agents=n, grid_size=grid, t_max=t_max))


def small_cfg(**kw):
    defaults = dict(epochs=2, steps_per_epoch=30, gamma=0.9, lr=1e-3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def small_agent(**kw):
    defaults = dict(hidden_size=8, msg_len=4)
    defaults.update(kw)
    return AgentConfig(**defaults)


class BanditEnv:
    """One agent, one step, two arms; arm 1 pays more. Test double."""

    task_name = "bandit"
    n_agents = 1
    msg_len = None
    obs_width = 1
    n_actions = 2
    t_max = 1

    def __init__(self):
        self.finished = np.zeros(1, dtype=bool)

    def reset(self, seed=None):
        self.finished = np.zeros(1, dtype=bool)
        return np.zeros((1, 1))

    def step(self, actions):
        from commdefense.envs import StepResult
        reward = 1.0 if actions[0] == 1 else 0.2
        self.finished[:] = True
        return StepResult(rewards=np.array([reward]), obs=np.zeros((1, 1)),
                          done=True, finished=self.finished.copy())


class TestReturns:
    def test_geometric_example(self):
        q = discounted_returns(np.array([1.0, 1.0, 1.0]), 0.5)
        assert np.allclose(q, [1.75, 1.5, 1.0], rtol=1e-15)

    def test_undiscounted(self):
        q = discounted_returns(np.ones(4), 1.0)
        assert np.array_equal(q, [4.0, 3.0, 2.0, 1.0])

    def test_gamma_zero_is_rewards(self):
        r = np.random.default_rng(0).normal(size=7)
        assert np.array_equal(discounted_returns(r, 0.0), r)

    def test_matches_brute_force_on_random_episodes(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            t = rng.integers(1, 30)
            gamma = rng.uniform(0.05, 1.0)
            rewards = rng.normal(size=t)
            fast = discounted_returns(rewards, gamma)
            brute = np.array([
                sum(gamma ** (k - j) * rewards[k] for k in range(j, t))
                for j in range(t)
            ])
            assert np.max(np.abs(fast - brute)) <= 1e-12

    def test_two_dimensional_rewards(self):
        r = np.random.default_rng(2).normal(size=(5, 3))
        q = discounted_returns(r, 0.7)
        for agent in range(3):
            assert np.allclose(q[:, agent], discounted_returns(r[:, agent], 0.7))

    def test_incomplete_episode_rejected(self):
        env = pp_env()
        records, _ = rollout(env, build_policy_for_env(env, small_agent(),
                                                       np.random.default_rng(0)),
                             None, 10, seed=0)
        records[-1].done = False
        with pytest.raises(TrainingError):
            attach_returns(records, 0.9)


class TestAdvantage:
    def setup_method(self):
        self.env = pp_env()
        self.core = build_policy_for_env(self.env, small_agent(), np.random.default_rng(3))
        self.records, _ = rollout(self.env, self.core, None, 10, seed=1)

    def test_zero_value_net_gives_q(self):
        vnet = ValueNet(8, self.env.obs_width, 8, rng=None)
        assert advantage(self.records[0], 0, 2.5, vnet) == pytest.approx(2.5)

    def test_perfect_value_gives_zero(self):
        vnet = ValueNet(8, self.env.obs_width, 8, rng=np.random.default_rng(4))
        rec = self.records[0]
        q = float(vnet.value(rec.h_post[1], rec.obs[1]).data[0])
        assert advantage(rec, 1, q, vnet) == pytest.approx(0.0, abs=1e-12)

    def test_fitted_value_centers_advantages(self):
        vnet = ValueNet(8, self.env.obs_width, 8, rng=np.random.default_rng(5))
        q = attach_returns(self.records, 0.9)
        cfg = small_cfg(lr=3e-2)
        for _ in range(300):
            value_update(vnet, self.records, q, cfg)
        values = fill_values(self.records, vnet)
        active = np.concatenate([r.active for r in self.records])
        adv = (q - values).reshape(-1)[active]
        assert abs(adv.mean()) < 0.05


class TestRollout:
    def test_episode_lengths_bounded(self):
        env = pp_env(t_max=15)
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(6))
        records, lengths = rollout(env, core, None, 50, seed=2)
        assert all(1 <= n <= 15 for n in lengths)
        assert len(records) >= 50
        assert records[-1].done  # last episode finished

    def test_none_equals_p_zero_bit_exact(self):
        env1, env2 = pp_env(), pp_env()
        core = build_policy_for_env(env1, small_agent(), np.random.default_rng(7))
        rec_a, _ = rollout(env1, core, None, 40, seed=3)
        rec_b, _ = rollout(env2, core, AttackSpec(kind="fgsm", p=0.0), 40, seed=3)
        for a, b in zip(rec_a, rec_b):
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.obs, b.obs)
            assert np.array_equal(a.directed, b.directed)
            assert np.array_equal(a.rewards, b.rewards)

    def test_fixed_seed_identical_log(self):
        env1, env2 = pp_env(), pp_env()
        core = build_policy_for_env(env1, small_agent(), np.random.default_rng(8))
        rec_a, len_a = rollout(env1, core, None, 35, seed=4)
        rec_b, len_b = rollout(env2, core, None, 35, seed=4)
        assert len_a == len_b
        for a, b in zip(rec_a, rec_b):
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.h_post, b.h_post)

    def test_attacked_rollout_flags_perturbations(self):
        env = pp_env()
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(9))
        records, _ = rollout(env, core, AttackSpec(kind="random", p=0.8), 30, seed=5)
        flagged = sum(r.perturbed.sum() for r in records)
        assert flagged > 0


class TestPolicyUpdate:
    def make_batch(self, seed=0, env=None, weights=None):
        env = env or pp_env()
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(seed))
        records, _ = rollout(env, core, None, 8, seed=seed)
        q = attach_returns(records, 0.9)
        vnet = ValueNet(8, env.obs_width, 8, rng=np.random.default_rng(seed + 1))
        values = fill_values(records, vnet)
        batch = assemble_batch(records, q, values, learned_messages=env.msg_len is None)
        if weights is not None:
            batch.weights = weights(batch)
        return core, batch

    def test_zero_advantages_leave_parameters_unchanged(self):
        core, batch = self.make_batch(10)
        batch.weights = np.zeros_like(batch.weights)
        before = {k: v.copy() for k, v in core.store.arrays().items()}
        policy_update(core, batch, small_cfg())
        for k, v in core.store.arrays().items():
            assert np.array_equal(v, before[k])

    def test_policy_gradient_matches_finite_differences(self):
        core, batch = self.make_batch(11)

        def f():
            return policy_loss(core, batch)

        # step 1e-4: composite losses drown a 1e-5 step in float64 roundoff
        err = nn.grad_check(f, [core.store[k] for k in
                                ("enc.out.W", "msg.h1.W", "gru.Wz", "base.out.b")],
                            step=1e-4)
        assert err <= 1e-5

    def test_sender_encoder_reaches_receiver_log_prob(self):
        # log pi of one receiver must move when a sender encoder weight moves
        core, batch = self.make_batch(12)
        row = 1  # agent 1's transition at step 0; senders are agents 0 and 2
        onehot = np.zeros_like(batch.weights)
        onehot[row] = -1.0  # -loss = log pi of that row
        batch.weights = onehot

        def log_pi():
            return -policy_loss(core, batch).item()

        p = core.store["enc.out.W"]
        numeric = fd_grad(log_pi, p.data)
        assert np.any(np.abs(numeric) > 1e-8)

        core.store.zero_grad()
        with nn.Tape() as tape:
            loss = policy_loss(core, batch)
        nn.backward(tape, loss)
        assert rel_err(-p.grad, numeric) <= 1e-5

    def test_perturbed_messages_are_constants(self):
        env = pp_env()
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(13))
        records, _ = rollout(env, core, AttackSpec(kind="random", p=1.0), 6, seed=6)
        q = attach_returns(records, 0.9)
        vnet = ValueNet(8, env.obs_width, 8, rng=np.random.default_rng(14))
        batch = assemble_batch(records, q, fill_values(records, vnet), True)
        # with every message replaced, encoder parameters get no gradient
        core.store.zero_grad()
        with nn.Tape() as tape:
            loss = policy_loss(core, batch)
        nn.backward(tape, loss)
        assert np.all(core.store["enc.out.W"].grad == 0.0)
        assert np.any(core.store["base.out.W"].grad != 0.0)

    def test_literal_weighting_scales_by_action_probability(self):
        core, batch = self.make_batch(15)
        plain = policy_loss(core, batch, literal_pg_weight=False).item()
        literal = policy_loss(core, batch, literal_pg_weight=True).item()
        assert not np.isclose(plain, literal)

    def test_bandit_learns_better_arm(self):
        env = BanditEnv()
        core = CommPolicy(1, 2, 4, hidden_size=8, rng=np.random.default_rng(16))
        vnet = ValueNet(8, 1, 8, rng=np.random.default_rng(17))
        cfg = TrainConfig(epochs=1, steps_per_epoch=8, gamma=1.0, lr=5e-2, seed=0)
        for step in range(200):
            records, _ = rollout(env, core, None, cfg.steps_per_epoch, seed=step)
            q = attach_returns(records, cfg.gamma)
            values = fill_values(records, vnet)
            batch = assemble_batch(records, q, values, learned_messages=True)
            policy_update(core, batch, cfg)
            value_update(vnet, records, q, cfg)
        h = core.update_hidden(np.zeros((1, 8)), np.zeros((1, 1)))
        prefs = core.base_preference(h).data
        assert int(np.argmax(prefs[0])) == 1


class TestValueUpdate:
    def test_perfect_fit_is_noop(self):
        env = pp_env()
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(18))
        records, _ = rollout(env, core, None, 6, seed=7)
        vnet = ValueNet(8, env.obs_width, 8, rng=np.random.default_rng(19))
        q = fill_values(records, vnet)  # targets exactly equal predictions
        before = {k: v.copy() for k, v in vnet.store.arrays().items()}
        stats = value_update(vnet, records, q, small_cfg())
        assert stats["value_loss"] == pytest.approx(0.0, abs=1e-20)
        for k, v in vnet.store.arrays().items():
            assert np.array_equal(v, before[k])

    def test_loss_decreases_on_fixed_batch(self):
        env = pp_env()
        core = build_policy_for_env(env, small_agent(), np.random.default_rng(20))
        records, _ = rollout(env, core, None, 20, seed=8)
        q = attach_returns(records, 0.9)
        vnet = ValueNet(8, env.obs_width, 8, rng=np.random.default_rng(21))
        initial = value_loss(vnet, records, q).item()
        cfg = small_cfg(lr=1e-2)
        for _ in range(100):
            value_update(vnet, records, q, cfg)
        assert value_loss(vnet, records, q).item() < initial

    def test_converges_to_analytic_discounted_sum(self):
        class ConstRewardEnv:
            task_name = "const"
            n_agents = 1
            msg_len = None
            obs_width = 1
            n_actions = 2
            t_max = 6

            def __init__(self):
                self.finished = np.zeros(1, dtype=bool)
                self._t = 0

            def reset(self, seed=None):
                self._t = 0
                self.finished = np.zeros(1, dtype=bool)
                return np.array([[0.0]])

            def step(self, actions):
                from commdefense.envs import StepResult
                self._t += 1
                done = self._t >= self.t_max
                return StepResult(rewards=np.ones(1), obs=np.array([[self._t / self.t_max]]),
                                  done=done, finished=np.array([done]))

        env = ConstRewardEnv()
        gamma = 0.9
        core = CommPolicy(1, 2, 4, hidden_size=8, rng=np.random.default_rng(22))
        records, _ = rollout(env, core, None, 6, seed=9)
        q = attach_returns(records, gamma)
        analytic = np.array([(1 - gamma ** (6 - t)) / (1 - gamma) for t in range(6)])
        assert np.allclose(q[:, 0], analytic, rtol=1e-12)
        vnet = ValueNet(8, 1, 16, rng=np.random.default_rng(23))
        cfg = small_cfg(lr=5e-2)
        for _ in range(2000):
            value_update(vnet, records, q, cfg)
        fitted = fill_values(records, vnet)[:, 0]
        assert np.max(np.abs(fitted - analytic) / analytic) < 0.01


class TestStage1:
    def test_history_and_shapes(self):
        env = pp_env(t_max=12)
        core, vnet, history = train_stage1(env, small_agent(), small_cfg())
        assert len(history) == 2
        assert all("mean_timesteps" in h for h in history)
        assert all(h["env_steps"] >= 30 for h in history)

    def test_identical_seeds_identical_checkpoints(self):
        results = []
        for _ in range(2):
            env = pp_env(t_max=12)
            core, vnet, _ = train_stage1(env, small_agent(), small_cfg(seed=5))
            results.append((core.store.arrays(), vnet.store.arrays()))
        for k in results[0][0]:
            assert np.array_equal(results[0][0][k], results[1][0][k])
        for k in results[0][1]:
            assert np.array_equal(results[0][1][k], results[1][1][k])

    def test_disabled_at_warns_and_ignores_attack(self, caplog):
        env = pp_env(t_max=12)
        cfg = small_cfg(at_enabled=False, at_attack=AttackSpec(kind="random", p=0.5))
        with caplog.at_level(logging.WARNING):
            train_stage1(env, small_agent(), cfg)
        assert any("ignoring configured training attack" in r.message for r in caplog.records)

    def test_stage1_never_runs_attacks_unless_enabled(self, monkeypatch):
        import commdefense.attacks as attacks_mod

        def boom(*a, **kw):
            raise AssertionError("attack invoked during plain stage-1 training")

        for name in ("attack_random", "attack_gaussian", "attack_l2grad",
                     "attack_montecarlo", "attack_fgsm", "attack_pgd"):
            monkeypatch.setattr(attacks_mod, name, boom)
        env = pp_env(t_max=12)
        train_stage1(env, small_agent(), small_cfg())

    def test_at_enabled_routes_messages_through_channel(self):
        env = pp_env(t_max=12)
        cfg = small_cfg(at_enabled=True, at_attack=AttackSpec(kind="random", p=0.9))
        core, _, history = train_stage1(env, small_agent(), cfg)
        assert len(history) == 2  # runs to completion with the channel active

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(gamma=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(at_attack=AttackSpec(kind="warp")).validate()


class TestBundle:
    def test_save_load_round_trip_bit_exact(self, tmp_path):
        env = pp_env(t_max=12)
        agent_cfg = small_agent()
        cfg = small_cfg()
        core, vnet, history = train_stage1(env, agent_cfg, cfg)
        meta = bundle_metadata(env, core, agent_cfg, cfg, history)
        bundle = Bundle(core=core, value_net=vnet, estimator=None, metadata=meta)
        save_bundle(bundle, tmp_path / "b")
        back = load_bundle(tmp_path / "b")
        for k in core.store.names():
            assert np.array_equal(core.store[k].data, back.core.store[k].data)
        for k in vnet.store.names():
            assert np.array_equal(vnet.store[k].data, back.value_net.store[k].data)
        assert back.metadata["task"] == "predator_prey"
        assert back.estimator is None

    def test_tampered_checkpoint_detected(self, tmp_path):
        from commdefense.errors import CheckpointError
        env = pp_env(t_max=12)
        core, vnet, history = train_stage1(env, small_agent(), small_cfg())
        meta = bundle_metadata(env, core, small_agent(), small_cfg(), history)
        save_bundle(Bundle(core, vnet, None, meta), tmp_path / "b")
        path = tmp_path / "b" / "policy.ckpt"
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_bundle(tmp_path / "b")
