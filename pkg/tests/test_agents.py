"""Decomposable policy contracts, weight monotonicity, action selection."""

import numpy as np
import pytest
from conftest import fd_grad, rel_err

from commdefense import nn
from commdefense.agents import (
    AgentConfig,
    CommPolicy,
    Message,
    act,
    batched_attention_preference,
    batched_total_preference,
    decide,
    pair_indices,
    sample_actions,
)
from commdefense.errors import ShapeError


def make_core(seed=0, obs_width=5, n_actions=4, msg_len=3, hidden=8, aggregator="decomposable"):
    return CommPolicy(obs_width, n_actions, msg_len, hidden_size=hidden,
                      aggregator=aggregator, rng=np.random.default_rng(seed))


class TestHiddenUpdate:
    def test_zero_params_zero_hidden_fixed_point(self):
        core = CommPolicy(5, 4, 3, hidden_size=8, rng=None)  # all parameters zero
        h = core.update_hidden(np.zeros(8), np.zeros(5))
        assert np.array_equal(h.data, np.zeros(8))

    def test_purity(self):
        core = make_core(1)
        rng = np.random.default_rng(2)
        h0, o = rng.normal(size=8), rng.normal(size=5)
        a = core.update_hidden(h0, o).data
        b = core.update_hidden(h0, o).data
        assert np.array_equal(a, b)

    def test_width_mismatch_rejected(self):
        core = make_core(1)
        with pytest.raises(ShapeError):
            core.update_hidden(np.zeros(8), np.zeros(7))

    def test_gradient_matches_finite_differences(self):
        core = make_core(3)
        rng = np.random.default_rng(4)
        h0, o = rng.normal(size=8), rng.normal(size=5)
        mixer = rng.normal(size=8)

        def loss():
            return nn.sum_all(nn.mul(core.update_hidden(h0, o), nn.Tensor(mixer)))

        core.store.zero_grad()
        with nn.Tape() as tape:
            out = loss()
        nn.backward(tape, out)
        for name in ["gru.Wz", "gru.Wh", "obs_embed.W"]:
            p = core.store[name]
            numeric = fd_grad(lambda: loss().item(), p.data)
            assert rel_err(p.grad, numeric) <= 1e-5


class TestEncoder:
    def test_zero_params_zero_payload(self):
        core = CommPolicy(5, 4, 3, hidden_size=8, rng=None)
        m = core.encode_message(np.zeros(8), np.zeros(5))
        assert np.array_equal(m.data, np.zeros(3))

    def test_payload_strictly_inside_unit_box(self):
        core = make_core(5)
        rng = np.random.default_rng(6)
        for _ in range(20):
            m = core.encode_message(rng.normal(size=8), rng.normal(size=5)).data
            assert np.all(m > -1.0) and np.all(m < 1.0)

    def test_different_hidden_states_give_different_payloads(self):
        rng = np.random.default_rng(7)
        differing = 0
        for seed in range(10):
            core = make_core(100 + seed)
            o = rng.normal(size=5)
            m1 = core.encode_message(rng.normal(size=8), o).data
            m2 = core.encode_message(rng.normal(size=8), o).data
            if not np.allclose(m1, m2):
                differing += 1
        assert differing == 10


class TestTotalPreference:
    def test_no_messages_is_base(self):
        core = make_core(8)
        rng = np.random.default_rng(9)
        h, o = rng.normal(size=8), rng.normal(size=5)
        v = core.total_preference(h, o, [])
        assert np.array_equal(v.data, core.base_preference(h).data)

    def test_weight_zero_bit_exact_equals_absent(self):
        core = make_core(10)
        rng = np.random.default_rng(11)
        h, o = rng.normal(size=8), rng.normal(size=5)
        msgs = [Message(rng.uniform(-1, 1, 3), sender=1), Message(rng.uniform(-1, 1, 3), sender=2)]
        with_zero = core.total_preference(h, o, [(msgs[0], 0.0), (msgs[1], 0.7)])
        without = core.total_preference(h, o, [(msgs[1], 0.7)])
        assert np.array_equal(with_zero.data, without.data)

    def test_null_skipped_like_weight_zero(self):
        core = make_core(10)
        rng = np.random.default_rng(12)
        h, o = rng.normal(size=8), rng.normal(size=5)
        live = Message(rng.uniform(-1, 1, 3), sender=2)
        nullm = Message(np.zeros(3), sender=1, null=True)
        a = core.total_preference(h, o, [(nullm, 1.0), (live, 1.0)])
        b = core.total_preference(h, o, [(live, 1.0)])
        assert np.array_equal(a.data, b.data)

    def test_simple_addition(self):
        core = make_core(13)
        rng = np.random.default_rng(14)
        h, o = rng.normal(size=8), rng.normal(size=5)
        m = rng.uniform(-1, 1, 3)
        base = core.base_preference(h).data
        term = core.message_preference(o, m).data
        v = core.total_preference(h, o, [(m, 1.0)]).data
        assert np.allclose(v, base + term, rtol=1e-14)

    def test_weight_out_of_range_rejected(self):
        core = make_core(15)
        with pytest.raises(ShapeError):
            core.total_preference(np.zeros(8), np.zeros(5), [(np.zeros(3), 1.5)])
        with pytest.raises(ShapeError):
            core.total_preference(np.zeros(8), np.zeros(5), [(np.zeros(3), -0.1)])

    def test_permutation_invariance(self):
        core = make_core(16)
        rng = np.random.default_rng(17)
        h, o = rng.normal(size=8), rng.normal(size=5)
        pairs = [(rng.uniform(-1, 1, 3), w) for w in (0.2, 0.9, 0.5)]
        a = core.total_preference(h, o, pairs).data
        b = core.total_preference(h, o, list(reversed(pairs))).data
        assert np.allclose(a, b, atol=1e-12)

    def test_all_weights_one_reproduces_undefended(self):
        core = make_core(18)
        rng = np.random.default_rng(19)
        h, o = rng.normal(size=8), rng.normal(size=5)
        msgs = [rng.uniform(-1, 1, 3) for _ in range(3)]
        weighted = core.total_preference(h, o, [(m, 1.0) for m in msgs]).data
        undefended = core.base_preference(h).data
        e = core.embed_obs(o)
        for m in msgs:
            undefended = undefended + core.message_preference_from_embed(e, m).data
        assert np.allclose(weighted, undefended, rtol=1e-14)


class TestDecide:
    def test_uniform(self):
        p = decide(np.zeros(5)).data
        assert np.allclose(p, 0.2, atol=1e-15)

    def test_closed_form_two_actions(self):
        for w, expect in [(1.0, 0.7310585786300049), (2.0, 0.8807970779778823)]:
            p = decide(np.array([w, 0.0])).data
            assert np.isclose(p[0], expect, atol=1e-12)
        assert decide(np.array([1.0, 0.0])).data[0] < decide(np.array([2.0, 0.0])).data[0]

    def test_argmax_commutes(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            v = rng.normal(size=6)
            assert int(np.argmax(decide(v).data)) == int(np.argmax(v))


class TestAct:
    def test_degenerate_distribution(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert act(np.array([1.0, 0.0, 0.0]), rng, "sample") == 0

    def test_zero_probability_prefix_never_sampled(self):
        rng = np.random.default_rng(1)
        draws = {act(np.array([0.0, 1.0, 0.0]), rng, "sample") for _ in range(100)}
        assert draws == {1}

    def test_greedy_and_tie_break(self):
        assert act(np.array([0.2, 0.5, 0.3]), mode="greedy") == 1
        assert act(np.array([0.4, 0.4, 0.2]), mode="greedy") == 0

    def test_sampling_frequencies(self):
        rng = np.random.default_rng(2)
        dist = np.array([0.2, 0.5, 0.3])
        n = 100_000
        draws = sample_actions(np.tile(dist, (n, 1)), rng)
        freq = np.bincount(draws, minlength=3) / n
        assert np.all(np.abs(freq - dist) < 0.01)


class TestWeightMonotonicity:
    """Raising one message's weight must monotonically raise the probability
    of its most-preferred action and lower its least-preferred action."""

    def test_monotone_over_random_instances(self):
        rng = np.random.default_rng(42)
        grid = np.arange(0.0, 2.0 + 1e-9, 0.25)
        for seed in range(50):
            core = make_core(seed, obs_width=4, n_actions=5, msg_len=3, hidden=6)
            o = rng.normal(size=4)
            h = rng.normal(size=6)
            m = rng.uniform(-1, 1, 3)
            base = core.base_preference(h).data
            pref = core.message_preference(o, m).data
            k_max, k_min = int(np.argmax(pref)), int(np.argmin(pref))
            probs = np.stack([decide(base + w * pref).data for w in grid])
            d_max = np.diff(probs[:, k_max])
            d_min = np.diff(probs[:, k_min])
            assert np.all(d_max > -1e-12)
            assert np.all(d_min < 1e-12)
            assert probs[-1, k_max] > probs[0, k_max]
            assert probs[-1, k_min] < probs[0, k_min]


class TestAttention:
    def test_single_message_weight_one(self):
        core = make_core(30, aggregator="attention")
        rng = np.random.default_rng(31)
        w = core.attention_weights(rng.normal(size=8), [rng.uniform(-1, 1, 3)])
        assert np.allclose(w, [1.0])

    def test_identical_messages_equal_weights(self):
        core = make_core(32, aggregator="attention")
        rng = np.random.default_rng(33)
        m = rng.uniform(-1, 1, 3)
        w = core.attention_weights(rng.normal(size=8), [m, m.copy(), m.copy()])
        assert np.allclose(w, 1 / 3)

    def test_weights_sum_to_one(self):
        core = make_core(34, aggregator="attention")
        rng = np.random.default_rng(35)
        for _ in range(10):
            msgs = [rng.uniform(-1, 1, 3) for _ in range(4)]
            w = core.attention_weights(rng.normal(size=8), msgs)
            assert np.isclose(w.sum(), 1.0, atol=1e-12)

    def test_aggregate_matches_manual(self):
        core = make_core(36, aggregator="attention")
        rng = np.random.default_rng(37)
        h, o = rng.normal(size=8), rng.normal(size=5)
        msgs = [rng.uniform(-1, 1, 3) for _ in range(3)]
        v = core.attention_aggregate(h, o, msgs).data
        w = core.attention_weights(h, msgs)
        manual = core.base_preference(h).data.copy()
        e = core.embed_obs(o)
        for wi, m in zip(w, msgs):
            manual += wi * core.message_preference_from_embed(e, m).data
        assert np.allclose(v, manual, rtol=1e-12)


class TestBatchedPaths:
    """Batched aggregation must agree with the single-agent reference."""

    def test_pair_indices(self):
        recv, send = pair_indices(3)
        assert list(recv) == [0, 0, 1, 1, 2, 2]
        assert list(send) == [1, 2, 0, 2, 0, 1]

    def test_batched_matches_single_decomposable(self):
        n, L = 3, 3
        core = make_core(40, obs_width=4, n_actions=5, msg_len=L, hidden=6)
        rng = np.random.default_rng(41)
        h = rng.normal(size=(n, 6))
        obs = rng.normal(size=(n, 4))
        broadcast = rng.uniform(-1, 1, (n, L))
        weights = rng.uniform(0, 1, (n, n))
        recv, send = pair_indices(n)
        directed = np.broadcast_to(broadcast[None, :, :], (n, n, L))
        pair_payloads = nn.Tensor(directed[recv, send])
        pair_w = weights[recv, send]
        e = core.embed_obs(obs)
        batched = batched_total_preference(core, e, nn.as_tensor(h), pair_payloads, pair_w, n)
        for i in range(n):
            incoming = [(broadcast[j], weights[i, j]) for j in range(n) if j != i]
            single = core.total_preference(h[i], obs[i], incoming)
            assert np.allclose(batched.data[i], single.data, atol=1e-12)

    def test_batched_matches_single_attention(self):
        n, L = 4, 3
        core = make_core(42, obs_width=4, n_actions=5, msg_len=L, hidden=6, aggregator="attention")
        rng = np.random.default_rng(43)
        h = rng.normal(size=(n, 6))
        obs = rng.normal(size=(n, 4))
        broadcast = rng.uniform(-1, 1, (n, L))
        null = np.array([False, True, False, False])
        recv, send = pair_indices(n)
        directed = np.broadcast_to(broadcast[None, :, :], (n, n, L))
        pair_payloads = nn.Tensor(directed[recv, send])
        null_pair = null[send]
        e = core.embed_obs(obs)
        batched = batched_attention_preference(core, e, nn.as_tensor(h), pair_payloads, null_pair, n)
        for i in range(n):
            msgs = [Message(broadcast[j], j, null=null[j]) for j in range(n) if j != i]
            single = core.attention_aggregate(h[i], obs[i], msgs)
            assert np.allclose(batched.data[i], single.data, atol=1e-12)

    def test_attention_all_null_gives_base(self):
        n, L = 3, 3
        core = make_core(44, obs_width=4, n_actions=5, msg_len=L, hidden=6, aggregator="attention")
        rng = np.random.default_rng(45)
        h = rng.normal(size=(n, 6))
        obs = rng.normal(size=(n, 4))
        directed = np.zeros((n, n, L))
        recv, send = pair_indices(n)
        e = core.embed_obs(obs)
        batched = batched_attention_preference(
            core, e, nn.as_tensor(h), nn.Tensor(directed[recv, send]),
            np.ones(n * (n - 1), dtype=bool), n)
        assert np.allclose(batched.data, core.base_preference(h).data, atol=1e-12)


class TestConfig:
    def test_agent_config_validation(self):
        from commdefense.errors import ConfigError
        AgentConfig().validate()
        with pytest.raises(ConfigError):
            AgentConfig(defense="shield").validate()
        with pytest.raises(ConfigError):
            AgentConfig(aggregator="mean").validate()
