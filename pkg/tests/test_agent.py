"""Offloading-agent tests: codecs, replay, TD3 mechanics pinned on hand-built
fixtures, distillation behavior, the hybrid selector, and training smoke."""

import numpy as np
import pytest

from edgeslice import agent as A
from edgeslice.env import EconParams, RadioParams, RegionState, TaskSpec, VmQueueState
from edgeslice.scenario import InstanceFamily, OffloadEnv

RADIO = RadioParams(upload_power=3e-6, noise_power=1e-9,
                    pathloss_ref=1e-3, pathloss_exp=2.0)  # snr=3 at 1 m
ECON = EconParams(reward_per_task=10.0, deadline=1.0)
N_MAX = 4


def region_of(tasks, bandwidth=4e6, vm_count=2):
    return RegionState(region=0, bandwidth=bandwidth, vm_count=vm_count,
                       tasks=tasks,
                       queues=[VmQueueState() for _ in range(vm_count)])


def make_states(k, rng, n_max=N_MAX):
    """Realistic raw observation batch."""
    states = np.zeros((k, A.state_dim(n_max)))
    for i in range(k):
        n = int(rng.integers(1, n_max + 1))
        region = region_of([TaskSpec(rng.uniform(1e5, 8e5), rng.uniform(50, 300),
                                     float(rng.choice([1, 2, 3])),
                                     rng.uniform(1, 3))
                            for _ in range(n)],
                           bandwidth=rng.uniform(1e6, 6e6),
                           vm_count=int(rng.integers(1, 4)))
        states[i] = A.encode_state(region, RADIO, ECON, n_max)
    return states


def make_batch(k, rng, n_max=N_MAX):
    states = make_states(k, rng, n_max)
    actions = rng.uniform(0, 1, size=(k, A.action_dim(n_max)))
    rewards = rng.uniform(0, 2, size=k)
    next_states = make_states(k, rng, n_max)
    return states, actions, rewards, next_states


def default_agent(rng=None, hidden=(16, 16)):
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = A.feature_scale(N_MAX, bw_ref=3e6, rate_ref=5e5,
                            compute_ref=1e8, power_ref=RADIO.upload_power)
    return A.make_agent(N_MAX, scale, hidden=hidden, rng=rng, frequency=1e9)


def set_constant_output(net, value):
    """Zero every weight so the network emits its output bias."""
    for name, p in net.params.items():
        p[:] = 0.0
    net.params[f"b{net.num_layers - 1}"][:] = value


def single_task_state(rho=1.0):
    region = region_of([TaskSpec(2e5, 100.0, rho, 1.0)])
    return A.encode_state(region, RADIO, ECON, N_MAX)


class TestEncodeState:
    def test_zero_users_all_zero_demands_and_mask(self):
        s = A.encode_state(region_of([]), RADIO, ECON, N_MAX)
        assert s.shape == (A.state_dim(N_MAX),)
        assert np.all(s[3:3 + N_MAX] == 0)          # rate demands
        assert np.all(s[3 + N_MAX:3 + 2 * N_MAX] == 0)  # compute demands
        assert np.all(s[4 + 2 * N_MAX:] == 0)       # mask

    def test_demand_formulas(self):
        task = TaskSpec(1e6, 100.0, 1.0, 1.0)
        s = A.encode_state(region_of([task]), RADIO, ECON, N_MAX)
        assert s[3 + N_MAX] == pytest.approx(1e8)   # d*eta / deadline
        assert s[3] == pytest.approx(1e6 / (1.0 * 2.0))  # d / (T * log2(1+3))

    def test_dimension_independent_of_user_count(self):
        s1 = A.encode_state(region_of([TaskSpec(1e5, 10, 1, 1)]), RADIO, ECON, N_MAX)
        s4 = A.encode_state(region_of([TaskSpec(1e5, 10, 1, 1)] * N_MAX),
                            RADIO, ECON, N_MAX)
        assert s1.shape == s4.shape

    def test_too_many_users_rejected(self):
        with pytest.raises(ValueError):
            A.encode_state(region_of([TaskSpec(1e5, 10, 1, 1)] * (N_MAX + 1)),
                           RADIO, ECON, N_MAX)


class TestDecodeAction:
    def test_fraction_scaling(self):
        raw = np.array([0.25, 0.25, 0.0, 0.0, 0.1, 0.1, 0.0, 0.0])
        action = A.decode_action(raw, bandwidth=10e6, vm_count=2, n_users=2)
        assert np.allclose(action.bw_fraction * 10e6, [2.5e6, 2.5e6])

    def test_vm_floor_and_clamp(self):
        raw = np.zeros(8)
        raw[4] = 0.99
        action = A.decode_action(raw, 1e6, vm_count=4, n_users=1)
        assert action.vm_index[0] == 3
        raw[4] = 1.0
        action = A.decode_action(raw, 1e6, vm_count=4, n_users=1)
        assert action.vm_index[0] == 3

    def test_overcommitment_rescaled(self):
        raw = np.concatenate([np.full(4, 0.5), np.zeros(4)])
        action = A.decode_action(raw, 1e6, vm_count=2, n_users=4)
        assert action.bw_fraction.sum() == pytest.approx(1.0)

    def test_padded_entries_ignored(self):
        raw = np.ones(8)
        action = A.decode_action(raw, 1e6, vm_count=2, n_users=2)
        assert action.bw_fraction.shape == (2,)


class TestAct:
    def test_deterministic_without_exploration(self):
        agent = default_agent()
        s = single_task_state()
        assert np.array_equal(A.act(agent, s, explore=False),
                              A.act(agent, s, explore=False))

    def test_zero_noise_equals_deterministic(self):
        agent = default_agent()
        agent.noise_scale = 0.0
        s = single_task_state()
        assert np.allclose(A.act(agent, s, True, np.random.default_rng(0)),
                           A.act(agent, s, False))

    def test_exploration_mean_matches_deterministic_preclamp(self):
        agent = default_agent()
        agent.noise_scale = 0.2
        s = single_task_state()
        det = A.act(agent, s, explore=False)
        rng = np.random.default_rng(1)
        draws = np.stack([A.act(agent, s, True, rng, clip=False)
                          for _ in range(1000)])
        se = 0.2 / np.sqrt(1000)
        assert np.all(np.abs(draws.mean(axis=0) - det) <= 3 * se)

    def test_clipped_to_unit_box(self):
        agent = default_agent()
        agent.noise_scale = 5.0
        s = single_task_state()
        out = A.act(agent, s, True, np.random.default_rng(2))
        assert np.all(out >= 0) and np.all(out <= 1)


class TestReplayBuffer:
    def test_capacity_is_a_ring(self):
        buf = A.ReplayBuffer(3, 2, 1)
        for i in range(7):
            buf.push([i, i], [i], float(i), [i, i])
        assert len(buf) == 3
        s, a, r, s2 = buf.sample(np.random.default_rng(0), 10)
        assert set(np.unique(r)).issubset({4.0, 5.0, 6.0})

    def test_sampling_deterministic_per_rng(self):
        buf = A.ReplayBuffer(10, 2, 1)
        for i in range(10):
            buf.push([i, 0], [0], float(i), [0, 0])
        r1 = buf.sample(np.random.default_rng(5), 4)[2]
        r2 = buf.sample(np.random.default_rng(5), 4)[2]
        assert np.array_equal(r1, r2)


class TestTdTarget:
    def test_gamma_zero_returns_rewards(self):
        agent = default_agent()
        batch = make_batch(8, np.random.default_rng(3))
        y = A.td_target(agent, batch, gamma=0.0, smooth_std=0.1,
                        smooth_clip=0.25, rng=np.random.default_rng(0))
        assert np.allclose(y, batch[2])

    def test_min_of_two_target_critics(self):
        # Fixture: single-task next states so a constant-bias critic emits
        # exactly its bias; Q'_1 = 3, Q'_2 = 5, r = 1, gamma = 0.9 -> 3.7.
        agent = default_agent()
        set_constant_output(agent.target_critic1.net, 3.0)
        set_constant_output(agent.target_critic2.net, 5.0)
        s = single_task_state()
        batch = (s[None, :], np.zeros((1, A.action_dim(N_MAX))),
                 np.array([1.0]), s[None, :])
        y = A.td_target(agent, batch, gamma=0.9, smooth_std=0.1,
                        smooth_clip=0.25, rng=np.random.default_rng(0))
        assert y[0] == pytest.approx(3.7)
        # Swapped critics give the identical answer (min rule).
        set_constant_output(agent.target_critic1.net, 5.0)
        set_constant_output(agent.target_critic2.net, 3.0)
        y2 = A.td_target(agent, batch, gamma=0.9, smooth_std=0.1,
                         smooth_clip=0.25, rng=np.random.default_rng(0))
        assert y2[0] == pytest.approx(3.7)

    def test_smoothing_noise_is_clipped(self):
        # Enormous noise scale with a tight clip: the smoothed target action
        # stays within the clip band of the target policy's action.
        agent = default_agent()
        batch = make_batch(64, np.random.default_rng(4))
        a2 = agent.target_actor.forward(batch[3])
        clip = 0.05
        captured = {}

        class SpyCritic:
            def __init__(self, inner):
                self.inner = inner

            def forward(self, states, actions):
                captured.setdefault("actions", []).append(actions.copy())
                return self.inner.forward(states, actions)

        agent.target_critic1 = SpyCritic(agent.target_critic1)
        agent.target_critic2 = SpyCritic(agent.target_critic2)
        A.td_target(agent, batch, gamma=0.9, smooth_std=50.0, smooth_clip=clip,
                    rng=np.random.default_rng(1))
        smoothed = captured["actions"][0]
        # Interior coordinates move by at most the clip; box edges only pull in.
        assert np.all(smoothed <= np.clip(a2 + clip, 0, 1) + 1e-12)
        assert np.all(smoothed >= np.clip(a2 - clip, 0, 1) - 1e-12)


class TestUpdateCritics:
    def test_regression_converges_on_fixed_batch(self):
        agent = default_agent()
        rng = np.random.default_rng(5)
        batch = make_batch(4, rng)
        y = np.array([1.0, -0.5, 2.0, 0.25])
        for _ in range(3000):
            A.update_critics(agent, batch, y, lr=1e-3)
        pred = agent.critic1.forward(batch[0], batch[1])
        assert np.all(np.abs(pred - y) < 1e-2)

    def test_identical_twins_stay_identical(self):
        agent = default_agent()
        agent.critic2 = agent.critic1.copy()
        batch = make_batch(8, np.random.default_rng(6))
        y = np.zeros(8)
        A.update_critics(agent, batch, y, lr=1e-3)
        for k in agent.critic1.params:
            assert np.array_equal(agent.critic1.params[k], agent.critic2.params[k])

    def test_first_step_reduces_loss(self):
        agent = default_agent()
        batch = make_batch(16, np.random.default_rng(7))
        y = np.full(16, 3.0)
        before = A.update_critics(agent, batch, y, lr=1e-4)
        after = A.update_critics(agent, batch, y, lr=0.0)
        assert after[0] < before[0]


class TestUpdateActor:
    def test_odd_counter_is_a_no_op(self):
        agent = default_agent()
        agent.step_count = 3
        before = {k: v.copy() for k, v in agent.actor.params.items()}
        applied = A.update_actor(agent, make_batch(8, np.random.default_rng(8)),
                                 actor_lr=1e-3, tau=0.5)
        assert applied is False
        assert all(np.array_equal(before[k], agent.actor.params[k]) for k in before)

    def test_constant_critic_leaves_actor_unchanged(self):
        agent = default_agent()
        set_constant_output(agent.critic1.net, 2.0)
        agent.step_count = 0
        before = {k: v.copy() for k, v in agent.actor.params.items()}
        applied = A.update_actor(agent, make_batch(8, np.random.default_rng(9)),
                                 actor_lr=1e-3, tau=0.0)
        assert applied is True
        assert all(np.allclose(before[k], agent.actor.params[k]) for k in before)

    def test_small_step_does_not_decrease_value(self):
        agent = default_agent()
        rng = np.random.default_rng(10)
        batch = make_batch(32, rng)
        y = rng.normal(size=32)
        for _ in range(200):
            A.update_critics(agent, batch, y, lr=1e-3)
        states = batch[0]

        def mean_q():
            a = agent.actor.forward(states)
            return float(agent.critic1.forward(states, a).mean())

        before = mean_q()
        agent.step_count = 0
        A.update_actor(agent, batch, actor_lr=1e-6, tau=0.0)
        assert mean_q() >= before - 1e-9

    def test_targets_track_on_the_same_schedule(self):
        agent = default_agent()
        batch = make_batch(8, np.random.default_rng(11))
        target_before = {k: v.copy() for k, v in agent.target_actor.params.items()}
        agent.step_count = 1
        A.update_actor(agent, batch, actor_lr=1e-3, tau=0.5)
        assert all(np.array_equal(target_before[k], agent.target_actor.params[k])
                   for k in target_before)
        agent.step_count = 2
        A.update_actor(agent, batch, actor_lr=1e-3, tau=0.5)
        assert any(not np.array_equal(target_before[k], agent.target_actor.params[k])
                   for k in target_before)


class TestAdvantage:
    def test_shared_parameters_zero_advantage(self):
        agent = default_agent()
        s = single_task_state()
        assert A.advantage(agent, agent, s) == pytest.approx(0.0)

    def test_hand_built_values(self):
        current = default_agent(np.random.default_rng(1))
        peer = default_agent(np.random.default_rng(2))
        for critic in (peer.critic1, peer.critic2):
            set_constant_output(critic.net, 5.0)
        for critic in (current.critic1, current.critic2):
            set_constant_output(critic.net, 3.0)
        s = single_task_state()
        assert A.advantage(peer, current, s) == pytest.approx(2.0)

    def test_antisymmetric(self):
        a = default_agent(np.random.default_rng(3))
        b = default_agent(np.random.default_rng(4))
        s = single_task_state()
        assert A.advantage(a, b, s) == pytest.approx(-A.advantage(b, a, s))


class TestDistill:
    def test_identical_actors_zero_loss_and_no_motion(self):
        current = default_agent(np.random.default_rng(5))
        peer = default_agent(np.random.default_rng(6))
        peer.actor = current.actor.copy()
        batch = make_batch(8, np.random.default_rng(7))
        before = {k: v.copy() for k, v in current.actor.params.items()}
        loss = A.distill(current, peer, batch, lr=1e-2)
        assert loss == pytest.approx(0.0)
        assert all(np.array_equal(before[k], current.actor.params[k])
                   for k in before)

    def test_negative_advantage_freezes_parameters(self):
        current = default_agent(np.random.default_rng(8))
        peer = default_agent(np.random.default_rng(9))
        for critic in (current.critic1, current.critic2):
            set_constant_output(critic.net, 100.0)
        for critic in (peer.critic1, peer.critic2):
            set_constant_output(critic.net, -100.0)
        batch = make_batch(8, np.random.default_rng(10))
        before = {k: v.copy() for k, v in current.actor.params.items()}
        A.distill(current, peer, batch, lr=1e-2)
        worst = max(np.max(np.abs(before[k] - current.actor.params[k]))
                    for k in before)
        assert worst < 1e-8

    def test_positive_advantage_pulls_toward_peer(self):
        current = default_agent(np.random.default_rng(11))
        peer = default_agent(np.random.default_rng(12))
        for critic in (current.critic1, current.critic2):
            set_constant_output(critic.net, 0.0)
        for critic in (peer.critic1, peer.critic2):
            set_constant_output(critic.net, 2.0)
        batch = make_batch(16, np.random.default_rng(13))

        def distance():
            a = current.actor.forward(batch[0])
            b = peer.actor.forward(batch[0])
            return float(np.linalg.norm(a - b))

        before = distance()
        A.distill(current, peer, batch, lr=1e-2)
        assert distance() < before

    def test_weight_positive_and_monotone(self):
        xs = np.linspace(-8, 8, 101)
        w = A.distill_weight(1.0, xs)
        assert np.all(w > 0)
        assert np.all(np.diff(w) > 0)


class TestHybridPolicy:
    def test_selects_peer_on_positive_peer_advantage(self):
        current = default_agent(np.random.default_rng(14))
        peer = default_agent(np.random.default_rng(15))
        for critic in (peer.critic1, peer.critic2):
            set_constant_output(critic.net, 10.0)
        for critic in (current.critic1, current.critic2):
            set_constant_output(critic.net, 1.0)
        s = single_task_state()
        assert np.array_equal(A.hybrid_policy(current, peer, s),
                              A.act(peer, s, explore=False))

    def test_selects_current_on_nonpositive_advantage(self):
        current = default_agent(np.random.default_rng(16))
        peer = default_agent(np.random.default_rng(17))
        for critic in (peer.critic1, peer.critic2):
            set_constant_output(critic.net, -4.0)
        for critic in (current.critic1, current.critic2):
            set_constant_output(critic.net, -1.0)
        s = single_task_state()
        assert np.array_equal(A.hybrid_policy(current, peer, s),
                              A.act(current, s, explore=False))

    def test_always_bit_equal_to_a_constituent(self):
        rng = np.random.default_rng(18)
        current = default_agent(np.random.default_rng(19))
        peer = default_agent(np.random.default_rng(20))
        for _ in range(20):
            s = make_states(1, rng)[0]
            h = A.hybrid_policy(current, peer, s)
            a = A.act(current, s, explore=False)
            b = A.act(peer, s, explore=False)
            assert np.array_equal(h, a) or np.array_equal(h, b)


class TestGradientsThroughBlocks:
    def test_critic_action_gradients_match_finite_differences(self):
        rng = np.random.default_rng(21)
        agent = default_agent(rng, hidden=(8, 8))
        states = make_states(3, rng)
        actions = rng.uniform(0.05, 0.45, size=(3, A.action_dim(N_MAX)))
        critic = agent.critic1
        dv = rng.normal(size=3)
        _, cache = critic.forward(states, actions, return_cache=True)
        _, d_actions = critic.backward(cache, dv)

        def loss():
            return float(critic.forward(states, actions) @ dv)

        h = 1e-6
        for k in range(3):
            for j in range(2 * N_MAX):
                orig = actions[k, j]
                actions[k, j] = orig + h
                lp = loss()
                actions[k, j] = orig - h
                lm = loss()
                actions[k, j] = orig
                numeric = (lp - lm) / (2 * h)
                denom = max(abs(numeric), abs(d_actions[k, j]), 1e-6)
                assert abs(numeric - d_actions[k, j]) / denom < 1e-3

    def test_actor_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(22)
        agent = default_agent(rng, hidden=(6,))
        states = make_states(4, rng)
        upstream = rng.normal(size=(4, A.action_dim(N_MAX)))
        out, cache = agent.actor.forward(states, return_cache=True)
        grads = agent.actor.backward(cache, upstream)

        def loss():
            return float((agent.actor.forward(states) * upstream).sum())

        h = 1e-6
        for name, p in agent.actor.params.items():
            flat = p.ravel()
            gflat = grads[name].ravel()
            for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = loss()
                flat[idx] = orig - h
                lm = loss()
                flat[idx] = orig
                numeric = (lp - lm) / (2 * h)
                denom = max(abs(numeric), abs(gflat[idx]), 1e-6)
                assert abs(numeric - gflat[idx]) / denom < 1e-3


class TestCheckpointRoundTrip:
    def test_agent_save_load_preserves_policy(self, tmp_path):
        agent = default_agent(np.random.default_rng(23))
        agent.step_count = 17
        path = tmp_path / "agent.ckpt"
        A.save_agent(agent, path)
        loaded = A.load_agent(path)
        s = single_task_state()
        assert np.array_equal(A.act(agent, s, False), A.act(loaded, s, False))
        assert loaded.step_count == 17
        assert loaded.n_max == agent.n_max


def tiny_family():
    task_spec = {"data_size": (1e5, 6e5), "compute_density": (50.0, 200.0),
                 "priorities": (1.0, 2.0), "priority_probs": (0.5, 0.5),
                 "distance": (1.0, 3.0)}
    return InstanceFamily(task_spec=task_spec, radio=RADIO, econ=ECON,
                          frequency=1e9, n_range=(1, N_MAX), vm_counts=(2,),
                          headroom=(1.0, 1.5))


def tiny_hyperparams(epochs=30):
    return A.AgentHyperparams(batch_size=8, buffer_capacity=500, warmup=16,
                              epochs=epochs, hidden=(8, 8), gamma=0.5,
                              noise_decay_steps=100)


class TestTrain:
    def test_deterministic_curves_and_buffer_bound(self):
        def run_once():
            env_c = OffloadEnv(tiny_family(), N_MAX, seed=1, episode_slots=3)
            env_p = OffloadEnv(tiny_family(), N_MAX, seed=2, episode_slots=3)
            scale = A.feature_scale(N_MAX, 3e6, 5e5, 1e8, RADIO.upload_power)
            return A.train(env_c, env_p, tiny_hyperparams(), N_MAX, scale, seed=7)

        cur1, peer1, curves1, _ = run_once()
        cur2, peer2, curves2, _ = run_once()
        assert [c.as_row() for c in curves1] == [c.as_row() for c in curves2]
        for k in cur1.actor.params:
            assert np.array_equal(cur1.actor.params[k], cur2.actor.params[k])

    def test_buffer_never_exceeds_capacity(self):
        env_c = OffloadEnv(tiny_family(), N_MAX, seed=3, episode_slots=3)
        env_p = OffloadEnv(tiny_family(), N_MAX, seed=4, episode_slots=3)
        scale = A.feature_scale(N_MAX, 3e6, 5e5, 1e8, RADIO.upload_power)
        hp = tiny_hyperparams(epochs=10)
        hp.buffer_capacity = 20
        A.train(env_c, env_p, hp, N_MAX, scale, seed=8)
