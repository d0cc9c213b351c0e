import math

import numpy as np
import pytest

from deepcpg.cpg import CpgParams, CpgState, Modulation, cpg_rollout, cpg_step
from deepcpg.env import CrawlerSpec
from deepcpg.nn import OptimState
from deepcpg.errors import ConfigError, NumericError, StructuralError
from deepcpg.td3 import TrainConfig, Trainer, deploy, modular_layout, single_layout


def tiny_config(**kw):
    base = dict(actor_hidden=(8, 8), head_hidden=4, critic_hidden=(8, 8, 8, 8), babble_steps=20, batch=4,
                modulation=Modulation(alpha_w=6.0), buffer_size=5000)
    base.update(kw)
    return TrainConfig(**base)


def zero_net(net):
    return net.with_flat(np.zeros_like(net.get_flat()))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(actor="rnn")
    with pytest.raises(ConfigError):
        TrainConfig(actor="ff", tau_c=5)
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.5)
    assert TrainConfig().babble_steps == 10_000 and TrainConfig().policy_delay == 2


def test_noise_free_segment_follows_cpg_exactly():
    tr = Trainer(tiny_config(explore_sigma=0.0, babble_steps=0), CrawlerSpec(), seed=1)
    ctl = tr.controller
    start = ctl.cpg_states[0].copy()
    seg = tr.collect_segment(explore=True)
    params = ctl.cpg_params[0]
    _, ys = cpg_rollout(params, tr.config.modulation, start, 5)
    np.testing.assert_array_equal(np.stack([t.g_j for t in seg]), ys)


def test_stored_cpg_states_advance_by_one_step():
    tr = Trainer(tiny_config(), CrawlerSpec(), seed=2)
    for _ in range(3):
        for t in tr.collect_segment():
            n = 8
            h = CpgState.from_vector(t.h, n)
            nxt, _ = cpg_step(CpgParams.from_vector(t.g_cpg, n), tr.config.modulation, h)
            np.testing.assert_array_equal(nxt.to_vector(), t.h_next)


def test_terminal_mid_segment_truncates_and_resets():
    tr = Trainer(tiny_config(), CrawlerSpec(t_max=8), seed=3)
    first = tr.collect_segment()
    second = tr.collect_segment()
    assert len(first) == 5 and len(second) == 3 and second[-1].d
    assert tr.env.state.step == 0 and tr.episode == 1
    assert tr.controller.cpg_states[0].t == 0
    assert len(tr.episodes) == 1 and tr.episodes[0].length == 8


def test_babbling_then_actor():
    tr = Trainer(tiny_config(babble_steps=10), CrawlerSpec(), seed=4)
    tr.collect_segment()
    tr.collect_segment()
    assert tr.controller.actor_calls == 0
    tr.collect_segment()
    assert tr.controller.actor_calls == 1


def filled_trainer(**kw):
    tr = Trainer(tiny_config(**kw), CrawlerSpec(), seed=5)
    tr.train(60)
    return tr


def test_terminal_target_is_reward_sum():
    tr = filled_trainer()
    batch = tr.buffer.sample(tr.rng, 6, 5, 0.95)
    batch.done[:] = 1.0
    y = tr.compute_target(batch)[0]
    np.testing.assert_array_equal(y, batch.reward)


def test_constant_reward_with_zero_target_critics():
    tr = filled_trainer()
    agent = tr.agents[0]
    agent.critic_targs = [zero_net(c) for c in agent.critic_targs]
    batch = tr.buffer.sample(tr.rng, 6, 5, 0.95)
    batch.reward[:] = 5.0
    batch.done[:] = 0.0
    np.testing.assert_array_equal(tr.compute_target(batch)[0], 5.0)


def test_identical_twin_critics_leave_target_unchanged():
    tr = filled_trainer()
    agent = tr.agents[0]
    batch = tr.buffer.sample(tr.rng, 6, 5, 0.95)
    agent.critic_targs = [agent.critic_targs[0], agent.critic_targs[0].copy()]
    state = tr.rng.bit_generator.state
    twin = tr.compute_target(batch)[0]
    agent.critic_targs = agent.critic_targs[:1]
    tr.rng.bit_generator.state = state
    np.testing.assert_array_equal(tr.compute_target(batch)[0], twin)


def test_twin_critics_start_apart():
    tr = Trainer(tiny_config(), CrawlerSpec(), seed=6)
    a, b = tr.agents[0].critics
    assert not np.array_equal(a.get_flat(), b.get_flat())


def test_policy_delay_and_target_tracking():
    tr = filled_trainer()
    agent = tr.agents[0]
    for call in range(1, 5):
        actor = agent.actor.get_flat()
        targ = agent.actor_targ.get_flat()
        ctarg = agent.critic_targs[0].get_flat()
        tr.update_step()
        moved = not np.array_equal(agent.actor.get_flat(), actor)
        assert moved == (tr.updates % 2 == 0)
        if not moved:
            np.testing.assert_array_equal(agent.actor_targ.get_flat(), targ)
            np.testing.assert_array_equal(agent.critic_targs[0].get_flat(), ctarg)
        else:
            expected = 0.995 * targ + 0.005 * agent.actor.get_flat()
            np.testing.assert_allclose(agent.actor_targ.get_flat(), expected, rtol=0, atol=1e-15)


def test_zero_critics_and_zero_rewards_stay_at_zero():
    tr = filled_trainer()
    agent = tr.agents[0]
    agent.critics = [zero_net(c) for c in agent.critics]
    agent.critic_targs = [zero_net(c) for c in agent.critic_targs]
    # fresh moments: leftover momentum would move a zero critic
    agent.critic_opts = [OptimState.create(c.params) for c in agent.critics]
    for _ in range(4):
        batch = tr.buffer.sample(tr.rng, 4, 5, 0.95)
        batch.reward[:] = 0.0
        info = tr.update_step(batch)
        assert info["q1_loss_0"] == 0.0 and info["q2_loss_0"] == 0.0
    for c in agent.critics + agent.critic_targs:
        assert not np.any(c.get_flat())


def test_non_finite_loss_refuses_update():
    tr = filled_trainer()
    before = [a.get_flat() for a in tr.agents[0].critics]
    updates = tr.updates
    batch = tr.buffer.sample(tr.rng, 4, 5, 0.95)
    batch.reward[0] = np.inf
    with pytest.raises(NumericError):
        tr.update_step(batch)
    assert tr.updates == updates
    for b, c in zip(before, tr.agents[0].critics):
        np.testing.assert_array_equal(b, c.get_flat())


def test_ddpg_uses_one_critic_and_no_delay():
    tr = filled_trainer(algo="ddpg")
    assert len(tr.agents[0].critics) == 1
    actor = tr.agents[0].actor.get_flat()
    tr.update_step()
    assert not np.array_equal(actor, tr.agents[0].actor.get_flat())


@pytest.mark.parametrize("t_max,tau_c", [(23, 5), (25, 5), (7, 1), (30, 10)])
def test_deploy_calls_actor_once_per_decision(t_max, tau_c):
    cfg = tiny_config(tau_c=tau_c)
    spec = CrawlerSpec(t_max=t_max)
    tr = Trainer(cfg, spec, seed=7)
    out = deploy(tr.policy(), 2, seed=11)
    assert out.lengths == [t_max, t_max]
    assert out.actor_calls == 2 * math.ceil(t_max / tau_c)


def test_deploy_is_deterministic():
    tr = Trainer(tiny_config(), CrawlerSpec(t_max=40), seed=8)
    a = deploy(tr.policy(), 2, seed=3, record_steps=True)
    b = deploy(tr.policy(), 2, seed=3, record_steps=True)
    assert a.returns == b.returns and a.work == b.work
    for ra, rb in zip(a.steps, b.steps):
        np.testing.assert_array_equal(ra["g_j"], rb["g_j"])


def test_deploy_rejects_mismatched_robot():
    tr = Trainer(tiny_config(), CrawlerSpec(), seed=9)
    with pytest.raises(StructuralError):
        deploy(tr.policy(), 1, spec=CrawlerSpec(modules=2))


@pytest.mark.parametrize("actor", ["cpg", "ff"])
def test_training_is_seed_deterministic(actor):
    kw = dict(actor=actor, tau_c=1) if actor == "ff" else {}
    a = Trainer(tiny_config(**kw), CrawlerSpec(t_max=30), seed=10)
    b = Trainer(tiny_config(**kw), CrawlerSpec(t_max=30), seed=10)
    a.train(80)
    b.train(80)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.updates > 0


def test_single_module_modular_reduces_to_single_agent():
    spec = CrawlerSpec(t_max=30)
    assert modular_layout(spec) == single_layout(spec)
    a = Trainer(tiny_config(algo="ddpg"), spec, seed=12, system="single")
    b = Trainer(tiny_config(algo="ddpg"), spec, seed=12, system="modular")
    a.train(80)
    b.train(80)
    assert a.metrics_csv() == b.metrics_csv()
    np.testing.assert_array_equal(a.agents[0].actor.get_flat(), b.agents[0].actor.get_flat())


def test_at_rest_policy_scores_bias_times_length():
    # a zero-amplitude, zero-offset CPG leaves every joint at rest
    tr = Trainer(tiny_config(), CrawlerSpec(t_max=50), seed=13)
    actor = tr.agents[0].actor
    params = dict(actor.params)
    for head in ("amp", "offset"):
        last = max(k for k in params if k.startswith(head + ".b"))
        params[last] = np.full_like(params[last], -1e6 if head == "amp" else 0.0)
        params[last.replace(".b", ".W")] = np.zeros_like(params[last.replace(".b", ".W")])
    tr.agents[0].actor = actor.replace_params(params)
    out = deploy(tr.policy(), 2, seed=0)
    assert out.returns == pytest.approx([200.0, 200.0], abs=1e-9)
