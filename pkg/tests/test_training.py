import json

import numpy as np
import pytest

from memshare import training
from memshare.actors import MlpActor
from memshare.errors import ConfigurationError, IncompatibilityError, TrainingFault
from memshare.evaluation import evaluate
from memshare.nn import MlpSpec, adam_init, copy_params, mlp_forward
from memshare.replay import Minibatch, ReplayBuffer, Transition
from memshare.rollout import episode_steps
from memshare.training import (actor_gradients, actor_update, build_team, critic_input_dim, critic_update,
                               load_team, save_team, target_actions, train, update_round, update_targets)
from tests.helpers import desk_config, numeric_grad, rel_error, tiny_env, tiny_train


def random_batch(team, size, rng) -> Minibatch:
    n = team.n_agents
    if team.env_config.discrete:
        actions = [rng.dirichlet(np.ones(team.act_dim), size=size) for _ in range(n)]
    else:
        actions = [rng.uniform(-1, 1, size=(size, team.act_dim)) for _ in range(n)]
    return Minibatch(
        obs=[rng.normal(size=(size, d)) for d in team.obs_dims],
        next_obs=[rng.normal(size=(size, d)) for d in team.obs_dims],
        actions=actions,
        memories=rng.normal(size=(size, n, team.memory_size)),
        rewards=rng.normal(size=(size, n)),
    )


def filled_buffer(team, count, rng) -> ReplayBuffer:
    buffer = ReplayBuffer(count)
    batch = random_batch(team, count, rng)
    for b in range(count):
        buffer.push(Transition(
            obs=[o[b] for o in batch.obs], next_obs=[o[b] for o in batch.next_obs],
            actions=[a[b] for a in batch.actions], memories=batch.memories[b], rewards=batch.rewards[b],
        ))
    return buffer


def zero_critics(team):
    for nets in team.agents:
        nets.critic = [np.zeros_like(p) for p in nets.critic]
        nets.target_critic = [np.zeros_like(p) for p in nets.target_critic]


def team_arrays(team):
    arrays = []
    for nets in team.agents:
        arrays += nets.actor.flat() + nets.target_actor.flat() + nets.critic + nets.target_critic
    return arrays


def test_team_dimensions(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    assert team.obs_dims == [10, 10] and team.act_dim == 5
    assert team.critic_spec.input_dim == critic_input_dim([10, 10], 5) == 30
    assert team.memory_size == 4 and team.actors[0].memory_size == 4

    meta = build_team(tiny_env("CN"), tiny_train("MA-MADDPG"), rng)
    assert meta.actors[0].input_dim == 20 and meta.memory_size == 0

    water = build_team(tiny_env("Waterworld"), tiny_train("MADDPG"), rng)
    assert water.act_dim == 2
    assert water.actors[1].spec.activations[-1] == "tanh"


@pytest.mark.parametrize("n_agents", [2, 3, 6])
def test_critic_sees_every_observation_and_action(n_agents, rng):
    team = build_team(tiny_env("CN", n_agents=n_agents), tiny_train("MD-MADDPG"), rng)
    # own position and velocity, N landmarks, N - 1 other agents
    assert team.obs_dims == [4 + 2 * n_agents + 2 * (n_agents - 1)] * n_agents
    expected = sum(team.obs_dims) + n_agents * team.act_dim
    assert critic_input_dim(team.obs_dims, team.act_dim) == expected
    assert team.critic_spec.input_dim == expected
    assert all(nets.critic[0].shape[1] == expected for nets in team.agents)


def test_targets_start_as_copies(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    for nets in team.agents:
        for a, b in zip(nets.actor.flat(), nets.target_actor.flat()):
            np.testing.assert_array_equal(a, b)
            assert a is not b


def test_zero_critic_loss_is_mean_squared_reward(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    zero_critics(team)
    batch = random_batch(team, 16, rng)
    loss = critic_update(team, 1, batch, rng)
    assert loss == pytest.approx(np.mean(batch.rewards[:, 1] ** 2), rel=1e-12)


def test_single_sample_critic_loss_matches_bellman_target(rng):
    team = build_team(tiny_env("Waterworld"), tiny_train("MD-MADDPG"), rng)
    batch = random_batch(team, 1, rng)
    nets = team.agents[0]
    next_actions = [n.target_actor.forward(batch.next_obs[k], batch.memories[:, k, :])[0]
                    for k, n in enumerate(team.agents)]
    q_next, _ = mlp_forward(team.critic_spec, nets.target_critic,
                            np.concatenate(batch.next_obs + next_actions, axis=1))
    q, _ = mlp_forward(team.critic_spec, nets.critic, np.concatenate(batch.obs + batch.actions, axis=1))
    y = batch.rewards[0, 0] + 0.95 * q_next[0, 0]
    assert critic_update(team, 0, batch, rng) == pytest.approx((q[0, 0] - y) ** 2, rel=1e-12)


def test_critic_overfits_one_transition(rng):
    team = build_team(tiny_env("Waterworld"), tiny_train("MADDPG", lr_critic=1e-2), rng)
    batch = random_batch(team, 1, rng)
    losses = [critic_update(team, 0, batch, rng) for _ in range(1000)]
    assert losses[-1] < 1e-4
    assert losses[-1] < losses[0]


def test_zero_critic_gives_zero_actor_gradient(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    zero_critics(team)
    grads, mean_q = actor_gradients(team, 0, random_batch(team, 8, rng), rng)
    assert mean_q == 0.0
    assert all(not g.any() for g in grads)


@pytest.mark.parametrize("task", ["CN", "Waterworld"])
@pytest.mark.parametrize("algorithm", ["MD-MADDPG", "MADDPG", "MA-MADDPG"])
def test_actor_gradient_matches_finite_differences(task, algorithm):
    rng = np.random.default_rng(21)
    team = build_team(tiny_env(task), tiny_train(algorithm), rng)
    batch = random_batch(team, 4, rng)

    def loss():
        _, mean_q = actor_gradients(team, 1, batch, np.random.default_rng(99))
        return -mean_q

    grads, _ = actor_gradients(team, 1, batch, np.random.default_rng(99))
    for param, grad in zip(team.agents[1].actor.flat(), grads):
        assert grad.shape == param.shape
        idx, num = numeric_grad(loss, param, max_entries=10, rng=rng)
        assert rel_error(grad.reshape(-1)[idx], num) <= 1e-4


def test_actor_update_moves_only_its_agent(rng):
    team = build_team(tiny_env("CN"), tiny_train("MADDPG"), rng)
    before = [copy_params(n.actor.flat()) for n in team.agents]
    norm = actor_update(team, 0, random_batch(team, 8, rng), rng)
    assert norm > 0
    assert any(not np.array_equal(a, b) for a, b in zip(before[0], team.agents[0].actor.flat()))
    for a, b in zip(before[1], team.agents[1].actor.flat()):
        np.testing.assert_array_equal(a, b)


def test_zero_memory_matches_memoryless_baseline():
    env = tiny_env("CN")
    md = build_team(env, tiny_train("MD-MADDPG", memory_size=0), np.random.default_rng(4))
    base = build_team(env, tiny_train("MADDPG"), np.random.default_rng(5))
    dims = md.actors[0].dims
    spec = MlpSpec(widths=(dims.obs_dim, dims.encoder_hidden, dims.encoding_size, dims.action_hidden, 5),
                   activations=("relu", "linear", "relu", "gumbel-softmax-head"))
    for m_nets, b_nets in zip(md.agents, base.agents):
        b_nets.actor = MlpActor(spec, copy_params(m_nets.actor.params.enc + m_nets.actor.params.act))
        b_nets.target_actor = MlpActor(spec, copy_params(m_nets.target_actor.params.enc
                                                         + m_nets.target_actor.params.act))
        b_nets.actor_opt = adam_init(b_nets.actor.flat())
        b_nets.critic = copy_params(m_nets.critic)
        b_nets.target_critic = copy_params(m_nets.target_critic)
        b_nets.critic_opt = adam_init(b_nets.critic)

    buffer = filled_buffer(md, 40, np.random.default_rng(6))
    md_rng, base_rng = np.random.default_rng(7), np.random.default_rng(7)
    for _ in range(3):
        assert update_round(md, buffer, md_rng) == pytest.approx(update_round(base, buffer, base_rng), abs=1e-12)

    for m_nets, b_nets in zip(md.agents, base.agents):
        params = m_nets.actor.params
        for a, b in zip(params.enc + params.act, b_nets.actor.flat()):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
        for a, b in zip(m_nets.critic, b_nets.critic):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_update_targets_is_polyak_average(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG", tau=0.25), rng)
    nets = team.agents[0]
    nets.actor = nets.actor.with_flat([p + 1.0 for p in nets.actor.flat()])
    old_target = copy_params(nets.target_actor.flat())
    update_targets(team)
    for new, old, online in zip(nets.target_actor.flat(), old_target, nets.actor.flat()):
        np.testing.assert_allclose(new, 0.75 * old + 0.25 * online)


def test_target_actions_are_relaxed_for_discrete_tasks(rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    actions = target_actions(team, random_batch(team, 6, rng), rng)
    assert len(actions) == 2
    np.testing.assert_allclose(actions[0].sum(axis=1), 1.0)


def test_zero_episodes_returns_initial_team():
    config = tiny_train("MD-MADDPG", episodes=0, seed=3)
    result = train(config, tiny_env("CN"), progress=False)
    init_seq = np.random.SeedSequence(3).spawn(5)[0]
    fresh = build_team(tiny_env("CN"), config, np.random.default_rng(init_seq))
    assert result.curve == [] and result.steps == 0
    for a, b in zip(team_arrays(result.team), team_arrays(fresh)):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic_per_seed():
    config, env = tiny_train("MD-MADDPG", episodes=4, seed=11), tiny_env("SyncCN")
    a = train(config, env, progress=False)
    b = train(config, env, progress=False)
    assert a.updates > 0
    assert [sorted(r.items()) for r in a.curve] == [sorted(r.items()) for r in b.curve]
    for x, y in zip(team_arrays(a.team), team_arrays(b.team)):
        np.testing.assert_array_equal(x, y)


def test_train_writes_checkpoint_and_curve(tmp_path):
    config = tiny_train("MADDPG", episodes=4)
    result = train(config, tiny_env("CN"), output_dir=tmp_path, progress=False)
    assert (tmp_path / "checkpoint" / "agent_0.ckpt").exists()
    lines = (tmp_path / "learning_curve.csv").read_text().splitlines()
    assert lines[0] == "episode,eval_reward,eval_reward_0,eval_reward_1,critic_loss,actor_grad_norm"
    assert [r["episode"] for r in result.curve] == [2, 4]
    assert len(lines) == 3


def test_save_and_load_round_trip(tmp_path, rng):
    team = build_team(tiny_env("SwappingCN"), tiny_train("MD-MADDPG", variant="no-context"), rng)
    save_team(team, tmp_path)
    loaded = load_team(tmp_path)
    assert loaded.train_config == team.train_config
    for a, b in zip(team_arrays(team), team_arrays(loaded)):
        np.testing.assert_array_equal(a, b)


def test_load_rejects_incompatible_task(tmp_path, rng):
    save_team(build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng), tmp_path)
    with pytest.raises(IncompatibilityError) as info:
        load_team(tmp_path, tiny_env("CN", n_agents=3))
    assert info.value.expected["n_agents"] == 3 and info.value.found["n_agents"] == 2
    with pytest.raises(IncompatibilityError):
        load_team(tmp_path, tiny_env("PO-CN"))
    with pytest.raises(ConfigurationError):
        load_team(tmp_path / "missing")


def test_load_rejects_tampered_blocks(tmp_path, rng):
    team = build_team(tiny_env("CN"), tiny_train("MD-MADDPG"), rng)
    team.agents[0].critic[0] = np.zeros((3, 3))
    save_team(team, tmp_path)
    with pytest.raises(IncompatibilityError):
        load_team(tmp_path)


def test_memory_snapshots_follow_the_turn_order(rng):
    team = build_team(tiny_env("CN", n_agents=3), tiny_train("MD-MADDPG"), rng)
    previous = np.zeros(4)
    for record in episode_steps(team, team.env_config, seed=2):
        for i, turn in enumerate(record.turns):
            np.testing.assert_array_equal(record.memories[i], turn.memory_snapshot)
            np.testing.assert_array_equal(turn.memory_snapshot, previous)
            previous = turn.m_prime


def test_training_fault_writes_diagnostic(tmp_path, monkeypatch):
    def explode(team, buffer, rng):
        raise TrainingFault("critic loss is nan", diagnostic={"agent": 0})

    monkeypatch.setattr(training, "update_round", explode)
    with pytest.raises(TrainingFault):
        train(tiny_train("MD-MADDPG", episodes=3), tiny_env("CN"), output_dir=tmp_path, progress=False)
    assert (tmp_path / "diagnostic" / "agent_1.ckpt").exists()
    fault = json.loads((tmp_path / "diagnostic" / "fault.json").read_text())
    assert fault["agent"] == 0 and fault["episode"] == 0 and fault["steps"] == 10
    assert not (tmp_path / "checkpoint").exists()


@pytest.mark.parametrize("algorithm", ["MD-MADDPG", "MADDPG", "MA-MADDPG"])
@pytest.mark.parametrize("task", ["PO-CN", "SequentialCN", "Waterworld"])
def test_three_agent_training_runs(algorithm, task):
    result = train(tiny_train(algorithm, episodes=2), tiny_env(task, n_agents=3), progress=False)
    assert result.steps == 20 and result.updates > 0
    assert np.isfinite(result.curve[-1]["eval_reward"])


@pytest.mark.parametrize("variant", ["no-context", "no-read", "no-write"])
def test_ablated_variants_train(variant):
    result = train(tiny_train("MD-MADDPG", variant=variant, episodes=2), tiny_env("SyncCN"), progress=False)
    assert result.updates > 0


def test_six_agents_train():
    result = train(tiny_train("MD-MADDPG", episodes=1), tiny_env("CN", n_agents=6), progress=False)
    assert len(result.curve[-1]) == 2 + 6 + 2


@pytest.mark.slow
@pytest.mark.parametrize("n_agents", [3, 6])
def test_many_agent_training_stays_finite(n_agents):
    result = train(tiny_train("MD-MADDPG", episodes=200, eval_interval=50), tiny_env("CN", n_agents=n_agents),
                   progress=False)
    assert result.steps == 200 * 10 and result.updates > 0
    assert all(np.isfinite(row["eval_reward"]) for row in result.curve)
    assert all(np.all(np.isfinite(a)) for nets in result.team.agents for a in nets.actor.flat() + nets.critic)


@pytest.mark.slow
def test_desk_cn_run_closes_half_the_gap_to_zero_distance():
    env_config, train_config, _ = desk_config("desk-cn.json")
    assert train_config.episodes == 2000 and env_config.n_agents == 2
    initial = train(train_config.model_copy(update={"episodes": 0}), env_config, progress=False).team
    trained = train(train_config, env_config, progress=False).team

    random_reward = evaluate(initial, n_episodes=100, seed=1).report.metrics["reward"].mean
    trained_reward = evaluate(trained, n_episodes=100, seed=1).report.metrics["reward"].mean
    assert random_reward < 0.0
    assert trained_reward > random_reward
    # every landmark covered at zero distance scores 0
    assert trained_reward - random_reward >= 0.5 * (0.0 - random_reward)
