import warnings

import numpy as np
import pytest

from ptp import encoder, envsim, gcrl, orchestrator as O, planner, subgoal_cvae as C
from ptp.errors import ConfigError
from ptp.planner import PlanConfig


def test_switch_examples():
    far = np.full((32, 2), 100.0)
    assert O.subgoal_switch(32, 15, np.zeros(2), far, 15, 0.5, 32) == 32
    assert O.subgoal_switch(1, 15, np.zeros(2), far, 15, 0.5, 32) == 2
    near = far.copy()
    near[0] = [0.25, 0.0]  # eps / 2 away
    assert O.subgoal_switch(1, 14, np.zeros(2), near, 15, 0.5, 32) == 2
    assert O.subgoal_switch(1, 14, np.zeros(2), far, 15, 0.5, 32) == 1


def test_switch_uses_current_subgoal_not_last():
    subgoals = np.full((4, 2), 100.0)
    subgoals[-1] = 0.0  # only the final subgoal is close
    assert O.subgoal_switch(1, 3, np.zeros(2), subgoals, 15, 0.5, 4) == 1


def _budget_trace(T, dt=15, K=32):
    subgoals = np.full((K, 2), 100.0)
    k, changes, ks = 1, [], []
    for t in range(1, T + 1):
        k_new = O.subgoal_switch(k, t, np.zeros(2), subgoals, dt, 0.5, K)
        if k_new != k:
            changes.append(t)
        k = k_new
        ks.append(k)
    return changes, ks


def test_switch_trace_time_budget_only():
    changes, ks = _budget_trace(400)
    assert changes == list(range(15, 401, 15))
    assert ks[-1] == 1 + 400 // 15
    # run long enough to exhaust the plan: the index stops at K
    changes, ks = _budget_trace(600)
    assert changes == list(range(15, 15 * 31 + 1, 15))
    assert max(ks) == 32 and ks[-1] == 32


def test_run_config_validation():
    with pytest.raises(ConfigError):
        O.RunConfig(env_steps_per_epoch=0)
    with pytest.raises(ConfigError):
        O.RunConfig(seeds=[])
    with pytest.raises(ConfigError):
        O.RunConfig(eps_reach=0.0)


@pytest.fixture(scope="module")
def tiny():
    ds = envsim.generate_offline_dataset(60, 1)
    stats = encoder.fit(ds)
    rng = np.random.default_rng(0)
    models = [C.init_cvae(i + 1, dt, rng, hidden=(16,)) for i, dt in enumerate((5, 10, 20))]
    agent = gcrl.init_agent(rng, cfg=gcrl.IqlConfig(hidden=(16, 16)))
    cfg = O.RunConfig(
        pretrain_epochs=1, finetune_epochs=2, env_steps_per_epoch=50, train_iters_per_epoch=3,
        eval_episodes_per_epoch=2, episode_horizon=20, batch_size=32,
    )
    return ds, stats, models, agent, cfg


def bundle(stats, models, enabled=True):
    return O.PlannerBundle(stats, models, PlanConfig(N=16, mppi_iters=1), enabled=enabled)


def test_episode_stores_T_transitions_and_commits_plan(tiny):
    ds, stats, models, agent, cfg = tiny
    b = bundle(stats, models)
    online = gcrl.ReplayBuffer(8)
    rec, ep = O.finetune_episode(agent, b, envsim.TASKS["A"], cfg, seed=3, online=online)
    assert len(rec["actions"]) == cfg.episode_horizon == len(online)
    assert ep.subgoals_total == 32
    assert b.buffers.sizes() == {1: 1, 2: 1, 3: 1}
    assert online.gather(np.arange(len(online))).done[-1]


def test_model_free_commands_final_goal(tiny):
    ds, stats, models, agent, cfg = tiny
    b = bundle(stats, [], enabled=False)
    rec, ep, plan_ = O.run_episode(agent, b, envsim.TASKS["A"], cfg, 4, "stochastic")
    assert plan_ is None and ep.subgoals_total == 1
    task = envsim.TASKS["A"]
    s0 = task.initial_state(O.subseed(4, "reset"))
    hg = encoder.encode(stats, task.sample_goal(s0, O.subseed(4, "goal")))
    np.testing.assert_array_equal(rec["goals"], np.repeat(hg[None], cfg.episode_horizon, axis=0))
    assert set(ep.k_trace) == {1}


def test_planning_failure_aborts_without_transitions(tiny, monkeypatch):
    ds, stats, models, agent, cfg = tiny
    b = bundle(stats, models)

    def boom(*a, **k):
        raise O.PlanningError("no finite candidate")

    monkeypatch.setattr(planner, "plan", boom)
    online = gcrl.ReplayBuffer(8)
    rec, ep = O.finetune_episode(agent, b, envsim.TASKS["A"], cfg, 5, online)
    assert rec is None and ep.aborted and len(online) == 0


def test_evaluate_deterministic_and_side_effect_free(tiny):
    ds, stats, models, agent, cfg = tiny
    b = bundle(stats, models)
    b.buffers[3].append(np.zeros((8, 8)))
    snap = b.buffers.snapshot()
    weights = [a.copy() for a in agent.policy.arrays()]
    r1 = O.evaluate(agent, b, envsim.TASKS["A"], 3, 9, cfg)
    r2 = O.evaluate(agent, b, envsim.TASKS["A"], 3, 9, cfg)
    assert r1 == r2
    assert b.buffers.sizes() == {1: 0, 2: 0, 3: 1}
    np.testing.assert_array_equal(b.buffers[3][0], snap[3][0])
    for a, w in zip(agent.policy.arrays(), weights):
        np.testing.assert_array_equal(a, w)


def test_evaluate_zero_episodes_warns(tiny):
    ds, stats, models, agent, cfg = tiny
    with pytest.warns(UserWarning):
        assert O.evaluate(agent, bundle(stats, models), envsim.TASKS["A"], 0, 0, cfg) == 0.0


def test_untrained_agent_rarely_solves_task_a(tiny):
    ds, stats, models, agent, cfg = tiny
    run = O.RunConfig(episode_horizon=120)
    assert O.evaluate(agent, bundle(stats, models), envsim.TASKS["A"], 20, 0, run) <= 0.1


def test_pretrain_zero_epochs_changes_nothing(tiny):
    ds, stats, models, agent, cfg = tiny
    from dataclasses import replace

    out, _ = O.pretrain(ds, agent, models, replace(cfg, pretrain_epochs=0), stats=stats)
    for a, b in zip(out.policy.arrays(), agent.policy.arrays()):
        np.testing.assert_array_equal(a, b)


def test_pretrain_empty_dataset_rejected(tiny):
    _, stats, models, agent, cfg = tiny
    with pytest.raises(ConfigError):
        O.pretrain([], agent, models, cfg, stats=stats)


def test_pretrain_deterministic_with_negative_epochs(tiny, tmp_path):
    ds, stats, models, agent, cfg = tiny
    rows_a, rows_b = [], []
    a, _ = O.pretrain(ds, agent, models, cfg, stats=stats, seed=2, metrics=rows_a, checkpoint=O.Checkpointer(tmp_path / "a"))
    b, _ = O.pretrain(ds, agent, models, cfg, stats=stats, seed=2, metrics=rows_b, checkpoint=O.Checkpointer(tmp_path / "b"))
    for name in ("agent_policy.bin", "agent_v.bin", "agent_q1.bin"):
        assert (tmp_path / "a" / "agent_latest" / name).read_bytes() == (tmp_path / "b" / "agent_latest" / name).read_bytes()
    assert [r["epoch"] for r in rows_a] == [-1]
    assert rows_a == rows_b


def test_finetune_epoch_accounting(tiny):
    ds, stats, models, agent, cfg = tiny
    offline, _ = O.encode_dataset(stats, ds)
    rows = []
    b = bundle(stats, models)
    new, online = O.finetune(agent, b, offline, envsim.TASKS["A"], cfg, 0, metrics=rows)
    # 50 steps per epoch as episodes of 20, 20 and 10 steps
    assert len(online) == cfg.finetune_epochs * cfg.env_steps_per_epoch
    assert online.traj_len == [20, 20, 10] * cfg.finetune_epochs
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert all(r["phase"] == "online" for r in rows)
    assert b.buffers.sizes()[1] == 6
    assert new is not agent


def test_metrics_csv_roundtrip(tmp_path):
    rows = [
        {"epoch": -1, "phase": "offline", "success_rate": 0.5, "value_loss": 0.1},
        {"epoch": 0, "phase": "online", "success_rate": 0.25},
    ]
    O.write_metrics(rows, tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.split(",") == list(O.METRIC_COLUMNS)
    back = O.read_metrics(tmp_path / "m.csv")
    assert back[0]["epoch"] == -1 and back[0]["success_rate"] == 0.5
    assert np.isnan(back[1]["value_loss"])


def test_substreams_are_independent_and_reproducible():
    a = O.substream(0, "env").random(3)
    np.testing.assert_array_equal(a, O.substream(0, "env").random(3))
    assert not np.array_equal(a, O.substream(0, "rl").random(3))
    assert not np.array_equal(a, O.substream(1, "env").random(3))
