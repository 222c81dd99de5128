import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgcrlab.envs import (
    DiscreteTwinEnv,
    EnvConfig,
    OfflineDataset,
    SynthRecEnv,
    Transition,
    generate_offline_dataset,
    ingest_ratings,
    item_embedding,
    uniform_policy,
)
from pgcrlab.scm import interventional_next_state
from pgcrlab.wasserstein import w1_empirical


@pytest.fixture(scope="module")
def env():
    return SynthRecEnv()


def test_reward_params_zero_on_circ(env):
    assert not env.reward_params[env.circ_slice].any()
    assert env.reward_params[env.crc_slice].any()


def test_zero_noise_step_is_repeatable():
    env = SynthRecEnv(transition_noise=0.0, reward_noise=0.0, circ_std=0.0)
    s = env.reset(np.random.default_rng(0))
    a = np.full(env.action_dim, 0.3)
    a1 = env.step(s, a, np.random.default_rng(1))
    a2 = env.step(s, a, np.random.default_rng(2))
    assert a1[0].tobytes() == a2[0].tobytes() and a1[1] == a2[1]


def test_done_at_horizon():
    env = SynthRecEnv(horizon=3)
    s, rng = env.reset(np.random.default_rng(0)), np.random.default_rng(0)
    dones = [env.step(s, np.zeros(4), rng, t)[2] for t in range(3)]
    assert dones == [False, False, True]


def test_step_dimension_errors(env):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        env.step(np.zeros(3), np.zeros(env.action_dim), rng)
    with pytest.raises(ValueError):
        env.step(np.zeros(env.state_dim), np.zeros(7), rng)
    with pytest.raises(ValueError):
        EnvConfig(horizon=0)


def test_reward_circ_invariance(env):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = rng.normal(size=env.state_dim) * 2
        a = rng.uniform(-1, 1, env.action_dim)
        delta = np.zeros(env.state_dim)
        delta[env.circ_slice] = rng.normal(size=env.d_circ) * 5
        assert env.reward_mean(s, a) == env.reward_mean(s + delta, a)


def test_reward_noise_mean_matches_closed_form(env):
    rng = np.random.default_rng(3)
    s = env.reset(rng)
    a = rng.uniform(-1, 1, env.action_dim)
    n = 10_000
    rewards = np.array([env.step(s, a, rng)[1] for _ in range(n)])
    sigma = env.config.reward_noise / math.sqrt(n)
    assert abs(rewards.mean() - env.reward_mean(s, a)) < 3 * sigma


def test_catalog_maps_to_nearest_item():
    env = SynthRecEnv(catalog_size=5)
    a = env.item_catalog[2] + 1e-3
    np.testing.assert_array_equal(env.to_item(a), env.item_catalog[2])


def test_intervention_matches_step_without_noise():
    env = SynthRecEnv(transition_noise=0.0, circ_std=0.0)
    s = env.reset(np.random.default_rng(0))
    a = np.linspace(-1, 1, env.action_dim)
    np.testing.assert_array_equal(env.apply_intervention(s, a, np.random.default_rng(5)), env.step(s, a, np.random.default_rng(6))[0])


def test_intervened_action_moves_crc_only(env):
    s = env.reset(np.random.default_rng(0))
    s1 = env.apply_intervention(s, np.ones(env.action_dim), np.random.default_rng(9))
    s2 = env.apply_intervention(s, -np.ones(env.action_dim), np.random.default_rng(9))
    np.testing.assert_array_equal(s1[env.circ_slice], s2[env.circ_slice])
    assert np.abs(s1[env.crc_slice] - s2[env.crc_slice]).max() > 0


@pytest.mark.parametrize("a_val", [0, 1])
def test_twin_intervention_matches_tabular_model(a_val):
    twin = DiscreteTwinEnv(initial=(0.3, 0.7))
    scm = twin.to_scm({(s, 0): s for s in twin.states})
    exact = interventional_next_state(scm, a_val)
    rng = np.random.default_rng(a_val)
    n = 40_000
    hits = 0
    action = np.array([1.0 if a_val else -1.0])
    for _ in range(n):
        hits += int(twin.apply_intervention(twin.reset(rng), action, rng)[0])
    p = exact.prob(1)
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_one_episode_dataset(env):
    small = SynthRecEnv(horizon=3)
    data = generate_offline_dataset(small, uniform_policy(small.action_dim), 1, seed=0)
    assert [t.t for t in data.transitions] == [0, 1, 2]
    assert [t.done for t in data.transitions] == [False, False, True]


def test_dataset_is_deterministic():
    env = SynthRecEnv(horizon=5)
    a = generate_offline_dataset(env, uniform_policy(env.action_dim), 4, seed=7)
    b = generate_offline_dataset(env, uniform_policy(env.action_dim), 4, seed=7)
    assert a.to_jsonl() == b.to_jsonl()
    assert a.metadata["env"] == env.fingerprint()


def test_uniform_behaviour_marginal():
    env = SynthRecEnv(horizon=10)
    data = generate_offline_dataset(env, uniform_policy(env.action_dim), 250, seed=1)
    actions = data.arrays()[1].ravel()
    n = actions.size
    counts = np.histogram(actions, bins=4, range=(-1, 1))[0]
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sigma)
    assert data.arrays()[1].min() >= -1 and data.arrays()[1].max() <= 1


def test_dataset_round_trip(tmp_path):
    env = SynthRecEnv(horizon=4)
    data = generate_offline_dataset(env, uniform_policy(env.action_dim), 3, seed=2)
    path = tmp_path / "d.jsonl"
    data.save(path)
    back = OfflineDataset.load(path)
    assert back.metadata == data.metadata
    assert back.to_jsonl() == data.to_jsonl()
    for x, y in zip(back.arrays(), data.arrays()):
        assert x.tobytes() == y.tobytes()


def test_dataset_invariants_enforced():
    tr = lambda ep, t: Transition(np.zeros(2), np.zeros(1), 0.0, np.zeros(2), False, ep, t)
    with pytest.raises(ValueError):
        OfflineDataset([tr(0, 0), tr(1, 0), tr(0, 1)])
    with pytest.raises(ValueError):
        OfflineDataset([tr(0, 1), tr(0, 1)])
    with pytest.raises(ValueError):
        OfflineDataset.from_jsonl('{"metadata": {}}\n{"t": 0}\n')


def _write(tmp_path, rows, name="r.csv"):
    path = tmp_path / name
    path.write_text("\n".join(rows) + "\n")
    return path


def test_two_ratings_one_transition(tmp_path):
    data = ingest_ratings(_write(tmp_path, ["u,a,3,1", "u,b,5,2"]), k=1)
    assert len(data) == 1
    assert data.transitions[0].reward == 5.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_row_count_conservation(tmp_path_factory, sizes):
    rows = [f"user{u},item{i},{i % 5},{i}" for u, n in enumerate(sizes) for i in range(n)]
    path = _write(tmp_path_factory.mktemp("r"), rows)
    assert len(ingest_ratings(path, k=1)) == sum(max(0, n - 1) for n in sizes)


def test_six_row_fixture(tmp_path):
    rows = ["user\titem\trating\ttimestamp", "A\tx\t4\t30", "A\ty\t2\t10", "B\tz\t5\t5", "A\tz\t1\t20", "B\tx\t3\t6", "C\ty\t1\t1"]
    data = ingest_ratings(_write(tmp_path, rows, "r.tsv"), k=2, dim=4)
    ex, ey, ez = (item_embedding(i, 4) for i in "xyz")
    f = lambda e, r: np.concatenate([e, [r]])
    zero = np.zeros(5)
    # A sorted by time: y(2) z(1) x(4); B: z(5) x(3); C has one row
    expected = [
        (0, 0, np.concatenate([zero, f(ey, 2)]), ez, 1.0, np.concatenate([f(ey, 2), f(ez, 1)]), False),
        (0, 1, np.concatenate([f(ey, 2), f(ez, 1)]), ex, 4.0, np.concatenate([f(ez, 1), f(ex, 4)]), True),
        (1, 0, np.concatenate([zero, f(ez, 5)]), ex, 3.0, np.concatenate([f(ez, 5), f(ex, 3)]), True),
    ]
    assert len(data) == len(expected)
    for tr, (ep, t, s, a, r, s2, done) in zip(data.transitions, expected):
        assert (tr.episode_id, tr.t, tr.reward, tr.done) == (ep, t, r, done)
        np.testing.assert_array_equal(tr.state, s)
        np.testing.assert_array_equal(tr.action, a)
        np.testing.assert_array_equal(tr.next_state, s2)


def test_ratings_errors(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        ingest_ratings(_write(tmp_path, [""], "e.csv"))
    with pytest.raises(ValueError, match="line 2"):
        ingest_ratings(_write(tmp_path, ["u,a,3,1", "u,b,5"], "m.csv"))
    with pytest.raises(ValueError, match="line 3"):
        ingest_ratings(_write(tmp_path, ["u,a,3,1", "u,b,5,2", "u,c,bad,3"], "n.csv"))


def test_item_embedding_unit_norm():
    for item in ("a", "b", "42", "movie-7"):
        e = item_embedding(item)
        assert abs(np.linalg.norm(e) - 1.0) < 1e-12
        np.testing.assert_array_equal(e, item_embedding(item))


def test_w1_separates_crc_preserving_from_crc_corrupting(env):
    keep, corrupt = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        states = env.sample_states(rng, 64)
        swap = env.sample_states(rng, 64)
        r = [env.step(s, env.myopic_action(s), rng)[1] for s in states]
        kept, broke = states.copy(), states.copy()
        kept[:, env.circ_slice] = swap[:, env.circ_slice]
        broke[:, env.crc_slice] = swap[:, env.crc_slice]
        r_keep = [env.step(s2, env.myopic_action(s), rng)[1] for s, s2 in zip(states, kept)]
        r_broke = [env.step(s2, env.myopic_action(s), rng)[1] for s, s2 in zip(states, broke)]
        keep.append(w1_empirical(r, r_keep))
        corrupt.append(w1_empirical(r, r_broke))
    assert np.mean(keep) < np.mean(corrupt)
