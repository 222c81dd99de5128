import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgcrlab import oracles
from pgcrlab.errors import PreconditionError
from pgcrlab.scm import (
    Dag,
    FiniteDist,
    TabularMdp,
    TabularScm,
    backdoor_adjusted,
    conditional,
    d_separated,
    greedy_policy,
    intervene,
    interventional_next_state,
    interventional_reward,
    load_model,
    marginal,
    mdp_scm,
    satisfies_backdoor,
    scm_from_dict,
    scm_to_dict,
    value_iteration,
)

seeds = st.integers(0, 2**32 - 1)


def confounded_scm(p_c=0.3, flip=0.2):
    """c -> x, c -> y, x -> y with y = x + c."""
    dag = Dag.from_edges(3, [(0, 1), (0, 2), (1, 2)])
    c_mech = {((), 0): 0, ((), 1): 1}
    x_mech = {((c,), u): c ^ u for c in (0, 1) for u in (0, 1)}
    y_mech = {((c, x), 0): c + x for c in (0, 1) for x in (0, 1)}
    noise = (FiniteDist((0, 1), (1 - p_c, p_c)), FiniteDist((0, 1), (1 - flip, flip)), FiniteDist.point_mass(0))
    return TabularScm(dag, ((0, 1), (0, 1), (0, 1, 2)), (c_mech, x_mech, y_mech), noise, ("c", "x", "y"))


def small_mdp_scm(rng, n_states=3, n_actions=2, reward_fn=None, single_action=False):
    states, actions = tuple(range(n_states)), tuple(range(n_actions))
    sd = rng.dirichlet(np.ones(n_states))
    sd[-1] = 1.0 - math.fsum(sd[:-1])
    state_dist = FiniteDist(states, tuple(sd))
    policy_noise = FiniteDist((0, 1), (0.4, 0.6))
    if single_action:
        policy = {(s, e): 0 for s in states for e in (0, 1)}
    else:
        policy = {(s, e): int(rng.integers(n_actions)) for s in states for e in (0, 1)}
    eps = FiniteDist((0, 1, 2), (0.2, 0.3, 0.5))
    transition = {(s, a, e): int(rng.integers(n_states)) for s in states for a in actions for e in range(3)}
    reward_fn = reward_fn or (lambda s, a: float(s + 2 * a))
    reward = {(s, a): reward_fn(s, a) for s in states for a in actions}
    return mdp_scm(states, actions, state_dist, policy, policy_noise, transition, eps, reward)


def assert_dist_close(p, q, tol=1e-12):
    support = set(p.support) | set(q.support)
    assert max(abs(p.prob(v) - q.prob(v)) for v in support) <= tol


# -- graphs ------------------------------------------------------------------


def test_dag_rejects_cycles_self_loops():
    with pytest.raises(ValueError):
        Dag.from_edges(3, [(0, 1), (1, 2), (2, 0)])
    with pytest.raises(ValueError):
        Dag.from_edges(2, [(1, 1)])


def test_chain_blocked_by_middle():
    dag = Dag.from_edges(3, [(0, 1), (1, 2)])
    assert d_separated(dag, {0}, {2}, {1})
    assert not d_separated(dag, {0}, {2}, set())


def test_conditioned_collider_opens_path():
    dag = Dag.from_edges(3, [(0, 1), (2, 1)])
    assert not d_separated(dag, {0}, {2}, {1})
    assert d_separated(dag, {0}, {2}, set())


def test_collider_descendant_opens_path():
    dag = Dag.from_edges(4, [(0, 1), (2, 1), (1, 3)])
    assert not d_separated(dag, {0}, {2}, {3})


def test_d_separated_argument_errors():
    dag = Dag.from_edges(3, [(0, 1), (1, 2)])
    with pytest.raises(ValueError):
        d_separated(dag, {0}, {0, 2}, set())
    with pytest.raises(ValueError):
        d_separated(dag, {0}, {5}, set())


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_d_separated_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    dag = oracles.random_dag(rng, n, edge_prob=float(rng.uniform(0.1, 0.6)))
    perm = [int(v) for v in rng.permutation(n)]
    nx = int(rng.integers(1, n))
    ny = int(rng.integers(1, n - nx + 1))
    nz = int(rng.integers(0, n - nx - ny + 1))
    x, y, z = perm[:nx], perm[nx : nx + ny], perm[nx + ny : nx + ny + nz]
    assert d_separated(dag, x, y, z) == oracles.d_separated_bruteforce(dag, x, y, z)


def test_mdp_graph_state_is_backdoor_set():
    dag = Dag.from_edges(3, [(0, 1), (0, 2), (1, 2)])
    assert satisfies_backdoor(dag, 1, 2, {0})
    assert not satisfies_backdoor(dag, 1, 2, set())


def test_descendant_in_adjustment_set_fails():
    dag = Dag.from_edges(4, [(0, 1), (0, 2), (1, 2), (1, 3)])
    assert not satisfies_backdoor(dag, 1, 2, {0, 3})


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_backdoor_matches_two_condition_checker(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 8))
    dag = oracles.random_dag(rng, n, edge_prob=0.4)
    x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
    others = [v for v in range(n) if v not in (x, y)]
    z = [int(v) for v in rng.choice(others, size=int(rng.integers(0, len(others) + 1)), replace=False)]
    assert satisfies_backdoor(dag, x, y, z) == oracles.backdoor_bruteforce(dag, x, y, z)


# -- distributions and interventions ------------------------------------------


def test_finite_dist_validation():
    with pytest.raises(ValueError):
        FiniteDist((0, 1), (0.5, 0.6))
    with pytest.raises(ValueError):
        FiniteDist((0, 0), (0.5, 0.5))
    with pytest.raises(ValueError):
        FiniteDist((0, 1), (1.5, -0.5))


def test_scm_rejects_incomplete_mechanism():
    dag = Dag.from_edges(1, [])
    with pytest.raises(ValueError):
        TabularScm(dag, ((0, 1),), ({((), 0): 0},), (FiniteDist((0, 1), (0.5, 0.5)),))


def test_uniform_root_identity():
    dag = Dag.from_edges(1, [])
    scm = TabularScm(dag, ((0, 1),), ({((), 0): 0, ((), 1): 1},), (FiniteDist.uniform((0, 1)),))
    assert marginal(scm, 0).probs == (0.5, 0.5)


def test_deterministic_chain_gives_point_mass():
    dag = Dag.from_edges(3, [(0, 1), (1, 2)])
    pm = FiniteDist.point_mass(0)
    mechs = ({((), 0): 1}, {((v,), 0): v + 1 for v in (0, 1)}, {((v,), 0): 2 * v for v in (1, 2)})
    scm = TabularScm(dag, ((0, 1), (1, 2), (2, 4)), mechs, (pm, pm, pm))
    assert marginal(scm, 2).as_dict() == {2: 0.0, 4: 1.0}


def test_marginal_matches_sampling():
    rng = np.random.default_rng(11)
    dag = oracles.random_dag(rng, 4, edge_prob=0.6)
    scm = oracles.random_scm(rng, dag, max_domain=3)
    n = 100_000
    draws = scm.sample(rng, n)
    for v in range(4):
        exact = marginal(scm, v)
        for val, p in zip(exact.support, exact.probs):
            freq = float(np.mean(draws[:, v] == val))
            sigma = math.sqrt(max(p * (1 - p), 1e-12) / n)
            assert abs(freq - p) <= 3 * sigma + 1e-12


def test_intervene_gives_point_mass_and_keeps_input():
    scm = confounded_scm()
    before = marginal(scm, "x")
    mutilated = intervene(scm, "x", 1)
    assert mutilated.dag.parents(1) == ()
    assert marginal(mutilated, "x").as_dict() == {0: 0.0, 1: 1.0}
    assert marginal(scm, "x") == before
    with pytest.raises(ValueError):
        intervene(scm, "x", 7)


def test_noop_intervention_on_root():
    scm = confounded_scm(p_c=0.0)
    same = intervene(scm, "c", 0)
    for v in range(3):
        assert_dist_close(marginal(same, v), marginal(scm, v))


def test_interventions_commute():
    rng = np.random.default_rng(3)
    dag = Dag.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    scm = oracles.random_scm(rng, dag, max_domain=3)
    a = intervene(intervene(scm, 0, 1), 1, 0)
    b = intervene(intervene(scm, 1, 0), 0, 1)
    ja, jb = a.joint(), b.joint()
    assert set(ja) == set(jb)
    assert max(abs(ja[k] - jb[k]) for k in ja) <= 1e-15


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_every_returned_dist_normalised(seed):
    rng = np.random.default_rng(seed)
    dag = oracles.random_dag(rng, int(rng.integers(2, 6)), edge_prob=0.5)
    scm = oracles.random_scm(rng, dag, max_domain=4)
    for v in range(dag.node_count):
        d = marginal(scm, v)
        assert min(d.probs) >= 0.0
        assert abs(math.fsum(d.probs) - 1.0) <= 1e-12


# -- back-door adjustment ---------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_backdoor_adjustment_equals_mutilated_model(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    dag = oracles.random_dag(rng, n, edge_prob=0.45)
    x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
    z = sorted(dag.parents(x))
    if y in z:
        return
    scm = oracles.random_scm(rng, dag, max_domain=4, permutation_nodes=(x,))
    for x_val in scm.domains[x]:
        assert_dist_close(backdoor_adjusted(scm, x, x_val, y, z), marginal(intervene(scm, x, x_val), y))


def test_no_backdoor_path_reduces_to_conditional():
    dag = Dag.from_edges(2, [(0, 1)])
    rng = np.random.default_rng(0)
    scm = oracles.random_scm(rng, dag, max_domain=3, permutation_nodes=(0,))
    for x_val in scm.domains[0]:
        assert_dist_close(backdoor_adjusted(scm, 0, x_val, 1, ()), conditional(scm, 1, {0: x_val}))


def test_confounder_adjustment_differs_from_conditioning():
    scm = confounded_scm()
    adjusted = backdoor_adjusted(scm, "x", 1, "y", ["c"])
    assert_dist_close(adjusted, marginal(intervene(scm, "x", 1), "y"))
    naive = conditional(scm, "y", {"x": 1})
    assert max(abs(adjusted.prob(v) - naive.prob(v)) for v in (0, 1, 2)) > 0.1


def test_backdoor_adjusted_refuses_invalid_set():
    scm = confounded_scm()
    with pytest.raises(PreconditionError):
        backdoor_adjusted(scm, "x", 1, "y", [])


# -- one-step MDP model ---------------------------------------------------------


def test_interventional_next_state_matches_mutilation():
    rng = np.random.default_rng(5)
    scm = small_mdp_scm(rng)
    for a in scm.domains[1]:
        assert_dist_close(interventional_next_state(scm, a), marginal(intervene(scm, "a_t", a), "s_next"))


def test_action_independent_transition_gives_observational_next_state():
    states, actions = (0, 1, 2), (0, 1)
    sd = FiniteDist(states, (0.2, 0.3, 0.5))
    scm = mdp_scm(
        states, actions, sd,
        {(s, e): (s + e) % 2 for s in states for e in (0, 1)}, FiniteDist.uniform((0, 1)),
        {(s, a, 0): (s + 1) % 3 for s in states for a in actions}, FiniteDist.point_mass(0),
        {(s, a): float(a) for s in states for a in actions},
    )
    for a in actions:
        assert_dist_close(interventional_next_state(scm, a), marginal(scm, "s_next"))


def test_point_mass_state_gives_single_row():
    states, actions = (0, 1), (0, 1)
    eps = FiniteDist((0, 1), (0.25, 0.75))
    transition = {(s, a, e): (s + a + e) % 2 for s in states for a in actions for e in (0, 1)}
    scm = mdp_scm(
        states, actions, FiniteDist((0, 1), (0.0, 1.0)),
        {(s, 0): 0 for s in states}, FiniteDist.point_mass(0),
        transition, eps, {(s, a): 0.0 for s in states for a in actions},
    )
    got = interventional_next_state(scm, 1)
    assert got.as_dict() == {0: 0.25, 1: 0.75}


def test_interventional_reward_matches_mutilation():
    rng = np.random.default_rng(9)
    scm = small_mdp_scm(rng)
    for s in scm.domains[0]:
        assert_dist_close(interventional_reward(scm, s), marginal(intervene(scm, "s_t", s), "r_t"))
    with pytest.raises(ValueError):
        interventional_reward(scm, 99)


def test_reward_of_unchanged_component_is_invariant():
    # states 0/1 share the reward-relevant part (s // 2), so swapping them is harmless
    rng = np.random.default_rng(2)
    scm = small_mdp_scm(rng, n_states=4, reward_fn=lambda s, a: float(s // 2), single_action=False)
    assert_dist_close(interventional_reward(scm, 0), interventional_reward(scm, 1))
    assert_dist_close(interventional_reward(scm, 2), interventional_reward(scm, 3))


def test_single_action_policy_reward():
    rng = np.random.default_rng(4)
    scm = small_mdp_scm(rng, single_action=True)
    for s in scm.domains[0]:
        assert interventional_reward(scm, s).as_dict()[float(s)] == 1.0


def test_wrong_graph_rejected():
    with pytest.raises(ValueError):
        interventional_next_state(confounded_scm(), 0)


# -- value iteration ------------------------------------------------------------


def test_gamma_zero_returns_reward():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(3), size=(3, 2))
    R = rng.normal(size=(3, 2))
    q = value_iteration(TabularMdp(P, R, 0.0), tol=1e-12)
    np.testing.assert_allclose(q, R, atol=1e-12)


def test_absorbing_state_geometric_series():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.95)
    q = value_iteration(mdp, tol=1e-10)
    assert abs(q[0, 0] - 20.0) < 1e-8


def test_value_iteration_rejects_bad_inputs():
    with pytest.raises(ValueError):
        TabularMdp(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        value_iteration(TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5), tol=0.0)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_bellman_residual_strictly_decreases(seed):
    rng = np.random.default_rng(seed)
    S, A = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    mdp = TabularMdp(rng.dirichlet(np.ones(S), size=(S, A)), rng.normal(size=(S, A)), float(rng.uniform(0.1, 0.95)))
    history = []
    value_iteration(mdp, tol=1e-9, history=history)
    assert history[-1] < 1e-9
    above = [h for h in history if h >= 1e-9]
    assert all(b < a for a, b in zip(above, above[1:] + [history[-1]]))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_latent_mdp_values_depend_on_latent_only(seed):
    rng = np.random.default_rng(seed)
    mdp, phi = oracles.latent_mdp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    assert oracles.latent_q_gap(mdp, phi) < 1e-8


def test_tag_reward_breaks_latent_equality():
    rng = np.random.default_rng(0)
    mdp, phi = oracles.latent_mdp(rng, 3, 2, 2, tag_reward=1.0)
    assert oracles.latent_q_gap(mdp, phi) > 0.01


def test_greedy_ties_go_to_lowest_index():
    q = np.array([[1.0, 1.0, 0.5], [0.0, 2.0, 2.0]])
    assert greedy_policy(q).tolist() == [0, 1]


# -- serialisation ----------------------------------------------------------------


def test_scm_json_round_trip(tmp_path):
    scm = confounded_scm()
    doc = scm_to_dict(scm)
    path = tmp_path / "scm.json"
    path.write_text(json.dumps(doc))
    back = load_model(path)
    assert back.names == scm.names
    assert back.joint() == scm.joint()


def test_mdp_json_load(tmp_path):
    path = tmp_path / "mdp.json"
    path.write_text(json.dumps({"kind": "mdp", "transition": [[[1.0]]], "reward": [[1.0]], "gamma": 0.5}))
    mdp = load_model(path)
    assert abs(value_iteration(mdp)[0, 0] - 2.0) < 1e-9
    with pytest.raises(ValueError):
        scm_from_dict({"kind": "mdp"})
