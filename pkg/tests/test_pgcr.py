from dataclasses import replace

import numpy as np
import pytest

from pgcrlab import oracles
from pgcrlab.agents import ActorCritic, AgentConfig
from pgcrlab.causal_policy import CausalAgent, CausalConfig
from pgcrlab.envs import SynthRecEnv, generate_offline_dataset, uniform_policy
from pgcrlab.eval import circ_sensitivity
from pgcrlab.nn import Mlp
from pgcrlab.pgcr import (
    Encoder,
    LatentScaler,
    PgcrConfig,
    RecPolicy,
    act_latent,
    encoder_loss,
    encoder_loss_grads,
    latent_variance,
    modified_state,
    train_pgcr,
)
from pgcrlab.pipeline import derive_seed

SMALL_AGENT = AgentConfig(hidden=16, batch=16)
SMALL_PGCR = PgcrConfig(latent_dim=3, encoder_hidden=8, encoder_batch=16, epochs=2)


@pytest.fixture(scope="module")
def small_env():
    return SynthRecEnv(d_crc=3, d_circ=3, action_dim=2, horizon=5)


@pytest.fixture(scope="module")
def small_data(small_env):
    return generate_offline_dataset(small_env, uniform_policy(2), 8, seed=0)


def constant_causal_agent(env, value=0.5):
    agent = CausalAgent.create(env, CausalConfig(agent=SMALL_AGENT), 0)
    actor = agent.actor_critic.actor
    actor.weights[-1][...] = 0.0
    actor.biases[-1][...] = np.arctanh(value)
    actor.touch()
    return agent


def crc_only_encoder(env, latent_dim=3):
    enc = Encoder(env.state_dim, latent_dim, 8, seed=1)
    enc.net.weights[0][env.circ_slice] = 0.0
    enc.net.touch()
    return enc


# -- modified states --------------------------------------------------------------


def test_modified_state_is_successor_under_scripted_action():
    env = SynthRecEnv(d_crc=3, d_circ=3, action_dim=2, transition_noise=0.0, circ_std=0.0)
    agent = constant_causal_agent(env, 0.5)
    s = env.reset(np.random.default_rng(0))
    s_i = modified_state(agent, env, s, np.random.default_rng(1))
    expected = env.step(s, np.full(2, 0.5), np.random.default_rng(2))[0]
    np.testing.assert_allclose(s_i, expected, rtol=0, atol=1e-15)
    assert s_i.shape == s.shape


def test_modified_state_dimension_check(small_env):
    agent = constant_causal_agent(small_env)
    with pytest.raises(ValueError):
        modified_state(agent, small_env, np.zeros(4), np.random.default_rng(0))


# -- encoder loss -------------------------------------------------------------------


def test_loss_zero_on_identical_states(small_env):
    enc = Encoder(small_env.state_dim, 3, 8)
    s = np.random.default_rng(0).normal(size=(5, 6))
    assert encoder_loss(enc, s, s) == 0.0


def test_loss_one_dimensional_value():
    net = Mlp([1, 1], ["identity"])
    net.set_params([np.ones((1, 1)), np.zeros(1)])
    phi = Encoder.from_net(net)
    assert encoder_loss(phi, np.array([[0.3]]), np.array([[0.5]])) == pytest.approx(0.04, abs=1e-15)


@pytest.mark.parametrize("normalize", [True, False])
def test_loss_gradient_matches_finite_differences(normalize):
    rng = np.random.default_rng(4)
    for _ in range(5):
        enc = Encoder(5, 4, 6, int(rng.integers(1000)), normalize=normalize)
        s, s_i = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        value, grads = encoder_loss_grads(enc, s, s_i)
        assert value == pytest.approx(encoder_loss(enc, s, s_i), rel=1e-12)
        numeric = oracles.central_difference(lambda: encoder_loss(enc, s, s_i), enc.net.params, eps=1e-5)
        assert oracles.relative_error(grads, numeric) < 1e-4


def test_loss_symmetric_and_zero_iff_codes_equal(small_env):
    rng = np.random.default_rng(5)
    enc = crc_only_encoder(small_env)
    s, s_i = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    assert encoder_loss(enc, s, s_i) == encoder_loss(enc, s_i, s)
    assert encoder_loss(enc, s, s_i) > 0
    same_crc = s_i.copy()
    same_crc[:, small_env.crc_slice] = s[:, small_env.crc_slice]
    assert encoder_loss(enc, s, same_crc) == 0.0


def test_loss_shape_check(small_env):
    enc = Encoder(small_env.state_dim, 3, 8)
    with pytest.raises(ValueError):
        encoder_loss(enc, np.zeros((2, 6)), np.zeros((3, 6)))


def test_encoder_output_finite_and_standardised(small_env):
    enc = Encoder(small_env.state_dim, 4, 8)
    z = enc(np.random.default_rng(0).normal(size=(10, 6)) * 100)
    assert np.isfinite(z).all()
    np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-12)


# -- latent policy ---------------------------------------------------------------------


def test_duplicate_state_gives_identical_action(small_env):
    policy = RecPolicy(ActorCritic(3, 2, SMALL_AGENT), Encoder(6, 3, 8))
    s = np.random.default_rng(0).normal(size=6)
    assert act_latent(policy, policy.encoder, s).tobytes() == act_latent(policy, policy.encoder, s.copy()).tobytes()


def test_action_depends_on_state_only_through_code(small_env):
    enc = crc_only_encoder(small_env)
    policy = RecPolicy(ActorCritic(3, 2, SMALL_AGENT), enc, LatentScaler(np.full(3, 0.1), np.full(3, 2.0)))
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = rng.normal(size=6)
        t = s.copy()
        t[small_env.circ_slice] = rng.normal(size=3) * 10
        assert np.array_equal(enc(s), enc(t))
        assert np.array_equal(policy.act(s), policy.act(t))


def test_act_latent_dimension_checks():
    policy = RecPolicy(ActorCritic(3, 2, SMALL_AGENT), Encoder(6, 3, 8))
    with pytest.raises(ValueError):
        act_latent(policy, policy.encoder, np.zeros(5))
    with pytest.raises(ValueError):
        act_latent(RecPolicy(ActorCritic(4, 2, SMALL_AGENT)), Encoder(6, 3, 8), np.zeros(6))


def test_latent_scaler():
    codes = np.random.default_rng(0).normal(2.0, 3.0, size=(50, 3))
    sc = LatentScaler.fit(codes)
    out = sc(codes)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(LatentScaler.identity(3)(codes), codes)
    assert LatentScaler.fit(np.ones((4, 2))).scale.min() > 0


# -- training ---------------------------------------------------------------------------


def test_zero_epochs_returns_initialisation(small_env, small_data):
    cfg = replace(SMALL_PGCR, epochs=0, seed=7)
    res = train_pgcr(small_data, constant_causal_agent(small_env), small_env, "ddpg", cfg, SMALL_AGENT)
    fresh = Encoder(small_env.state_dim, cfg.latent_dim, cfg.encoder_hidden, cfg.seed)
    agent = ActorCritic(cfg.latent_dim, 2, SMALL_AGENT, "ddpg", cfg.seed)
    assert res.encoder.net.checksum() == fresh.net.checksum()
    assert res.policy.agent.actor.checksum() == agent.actor.checksum()
    assert res.trace.rows == []


@pytest.mark.parametrize("kind", ["ddpg", "td3"])
def test_training_is_deterministic(small_env, small_data, kind):
    causal = constant_causal_agent(small_env)
    runs = [train_pgcr(small_data, causal, small_env, kind, SMALL_PGCR, SMALL_AGENT) for _ in range(2)]
    assert runs[0].encoder.net.checksum() == runs[1].encoder.net.checksum()
    assert runs[0].policy.agent.actor.checksum() == runs[1].policy.agent.actor.checksum()
    assert np.array_equal(runs[0].policy.scaler.scale, runs[1].policy.scaler.scale)
    assert len(runs[0].trace.rows) == SMALL_PGCR.epochs * int(np.ceil(len(small_data) / SMALL_PGCR.encoder_batch))


def test_random_state_variant_needs_no_causal_agent(small_env, small_data):
    res = train_pgcr(small_data, None, small_env, "ddpg", SMALL_PGCR, SMALL_AGENT, variant="pgcr_c")
    assert res.metadata["variant"] == "pgcr_c"
    with pytest.raises(ValueError):
        train_pgcr(small_data, None, small_env, "ddpg", SMALL_PGCR, SMALL_AGENT)
    with pytest.raises(ValueError):
        train_pgcr(small_data, None, small_env, "ddpg", SMALL_PGCR, SMALL_AGENT, variant="other")


def test_raw_mode_without_simulator(small_data):
    res = train_pgcr(small_data, None, None, "ddpg", SMALL_PGCR, SMALL_AGENT)
    assert res.encoder is None and res.metadata["encoder"].startswith("skipped")
    assert res.policy.act(np.zeros(6)).shape == (2,)


def test_trace_csv(tmp_path, small_env, small_data):
    res = train_pgcr(small_data, constant_causal_agent(small_env), small_env, "ddpg", SMALL_PGCR, SMALL_AGENT)
    path = tmp_path / "trace.csv"
    res.trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,batch,mse_loss,critic_loss,actor_obj,latent_variance"
    assert len(lines) == len(res.trace.rows) + 1


def test_config_validation():
    with pytest.raises(ValueError):
        PgcrConfig(latent_dim=0)
    with pytest.raises(ValueError):
        PgcrConfig(joint_rl_weight=-1.0)


# -- end-to-end properties on the default environment -----------------------------------------


def _circ_probe(policy, env, seed, n=100, dims=None):
    """Mean action change when only some dims of a state (CIRC by default) are redrawn."""
    dims = env.circ_slice if dims is None else dims
    rng = np.random.default_rng(seed)
    states = env.sample_states(rng, n)
    other = env.sample_states(rng, n)
    moved = states.copy()
    moved[:, dims] = other[:, dims]
    return float(np.linalg.norm(policy.act(states) - policy.act(moved), axis=1).mean())


def _untrained(run, cfg):
    env = SynthRecEnv(cfg.env)
    pcfg = replace(cfg.pgcr, epochs=0, seed=derive_seed(run.seed, "pgcr"))
    return train_pgcr(run.dataset, run.causal, env, "ddpg", pcfg, cfg.agent)


@pytest.mark.slow
def test_latent_variance_guard_holds(pipeline_runs):
    for run in pipeline_runs["runs"].values():
        for res in run.pgcr.values():
            assert res.trace.column("latent_variance").min() > 1e-4


@pytest.mark.slow
def test_pure_pairing_loss_collapses(pipeline_runs):
    """Without the critic gradient and the code standardisation the pairing loss
    alone drives every code to the same point."""
    cfg = pipeline_runs["config"]
    run = pipeline_runs["runs"][0]
    env = SynthRecEnv(cfg.env)
    pcfg = replace(cfg.pgcr, joint_rl_weight=0.0, encoder_normalize=False, seed=derive_seed(0, "pgcr"))
    res = train_pgcr(run.dataset, run.causal, env, "ddpg", pcfg, cfg.agent)
    assert res.trace.column("latent_variance")[-1] < 1e-4


@pytest.mark.slow
def test_epoch_mean_pairing_loss_non_increasing(pipeline_runs):
    for run in pipeline_runs["runs"].values():
        trace = run.pgcr["ddpg"].trace
        epochs, mse = trace.column("epoch"), trace.column("mse_loss")
        means = np.array([mse[epochs == e].mean() for e in np.unique(epochs)])
        assert np.all(np.diff(means) <= 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="per-batch pairing loss is noisy; window-20 rolling mean is not monotone")
def test_window20_pairing_loss_non_increasing(pipeline_runs):
    for run in pipeline_runs["runs"].values():
        mse = run.pgcr["ddpg"].trace.column("mse_loss")
        smooth = np.convolve(mse, np.ones(20) / 20, mode="valid")
        assert np.all(np.diff(smooth) <= 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="trained policies still move by about 0.5 when CIRC dims are redrawn")
def test_circ_only_action_change_below_threshold(pipeline_runs):
    env = SynthRecEnv(pipeline_runs["config"].env)
    for run in pipeline_runs["runs"].values():
        assert _circ_probe(run.pgcr["ddpg"].policy, env, run.seed) < 0.05


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="untrained actors emit near-constant small actions, about 0.12 vs 0.5 trained")
def test_untrained_policy_reacts_more_to_circ(pipeline_runs):
    cfg = pipeline_runs["config"]
    env = SynthRecEnv(cfg.env)
    for run in pipeline_runs["runs"].values():
        trained = _circ_probe(run.pgcr["ddpg"].policy, env, run.seed)
        untrained = _circ_probe(_untrained(run, cfg).policy, env, run.seed)
        assert untrained > 1.5 * trained


@pytest.mark.slow
def test_training_shifts_policy_response_toward_crc(pipeline_runs):
    """CIRC-redraw over CRC-redraw action change, which is free of the action scale."""
    cfg = pipeline_runs["config"]
    env = SynthRecEnv(cfg.env)

    def relative(policy, seed):
        return _circ_probe(policy, env, seed) / _circ_probe(policy, env, seed, dims=env.crc_slice)

    for run in pipeline_runs["runs"].values():
        trained = relative(run.pgcr["ddpg"].policy, run.seed)
        untrained = relative(_untrained(run, cfg).policy, run.seed)
        assert trained < 0.5 * untrained


@pytest.mark.slow
def test_trained_causal_agent_preserves_crc(pipeline_runs):
    env = SynthRecEnv(pipeline_runs["config"].env)
    for run in pipeline_runs["runs"].values():
        rng = np.random.default_rng(1000 + run.seed)
        learned, random = [], []
        for k, s in enumerate(env.sample_states(rng, 20)):
            target = env.apply_intervention(s, run.expert.act(s), np.random.default_rng(k))
            s_i = modified_state(run.causal, env, s, np.random.default_rng(k))
            s_r = env.apply_intervention(s, rng.uniform(-1, 1, env.action_dim), np.random.default_rng(k))
            learned.append(np.linalg.norm((s_i - target)[env.crc_slice]))
            random.append(np.linalg.norm((s_r - target)[env.crc_slice]))
        assert np.mean(learned) < np.mean(random)


@pytest.mark.slow
def test_random_state_encoder_less_circ_invariant(pipeline_runs):
    env = SynthRecEnv(pipeline_runs["config"].env)
    holds = 0
    for run in pipeline_runs["runs"].values():
        ratio = circ_sensitivity(run.pgcr["ddpg"].encoder, env, seed=run.seed)
        ratio_c = circ_sensitivity(run.pgcr_c["ddpg"].encoder, env, seed=run.seed)
        holds += ratio_c > ratio
    assert holds >= 4

