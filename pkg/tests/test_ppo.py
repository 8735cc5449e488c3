import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safelora import envs, nn, ppo
from _helpers import policy_with_live_adapters


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Explicit sum_l (gamma lam)^l delta_{t+l}, truncated at the first episode end."""
    T = len(rewards)
    v_next = list(values[1:]) + [bootstrap]
    deltas = [rewards[t] + gamma * (1 - dones[t]) * v_next[t] - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total, coef = 0.0, 1.0
        for l in range(t, T):
            total += coef * deltas[l]
            if dones[l]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.floats(0.0, 0.999), st.floats(0.0, 0.999), st.integers(0, 2**31))
def test_gae_matches_explicit_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(T), rng.standard_normal(T)
    d = (rng.random(T) < 0.3).astype(float)
    boot = float(rng.standard_normal())
    adv, ret = ppo.compute_gae(r, v, d, boot, gamma, lam)
    assert np.allclose(adv, brute_force_gae(r, v, d, boot, gamma, lam), atol=1e-12, rtol=0)
    assert np.allclose(ret, adv + v, atol=1e-15)


def test_gae_lambda_one_gives_discounted_return_minus_value():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, -0.5, 0.25])
    adv, ret = ppo.compute_gae(r, v, np.zeros(3), 4.0, 0.9, 1.0)
    expected = [1 + 0.9 * 2 + 0.81 * 3 + 0.729 * 4, 2 + 0.9 * 3 + 0.81 * 4, 3 + 0.9 * 4]
    assert np.allclose(ret, expected)


def test_gae_terminal_does_not_leak_across_episodes():
    adv, _ = ppo.compute_gae([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], 100.0, 0.99, 0.95)
    assert adv[0] == 0.0 and adv[1] == pytest.approx(99.0)


def test_gae_batch_axis_equals_per_column():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    d = (rng.random((5, 3)) < 0.3).astype(float)
    boot = rng.standard_normal(3)
    adv, _ = ppo.compute_gae(r, v, d, boot, 0.9, 0.8)
    for e in range(3):
        col, _ = ppo.compute_gae(r[:, e], v[:, e], d[:, e], boot[e], 0.9, 0.8)
        assert np.allclose(adv[:, e], col, atol=1e-14)


def test_constant_reward_shift_changes_td_advantage_by_constant():
    # with lam = 0 each advantage is a one-step TD error, so a reward shift passes through
    rng = np.random.default_rng(2)
    r, v = rng.standard_normal(6), rng.standard_normal(6)
    a1, _ = ppo.compute_gae(r, v, np.zeros(6), 0.3, 0.9, 0.0)
    a2, _ = ppo.compute_gae(r + 2.0, v, np.zeros(6), 0.3, 0.9, 0.0)
    assert np.allclose(a2 - a1, 2.0)
    assert np.allclose(ppo.normalize_advantages(a2), ppo.normalize_advantages(a1))


def test_normalize_advantages_respects_mask():
    adv = np.array([1.0, 2.0, 3.0, 100.0])
    mask = np.array([1, 1, 1, 0])
    out = ppo.normalize_advantages(adv, mask)
    assert out[3] == 0.0
    assert out[:3].mean() == pytest.approx(0.0, abs=1e-12)
    assert out[:3].std() == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(ppo.normalize_advantages(adv, np.zeros(4)), np.zeros(4))


def test_gaussian_log_prob_against_formula():
    a, m, ls = np.array([[0.3]]), np.array([[0.1]]), np.array([-0.5])
    s = np.exp(-0.5)
    expected = -0.5 * ((0.2 / s) ** 2) - np.log(s) - 0.5 * np.log(2 * np.pi)
    assert ppo.gaussian_log_prob(a, m, ls)[0] == pytest.approx(expected)


def _batch(net, n, rng, mask=None, spread=0.1):
    obs = rng.standard_normal((n, net.obs_dim))
    mean, log_std, _, _ = nn.forward_policy(net, obs)
    actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp_old = ppo.gaussian_log_prob(actions, mean, log_std) + spread * rng.standard_normal(n)
    return ppo.Batch(obs, actions, logp_old, rng.standard_normal(n), rng.standard_normal(n),
                     np.ones(n) if mask is None else mask)


@pytest.mark.parametrize("mode", [nn.TrainMode("lora", 2), nn.TrainMode("fft")], ids=["lora", "fft"])
def test_ppo_loss_gradient_matches_finite_differences(mode):
    net = policy_with_live_adapters(mode, seed=1)
    rng = np.random.default_rng(3)
    batch = _batch(net, 24, rng, mask=(rng.random(24) < 0.8).astype(float))
    hyper = ppo.PpoHyper()
    _, grads, _ = ppo.ppo_loss(batch, net, hyper)
    eps = 1e-6
    for key in net.trainable_keys():
        t = net.parameters()[key]
        flat = list(np.ndindex(t.shape))
        for idx in [flat[i] for i in rng.choice(len(flat), min(len(flat), 12), replace=False)]:
            orig = t[idx]
            t[idx] = orig + eps
            up = ppo.ppo_loss(batch, net, hyper)[0]
            t[idx] = orig - eps
            down = ppo.ppo_loss(batch, net, hyper)[0]
            t[idx] = orig
            fd = (up - down) / (2 * eps)
            assert abs(fd - grads[key][idx]) / max(1.0, abs(grads[key][idx])) < 1e-5, key


def test_masked_samples_do_not_drive_the_policy():
    net = policy_with_live_adapters(nn.TrainMode("fft"), seed=2)
    rng = np.random.default_rng(0)
    batch = _batch(net, 16, rng, mask=np.r_[np.ones(8), np.zeros(8)])
    _, g1, _ = ppo.ppo_loss(batch, net, ppo.PpoHyper(value_coef=0.0))
    batch.advantages[8:] *= -50.0
    batch.actions[8:] += 3.0
    _, g2, _ = ppo.ppo_loss(batch, net, ppo.PpoHyper(value_coef=0.0))
    for key in g1:
        assert np.allclose(g1[key], g2[key], atol=1e-14)


def test_clip_zeroes_gradient_outside_trust_region():
    net = policy_with_live_adapters(nn.TrainMode("fft"), seed=4)
    rng = np.random.default_rng(1)
    batch = _batch(net, 8, rng, spread=0.0)
    batch.logp_old -= 1.0  # ratio = e > 1 + clip
    batch.advantages[:] = 1.0
    _, grads, diag = ppo.ppo_loss(batch, net, ppo.PpoHyper(value_coef=0.0, entropy_coef=0.0))
    assert diag["clip_fraction"] == 1.0
    assert all(np.all(g == 0) for g in grads.values())


def test_non_finite_ratio_names_sample():
    net = policy_with_live_adapters(nn.TrainMode("fft"), seed=4)
    batch = _batch(net, 4, np.random.default_rng(0))
    batch.logp_old[2] = -1e6
    with np.errstate(over="ignore"), pytest.raises(nn.NumericError, match="sample 2"):
        ppo.ppo_loss(batch, net, ppo.PpoHyper())


def test_optimizer_and_grad_clip():
    net = policy_with_live_adapters(nn.TrainMode("fft"), seed=0)
    before = net.checksum()
    grads = {k: np.ones_like(net.parameters()[k]) for k in net.trainable_keys()}
    ppo.MomentumSGD(0.0).step(net, grads)
    assert net.checksum() == before
    total = ppo.clip_grad_norm(grads, 0.5)
    assert total == pytest.approx(np.sqrt(sum(g.size for g in grads.values())))
    assert np.sqrt(sum(np.sum(g * g) for g in grads.values())) == pytest.approx(0.5)
    opt = ppo.MomentumSGD(0.1, 0.9)
    key = nn.LOG_STD_KEY
    start = net.log_std.copy()
    opt.step(net, {key: np.ones(1)})
    opt.step(net, {key: np.ones(1)})
    assert net.log_std == pytest.approx(start - 0.1 * 1.0 - 0.1 * 1.9)


def test_buffer_contract():
    buf = ppo.RolloutBuffer.empty(4, 2, 3, 1)
    with pytest.raises(envs.ContractError):
        buf.as_batch()
    with pytest.raises(envs.ContractError):
        ppo.update(nn.build_policy(3, 1, np.random.default_rng(0)), ppo.RolloutBuffer.empty(0, 2, 3, 1),
                   ppo.PpoHyper(), ppo.MomentumSGD(1e-3), np.random.default_rng(0))


def _tracker_run(seed, mode, budget=4096, lr=1e-3):
    rng = np.random.default_rng(seed)
    net = nn.build_policy(4, 1, rng)
    nn.configure_mode(net, mode, rng)
    before = net.copy()
    _, rows = ppo.train(lambda: envs.TrackerEnv(), net, ppo.PpoHyper(learning_rate=lr), mode=mode,
                        budget=budget, rng=rng)
    return before, net, rows


def test_training_is_deterministic_and_rows_are_monotone():
    _, net_a, rows_a = _tracker_run(0, nn.TrainMode("fft"))
    _, net_b, rows_b = _tracker_run(0, nn.TrainMode("fft"))
    assert rows_a == rows_b and net_a.checksum() == net_b.checksum()
    assert [r.env_steps for r in rows_a] == [2048, 4096]
    assert all(r.episodes >= 1 for r in rows_a)


def test_frozen_mode_makes_no_updates():
    before, after, rows = _tracker_run(1, nn.TrainMode("frozen"))
    assert before.checksum() == after.checksum()
    assert all(r.trainable_params == 0 and r.value_loss > 0 for r in rows)


def test_lora_training_keeps_base_frozen():
    before, after, _ = _tracker_run(2, nn.TrainMode("lora", 1, components="actor_only"), lr=1e-2)
    assert before.frozen_checksum() == after.frozen_checksum()
    assert before.checksum(("critic",)) == after.checksum(("critic",))
    assert before.checksum(("actor",)) != after.checksum(("actor",))


def test_budget_must_cover_one_rollout():
    with pytest.raises(ValueError):
        _tracker_run(0, nn.TrainMode("fft"), budget=100)


def test_truncation_bootstrap_is_added_to_gae_rewards():
    rng = np.random.default_rng(0)
    net = nn.build_policy(4, 1, rng)
    collector = ppo.RolloutCollector(lambda: envs.TrackerEnv(max_steps=3), 1, rng)
    buf, stats = collector.collect(net, 3, ppo.PpoHyper(rollout_length=4, n_envs=1))
    assert stats["episodes"] == 1 and buf.dones[2, 0] == 1.0
    assert np.array_equal(buf.gae_rewards[:2], buf.rewards[:2])
    assert buf.gae_rewards[2, 0] != buf.rewards[2, 0]
