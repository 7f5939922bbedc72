import numpy as np
import pytest

from sdpg.envs import EnvBatch
from sdpg.errors import ContractViolation, NonFiniteError
from sdpg.rollout import (
    RolloutConfig,
    SegmentBuffer,
    compute_returns,
    critic_value_targets,
    make_rollout_envs,
    perturbation_noise,
    run_segment,
    sync_auxiliaries,
)
from sdpg.update import normalize_delta_j


def zero_value(states):
    return np.zeros(states.shape[0])


def const_policy(value, d):
    return lambda obs: np.full((obs.shape[0], d), value)


def linear_policy(obs):
    return -0.5 * obs[:, :2]


def hand_buffer(r, v, cut=None, term=None):
    """Single-row buffer: rewards r_t and bootstraps v_t = V(s_{t+1})."""
    H = len(r)
    shape = (H, 1, 1)
    cut = np.zeros(shape, bool) if cut is None else np.asarray(cut, bool).reshape(shape)
    cut[-1] = True
    term = np.zeros(shape, bool) if term is None else np.asarray(term, bool).reshape(shape)
    return SegmentBuffer(
        obs=np.zeros((H, 1, 1)), mean_actions=np.zeros((H, 1, 1)), eps=np.zeros((H, 1, 1, 1)),
        rewards=np.asarray(r, float).reshape(shape), terminated=term, cut=cut,
        bootstrap=np.asarray(v, float).reshape(shape), states=np.zeros((H, 1, 1, 1)), log_std=np.zeros(1),
    )


def td_lambda_direct(r, v, t, gamma, lam):
    """lambda-weighted average of k-step returns from t, weights normalised to one."""
    H = len(r)
    n = H - t

    def k_step(k):
        return sum(gamma**l * r[t + l] for l in range(k)) + gamma**k * v[t + k - 1]

    total = sum((1 - lam) * lam ** (k - 1) * k_step(k) for k in range(1, n))
    return total + lam ** (n - 1) * k_step(n)


# -- config -------------------------------------------------------------------


def test_config_layout():
    rc = RolloutConfig(3, 4, 5)
    assert rc.total_envs == 15
    np.testing.assert_array_equal(rc.nominal_indices(), [0, 5, 10])
    assert rc.index(1, 2) == 7
    for bad in [dict(N=0, M=1, H=1), dict(N=1, M=0, H=1), dict(N=1, M=1, H=1, gamma=1.0),
                dict(N=1, M=1, H=1, lam=1.5)]:
        with pytest.raises(ContractViolation):
            RolloutConfig(**bad)


# -- sync ---------------------------------------------------------------------


def test_sync_copies_nominals_bit_exactly():
    rc = RolloutConfig(3, 4, 2)
    envs = EnvBatch("PointMass2D", rc.total_envs, seed=1)
    assert len({row.tobytes() for row in envs.state}) == rc.total_envs
    sync_auxiliaries(envs, rc)
    keys = [s.key() for s in envs.snapshot()]
    for n in range(3):
        assert all(keys[rc.index(n, j)] == keys[rc.index(n, 0)] for j in range(5))


def test_sync_carries_the_episode_step_counter():
    rc = RolloutConfig(1, 2, 2)
    envs = make_rollout_envs("PointMass2D", rc)
    for _ in range(7):
        envs.step(np.zeros((3, 2)))
    envs.steps[1:] = 0
    sync_auxiliaries(envs, rc)
    assert list(envs.steps) == [7, 7, 7]


def test_zero_noise_auxiliary_tracks_nominal():
    rc = RolloutConfig(1, 1, 12)
    envs = make_rollout_envs("CartPole", rc, seed=3)
    buf = run_segment(envs, const_policy(0.1, 1), np.log([0.5]), zero_value, rc,
                      noise=np.zeros((12, 1, 1, 1)))
    assert buf.states[:, 0, 0].tobytes() == buf.states[:, 0, 1].tobytes()
    assert buf.rewards[:, 0, 0].tobytes() == buf.rewards[:, 0, 1].tobytes()


# -- segment ------------------------------------------------------------------


def test_segment_shapes_and_nominal_rows_unperturbed():
    rc = RolloutConfig(2, 3, 5)
    envs = make_rollout_envs("PointMass2D", rc, seed=0)
    buf = run_segment(envs, linear_policy, np.log([0.3, 0.3]), zero_value, rc, seed=0, epoch=0)
    assert buf.shape == (5, 2, 4)
    assert buf.eps.shape == (5, 2, 4, 2) and np.all(buf.eps[:, :, 0] == 0)
    assert buf.obs.shape == (5, 2, 5) and buf.states.shape == (5, 2, 4, 5)
    assert np.all(buf.cut[-1])


def test_zero_exploration_gives_zero_delta_j():
    rc = RolloutConfig(2, 5, 8)
    envs = make_rollout_envs("PointMass2D", rc, seed=0)
    buf = run_segment(envs, linear_policy, np.array([-np.inf, -np.inf]),
                      lambda s: s[:, 0] ** 2, rc, seed=4)
    J = compute_returns(buf, 0.99, 0.95)
    assert np.all(J == J[..., :1])
    dj, _ = normalize_delta_j(J)
    assert np.all(dj == 0.0)


def test_segment_is_reproducible():
    rc = RolloutConfig(2, 3, 6)
    digests = []
    for _ in range(2):
        envs = make_rollout_envs("PendulumSwingUp", rc, seed=5)
        digests.append(run_segment(envs, const_policy(0.3, 1), np.log([0.4]), zero_value, rc,
                                   seed=9, epoch=2).digest())
    assert digests[0] == digests[1]


def test_noise_streams_are_counter_based():
    a = perturbation_noise(1, 2, 3, 4, 5, 2)
    assert a.shape == (4, 5, 2)
    assert a.tobytes() == perturbation_noise(1, 2, 3, 4, 5, 2).tobytes()
    assert a.tobytes() != perturbation_noise(1, 2, 4, 4, 5, 2).tobytes()
    assert a.tobytes() != perturbation_noise(1, 3, 3, 4, 5, 2).tobytes()


def test_noise_override_shape_checked():
    rc = RolloutConfig(1, 2, 3)
    envs = make_rollout_envs("PointMass2D", rc)
    with pytest.raises(ContractViolation):
        run_segment(envs, linear_policy, np.zeros(2), zero_value, rc, noise=np.zeros((3, 1, 1, 2)))


def test_non_finite_action_aborts_with_location():
    rc = RolloutConfig(2, 1, 3)
    envs = make_rollout_envs("PointMass2D", rc)
    with pytest.raises(NonFiniteError, match="step 0"):
        run_segment(envs, const_policy(np.nan, 2), np.zeros(2), zero_value, rc)


def test_auxiliary_termination_is_patched_from_nominal(scripted_env):
    # nominal holds still; auxiliary 1 is pushed through the wall at x > 1
    rc = RolloutConfig(1, 2, 4)
    envs = make_rollout_envs("Scripted", rc)
    noise = np.zeros((4, 1, 2, 1))
    noise[:2, 0, 0, 0] = 2.0
    value = lambda s: 10.0 * s[:, 1]
    buf = run_segment(envs, const_policy(0.0, 1), np.zeros(1), value, rc, noise=noise, preact_clip=(-2, 2))
    assert buf.terminated[1, 0, 1] and not buf.terminated[:, 0, [0, 2]].any()
    assert buf.cut[1, 0, 1] and not buf.cut[1, 0, 0]
    assert buf.bootstrap[1, 0, 1] == 0.0
    # next state equals the nominal's post-step state
    assert buf.states[2, 0, 1].tobytes() == buf.states[2, 0, 0].tobytes()
    J = compute_returns(buf, 0.9, 0.5)
    # no reward crosses the boundary: the failing step keeps only its own reward
    assert J[1, 0, 1] == buf.rewards[1, 0, 1]
    np.testing.assert_array_equal(J[2:, 0, 1], J[2:, 0, 0])


def test_nominal_termination_resets_and_drags_auxiliaries(scripted_env):
    rc = RolloutConfig(1, 2, 4)
    envs = make_rollout_envs("Scripted", rc)
    noise = np.full((4, 1, 2, 1), -4.0)
    buf = run_segment(envs, const_policy(2.0, 1), np.zeros(1), zero_value, rc, noise=noise)
    assert buf.terminated[1, 0, 0] and not buf.terminated[1, 0, 1:].any()
    assert np.all(buf.cut[1, 0])
    np.testing.assert_array_equal(buf.states[2, 0], np.zeros((3, 2)))
    # the second push through the wall at t=3 resets every row again
    assert buf.terminated[3, 0, 0] and list(envs.steps) == [0, 0, 0]


# -- returns ------------------------------------------------------------------


def test_td_lambda_hand_case():
    r, v = [1.0, 2.0, 3.0], [10.0, 20.0, 30.0]
    J = compute_returns(hand_buffer(r, v), 0.9, 0.5)[:, 0, 0]
    assert J[2] == pytest.approx(30.0, abs=1e-12)
    for t in range(3):
        assert abs(J[t] - td_lambda_direct(r, v, t, 0.9, 0.5)) < 1e-12
    assert J[1] == pytest.approx(24.5, abs=1e-12)


def test_td_zero_is_one_step_return():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=6)
    J = compute_returns(hand_buffer(r, v), 0.97, 0.0)[:, 0, 0]
    np.testing.assert_array_equal(J, r + 0.97 * v)


def test_td_one_is_monte_carlo_with_bootstrap():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=6), rng.normal(size=6)
    J = compute_returns(hand_buffer(r, v), 0.97, 1.0)[:, 0, 0]
    for t in range(6):
        mc = sum(0.97**l * r[t + l] for l in range(6 - t)) + 0.97 ** (6 - t) * v[-1]
        assert abs(J[t] - mc) < 1e-12


def test_trace_at_lambda_one_equals_bootstrap_on_every_suffix():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=5), rng.normal(size=5)
    full = compute_returns(hand_buffer(r, v), 0.95, 1.0, "trace")[:, 0, 0]
    for t in range(5):
        boot = compute_returns(hand_buffer(r[t:], v[t:]), 0.95, 1.0, "bootstrap")[:, 0, 0]
        assert np.all(boot == boot[0])
        assert abs(full[t] - boot[0]) < 1e-12


def test_bootstrap_mode_restarts_after_a_cut():
    r, v = [1.0, 1.0, 1.0, 1.0], [5.0, 0.0, 5.0, 7.0]
    J = compute_returns(hand_buffer(r, v, cut=[0, 1, 0, 0], term=[0, 1, 0, 0]), 0.5, 0.3, "bootstrap")[:, 0, 0]
    assert J[0] == J[1] == pytest.approx(1 + 0.5 * 1)
    assert J[2] == J[3] == pytest.approx(1 + 0.5 * 1 + 0.25 * 7)
    with pytest.raises(ContractViolation):
        compute_returns(hand_buffer(r, v), 0.5, 0.3, "nstep")


def test_returns_invariant_to_row_order():
    rc = RolloutConfig(2, 3, 6)
    envs = make_rollout_envs("PointMass2D", rc, seed=0)
    buf = run_segment(envs, linear_policy, np.log([0.4, 0.4]), lambda s: s[:, 0], rc, seed=1)
    J = compute_returns(buf, 0.99, 0.9)
    perm = np.random.default_rng(0).permutation(4)
    shuffled = SegmentBuffer(buf.obs, buf.mean_actions, buf.eps[:, :, perm], buf.rewards[:, :, perm],
                             buf.terminated[:, :, perm], buf.cut[:, :, perm], buf.bootstrap[:, :, perm],
                             buf.states[:, :, perm], buf.log_std)
    np.testing.assert_array_equal(compute_returns(shuffled, 0.99, 0.9), J[:, :, perm])


def test_critic_targets_share_the_trace_machinery():
    b = hand_buffer([1.0, 2.0, 3.0], [10.0, 20.0, 30.0])
    np.testing.assert_array_equal(critic_value_targets(b, 0.9, 0.5), compute_returns(b, 0.9, 0.5))
    aug = critic_value_targets(b, 0.9, 0.5, rewards=b.rewards + 1.0)
    assert aug[2, 0, 0] == pytest.approx(31.0)
