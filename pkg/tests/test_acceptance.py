"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line (with the measured quantity and
its tolerance) that pytest prints in an "acceptance criteria" section of the
terminal summary. The training outcomes (7 and 8) take several minutes.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
import test_rollout
from sdpg import oracle
from sdpg.cli import main
from sdpg.config import TrainConfig, load_config
from sdpg.envs import EnvBatch
from sdpg.nn import Mlp, MlpSpec
from sdpg.optim import AdamState, adam_step
from sdpg.rollout import RolloutConfig, compute_returns, make_rollout_envs, run_segment, sync_auxiliaries
from sdpg.trainer import Trainer, evaluate_trainer
from sdpg.update import (
    ExplorationState,
    actor_exploration_loss,
    actor_target,
    exploration_target,
    normalize_delta_j,
    temperature_update,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def record():
    def _record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        conftest.ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return _record


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- 1 -------------------------------------------------------------------------------


def test_smoothed_gradient_estimator(record):
    (z, _, _, _), secs = _timed(lambda: oracle.check_smoothed_gradient(seed=0))
    ok = z <= 3.0 and secs < 10.0
    assert record(1, ok, f"smoothed-gradient estimator: max |z| = {z:.2f} (<= 3) "
                         f"over {oracle.SMOOTHING_SAMPLES} samples, {secs:.2f} s (< 10 s)")


# -- 2 -------------------------------------------------------------------------------


def test_supervised_step_equivalences(record):
    (errs, secs) = _timed(lambda: (oracle.check_regression_step(0), oracle.check_bc_gradient(0)))
    ok = max(errs) <= 1e-10 and secs < 5.0
    assert record(2, ok, f"regression-step / behaviour-cloning equivalences: max rel err "
                         f"{errs[0]:.1e} / {errs[1]:.1e} (<= 1e-10) over 20 seeds, {secs:.2f} s (< 5 s)")


# -- 3 -------------------------------------------------------------------------------


def test_reinforce_special_case(record):
    err = oracle.check_reinforce_special_case(0)
    assert record(3, err <= 1e-12, f"single-perturbation direction vs Gaussian REINFORCE: "
                                   f"max rel err {err:.1e} (<= 1e-12) over 100 instances")


# -- 4 -------------------------------------------------------------------------------


def test_gradients_match_finite_differences(record):
    errs = {
        "mlp": max(oracle.check_mlp_gradients(s) for s in range(3)),
        "conv": max(oracle.check_conv_gradients(s) for s in range(2)),
        "actor loss": max(oracle.check_actor_loss_gradients(s) for s in range(2)),
    }
    ok = max(errs.values()) < 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert record(4, ok, f"analytic vs central-difference gradients: {detail} (< 1e-5)")


# -- 5 -------------------------------------------------------------------------------


def test_td_lambda(record, scripted_env):
    rng = np.random.default_rng(5)
    r, v = rng.normal(size=6), rng.normal(size=6)
    j0 = compute_returns(test_rollout.hand_buffer(r, v), 0.97, 0.0)[:, 0, 0]
    lam0 = float(np.max(np.abs(j0 - (r + 0.97 * v))))
    j1 = compute_returns(test_rollout.hand_buffer(r, v), 0.97, 1.0)[:, 0, 0]
    mc = [sum(0.97**l * r[t + l] for l in range(6 - t)) + 0.97 ** (6 - t) * v[-1] for t in range(6)]
    lam1 = float(np.max(np.abs(j1 - mc)))

    rh, vh = [1.0, 2.0, 3.0], [10.0, 20.0, 30.0]
    jh = compute_returns(test_rollout.hand_buffer(rh, vh), 0.9, 0.5)[:, 0, 0]
    hand = max(abs(jh[t] - test_rollout.td_lambda_direct(rh, vh, t, 0.9, 0.5)) for t in range(3))

    try:
        test_rollout.test_auxiliary_termination_is_patched_from_nominal(scripted_env)
        test_rollout.test_bootstrap_mode_restarts_after_a_cut()
        restart = True
    except AssertionError:
        restart = False
    ok = lam0 == 0.0 and lam1 <= 1e-12 and hand <= 1e-12 and restart
    assert record(5, ok, f"TD(lambda): lambda=0 err {lam0:.0e}, lambda=1 err {lam1:.1e}, "
                         f"hand case err {hand:.1e} (<= 1e-12), termination restart "
                         f"{'holds' if restart else 'broken'}")


# -- 6 -------------------------------------------------------------------------------


def test_rollout_semantics(record, scripted_env):
    rc = RolloutConfig(3, 4, 6)
    envs = EnvBatch("PointMass2D", rc.total_envs, seed=1)
    sync_auxiliaries(envs, rc)
    keys = [s.key() for s in envs.snapshot()]
    synced = all(keys[rc.index(n, j)] == keys[rc.index(n, 0)] for n in range(3) for j in range(5))

    envs = make_rollout_envs("PointMass2D", rc, seed=0)
    buf = run_segment(envs, test_rollout.linear_policy, np.array([-np.inf, -np.inf]),
                      lambda s: s[:, 0] ** 2, rc, seed=4)
    dj, _ = normalize_delta_j(compute_returns(buf, 0.99, 0.95))
    zero_dj = bool(np.all(dj == 0.0))

    rules = True
    for check in (test_rollout.test_auxiliary_termination_is_patched_from_nominal,
                  test_rollout.test_nominal_termination_resets_and_drags_auxiliaries):
        try:
            check(scripted_env)
        except AssertionError:
            rules = False
    ok = synced and zero_dj and rules
    assert record(6, ok, f"rollout: auxiliaries bit-identical after sync {synced}, "
                         f"zero-noise delta-J all zero {zero_dj}, reset rules {rules}")


# -- 7 and 8 ----------------------------------------------------------------------------


def _pointmass_score(tr):
    return evaluate_trainer(tr).oracle_ratio


def _upright_score(tr):
    return float(np.cos(evaluate_trainer(tr).final_states[:, 0]).mean())


def train_and_track(cfg, every, score_fn, threshold):
    """Train for ``cfg.epochs``, scoring the mean policy every ``every`` epochs.

    Returns ``(first epoch whose policy meets threshold or None, final score, seconds)``.
    """
    tr = Trainer(cfg)
    first = None
    score = float("nan")
    t0 = time.perf_counter()
    for e in range(1, cfg.epochs + 1):
        tr.train_epoch()
        if e % every == 0 or e == cfg.epochs:
            score = score_fn(tr)
            if first is None and score >= threshold:
                first = e
    return first, score, time.perf_counter() - t0


def _summary(results):
    return ", ".join(f"s{s}: {'-' if f is None else f}/{sc:.3f}" for s, (f, sc, _) in results.items())


@pytest.mark.slow
def test_state_mode_training(record):
    base = load_config(CONFIGS / "pointmass_state.ini")
    pm = {s: train_and_track(base.replace(seed=s), 25, _pointmass_score, 0.95) for s in range(4)}
    pm_hits = sum(f is not None for f, _, _ in pm.values())
    pm_time = max(t for _, _, t in pm.values())

    pend = load_config(CONFIGS / "pendulum_state.ini")
    pe = {s: train_and_track(pend.replace(seed=s), 50, _upright_score, 0.9) for s in range(4)}
    pe_hits = sum(f is not None for f, _, _ in pe.values())

    ok = pm_hits >= 3 and pm_time < 300 and pe_hits >= 3
    assert record(7, ok, f"state mode: point mass >= 0.95 of LQR within {base.epochs} epochs on "
                         f"{pm_hits}/4 seeds (first epoch/final ratio {_summary(pm)}), slowest run "
                         f"{pm_time:.0f} s (< 300 s); pendulum cos > 0.9 within {pend.epochs} epochs "
                         f"on {pe_hits}/4 seeds ({_summary(pe)})")


@pytest.mark.slow
def test_pixel_mode_training(record):
    state = load_config(CONFIGS / "pointmass_state.ini")
    cfg = load_config(CONFIGS / "pointmass_pixels.ini")
    same = cfg.replace(obs_mode="state", epochs=state.epochs, out_dir=state.out_dir) == state
    budget = 4 * state.epochs
    res = {s: train_and_track(cfg.replace(seed=s, epochs=budget), 50, _pointmass_score, 0.95)
           for s in range(4)}
    hits = sum(f is not None for f, _, _ in res.values())
    ok = same and hits >= 3
    assert record(8, ok, f"pixel mode (same search settings: {same}): >= 0.95 of LQR within "
                         f"{budget} epochs on {hits}/4 seeds ({_summary(res)})")


# -- 9 -------------------------------------------------------------------------------


def exploration_closed_loop(updates=500, seed=0, d=2, N=8, H=16, M=15):
    """Run the actor/exploration/temperature steps against stationary synthetic returns.

    Returns are ``-||u - a*||^2`` for a fixed optimum ``a*``: the same landscape
    every update, and one that always rewards shrinking the noise, so only the
    entropy term holds exploration up. Returns the mean std after each update.
    """
    cfg = TrainConfig()
    rng = np.random.default_rng(seed)
    actor = Mlp(MlpSpec(3, (16,), d), final_scale=0.01)
    params = actor.init(rng)
    obs = rng.normal(size=(H * N, 3))
    a_star = rng.uniform(-0.5, 0.5, d)
    state = ExplorationState(np.full(d, cfg.log_std_init), math.log(cfg.init_temperature), cfg.delta_target,
                             cfg.log_std_min, cfg.log_std_max)
    actor_adam = AdamState.zeros(actor.num_params, cfg.lr_actor)
    explore_adam = AdamState.zeros(d, cfg.lr_explore)
    temp_adam = AdamState.zeros(1, cfg.lr_temperature)
    history = []
    for _ in range(updates):
        mu = actor(params, obs).reshape(H, N, d)
        eps = rng.standard_normal((H, N, M + 1, d))
        eps[:, :, 0] = 0.0
        u = mu[:, :, None] + state.delta * eps
        dj, _ = normalize_delta_j(-np.sum((u - a_star) ** 2, axis=-1))
        a_tgt = actor_target(mu, dj, eps, cfg.preact_clip)
        ls_tgt = exploration_target(state.log_std, dj, eps)
        _, g_actor, g_ls = actor_exploration_loss(actor, params, state.log_std, obs, a_tgt, ls_tgt, state.alpha)
        actor_adam, params = adam_step(actor_adam, params, g_actor, cfg.max_grad_norm)
        explore_adam, state.log_std = adam_step(explore_adam, state.log_std, g_ls, cfg.max_grad_norm)
        state.clip()
        state.log_alpha, temp_adam, _ = temperature_update(state.log_alpha, state.log_std, cfg.delta_target,
                                                           temp_adam)
        history.append(float(state.delta.mean()))
    return np.array(history)


def test_exploration_auto_tuning(record):
    finals, devs = [], []
    for seed in range(3):
        hist = exploration_closed_loop(seed=seed)
        finals.append(hist[-1])
        devs.append(np.abs(hist[-50:] - 0.15).max())
    dev = max(devs)
    assert record(9, dev <= 0.05, f"exploration auto-tuning: mean std after 500 updates "
                                  f"{', '.join(f'{f:.3f}' for f in finals)} over 3 seeds, worst distance "
                                  f"from 0.15 over the last 50 updates {dev:.3f} (<= 0.05)")


# -- 10 ------------------------------------------------------------------------------


def test_determinism_across_worker_counts(record, tmp_path):
    same = {}
    for name, epochs, workers in (("pointmass_state", 6, (1, 4)), ("pointmass_pixels", 3, (1, 3))):
        blobs = []
        for w in workers:
            out = tmp_path / f"{name}_w{w}"
            assert main(["train", "--config", str(CONFIGS / f"{name}.ini"), "--out", str(out),
                         "--epochs", str(epochs), "--workers", str(w), "--quiet"]) == 0
            blobs.append((out / "metrics.csv").read_bytes())
        same[name] = blobs[0] == blobs[1] and len(blobs[0].splitlines()) == epochs + 1
    ok = all(same.values())
    assert record(10, ok, "determinism: metrics.csv byte-identical across worker counts "
                          + ", ".join(f"{k} {v}" for k, v in same.items()))
