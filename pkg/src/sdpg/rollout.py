"""Nominal/auxiliary rollout segments and TD(lambda) return-to-go.

Environment rows are laid out nominal-major: row ``n * (M + 1) + j`` holds
environment ``(n, j)``, with ``j = 0`` the nominal. All buffers are
time-major with shape ``(H, N, M + 1, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import EnvBatch
from .errors import ContractViolation, NonFiniteError

NOISE_STREAM = 1


@dataclass(frozen=True)
class RolloutConfig:
    N: int
    M: int
    H: int
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if self.N < 1 or self.M < 1 or self.H < 1:
            raise ContractViolation("N, M and H must all be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractViolation("lam must lie in [0, 1]")

    @property
    def total_envs(self) -> int:
        return self.N * (self.M + 1)

    def nominal_indices(self) -> np.ndarray:
        return np.arange(self.N) * (self.M + 1)

    def index(self, n, j):
        return np.asarray(n) * (self.M + 1) + np.asarray(j)


@dataclass
class SegmentBuffer:
    obs: np.ndarray  # (H, N, obs_dim) nominal observations
    mean_actions: np.ndarray  # (H, N, d) pre-activation means
    eps: np.ndarray  # (H, N, M+1, d); eps[:, :, 0] == 0
    rewards: np.ndarray  # (H, N, M+1)
    terminated: np.ndarray  # (H, N, M+1) genuine failures
    cut: np.ndarray  # (H, N, M+1) the row does not continue past this step
    bootstrap: np.ndarray  # (H, N, M+1) target-critic value of s_{t+1}, zero at failures
    states: np.ndarray  # (H, N, M+1, p) privileged s_t
    log_std: np.ndarray  # (d,) exploration factor used for the segment

    @property
    def shape(self):
        return self.rewards.shape

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in ("obs", "mean_actions", "eps", "rewards", "terminated", "cut", "bootstrap", "states"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def make_rollout_envs(env_id: str, config: RolloutConfig, obs_mode="state", seed=0, **kw) -> EnvBatch:
    """N(M+1) environments with only the nominals rendered, auxiliaries synced."""
    envs = EnvBatch(env_id, config.total_envs, obs_mode, seed, rendered=config.nominal_indices(), **kw)
    sync_auxiliaries(envs, config)
    return envs


def sync_auxiliaries(envs: EnvBatch, config: RolloutConfig) -> None:
    """Copy every nominal's state (and step counter) into its M auxiliaries."""
    nom = config.nominal_indices()
    if envs.needs_reset[nom].any():
        envs.reset(nom[envs.needs_reset[nom]])
    src = np.repeat(nom, config.M)
    dst = (nom[:, None] + np.arange(1, config.M + 1)[None]).reshape(-1)
    envs.copy_rows(src, dst)


def perturbation_noise(seed: int, epoch: int, t: int, N: int, M: int, d: int) -> np.ndarray:
    """Standard normal perturbations for one time step, ``(N, M, d)``.

    Each (seed, epoch, t) owns its own counter-based Philox stream, so the
    draw never depends on how stepping is scheduled.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, NOISE_STREAM, epoch, t])))
    return rng.standard_normal((N, M, d))


def squash(pre, clip=(-2.0, 2.0)):
    return np.tanh(np.clip(pre, clip[0], clip[1]))


def run_segment(
    envs: EnvBatch,
    mean_action_fn,
    log_std,
    value_fn,
    config: RolloutConfig,
    seed: int = 0,
    epoch: int = 0,
    noise=None,
    preact_clip=(-2.0, 2.0),
) -> SegmentBuffer:
    """Roll every environment forward H steps.

    ``mean_action_fn`` maps nominal observations ``(N, obs_dim)`` to
    pre-activation mean actions ``(N, d)``; ``value_fn`` maps privileged
    states ``(k, p)`` to target-critic values ``(k,)``. ``noise`` may
    override the sampled perturbations with an ``(H, N, M, d)`` array.
    Auxiliaries must already be synced to their nominals.
    """
    N, M, H = config.N, config.M, config.H
    M1 = M + 1
    d = envs.action_dim
    delta = np.exp(np.asarray(log_std, dtype=np.float64))
    if delta.shape != (d,):
        raise ContractViolation(f"log_std must have shape ({d},)")
    if envs.count != config.total_envs:
        raise ContractViolation("environment batch does not match the rollout config")
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (H, N, M, d):
            raise ContractViolation(f"noise must have shape {(H, N, M, d)}, got {noise.shape}")
    nom = config.nominal_indices()

    obs_buf = np.zeros((H, N, envs.obs_dim))
    mean_buf = np.zeros((H, N, d))
    eps_buf = np.zeros((H, N, M1, d))
    rew = np.zeros((H, N, M1))
    term = np.zeros((H, N, M1), dtype=bool)
    cut = np.zeros((H, N, M1), dtype=bool)
    boot = np.zeros((H, N, M1))
    states = np.zeros((H, N, M1, envs.privileged_dim))

    for t in range(H):
        obs = envs.observe(nom)
        a = np.asarray(mean_action_fn(obs), dtype=np.float64).reshape(N, d)
        eps = noise[t] if noise is not None else perturbation_noise(seed, epoch, t, N, M, d)
        eps_buf[t, :, 1:] = eps
        u = a[:, None, :] + delta * eps_buf[t]
        act = squash(u, preact_clip).reshape(-1, d)
        bad = ~np.isfinite(act).all(axis=1)
        if bad.any():
            k = int(np.argmax(bad))
            raise NonFiniteError(f"non-finite action for env {divmod(k, M1)} at step {t}", index=k)

        obs_buf[t] = obs
        mean_buf[t] = a
        states[t] = envs.privileged().reshape(N, M1, -1)
        res = envs.step(act)
        r = res.reward.reshape(N, M1)
        if not np.isfinite(r).all():
            k = int(np.argmax(~np.isfinite(res.reward)))
            raise NonFiniteError(f"non-finite reward for env {divmod(k, M1)} at step {t}", index=k)
        rew[t] = r
        v = np.asarray(value_fn(res.privileged_state), dtype=np.float64).reshape(N, M1)
        failed = res.terminated.reshape(N, M1)
        done = res.done.reshape(N, M1)
        term[t] = failed
        boot[t] = np.where(failed, 0.0, v)

        # nominal reset drags every auxiliary along; a lone auxiliary
        # failure is patched with the nominal's current state
        nom_done = done[:, 0]
        cut[t] = done | nom_done[:, None]
        if nom_done.any():
            envs.reset(nom[nom_done])
        aux_n, aux_j = np.nonzero(cut[t][:, 1:])
        if aux_n.size:
            envs.copy_rows(nom[aux_n], nom[aux_n] + aux_j + 1)

    cut[-1] = True
    return SegmentBuffer(obs_buf, mean_buf, eps_buf, rew, term, cut, boot, states, np.array(log_std, dtype=float))


def compute_returns(
    buffer: SegmentBuffer,
    gamma: float,
    lam: float,
    mode: str = "trace",
    rewards=None,
) -> np.ndarray:
    """Return table ``(H, N, M+1)``.

    ``mode="trace"`` is the causal TD(lambda) return-to-go, built backwards:

        G_t = r_t + gamma * ((1 - lam) * V(s_{t+1}) + lam * G_{t+1})

    with the continuation dropped wherever the row is cut (termination,
    time limit, reset-by-copy, or segment end), leaving
    ``G_t = r_t + gamma * V(s_{t+1})`` there (V is zero after a failure).

    ``mode="bootstrap"`` gives every step the discounted, value-bootstrapped
    return of the whole episode piece it belongs to, measured from the
    piece's first step.
    """
    r = buffer.rewards if rewards is None else np.asarray(rewards, dtype=np.float64)
    if mode == "trace":
        return _td_lambda(r, buffer.bootstrap, buffer.cut, gamma, lam)
    if mode == "bootstrap":
        full = _td_lambda(r, buffer.bootstrap, buffer.cut, gamma, 1.0)
        out = np.empty_like(full)
        start = full[0].copy()
        for t in range(full.shape[0]):
            if t > 0:
                start = np.where(buffer.cut[t - 1], full[t], start)
            out[t] = start
        return out
    raise ContractViolation(f"unknown return mode {mode!r}")


def _td_lambda(r, boot, cut, gamma, lam):
    H = r.shape[0]
    G = np.zeros_like(r)
    nxt = np.zeros_like(r[0])
    for t in range(H - 1, -1, -1):
        cont = (1.0 - lam) * boot[t] + lam * nxt
        G[t] = r[t] + gamma * np.where(cut[t], boot[t], cont)
        nxt = G[t]
    return G


def critic_value_targets(buffer: SegmentBuffer, gamma: float, lam: float, rewards=None) -> np.ndarray:
    """TD(lambda) regression targets for V(s_t); bootstraps come from the target critic."""
    return compute_returns(buffer, gamma, lam, "trace", rewards)
