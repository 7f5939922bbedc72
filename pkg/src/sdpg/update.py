"""Smoothed-gradient targets and the supervised actor/critic updates.

The actor is never differentiated through returns: each rollout is turned
into plain numeric regression targets (mean-action targets and one
log-std target), and the actor then takes one gradient step on a squared
loss towards them. Targets are materialised as arrays before any loss is
built, which is all a stop-gradient amounts to here.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NonFiniteError
from .optim import AdamState, adam_step

SIGMA_FLOOR = 1e-6
GRAD_CHUNK = 256


def squash_action(pre, clip=(-2.0, 2.0)):
    """``tanh(clamp(pre, lo, hi))``: bounded, monotone, and the clamp keeps
    perturbations from vanishing in tanh's flat tails."""
    lo, hi = clip
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ContractViolation(f"bad pre-activation clip {clip}")
    return np.tanh(np.clip(pre, lo, hi))


@dataclass
class ExplorationState:
    log_std: np.ndarray
    log_alpha: float = math.log(1e-2)
    delta_target: float = 0.15
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        self.clip()

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def clip(self) -> None:
        self.log_std = np.clip(self.log_std, self.log_std_min, self.log_std_max)


@dataclass
class SdpgLosses:
    actor_bc_loss: float = 0.0
    exploration_loss: float = 0.0
    entropy_term: float = 0.0
    temperature_loss: float = 0.0
    critic_loss: float = 0.0

    @property
    def actor_loss(self) -> float:
        return self.actor_bc_loss + self.exploration_loss + self.entropy_term


# ---------------------------------------------------------------------------
# smoothed gradient estimates
# ---------------------------------------------------------------------------


def smoothed_gradient(perturbed_returns, nominal_return, eps, sigma):
    """Monte-Carlo smoothed gradient of the return w.r.t. the action sequence.

    ``perturbed_returns`` has shape ``(M,)`` (returns of A + delta * E_j),
    ``eps`` has shape ``(M, *action_shape)``. Returns
    ``mean_j (J_j - J(A)) / sigma * E_j``.
    """
    dj = (np.asarray(perturbed_returns, dtype=np.float64) - nominal_return) / sigma
    eps = np.asarray(eps, dtype=np.float64)
    return np.tensordot(dj, eps, axes=(0, 0)) / dj.shape[0]


def normalize_delta_j(returns, normalize: bool = True, floor: float = SIGMA_FLOOR):
    """Return differences against the nominal row, scaled per (t, n).

    ``returns`` has shape ``(H, N, M+1)``. Returns ``(dj, sigma)`` where
    ``sigma`` is the population std of the raw differences over j (j = 0
    included, whose difference is zero), floored at ``floor``.
    """
    returns = np.asarray(returns, dtype=np.float64)
    dj = returns - returns[..., :1]
    sigma = np.maximum(dj.std(axis=-1), floor)
    if normalize:
        dj = dj / sigma[..., None]
    dj[..., 0] = 0.0
    return dj, sigma


def mean_ascent(dj, eps):
    """``(1/(M+1)) sum_j dj * eps`` per (t, n); shapes ``(H,N,M+1)`` and ``(H,N,M+1,d)``."""
    return np.einsum("tnj,tnjd->tnd", dj, eps) / dj.shape[-1]


def exploration_ascent(dj, eps, delta):
    """``(1/(M+1)) sum_j dj * (eps^2 - 1) * delta`` per (t, n)."""
    return np.einsum("tnj,tnjd->tnd", dj, eps * eps - 1.0) / dj.shape[-1] * delta


def actor_target(mean_actions, dj, eps, clip=(-2.0, 2.0)):
    """Regression targets for the mean action, clipped to the pre-activation range."""
    return np.clip(mean_actions + mean_ascent(dj, eps), clip[0], clip[1])


def exploration_target(log_std, dj, eps):
    """Single log-std target: current value plus the ascent averaged over every (t, n)."""
    log_std = np.asarray(log_std, dtype=np.float64)
    g = exploration_ascent(dj, eps, np.exp(log_std))
    return log_std + g.reshape(-1, g.shape[-1]).mean(axis=0)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


def _chunked_backward(net, params, x, upstream_fn, workers=1, chunk=GRAD_CHUNK):
    """Sum of per-chunk ``(loss, grad)`` in fixed chunk order.

    Chunk boundaries never depend on ``workers``, so the reduction is
    bit-identical however many threads evaluate the chunks.
    """
    bounds = [(i, min(i + chunk, x.shape[0])) for i in range(0, x.shape[0], chunk)]

    def run(b):
        lo, hi = b
        y, cache = net.forward(params, x[lo:hi])
        loss, g = upstream_fn(y, lo, hi)
        gp, _ = net.backward(params, cache, g)
        return loss, gp

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    loss = 0.0
    grad = np.zeros(net.num_params)
    for l, g in parts:
        loss += l
        grad += g
    return loss, grad


def actor_exploration_loss(actor, params, log_std, obs, a_target, log_std_target, alpha, workers=1):
    """Joint actor + exploration objective and its gradients.

    loss = mean_rows ||mu(o) - a_target||^2 + ||log_std - log_std_target||^2
           - alpha * mean(log_std)

    Returns ``(SdpgLosses, grad_params, grad_log_std)``.
    """
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, actor.input_dim)
    a_target = np.asarray(a_target, dtype=np.float64).reshape(obs.shape[0], -1)
    rows = obs.shape[0]

    def upstream(mu, lo, hi):
        diff = mu - a_target[lo:hi]
        return float(np.sum(diff * diff)) / rows, 2.0 * diff / rows

    bc, g_params = _chunked_backward(actor, params, obs, upstream, workers)
    log_std = np.asarray(log_std, dtype=np.float64)
    diff = log_std - log_std_target
    d = log_std.size
    losses = SdpgLosses(
        actor_bc_loss=bc,
        exploration_loss=float(diff @ diff),
        entropy_term=-alpha * float(log_std.mean()),
    )
    g_log_std = 2.0 * diff - alpha / d
    return losses, g_params, g_log_std


def temperature_loss(log_alpha, log_std, delta_target):
    """``exp(log_alpha) * mean(exp(log_std) - delta_target)`` and its derivative.

    The derivative is the loss itself, so a descent step lowers the
    temperature while exploration sits above the target std and raises it
    below.
    """
    loss = math.exp(log_alpha) * float(np.mean(np.exp(log_std) - delta_target))
    return loss, loss


def temperature_update(log_alpha, log_std, delta_target, state: AdamState, lr_multiplier=1.0):
    """One Adam step on the temperature objective. Returns ``(log_alpha, state, loss)``."""
    loss, grad = temperature_loss(log_alpha, log_std, delta_target)
    state, new = adam_step(state, np.array([log_alpha]), np.array([grad]), lr_multiplier=lr_multiplier)
    return float(new[0]), state, loss


def soft_critic_reward(rewards, log_std, log_std_target, alpha):
    """Rewards plus the entropy bonus ``(alpha/d) sum_i (log_std_i - log_std_target)``."""
    bonus = alpha * float(np.mean(np.asarray(log_std) - log_std_target))
    return np.asarray(rewards, dtype=np.float64) + bonus


def critic_update(
    critic,
    params,
    adam: AdamState,
    states,
    targets,
    batch_size: int,
    iters: int,
    rng: np.random.Generator,
    max_norm: float = 1.0,
    lr_multiplier: float = 1.0,
    workers: int = 1,
):
    """``iters`` passes of shuffled mini-batch regression of V(s) onto fixed targets.

    Returns ``(params, adam, mean_loss)``.
    """
    x = np.asarray(states, dtype=np.float64).reshape(-1, critic.input_dim)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ContractViolation("one target per state required")
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise NonFiniteError(f"critic target {int(bad[0])} is {y[bad[0]]}", index=int(bad[0]))
    losses = []
    for _ in range(iters):
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], batch_size):
            idx = order[lo : lo + batch_size]
            xb, yb = x[idx], y[idx]
            n = idx.size

            def upstream(v, a, b, yb=yb, n=n):
                diff = v[:, 0] - yb[a:b]
                return float(diff @ diff) / n, (2.0 * diff / n)[:, None]

            loss, grad = _chunked_backward(critic, params, xb, upstream, workers)
            if not math.isfinite(loss):
                raise NonFiniteError(f"critic loss became {loss}")
            adam, params = adam_step(adam, params, grad, max_norm, lr_multiplier)
            losses.append(loss)
    return params, adam, float(np.mean(losses)) if losses else 0.0


def polyak_update(target_params, params, rho: float):
    """``rho * target + (1 - rho) * params``."""
    if not 0.0 <= rho <= 1.0:
        raise ContractViolation("rho must lie in [0, 1]")
    return rho * np.asarray(target_params) + (1.0 - rho) * np.asarray(params)
