"""The full training loop: rollout, targets, actor/exploration/temperature
steps, critic regression, target-critic averaging."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import TrainConfig
from .envs import FRAME_SIZE, FRAME_STACK, MAX_EPISODE_LEN, EnvBatch, get_dynamics, lqr_oracle_return
from .errors import ContractViolation, NonFiniteError
from .nn import ConvSpec, EncoderMlp, Mlp, MlpSpec, network_from_dict
from .optim import AdamState, LrSchedule, adam_step
from .rollout import (
    RolloutConfig,
    SegmentBuffer,
    compute_returns,
    critic_value_targets,
    make_rollout_envs,
    run_segment,
    sync_auxiliaries,
)
from .update import (
    ExplorationState,
    SdpgLosses,
    actor_exploration_loss,
    actor_target,
    critic_update,
    exploration_target,
    normalize_delta_j,
    polyak_update,
    soft_critic_reward,
    squash_action,
    temperature_update,
)

METRICS_FIELDS = (
    "epoch",
    "env_steps",
    "mean_nominal_return",
    "mean_aux_return",
    "mean_sigma",
    "mean_delta",
    "actor_loss",
    "critic_loss",
    "temperature",
    "lr_actor",
    "lr_critic",
    "wall_time_s",
)

INIT_STREAM = 2
CRITIC_STREAM = 3


def build_actor(cfg: TrainConfig, obs_dim: int, action_dim: int, proprio_dim: int = 0):
    if cfg.obs_mode == "state":
        return Mlp(MlpSpec(obs_dim, cfg.actor_hidden, action_dim, "elu"), final_scale=0.01)
    conv = ConvSpec((FRAME_STACK, FRAME_SIZE, FRAME_SIZE), feature_dim=cfg.conv_feature_dim)
    head = MlpSpec(cfg.conv_feature_dim + proprio_dim, cfg.actor_hidden, action_dim, "elu")
    return EncoderMlp(conv, head, final_scale=0.01)


def build_critic(cfg: TrainConfig, privileged_dim: int):
    return Mlp(MlpSpec(privileged_dim, cfg.critic_hidden, 1, "elu"))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class Trainer:
    """Owns every learnable quantity and runs epochs of the SDPG loop."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.rollout_cfg = RolloutConfig(cfg.N, cfg.M, cfg.H, cfg.gamma, cfg.lam)
        self.envs = make_rollout_envs(
            cfg.env_id, self.rollout_cfg, cfg.obs_mode, cfg.seed, proprio=cfg.proprio, workers=cfg.workers
        )
        if cfg.stagger_episodes:
            # spread the nominals' episode clocks so their resets do not coincide
            nom = self.rollout_cfg.nominal_indices()
            self.envs.steps[nom] = (np.arange(cfg.N) * MAX_EPISODE_LEN) // cfg.N
            sync_auxiliaries(self.envs, self.rollout_cfg)
        d = self.envs.action_dim
        self.actor = build_actor(cfg, self.envs.obs_dim, d, self.envs.proprio_dim)
        self.critic = build_critic(cfg, self.envs.privileged_dim)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, INIT_STREAM])))
        self.actor_params = self.actor.init(rng)
        self.critic_params = self.critic.init(rng)
        self.target_params = self.critic_params.copy()
        self.explore = ExplorationState(
            np.full(d, cfg.log_std_init),
            math.log(cfg.init_temperature),
            cfg.delta_target,
            cfg.log_std_min,
            cfg.log_std_max,
        )
        self.actor_adam = AdamState.zeros(self.actor.num_params, cfg.lr_actor)
        self.explore_adam = AdamState.zeros(d, cfg.lr_explore)
        self.temp_adam = AdamState.zeros(1, cfg.lr_temperature)
        self.critic_adam = AdamState.zeros(self.critic.num_params, cfg.lr_critic)
        total = max(cfg.epochs, 1)
        self.actor_schedule = LrSchedule(
            cfg.actor_schedule, total, cfg.lr_actor, cfg.actor_warmup, cfg.actor_eta_min
        )
        self.critic_schedule = LrSchedule(
            cfg.critic_schedule, total, cfg.lr_critic, start_frac=cfg.critic_lr_start, end_frac=cfg.critic_lr_end
        )
        self.epoch = 0
        self.env_steps = 0
        self.last_buffer: SegmentBuffer | None = None

    # -- policy helpers ---------------------------------------------------------

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.actor(self.actor_params, obs)

    def target_value(self, states: np.ndarray) -> np.ndarray:
        return self.critic(self.target_params, states)[:, 0]

    @property
    def entropy_alpha(self) -> float:
        return self.explore.alpha if (self.cfg.actor_entropy or self.cfg.soft_critic) else 0.0

    # -- one epoch ---------------------------------------------------------------

    def train_epoch(self) -> dict:
        cfg, rc = self.cfg, self.rollout_cfg
        e = self.epoch
        t0 = time.perf_counter()

        sync_auxiliaries(self.envs, rc)
        buf = run_segment(
            self.envs,
            self.mean_action,
            self.explore.log_std,
            self.target_value,
            rc,
            seed=cfg.seed,
            epoch=e,
            preact_clip=cfg.preact_clip,
        )
        self.last_buffer = buf
        returns = compute_returns(buf, cfg.gamma, cfg.lam, cfg.trace_mode)
        dj, sigma = normalize_delta_j(returns, cfg.normalize_dj)

        # actor + exploration factor
        a_tgt = actor_target(buf.mean_actions, dj, buf.eps, cfg.preact_clip)
        ls_tgt = exploration_target(self.explore.log_std, dj, buf.eps)
        alpha = self.explore.alpha if cfg.actor_entropy else 0.0
        losses, g_actor, g_ls = actor_exploration_loss(
            self.actor, self.actor_params, self.explore.log_std, buf.obs, a_tgt, ls_tgt, alpha, cfg.workers
        )
        lr_a = self.actor_schedule.multiplier(e)
        self.actor_adam, self.actor_params = adam_step(
            self.actor_adam, self.actor_params, g_actor, cfg.max_grad_norm, lr_a
        )
        self.explore_adam, new_ls = adam_step(self.explore_adam, self.explore.log_std, g_ls, cfg.max_grad_norm)
        self.explore.log_std = new_ls
        self.explore.clip()

        if cfg.auto_temperature and (cfg.actor_entropy or cfg.soft_critic):
            self.explore.log_alpha, self.temp_adam, losses.temperature_loss = temperature_update(
                self.explore.log_alpha, self.explore.log_std, cfg.delta_target, self.temp_adam
            )

        # critic
        rewards = buf.rewards
        if cfg.soft_critic:
            rewards = soft_critic_reward(rewards, buf.log_std, math.log(cfg.delta_target), self.explore.alpha)
        targets = critic_value_targets(buf, cfg.gamma, cfg.lam, rewards)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, CRITIC_STREAM, e])))
        lr_c = self.critic_schedule.multiplier(e)
        self.critic_params, self.critic_adam, losses.critic_loss = critic_update(
            self.critic,
            self.critic_params,
            self.critic_adam,
            buf.states,
            targets,
            cfg.critic_batch,
            cfg.critic_iters,
            rng,
            cfg.max_grad_norm,
            lr_c,
            cfg.workers,
        )
        self.target_params = polyak_update(self.target_params, self.critic_params, cfg.rho)

        for name, v in vars(losses).items():
            if not math.isfinite(v):
                raise NonFiniteError(f"{name} is {v} at epoch {e}")

        self.epoch += 1
        self.env_steps += rc.total_envs * rc.H
        self.last_losses = losses
        row = {
            "epoch": self.epoch,
            "env_steps": self.env_steps,
            "mean_nominal_return": float(returns[0, :, 0].mean()),
            "mean_aux_return": float(returns[0, :, 1:].mean()),
            "mean_sigma": float(sigma.mean()),
            "mean_delta": float(self.explore.delta.mean()),
            "actor_loss": losses.actor_loss,
            "critic_loss": losses.critic_loss,
            "temperature": self.explore.alpha,
            "lr_actor": self.actor_schedule.lr(e),
            "lr_critic": self.critic_schedule.lr(e),
            "wall_time_s": time.perf_counter() - t0,
        }
        return row

    # -- persistence -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "env_steps": self.env_steps,
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
            "actor_params": self.actor_params.tolist(),
            "critic_params": self.critic_params.tolist(),
            "target_params": self.target_params.tolist(),
            "log_std": self.explore.log_std.tolist(),
            "log_alpha": self.explore.log_alpha,
            "adam": {
                "actor": self.actor_adam.to_dict(),
                "explore": self.explore_adam.to_dict(),
                "temperature": self.temp_adam.to_dict(),
                "critic": self.critic_adam.to_dict(),
            },
        }

    def save(self, path) -> Path:
        return checkpoint.save_checkpoint(path, self.state_dict())

    # -- training driver ---------------------------------------------------------

    def fit(self, out_dir=None, epochs: int | None = None, callback=None) -> list[dict]:
        """Run the configured number of epochs, writing metrics and checkpoints.

        ``callback(trainer, row)`` is invoked after every epoch.
        """
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        with open(out / "metrics.csv", "w", newline="") as mf, open(out / "timing.csv", "w", newline="") as tf:
            writer = csv.writer(mf, lineterminator="\n")
            writer.writerow(METRICS_FIELDS)
            timing = csv.writer(tf, lineterminator="\n")
            timing.writerow(("epoch", "wall_time_s"))
            if epochs == 0:
                self.save(out / "final.ckpt")
            for _ in range(epochs):
                row = self.train_epoch()
                rows.append(row)
                vals = [
                    ("" if not cfg.record_wall_time else _fmt(row[k])) if k == "wall_time_s" else _fmt(row[k])
                    for k in METRICS_FIELDS
                ]
                writer.writerow(vals)
                mf.flush()
                timing.writerow((row["epoch"], _fmt(row["wall_time_s"])))
                if cfg.checkpoint_interval and self.epoch % cfg.checkpoint_interval == 0:
                    self.save(out / f"epoch_{self.epoch:06d}.ckpt")
                if callback is not None:
                    callback(self, row)
            if epochs:
                self.save(out / "final.ckpt")
        return rows


@dataclass
class LoadedPolicy:
    cfg: TrainConfig
    actor: object
    actor_params: np.ndarray
    log_std: np.ndarray
    state: dict

    def mean_action(self, obs):
        return self.actor(self.actor_params, obs)


def load_policy(path) -> LoadedPolicy:
    state = checkpoint.load_checkpoint(path)
    cfg = TrainConfig.from_dict(state["config"])
    actor = network_from_dict(state["actor"])
    params = np.asarray(state["actor_params"], dtype=np.float64)
    if params.shape != (actor.num_params,):
        raise ContractViolation("checkpoint actor parameters do not match the stored network description")
    return LoadedPolicy(cfg, actor, params, np.asarray(state["log_std"], dtype=np.float64), state)


def restore_trainer(path) -> Trainer:
    """Rebuild a trainer from a checkpoint (environment state restarts fresh)."""
    state = checkpoint.load_checkpoint(path)
    tr = Trainer(TrainConfig.from_dict(state["config"]))
    tr.epoch = state["epoch"]
    tr.env_steps = state["env_steps"]
    tr.actor_params = np.asarray(state["actor_params"], dtype=np.float64)
    tr.critic_params = np.asarray(state["critic_params"], dtype=np.float64)
    tr.target_params = np.asarray(state["target_params"], dtype=np.float64)
    tr.explore.log_std = np.asarray(state["log_std"], dtype=np.float64)
    tr.explore.log_alpha = state["log_alpha"]
    tr.actor_adam = AdamState.from_dict(state["adam"]["actor"])
    tr.explore_adam = AdamState.from_dict(state["adam"]["explore"])
    tr.temp_adam = AdamState.from_dict(state["adam"]["temperature"])
    tr.critic_adam = AdamState.from_dict(state["adam"]["critic"])
    return tr


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    returns: np.ndarray  # discounted
    undiscounted: np.ndarray
    success: np.ndarray
    final_states: np.ndarray
    initial_states: np.ndarray
    oracle_returns: np.ndarray | None = None

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())

    @property
    def std_return(self) -> float:
        return float(self.returns.std())

    @property
    def success_rate(self) -> float:
        return float(self.success.mean())

    @property
    def oracle_ratio(self) -> float | None:
        if self.oracle_returns is None:
            return None
        return float(self.returns.mean() / self.oracle_returns.mean())


def _success(env_id: str, final: np.ndarray, survived: np.ndarray) -> np.ndarray:
    if env_id == "PointMass2D":
        return np.linalg.norm(final[:, :2], axis=1) < 0.1
    if env_id == "PendulumSwingUp":
        return np.cos(final[:, 0]) > 0.9
    return survived


def evaluate_policy(
    mean_action_fn,
    env_id: str,
    obs_mode: str = "state",
    episodes: int = 8,
    seed: int = 0,
    gamma: float = 0.99,
    preact_clip=(-2.0, 2.0),
    proprio: bool = False,
    with_oracle: bool = True,
) -> EvalResult:
    """Deterministic (zero-exploration) episodes of the mean policy."""
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    env = EnvBatch(env_id, episodes, obs_mode, seed, proprio=proprio)
    init = env.state.copy()
    ret = np.zeros(episodes)
    undisc = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    failed = np.zeros(episodes, dtype=bool)
    final = init.copy()
    disc = 1.0
    for _ in range(MAX_EPISODE_LEN):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        act = squash_action(mean_action_fn(env.observe(idx)), preact_clip)
        res = env.step(act, idx)
        ret[idx] += disc * res.reward
        undisc[idx] += res.reward
        disc *= gamma
        final[idx] = env.state[idx]
        failed[idx] |= res.terminated
        alive[idx] &= ~res.done
    oracle = None
    if with_oracle and env_id == "PointMass2D":
        oracle = np.array([lqr_oracle_return(env_id, s, MAX_EPISODE_LEN, gamma) for s in init])
    return EvalResult(ret, undisc, _success(env_id, final, ~failed), final, init, oracle)


def evaluate_trainer(trainer: Trainer, episodes: int = 8, seed: int = 12345) -> EvalResult:
    cfg = trainer.cfg
    return evaluate_policy(
        trainer.mean_action,
        cfg.env_id,
        cfg.obs_mode,
        episodes,
        seed,
        cfg.gamma,
        cfg.preact_clip,
        cfg.proprio,
    )


def check_env_compat(cfg: TrainConfig, env_id: str) -> None:
    if env_id != cfg.env_id:
        raise ContractViolation(f"checkpoint was trained on {cfg.env_id}, not {env_id}")
    get_dynamics(env_id)


__all__ = [
    "METRICS_FIELDS",
    "Trainer",
    "EvalResult",
    "evaluate_policy",
    "evaluate_trainer",
    "load_policy",
    "restore_trainer",
    "SdpgLosses",
]
