"""Batched analytic toy environments.

Three tasks share one batched container (:class:`EnvBatch`):

* ``PointMass2D``: planar double integrator driven toward the origin.
* ``PendulumSwingUp``: torque-limited pendulum that starts hanging down.
* ``CartPole``: continuous-force cart-pole balancing.

All dynamics are deterministic numpy expressions applied row-wise, so a
batch steps exactly like the same environments stepped one at a time.
Initial-state noise comes from a Philox generator owned by the batch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, ContractViolation, UnsupportedError

DT = 0.05
MAX_EPISODE_LEN = 200
RESET_NOISE = 0.1
FRAME_SIZE = 32
FRAME_STACK = 3


def _wrap(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def _grid(extent: float):
    """Pixel-centre world coordinates of a square frame spanning ``[-extent, extent]``."""
    c = (np.arange(FRAME_SIZE) + 0.5) / FRAME_SIZE * 2.0 * extent - extent
    x = c[None, :]
    y = -c[:, None]  # row 0 is the top of the image
    return x, y


def _disk(cx, cy, radius, extent):
    x, y = _grid(extent)
    px = 2.0 * extent / FRAME_SIZE
    d = np.hypot(x[None] - cx[:, None, None], y[None] - cy[:, None, None])
    return np.clip((radius - d) / px + 0.5, 0.0, 1.0)


def _segment(x0, y0, x1, y1, width, extent):
    x, y = _grid(extent)
    px = 2.0 * extent / FRAME_SIZE
    x, y = x[None], y[None]
    x0, y0, x1, y1 = (a[:, None, None] for a in (x0, y0, x1, y1))
    dx, dy = x1 - x0, y1 - y0
    L2 = np.maximum(dx * dx + dy * dy, 1e-12)
    s = np.clip(((x - x0) * dx + (y - y0) * dy) / L2, 0.0, 1.0)
    d = np.hypot(x - (x0 + s * dx), y - (y0 + s * dy))
    return np.clip((0.5 * width - d) / px + 0.5, 0.0, 1.0)


class PointMass2D:
    name = "PointMass2D"
    state_dim = 4  # px, py, vx, vy
    action_dim = 2
    obs_dim = 5  # px, py, vx, vy, distance to goal
    proprio_slice = slice(2, 4)
    nominal = np.array([1.0, 1.0, 0.0, 0.0])
    goal = np.zeros(2)
    a_max = 1.0
    extent = 3.0
    reward_bound = 2.0

    @classmethod
    def step(cls, s, a):
        v = s[:, 2:] + a * DT * cls.a_max
        p = s[:, :2] + v * DT
        return np.concatenate([p, v], axis=1)

    @classmethod
    def reward(cls, s, a):
        dist = np.linalg.norm(s[:, :2] - cls.goal, axis=1)
        r = 1.0 - dist - 0.1 * np.sum(a * a, axis=1)
        # a live state has |p| <= 3, so only the far edge needs the clamp
        return np.maximum(r, -cls.reward_bound)

    @classmethod
    def terminated(cls, s):
        return np.linalg.norm(s[:, :2], axis=1) > 3.0

    @classmethod
    def observe(cls, s):
        # the reward is a cone in position; exposing its apex distance lets a
        # smooth approximator represent the kink at the goal
        dist = np.linalg.norm(s[:, :2] - cls.goal, axis=1, keepdims=True)
        return np.concatenate([s, dist], axis=1)

    @classmethod
    def render(cls, s):
        agent = _disk(s[:, 0], s[:, 1], 0.3, cls.extent)
        x, y = _grid(cls.extent)
        px = 2.0 * cls.extent / FRAME_SIZE
        gx, gy = cls.goal
        cross = ((np.abs(x - gx) < 1.5 * px) & (np.abs(y - gy) < 0.5 * px)) | (
            (np.abs(y - gy) < 1.5 * px) & (np.abs(x - gx) < 0.5 * px)
        )
        return np.maximum(agent, 0.5 * cross[None].astype(float))


class PendulumSwingUp:
    name = "PendulumSwingUp"
    state_dim = 2  # theta (0 = upright), omega
    action_dim = 1
    obs_dim = 3
    proprio_slice = slice(1, 2)
    nominal = np.array([np.pi, 0.0])
    g = 10.0
    length = 1.0
    mass = 1.0
    max_torque = 5.0
    max_speed = 8.0
    extent = 1.5
    reward_bound = 1.0 + 0.01 * 8.0**2 + 0.01

    @classmethod
    def step(cls, s, a):
        th, om = s[:, 0], s[:, 1]
        acc = cls.g / cls.length * np.sin(th) + cls.max_torque * a[:, 0] / (cls.mass * cls.length**2)
        om2 = np.clip(om + acc * DT, -cls.max_speed, cls.max_speed)
        th2 = _wrap(th + om2 * DT)
        return np.stack([th2, om2], axis=1)

    @classmethod
    def reward(cls, s, a):
        return np.cos(s[:, 0]) - 0.01 * s[:, 1] ** 2 - 0.01 * np.sum(a * a, axis=1)

    @classmethod
    def terminated(cls, s):
        return np.zeros(s.shape[0], dtype=bool)

    @classmethod
    def observe(cls, s):
        return np.stack([np.cos(s[:, 0]), np.sin(s[:, 0]), s[:, 1] / cls.max_speed], axis=1)

    @classmethod
    def render(cls, s):
        th = s[:, 0]
        zero = np.zeros_like(th)
        tip_x = cls.length * np.sin(th)
        tip_y = cls.length * np.cos(th)
        rod = _segment(zero, zero, tip_x, tip_y, 0.2, cls.extent)
        bob = _disk(tip_x, tip_y, 0.2, cls.extent)
        return np.maximum(rod, bob)


class CartPole:
    name = "CartPole"
    state_dim = 4  # x, x_dot, theta, theta_dot
    action_dim = 1
    obs_dim = 4
    proprio_slice = slice(1, 2)
    nominal = np.zeros(4)
    g = 9.8
    m_cart = 1.0
    m_pole = 0.1
    half_len = 0.5
    force = 10.0
    theta_limit = 0.21
    x_limit = 2.4
    extent = 2.6
    reward_bound = 1.0

    @classmethod
    def step(cls, s, a):
        x, xd, th, thd = s.T
        f = cls.force * a[:, 0]
        total = cls.m_cart + cls.m_pole
        pml = cls.m_pole * cls.half_len
        cos, sin = np.cos(th), np.sin(th)
        tmp = (f + pml * thd**2 * sin) / total
        thacc = (cls.g * sin - cos * tmp) / (cls.half_len * (4.0 / 3.0 - cls.m_pole * cos**2 / total))
        xacc = tmp - pml * thacc * cos / total
        xd2 = xd + DT * xacc
        thd2 = thd + DT * thacc
        return np.stack([x + DT * xd2, xd2, th + DT * thd2, thd2], axis=1)

    @classmethod
    def reward(cls, s, a):
        return np.ones(s.shape[0])

    @classmethod
    def terminated(cls, s):
        return (np.abs(s[:, 2]) > cls.theta_limit) | (np.abs(s[:, 0]) > cls.x_limit)

    @classmethod
    def observe(cls, s):
        return s.copy()

    @classmethod
    def render(cls, s):
        x, th = s[:, 0], s[:, 2]
        cart_y = np.full_like(x, -0.8)
        cart = _segment(x - 0.3, cart_y, x + 0.3, cart_y, 0.3, cls.extent)
        pole_len = 2.0 * cls.half_len * 1.5
        pole = _segment(x, cart_y, x + pole_len * np.sin(th), cart_y + pole_len * np.cos(th), 0.12, cls.extent)
        return np.maximum(cart, pole)


ENVS = {cls.name: cls for cls in (PointMass2D, PendulumSwingUp, CartPole)}
OBS_MODES = ("state", "pixels")


def get_dynamics(env_id: str):
    try:
        return ENVS[env_id]
    except KeyError:
        raise ConfigError(f"unknown env_id {env_id!r}; choose from {sorted(ENVS)}") from None


@dataclass(frozen=True)
class EnvState:
    """Copyable snapshot of one environment."""

    env_id: str
    values: tuple[float, ...]
    step: int

    def key(self) -> bytes:
        return np.asarray(self.values, dtype=np.float64).tobytes() + self.step.to_bytes(8, "little")


@dataclass
class StepResult:
    """Batched result of one ``EnvBatch.step`` call (rows follow the stepped indices)."""

    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    privileged_state: np.ndarray
    observation: np.ndarray | None = None

    @property
    def done(self) -> np.ndarray:
        return self.terminated | self.truncated


class EnvBatch:
    """``count`` copies of one toy task stepped in lock-step.

    Only the rows listed in ``rendered`` keep a pixel frame stack; the rest
    are physics-only. ``workers`` splits stepping and rendering across
    threads without changing any result.
    """

    def __init__(
        self,
        env_id: str,
        count: int,
        obs_mode: str = "state",
        seed: int = 0,
        rendered=None,
        proprio: bool = False,
        workers: int = 1,
    ):
        self.dyn = get_dynamics(env_id)
        if count < 1:
            raise ContractViolation("count must be >= 1")
        if obs_mode not in OBS_MODES:
            raise ConfigError(f"unknown obs_mode {obs_mode!r}; choose from {OBS_MODES}")
        self.env_id = env_id
        self.count = count
        self.obs_mode = obs_mode
        self.proprio = proprio
        self.workers = max(1, int(workers))
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
        self.state = np.zeros((count, self.dyn.state_dim))
        self.steps = np.zeros(count, dtype=np.int64)
        self.needs_reset = np.zeros(count, dtype=bool)
        self.rendered = np.arange(count) if rendered is None else np.asarray(rendered, dtype=np.int64)
        self._render_slot = np.full(count, -1, dtype=np.int64)
        self._render_slot[self.rendered] = np.arange(self.rendered.size)
        self.frames = np.zeros((self.rendered.size, FRAME_STACK, FRAME_SIZE, FRAME_SIZE))
        self.reset(np.arange(count))

    # -- shapes ---------------------------------------------------------------

    @property
    def action_dim(self) -> int:
        return self.dyn.action_dim

    @property
    def privileged_dim(self) -> int:
        return self.dyn.obs_dim

    @property
    def proprio_dim(self) -> int:
        s = self.dyn.proprio_slice
        return s.stop - s.start if self.proprio else 0

    @property
    def obs_dim(self) -> int:
        if self.obs_mode == "state":
            return self.dyn.obs_dim
        return FRAME_STACK * FRAME_SIZE * FRAME_SIZE + self.proprio_dim

    # -- helpers --------------------------------------------------------------

    def _map(self, fn, rows: np.ndarray):
        if self.workers == 1 or rows.shape[0] < 2:
            return fn(rows)
        chunks = np.array_split(rows, self.workers)
        with ThreadPoolExecutor(self.workers) as pool:
            parts = list(pool.map(fn, chunks))
        return np.concatenate(parts, axis=0)

    def _indices(self, indices) -> np.ndarray:
        idx = np.arange(self.count) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise ContractViolation(f"environment index out of range [0, {self.count})")
        return idx

    def _restart_frames(self, idx: np.ndarray) -> None:
        slots = self._render_slot[idx]
        keep = slots >= 0
        if self.obs_mode != "pixels" or not keep.any():
            return
        img = self.dyn.render(self.state[idx[keep]])
        self.frames[slots[keep]] = img[:, None]

    # -- API ------------------------------------------------------------------

    def reset(self, indices=None) -> None:
        idx = self._indices(indices)
        noise = self._rng.uniform(-RESET_NOISE, RESET_NOISE, size=(idx.size, self.dyn.state_dim))
        self.state[idx] = self.dyn.nominal + noise
        self.steps[idx] = 0
        self.needs_reset[idx] = False
        self._restart_frames(idx)

    def step(self, actions, indices=None) -> StepResult:
        idx = self._indices(indices)
        a = np.asarray(actions, dtype=np.float64).reshape(idx.size, self.dyn.action_dim)
        bad = ~np.isfinite(a).all(axis=1)
        if bad.any():
            raise ContractViolation(f"non-finite action for environment {int(idx[np.argmax(bad)])}")
        out = np.abs(a) > 1.0
        if out.any():
            raise ContractViolation(
                f"action outside [-1, 1] for environment {int(idx[np.argmax(out.any(axis=1))])}"
            )
        if self.needs_reset[idx].any():
            raise ContractViolation(
                f"environment {int(idx[np.argmax(self.needs_reset[idx])])} must be reset before stepping"
            )
        s = self.state[idx]
        rows = np.arange(idx.size)
        reward = self._map(lambda r: self.dyn.reward(s[r], a[r]), rows)
        nxt = self._map(lambda r: self.dyn.step(s[r], a[r]), rows)
        self.state[idx] = nxt
        self.steps[idx] += 1
        terminated = self.dyn.terminated(nxt)
        truncated = (self.steps[idx] >= MAX_EPISODE_LEN) & ~terminated
        self.needs_reset[idx] = terminated | truncated
        obs = None
        if self.obs_mode == "pixels":
            slots = self._render_slot[idx]
            keep = slots >= 0
            if keep.any():
                img = self._map(self.dyn.render, nxt[keep])
                sl = slots[keep]
                self.frames[sl, :-1] = self.frames[sl, 1:]
                self.frames[sl, -1] = img
        rend = idx[self._render_slot[idx] >= 0]
        if rend.size:
            obs = self.observe(rend)
        return StepResult(reward, terminated, truncated, self.dyn.observe(nxt), obs)

    def observe(self, indices=None) -> np.ndarray:
        """Actor observations, one flat row per index."""
        idx = self._indices(indices)
        if self.obs_mode == "state":
            return self.dyn.observe(self.state[idx])
        slots = self._render_slot[idx]
        if (slots < 0).any():
            raise ContractViolation("pixel observations requested for a physics-only environment")
        rows = self.frames[slots].reshape(idx.size, -1)
        if self.proprio:
            prop = self.dyn.observe(self.state[idx])[:, self.dyn.proprio_slice]
            rows = np.concatenate([rows, prop], axis=1)
        return rows

    def privileged(self, indices=None) -> np.ndarray:
        """Low-dimensional critic inputs."""
        return self.dyn.observe(self.state[self._indices(indices)])

    def snapshot(self, indices=None) -> list[EnvState]:
        idx = self._indices(indices)
        return [EnvState(self.env_id, tuple(self.state[i].tolist()), int(self.steps[i])) for i in idx]

    def restore(self, indices, states) -> None:
        idx = self._indices(indices)
        if len(states) != idx.size:
            raise ContractViolation("need exactly one state per index")
        for i, st in zip(idx, states):
            if st.env_id != self.env_id or len(st.values) != self.dyn.state_dim:
                raise ContractViolation(
                    f"state for {st.env_id} with {len(st.values)} values does not fit {self.env_id}"
                )
            self.state[i] = st.values
            self.steps[i] = st.step
        self.needs_reset[idx] = False
        self._restart_frames(idx)

    def copy_rows(self, src, dst) -> None:
        """Vectorised snapshot+restore: row ``dst[k]`` becomes a copy of ``src[k]``."""
        src = self._indices(src)
        dst = self._indices(dst)
        self.state[dst] = self.state[src]
        self.steps[dst] = self.steps[src]
        self.needs_reset[dst] = False
        self._restart_frames(dst)

    def render(self, state: EnvState) -> np.ndarray:
        return render(state)


def make_env_batch(env_id: str, count: int, obs_mode: str = "state", seed: int = 0, **kw) -> EnvBatch:
    return EnvBatch(env_id, count, obs_mode, seed, **kw)


def render(state: EnvState) -> np.ndarray:
    """Rasterise one state to a 32x32 grayscale image in [0, 1]."""
    dyn = get_dynamics(state.env_id)
    return dyn.render(np.asarray(state.values, dtype=np.float64)[None])[0]


# ---------------------------------------------------------------------------
# reference controllers
# ---------------------------------------------------------------------------


def _as_state_vector(env_id: str, initial_state) -> np.ndarray:
    if isinstance(initial_state, EnvState):
        return np.asarray(initial_state.values, dtype=np.float64)
    x = np.asarray(initial_state, dtype=np.float64).reshape(-1)
    if x.size != get_dynamics(env_id).state_dim:
        raise ContractViolation(f"initial state of size {x.size} does not fit {env_id}")
    return x


def controller_return(env_id: str, initial_state, controller, horizon: int, gamma: float) -> float:
    """Discounted return of a state-feedback controller run in the real environment.

    ``controller`` maps a state vector to an action in [-1, 1]^d.
    """
    x = _as_state_vector(env_id, initial_state)
    env = EnvBatch(env_id, 1)
    env.restore([0], [EnvState(env_id, tuple(x.tolist()), 0)])
    total, disc = 0.0, 1.0
    for _ in range(horizon):
        a = np.asarray(controller(env.state[0].copy()), dtype=np.float64)
        res = env.step(a[None])
        total += disc * float(res.reward[0])
        disc *= gamma
        if res.done[0]:
            break
    return total


def lqr_gain(gamma: float = 0.99, q_pos: float = 1.0, q_vel: float = 0.0, r: float = 0.1) -> np.ndarray:
    """Discounted discrete-time LQR gain K (action = -K x) for the point mass."""
    dyn = PointMass2D
    I2 = np.eye(2)
    A = np.block([[I2, DT * I2], [np.zeros((2, 2)), I2]])
    B = np.vstack([DT * DT * dyn.a_max * I2, DT * dyn.a_max * I2])
    Q = np.diag([q_pos, q_pos, q_vel, q_vel])
    R = r * I2
    sg = math.sqrt(gamma)
    P = scipy.linalg.solve_discrete_are(sg * A, sg * B, Q, R)
    return gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)


def lqr_oracle_return(env_id: str, initial_state, horizon: int = MAX_EPISODE_LEN, gamma: float = 0.99) -> float:
    """Return of the LQR-optimal point-mass controller, saturated to the action box."""
    if env_id != PointMass2D.name:
        raise UnsupportedError(f"LQR oracle is only defined for {PointMass2D.name}, not {env_id}")
    K = lqr_gain(gamma)
    return controller_return(env_id, initial_state, lambda x: np.clip(-K @ x, -1.0, 1.0), horizon, gamma)
