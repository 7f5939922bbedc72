import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ScriptedDynamics:
    """1-D walker whose reward is its position and which fails past a wall.

    State is (x, v); the action is added to x directly. Used to script
    terminations at known steps.
    """

    name = "Scripted"
    state_dim = 2
    action_dim = 1
    obs_dim = 2
    proprio_slice = slice(1, 2)
    nominal = np.array([0.0, 0.0])
    reward_bound = 10.0
    wall = 1.0

    @classmethod
    def step(cls, s, a):
        return np.stack([s[:, 0] + a[:, 0], s[:, 1] + 1.0], axis=1)

    @classmethod
    def reward(cls, s, a):
        return s[:, 0].copy()

    @classmethod
    def terminated(cls, s):
        return s[:, 0] > cls.wall

    @classmethod
    def observe(cls, s):
        return s.copy()

    @classmethod
    def render(cls, s):
        return np.zeros((s.shape[0], 32, 32))


@pytest.fixture
def scripted_env(monkeypatch):
    from sdpg import envs

    monkeypatch.setitem(envs.ENVS, "Scripted", ScriptedDynamics)
    monkeypatch.setattr(envs, "RESET_NOISE", 0.0)
    return ScriptedDynamics


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
