"""Adam with global-norm clipping, and the two learning-rate schedules we use."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NonFiniteError


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=np.zeros(size), v=np.zeros(size), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "m": self.m.tolist(),
            "v": self.v.tolist(),
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(
            lr=d["lr"],
            m=np.asarray(d["m"], dtype=np.float64),
            v=np.asarray(d["v"], dtype=np.float64),
            t=int(d["t"]),
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
        )


def check_finite(x: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NonFiniteError(f"{what} has non-finite entry at index {int(bad[0])}", index=int(bad[0]))


def clip_by_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    max_norm: float = math.inf,
    lr_multiplier: float = 1.0,
) -> tuple[AdamState, np.ndarray]:
    """One clipped Adam step. Returns new ``(state, params)``; inputs are not mutated.

    Raises NonFiniteError (with the offending index) instead of applying an
    update built from NaN/inf gradients.
    """
    if not max_norm > 0:
        raise ContractViolation("max_norm must be positive")
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ContractViolation("params, grads and Adam moments must share a shape")
    check_finite(grads, "gradient")
    g = clip_by_norm(grads, max_norm)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * lr_multiplier * m_hat / (np.sqrt(v_hat) + state.eps)
    check_finite(new_params, "updated parameters")
    return AdamState(state.lr, m, v, t, state.beta1, state.beta2, state.eps), new_params


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate multiplier per epoch.

    kind is one of ``"cosine"`` (linear warmup then cosine decay to
    ``eta_min``, an absolute rate), ``"linear"`` (from ``start_frac`` to
    ``end_frac``) or ``"constant"``. Epochs are 0-based; the last epoch is
    ``total_epochs - 1``.
    """

    kind: str = "constant"
    total_epochs: int = 1
    base_lr: float = 1.0
    warmup_epochs: int = 0
    eta_min: float = 0.0
    start_frac: float = 1.0
    end_frac: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ContractViolation("total_epochs must be >= 1")

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.multiplier(epoch)

    def multiplier(self, epoch: int) -> float:
        last = self.total_epochs - 1
        e = min(max(epoch, 0), last)
        if self.kind == "constant":
            return 1.0
        if self.kind == "linear":
            if last == 0:
                return self.start_frac
            return self.start_frac + (self.end_frac - self.start_frac) * e / last
        floor = self.eta_min / self.base_lr
        w = min(self.warmup_epochs, self.total_epochs)
        if e < w - 1:
            return (e + 1) / w
        start = max(w - 1, 0)
        if last <= start:
            return 1.0
        progress = (e - start) / (last - start)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
