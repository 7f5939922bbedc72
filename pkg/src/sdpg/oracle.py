"""Independent numerical oracles for the update machinery.

Each check computes a quantity twice along unrelated arithmetic paths and
compares the two: reverse-mode gradients against central differences or a
forward-mode Jacobian, the smoothed-gradient estimator against its closed
form, and the SDPG ascent direction against the Gaussian likelihood-ratio
(REINFORCE) direction. The forward-mode code below deliberately re-derives
the MLP from the documented parameter layout instead of calling into
:mod:`sdpg.nn`.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConvSpec, EncoderMlp, Mlp, MlpSpec, conv_backward, conv_forward, mlp_backward, mlp_forward
from .update import actor_exploration_loss, smoothed_gradient

SMOOTHING_SAMPLES = 100_000
SMOOTHING_DIM = 8
SMOOTHING_DELTA = 0.1
EXACT_SEEDS = 20
REINFORCE_INSTANCES = 100


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    samples: int
    wall_time_s: float = 0.0


@dataclass
class VerificationReport:
    seed: int = 0
    entries: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def add(self, entry: CheckResult) -> None:
        if any(e.name == entry.name for e in self.entries):
            raise ValueError(f"check {entry.name!r} registered twice")
        self.entries.append(entry)

    def table(self) -> str:
        head = f"{'check':<28} {'result':<6} {'error':>11} {'tolerance':>11} {'samples':>8} {'time_s':>7}"
        lines = [head, "-" * len(head)]
        for e in self.entries:
            lines.append(
                f"{e.name:<28} {'PASS' if e.passed else 'FAIL':<6} {e.error:>11.3e} "
                f"{e.tolerance:>11.3e} {e.samples:>8d} {e.wall_time_s:>7.2f}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "passed", "error", "tolerance", "samples", "wall_time_s"])
            for e in self.entries:
                w.writerow([e.name, int(e.passed), repr(float(e.error)), repr(float(e.tolerance)),
                            e.samples, f"{e.wall_time_s:.3f}"])
        return path


def _timed(name, tolerance, samples, fn, compare="le"):
    t0 = time.perf_counter()
    err = float(fn())
    ok = err <= tolerance if compare == "le" else err < tolerance
    return CheckResult(name, bool(ok and math.isfinite(err)), err, tolerance, samples,
                       time.perf_counter() - t0)


def relative_error(a, b) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; zero when both sides are exactly zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale


# ---------------------------------------------------------------------------
# generic oracles
# ---------------------------------------------------------------------------


def finite_diff_grad(f, x, step: float = 1e-6, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``coords`` optionally restricts the probe to a subset of flat indices;
    the other entries of the result are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def mc_smoothed_grad(J, A, delta, samples: int, sigma: float = 1.0, rng=None, batch: int = 10_000):
    """Monte-Carlo mean and standard error of ``(J(A + delta*eps) - J(A)) / sigma * eps``.

    ``J`` maps a ``(k, *A.shape)`` batch of action sequences to ``(k,)``
    returns. Returns ``(mean, stderr)`` with the shape of ``A``.
    """
    if samples < 2:
        raise ValueError("need at least two samples for a standard error")
    rng = np.random.default_rng(0) if rng is None else rng
    A = np.asarray(A, dtype=np.float64)
    j0 = float(np.asarray(J(A[None]))[0])
    total = np.zeros(A.size)
    total_sq = np.zeros(A.size)
    done = 0
    while done < samples:
        k = min(batch, samples - done)
        eps = rng.standard_normal((k, A.size))
        vals = np.asarray(J((A.reshape(-1) + delta * eps).reshape(k, *A.shape)), dtype=np.float64)
        terms = (vals - j0)[:, None] / sigma * eps
        total += terms.sum(axis=0)
        total_sq += (terms * terms).sum(axis=0)
        done += k
    mean = total / samples
    var = np.maximum(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
    return mean.reshape(A.shape), np.sqrt(var / samples).reshape(A.shape)


# ---------------------------------------------------------------------------
# forward-mode Jacobian of an MLP (independent of sdpg.nn)
# ---------------------------------------------------------------------------


def _act_forward(name, z):
    if name == "elu":
        pos = np.maximum(z, 0.0)
        return pos + np.exp(np.minimum(z, 0.0)) - 1.0
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_slope(name, z):
    if name == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if name == "tanh":
        return 1.0 / np.cosh(z) ** 2
    return np.ones_like(z)


def mlp_jacobian(params, widths, x, activation="elu"):
    """``(outputs, J)`` with ``J[p, b, o] = d out[b, o] / d params[p]``.

    Parameters are laid out layer by layer as a row-major ``(n_in, n_out)``
    weight block followed by an ``n_out`` bias block. Tangents for every
    parameter are pushed forward together.
    """
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    P = params.size
    B = x.shape[0]
    h = x
    dh = np.zeros((P, B, x.shape[1]))
    off = 0
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        n_in, n_out = widths[layer], widths[layer + 1]
        W = params[off : off + n_in * n_out].reshape(n_in, n_out)
        w_off = off
        off += n_in * n_out
        b = params[off : off + n_out]
        b_off = off
        off += n_out
        z = np.einsum("bi,io->bo", h, W) + b
        dz = np.einsum("pbi,io->pbo", dh, W)
        rows, cols = np.divmod(np.arange(n_in * n_out), n_out)
        dz[w_off + np.arange(n_in * n_out), :, cols] += h[:, rows].T
        dz[b_off + np.arange(n_out), :, np.arange(n_out)] += 1.0
        name = activation if layer < n_layers - 1 else "identity"
        h = _act_forward(name, z)
        dh = dz * _act_slope(name, z)[None]
    if off != P:
        raise ValueError(f"parameter vector has {P} entries, layout needs {off}")
    return h, dh


def _random_mlp(rng):
    widths = (int(rng.integers(1, 9)), int(rng.integers(1, 33)), int(rng.integers(1, 33)), int(rng.integers(1, 5)))
    activation = ("elu", "tanh")[int(rng.integers(2))]
    spec = MlpSpec(widths[0], widths[1:3], widths[3], activation)
    params = rng.normal(0.0, 1.0, spec.num_params) / np.sqrt(np.repeat(4.0, spec.num_params))
    x = rng.normal(size=(int(rng.integers(1, 9)), widths[0]))
    return spec, params, x


# ---------------------------------------------------------------------------
# equivalence checks
# ---------------------------------------------------------------------------


def regression_step_sides(spec: MlpSpec, params, x, direction):
    """Both sides of the regression-step identity.

    Left: gradient of ``0.5 * ||A - sg(A + d)||^2`` (reverse mode through
    :mod:`sdpg.nn`). Right: ``-(dA/dtheta)^T d`` from the forward-mode
    Jacobian.
    """
    A = mlp_forward(params, spec, x)
    target = A + direction  # materialised: no gradient flows through it
    lhs, _ = mlp_backward(params, spec, x, A - target)
    _, J = mlp_jacobian(params, spec.widths, x, spec.activation)
    rhs = -np.einsum("pbo,bo->p", J, direction)
    return lhs, rhs


def bc_gradient_sides(spec: MlpSpec, params, x, return_grad, alpha: float):
    """Both sides of the behaviour-cloning identity.

    Left: ``-grad L_BC`` with ``L_BC = 1/(2 alpha) sum ||pi(o) - a_target||^2``
    and ``a_target = A + alpha * grad J``. Right: ``(dA/dtheta)^T grad J``.
    """
    A = mlp_forward(params, spec, x)
    target = A + alpha * return_grad
    g, _ = mlp_backward(params, spec, x, (A - target) / alpha)
    _, J = mlp_jacobian(params, spec.widths, x, spec.activation)
    rhs = np.einsum("pbo,bo->p", J, return_grad)
    return -g, rhs


def bc_loss_grad(spec: MlpSpec, params, x, a_target, alpha: float):
    A = mlp_forward(params, spec, x)
    g, _ = mlp_backward(params, spec, x, (A - a_target) / alpha)
    return g


def check_regression_step(seed: int = 0, seeds: int = EXACT_SEEDS) -> float:
    """Max relative error of the regression-step identity over random nets."""
    worst = 0.0
    for k in range(seeds):
        rng = np.random.default_rng([seed, 101, k])
        spec, params, x = _random_mlp(rng)
        d = rng.normal(size=(x.shape[0], spec.output_dim))
        lhs, rhs = regression_step_sides(spec, params, x, d)
        worst = max(worst, relative_error(lhs, rhs))
    return worst


def check_bc_gradient(seed: int = 0, seeds: int = EXACT_SEEDS) -> float:
    """Max relative error of the behaviour-cloning identity over random nets."""
    worst = 0.0
    for k in range(seeds):
        rng = np.random.default_rng([seed, 102, k])
        spec, params, x = _random_mlp(rng)
        gJ = rng.normal(size=(x.shape[0], spec.output_dim))
        alpha = float(rng.uniform(0.25, 2.0))
        lhs, rhs = bc_gradient_sides(spec, params, x, gJ, alpha)
        worst = max(worst, relative_error(lhs, rhs))
    return worst


def check_bc_step_scaling(seed: int = 0, seeds: int = EXACT_SEEDS) -> float:
    """Max ``|grad(2 alpha) - grad(alpha) / 2|``; doubling alpha halves the gradient exactly."""
    worst = 0.0
    for k in range(seeds):
        rng = np.random.default_rng([seed, 103, k])
        spec, params, x = _random_mlp(rng)
        target = rng.normal(size=(x.shape[0], spec.output_dim))
        alpha = float(rng.uniform(0.25, 2.0))
        g1 = bc_loss_grad(spec, params, x, target, alpha)
        g2 = bc_loss_grad(spec, params, x, target, 2.0 * alpha)
        worst = max(worst, float(np.max(np.abs(g2 - 0.5 * g1))))
    return worst


def reinforce_direction(u, mu, delta, ret, baseline):
    """Gaussian score-function direction ``grad_mu log N(u; mu, delta^2) * (ret - baseline)``."""
    return (u - mu) / (delta * delta) * (ret - baseline)


def check_reinforce_special_case(seed: int = 0, instances: int = REINFORCE_INSTANCES) -> float:
    """Max relative error between the M=1 SDPG direction (sigma := delta) and REINFORCE."""
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng([seed, 104, k])
        d = int(rng.integers(1, 7))
        A = rng.normal(size=d)
        delta = float(np.exp(rng.uniform(np.log(0.05), np.log(1.0))))
        eps = rng.normal(size=d)
        u = A + delta * eps
        j_nom = float(rng.normal())
        j_pert = float(rng.normal())
        sdpg = smoothed_gradient(np.array([j_pert]), j_nom, eps[None], delta)
        # the score function sees u - mu, which equals delta * eps only up to rounding
        rf = reinforce_direction(u, A, delta, j_pert, j_nom)
        worst = max(worst, relative_error(sdpg, rf))
    return worst


def check_smoothed_gradient(seed: int = 0, samples: int = SMOOTHING_SAMPLES, dim: int = SMOOTHING_DIM,
                            delta: float = SMOOTHING_DELTA, sigma: float = 1.0):
    """Largest |z-score| of the estimator mean against ``(delta/sigma) * grad J_delta(A)``.

    For ``J(A) = -||A||^2`` the smoothed objective is ``-||A||^2 - delta^2 dim``,
    whose gradient is ``-2A``. Returns ``(max_z, mean, stderr, expected)``.
    """
    rng = np.random.default_rng([seed, 105])
    A = rng.normal(size=dim)

    def J(batch):
        return -np.sum(batch.reshape(batch.shape[0], -1) ** 2, axis=1)

    mean, se = mc_smoothed_grad(J, A, delta, samples, sigma, np.random.default_rng([seed, 106]))
    # the estimator under test on the identical draw
    eps = np.random.default_rng([seed, 106]).standard_normal((samples, dim))
    est = smoothed_gradient(J(A + delta * eps), float(J(A[None])[0]), eps, sigma)
    if relative_error(est, mean) > 1e-9:
        return math.inf, est, se, None
    expected = (delta / sigma) * (-2.0 * A)
    z = np.abs(est - expected) / se
    return float(z.max()), est, se, expected


# ---------------------------------------------------------------------------
# gradient checks against central differences
# ---------------------------------------------------------------------------


def _fd_rel(analytic, f, x, coords, step=1e-6):
    fd = finite_diff_grad(f, x, step, coords)
    return relative_error(np.asarray(analytic).reshape(-1)[coords], fd.reshape(-1)[coords])


def check_mlp_gradients(seed: int = 0) -> float:
    worst = 0.0
    for k in range(5):
        rng = np.random.default_rng([seed, 107, k])
        spec, params, x = _random_mlp(rng)
        up = rng.normal(size=(x.shape[0], spec.output_dim))
        g, gx = mlp_backward(params, spec, x, up)
        worst = max(worst, _fd_rel(g, lambda p: np.sum(up * mlp_forward(p, spec, x)), params,
                                   np.arange(params.size)))
        worst = max(worst, _fd_rel(gx, lambda z: np.sum(up * mlp_forward(params, spec, z)), x,
                                   np.arange(x.size)))
    return worst


def check_conv_gradients(seed: int = 0, coords: int = 60) -> float:
    rng = np.random.default_rng([seed, 108])
    spec = ConvSpec((3, 16, 16), feature_dim=8)
    from .nn import init_conv

    params = init_conv(spec, rng)
    imgs = rng.uniform(0, 1, size=(2, *spec.input_shape))
    up = rng.normal(size=(2, spec.feature_dim))
    g, gi = conv_backward(params, spec, imgs, up)
    pc = rng.choice(params.size, size=min(coords, params.size), replace=False)
    ic = rng.choice(imgs.size, size=min(coords, imgs.size), replace=False)
    worst = _fd_rel(g, lambda p: np.sum(up * conv_forward(p, spec, imgs)), params, pc)
    worst = max(worst, _fd_rel(gi, lambda z: np.sum(up * conv_forward(params, spec, z)), imgs, ic))
    return worst


def check_actor_loss_gradients(seed: int = 0, coords: int = 60) -> float:
    rng = np.random.default_rng([seed, 109])
    worst = 0.0
    conv = ConvSpec((3, 12, 12), feature_dim=6)
    nets = [
        Mlp(MlpSpec(5, (16, 16), 2)),
        EncoderMlp(conv, MlpSpec(conv.feature_dim + 2, (8,), 2)),
    ]
    for net in nets:
        params = net.init(rng) + rng.normal(0, 0.1, net.num_params)
        obs = rng.normal(size=(7, net.input_dim))
        a_t = rng.normal(size=(7, net.output_dim))
        log_std = rng.normal(-1.0, 0.3, net.output_dim)
        ls_t = rng.normal(-1.0, 0.3, net.output_dim)
        alpha = 0.3

        def loss(p, s):
            return actor_exploration_loss(net, p, s, obs, a_t, ls_t, alpha)[0].actor_loss

        _, gp, gs = actor_exploration_loss(net, params, log_std, obs, a_t, ls_t, alpha)
        pc = rng.choice(params.size, size=min(coords, params.size), replace=False)
        worst = max(worst, _fd_rel(gp, lambda p: loss(p, log_std), params, pc))
        worst = max(worst, _fd_rel(gs, lambda s: loss(params, s), log_std, np.arange(log_std.size)))
    return worst


# ---------------------------------------------------------------------------
# the full suite
# ---------------------------------------------------------------------------


def run_verification(seed: int = 0) -> VerificationReport:
    """Run every registered check and collect the results."""
    report = VerificationReport(seed=seed)
    report.add(_timed("smoothed_gradient_mc", 3.0, SMOOTHING_SAMPLES,
                      lambda: check_smoothed_gradient(seed)[0]))
    report.add(_timed("regression_step", 1e-10, EXACT_SEEDS, lambda: check_regression_step(seed)))
    report.add(_timed("bc_gradient", 1e-10, EXACT_SEEDS, lambda: check_bc_gradient(seed)))
    report.add(_timed("bc_step_scaling", 0.0, EXACT_SEEDS, lambda: check_bc_step_scaling(seed)))
    report.add(_timed("reinforce_special_case", 1e-12, REINFORCE_INSTANCES,
                      lambda: check_reinforce_special_case(seed)))
    report.add(_timed("mlp_gradient_fd", 1e-5, 5, lambda: check_mlp_gradients(seed), "lt"))
    report.add(_timed("conv_gradient_fd", 1e-5, 1, lambda: check_conv_gradients(seed), "lt"))
    report.add(_timed("actor_loss_gradient_fd", 1e-5, 2, lambda: check_actor_loss_gradients(seed), "lt"))
    return report
