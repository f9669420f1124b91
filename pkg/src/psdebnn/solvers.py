"""Fixed-step integration of the joint (h, w) system with a stochastic window.

The unit depth interval is split into up to three regimes: ``[0, t1]`` and
``[t2, 1]`` are deterministic ODE regimes for both ``h`` and ``w``; inside
``(t1, t2)`` the stochastic coordinates of ``w`` follow Euler-Maruyama and the
KL integrand is accumulated. ``h`` takes an Euler step per window step using
``w`` at the left endpoint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import OUPrior, Partition
from .errors import ConfigError, NumericsError

JUMP_MODES = ("continue", "fixed_a_priori", "learnable")
SCHEMES = ("euler", "midpoint", "rk4")


# ---------------------------------------------------------------- noise

@dataclass
class BrownianPath:
    seed: object
    increments: np.ndarray  # (num_steps, dim)
    dt: float

    @property
    def num_steps(self):
        return self.increments.shape[0]

    @property
    def dim(self):
        return self.increments.shape[1]

    @property
    def num_draws(self):
        return int(self.increments.size)


def sample_brownian(seed, num_steps: int, dim: int, dt: float) -> BrownianPath:
    """I.i.d. N(0, dt) increments from ``numpy.random.default_rng(seed)``."""
    if num_steps < 0 or dim < 0:
        raise ConfigError("num_steps and dim must be nonnegative")
    rng = np.random.default_rng(seed)
    inc = rng.normal(0.0, math.sqrt(dt), size=(num_steps, dim)) if num_steps else np.zeros((0, dim))
    return BrownianPath(seed, inc, float(dt))


# ---------------------------------------------------------------- schedule

def _allocate_steps(lengths, num_steps):
    """Largest-remainder split of ``num_steps`` proportional to ``lengths``,
    with at least one step for every nonempty regime."""
    active = [i for i, L in enumerate(lengths) if L > 1e-12]
    if num_steps < len(active):
        raise ConfigError(f"num_steps={num_steps} too small for {len(active)} regimes")
    total = sum(lengths[i] for i in active)
    exact = {i: num_steps * lengths[i] / total for i in active}
    counts = {i: max(1, int(math.floor(exact[i] + 1e-9))) for i in active}
    while sum(counts.values()) < num_steps:
        i = max(active, key=lambda j: (exact[j] - counts[j], -j))
        counts[i] += 1
    while sum(counts.values()) > num_steps:
        i = max((j for j in active if counts[j] > 1), key=lambda j: (counts[j] - exact[j], j))
        counts[i] -= 1
    return [counts.get(i, 0) for i in range(len(lengths))]


@dataclass(frozen=True)
class RegimeSchedule:
    t1: float = 0.0
    t2: float = 1.0
    jump_mode: str = "continue"
    partition: Partition | None = None
    num_steps: int = 60
    scheme: str = "midpoint"
    jump_value: tuple | None = None  # fixed_a_priori target; zeros when None

    def __post_init__(self):
        if not (0.0 <= self.t1 <= self.t2 <= 1.0):
            raise ConfigError(f"need 0 <= t1 <= t2 <= 1, got t1={self.t1}, t2={self.t2}")
        if self.jump_mode not in JUMP_MODES:
            raise ConfigError(f"jump_mode must be one of {JUMP_MODES}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if self.num_steps < 0:
            raise ConfigError("num_steps must be >= 0")

    @property
    def stochasticity_ratio(self):
        return self.t2 - self.t1

    @property
    def jumps(self):
        return self.t2 < 1.0 and self.t2 > self.t1 and self.jump_mode != "continue"

    def step_counts(self):
        return _allocate_steps([self.t1, self.t2 - self.t1, 1.0 - self.t2], self.num_steps)

    def grid(self):
        """Step boundaries and the indices ``(k1, k2)`` with ``times[k1] = t1``, ``times[k2] = t2``."""
        n0, n1, n2 = self.step_counts()
        pieces = [np.array([0.0])]
        for a, b, n in ((0.0, self.t1, n0), (self.t1, self.t2, n1), (self.t2, 1.0, n2)):
            if n:
                pieces.append(np.linspace(a, b, n + 1)[1:])
        return np.concatenate(pieces), n0, n0 + n1

    @property
    def window_steps(self):
        return self.step_counts()[1]

    @property
    def window_dt(self):
        n = self.window_steps
        return (self.t2 - self.t1) / n if n else 0.0

    def noise_dim(self, d_w: int):
        return d_w if self.partition is None else self.partition.m1

    def to_dict(self):
        return {
            "t1": self.t1,
            "t2": self.t2,
            "jump_mode": self.jump_mode,
            "partition": None if self.partition is None else self.partition.to_dict(),
            "num_steps": self.num_steps,
            "scheme": self.scheme,
            "jump_value": None if self.jump_value is None else list(self.jump_value),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("partition") is not None:
            d["partition"] = Partition.from_dict(d["partition"])
        if d.get("jump_value") is not None:
            d["jump_value"] = tuple(d["jump_value"])
        return cls(**d)


# ---------------------------------------------------------------- single steps

def _axpy(state, c, k):
    """state + c * k, elementwise over a tensor or a tuple of tensors (None passes through)."""
    if isinstance(state, tuple):
        return tuple(None if s is None else s + ad.scale(ki, c) for s, ki in zip(state, k))
    return state + ad.scale(k, c)


def _combo(ks, weights):
    if isinstance(ks[0], tuple):
        return tuple(
            None if ks[0][j] is None else _wsum([k[j] for k in ks], weights)
            for j in range(len(ks[0]))
        )
    return _wsum(ks, weights)


def _wsum(ks, weights):
    out = ad.scale(ks[0], weights[0])
    for k, c in zip(ks[1:], weights[1:]):
        out = out + ad.scale(k, c)
    return out


def euler_step(t, state, dt, drift_fn):
    return _axpy(state, dt, drift_fn(t, state))


def midpoint_step(t, state, dt, drift_fn):
    k1 = drift_fn(t, state)
    k2 = drift_fn(t + 0.5 * dt, _axpy(state, 0.5 * dt, k1))
    return _axpy(state, dt, k2)


def rk4_step(t, state, dt, drift_fn):
    k1 = drift_fn(t, state)
    k2 = drift_fn(t + 0.5 * dt, _axpy(state, 0.5 * dt, k1))
    k3 = drift_fn(t + 0.5 * dt, _axpy(state, 0.5 * dt, k2))
    k4 = drift_fn(t + dt, _axpy(state, dt, k3))
    return _axpy(state, dt, _combo([k1, k2, k3, k4], [1 / 6, 1 / 3, 1 / 3, 1 / 6]))


STEPPERS = {"euler": euler_step, "midpoint": midpoint_step, "rk4": rk4_step}


def em_step(t, w, dt, drift, sigma, dB, partition: Partition | None = None):
    """Euler-Maruyama: noise ``sigma * dB`` only on the stochastic coordinates."""
    w = ad.as_tensor(w)
    dB = np.asarray(dB, dtype=np.float64).reshape(-1)
    noise = np.zeros(w.shape)
    if partition is None:
        if dB.size != w.size:
            raise ConfigError(f"dB has {dB.size} entries, expected {w.size}")
        noise[:] = sigma * dB
    else:
        if dB.size != partition.m1:
            raise ConfigError(f"dB has {dB.size} entries, expected |S|={partition.m1}")
        noise[list(partition.S)] = sigma * dB
    return w + ad.scale(drift, dt) + Tensor(noise)


# ---------------------------------------------------------------- joint system

@dataclass
class JointSystem:
    """Everything ``integrate_joint`` needs besides the parameters and the noise.

    ``hidden`` maps ``(t, h, w) -> dh/dt`` and may be None for weight-only runs;
    ``weight_drift`` maps ``(t, w, params) -> dw/dt``.
    """

    weight_drift: object
    hidden: object = None
    prior: OUPrior = field(default_factory=OUPrior)
    sigma: float = 1.0


@dataclass
class PathRecord:
    times: np.ndarray
    w: np.ndarray  # (n + 1, d_w)
    h: np.ndarray | None  # (n + 1, B, d_h)
    kl_integrand: np.ndarray  # (n + 1,), ||u||^2 at the left endpoint of each window step
    num_brownian_draws: int = 0
    num_u_evals: int = 0

    @property
    def num_steps(self):
        return len(self.times) - 1

    def to_csv(self, path, example=0):
        d_w = self.w.shape[1]
        d_h = 0 if self.h is None else self.h.shape[2]
        header = ["t"] + [f"w_{i + 1}" for i in range(d_w)] + [f"h_{i + 1}" for i in range(d_h)]
        header.append("kl_integrand")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.w[k]]
                if d_h:
                    row += [repr(float(v)) for v in self.h[k, example]]
                row.append(repr(float(self.kl_integrand[k])))
                writer.writerow(row)


def u_theta_from_drift(w, f_q, prior: OUPrior, sigma, partition: Partition | None):
    """u = (f_p - f_q) / sigma restricted to stochastic coordinates (zeros elsewhere)."""
    if sigma <= 0:
        raise ConfigError("u_theta needs sigma > 0 on stochastic coordinates")
    mask = None if partition is None else partition.mask_S()
    diff = prior(None, w, mask) - f_q
    if mask is not None:
        diff = ad.mul(diff, Tensor(mask))
    return ad.scale(diff, 1.0 / sigma)


def integrate_joint(system: JointSystem, h0, params, schedule: RegimeSchedule,
                    noise: BrownianPath | None, record=False, compute_kl=True):
    """Integrate (h, w) over [0, 1].

    ``params`` maps names to tensors and must hold ``w0`` (and ``w_t2`` for a
    learnable jump). Returns ``(h1, kl_integral, record)`` where ``kl_integral``
    is ``sum_k ||u(t_k, w_k)||^2 dt`` over window steps and ``record`` is a
    :class:`PathRecord` or None.
    """
    times, k1, k2 = schedule.grid()
    n_steps = len(times) - 1
    n_win = k2 - k1
    w = ad.as_tensor(params["w0"])
    d_w = w.size
    partition = schedule.partition
    if partition is not None and partition.d_w != d_w:
        raise ConfigError(f"partition covers {partition.d_w} coordinates, w has {d_w}")
    if n_win:
        if system.sigma <= 0 and compute_kl:
            raise ConfigError("sigma must be > 0 inside the stochastic window")
        if noise is None or noise.increments.shape != (n_win, schedule.noise_dim(d_w)):
            got = None if noise is None else noise.increments.shape
            raise ConfigError(
                f"noise shape {got} does not match window ({n_win}, {schedule.noise_dim(d_w)})"
            )
    h = None if h0 is None else ad.as_tensor(h0)
    hidden = system.hidden
    drift = system.weight_drift

    def joint_drift(t, state):
        hs, ws = state
        fw = drift(t, ws, params)
        fh = None if hs is None else hidden(t, hs, ws)
        return (fh, fw)

    def weight_only(t, ws):
        return drift(t, ws, params)

    stepper = STEPPERS[schedule.scheme]
    mask_S = None
    mask_D = None
    has_D = partition is not None and len(partition.D) > 0
    if partition is not None:
        mask_S = Tensor(partition.mask_S())
        mask_D = Tensor(partition.mask_D())

    kl = Tensor(0.0)
    kl_vals = np.zeros(n_steps + 1)
    w_rec = h_rec = None
    if record:
        w_rec = np.zeros((n_steps + 1, d_w))
        w_rec[0] = w.data
        if h is not None:
            h_rec = np.zeros((n_steps + 1,) + h.shape)
            h_rec[0] = h.data
    n_u = 0
    k = 0
    try:
        for k in range(n_steps):
            t, dt = times[k], times[k + 1] - times[k]
            if k1 <= k < k2:
                j = k - k1
                f_q = drift(t, w, params)
                if compute_kl:
                    u = u_theta_from_drift(w, f_q, system.prior, system.sigma, partition)
                    u2 = ad.sum_(ad.square(u))
                    kl = kl + ad.scale(u2, dt)
                    kl_vals[k] = float(u2.data)
                    n_u += 1
                if h is not None:
                    h = h + ad.scale(hidden(t, h, w), dt)
                if has_D and schedule.scheme != "euler":
                    # deterministic block follows the configured ODE scheme
                    if schedule.scheme == "midpoint":
                        k_mid = drift(t + 0.5 * dt, _axpy(w, 0.5 * dt, f_q), params)
                        w_det = _axpy(w, dt, k_mid)
                    else:
                        w_det = stepper(t, w, dt, weight_only)
                    w = em_step(t, w, dt, ad.mul(f_q, mask_S), system.sigma,
                                noise.increments[j], partition)
                    w = w - ad.mul(w, mask_D) + ad.mul(w_det, mask_D)
                else:
                    w = em_step(t, w, dt, f_q, system.sigma, noise.increments[j], partition)
                if k + 1 == k2 and schedule.jumps:
                    w = _jump_target(schedule, params, d_w)
            else:
                h, w = stepper(t, (h, w), dt, joint_drift)
            if h is not None and not np.all(np.isfinite(h.data)):
                raise NumericsError("non-finite hidden state", step=k)
            if record:
                w_rec[k + 1] = w.data
                if h is not None:
                    h_rec[k + 1] = h.data
    except NumericsError as exc:
        if exc.step is None:
            raise NumericsError(str(exc), step=k) from exc
        raise
    rec = None
    if record:
        rec = PathRecord(times, w_rec, h_rec, kl_vals,
                         num_brownian_draws=n_win * schedule.noise_dim(d_w), num_u_evals=n_u)
    return h, kl, rec


def _jump_target(schedule: RegimeSchedule, params, d_w):
    if schedule.jump_mode == "learnable":
        return ad.as_tensor(params["w_t2"])
    if schedule.jump_value is None:
        return Tensor(np.zeros(d_w))
    value = np.asarray(schedule.jump_value, dtype=np.float64)
    if value.shape != (d_w,):
        raise ConfigError(f"jump_value must have length {d_w}")
    return Tensor(value)
