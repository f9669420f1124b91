"""Low-dimensional weight-path settings used to illustrate vertical and horizontal cuts."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import FunctionDrift, OUPrior, Partition, SplitDrift
from .solvers import JointSystem, RegimeSchedule, integrate_joint, sample_brownian


def vertical_toy(jump_mode="continue", t1=0.3, t2=0.6, sigma=1.0, num_steps=100, w0=0.0,
                 jump_value=None):
    """Scalar weight: drift cos(20t) outside (t1, t2), zero drift and unit noise inside."""

    def drift(t, w):
        return Tensor(np.zeros(1)) if t1 <= t < t2 else Tensor(np.array([np.cos(20.0 * t)]))

    system = JointSystem(FunctionDrift(drift, 1), None, OUPrior(), sigma)
    schedule = RegimeSchedule(t1, t2, jump_mode, None, num_steps, "midpoint",
                              None if jump_value is None else (float(jump_value),))
    return system, schedule, {"w0": Tensor(np.array([float(w0)]))}


def horizontal_toy(split=True, sigma=1.0, num_steps=60, w0=(1.0, 0.0)):
    """Two weights, S = {0} noisy and D = {1} noise-free, over the whole interval.

    Split drift:    [-w_S, t + w_D]        (w_D deterministic)
    Coupled drift:  [-w_S, t + w_D + w_S]  (w_D inherits noise through w_S)
    """
    partition = Partition((0,), (1,))
    if split:
        drift = SplitDrift(
            partition,
            FunctionDrift(lambda t, w: -w, 1),
            FunctionDrift(lambda t, w: t + w, 1),
        )
    else:
        drift = FunctionDrift(
            lambda t, w: ad.concat([-w[0:1], t + w[1:2] + w[0:1]]), 2
        )
    system = JointSystem(drift, None, OUPrior(), sigma)
    schedule = RegimeSchedule(0.0, 1.0, "continue", partition, num_steps, "midpoint")
    return system, schedule, {"w0": Tensor(np.asarray(w0, dtype=np.float64))}


def constant_toy(num_steps=20, d_w=2, w0=None):
    """Zero drift and zero diffusion: every column stays at its initial value."""
    system = JointSystem(FunctionDrift(lambda t, w: Tensor(np.zeros(d_w)), d_w), None, OUPrior(), 0.0)
    schedule = RegimeSchedule(0.0, 1.0, "continue", None, num_steps, "midpoint")
    w0 = np.arange(1, d_w + 1, dtype=np.float64) if w0 is None else np.asarray(w0, dtype=np.float64)
    return system, schedule, {"w0": Tensor(w0)}


TOYS = {
    "vertical-continue": lambda: vertical_toy("continue"),
    "vertical-fixed": lambda: vertical_toy("fixed_a_priori"),
    "horizontal-coupled": lambda: horizontal_toy(split=False),
    "horizontal-split": lambda: horizontal_toy(split=True),
    "constant": constant_toy,
}


def sample_path(system, schedule, params, seed):
    """One weight path (no hidden state); KL accumulation is skipped."""
    d_w = params["w0"].size
    noise = sample_brownian(seed, schedule.window_steps, schedule.noise_dim(d_w), schedule.window_dt)
    _, _, rec = integrate_joint(system, None, params, schedule, noise, record=True, compute_kl=False)
    return rec


def sample_paths(system, schedule, params, seeds):
    """Stack of weight trajectories, shape (len(seeds), num_steps + 1, d_w)."""
    return np.stack([sample_path(system, schedule, params, s).w for s in seeds])
