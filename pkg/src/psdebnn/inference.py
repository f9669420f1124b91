"""Variational objective, posterior predictive and the discretised-KL diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import OUPrior, Partition
from .errors import ConfigError, ContractError, NumericsError
from .solvers import u_theta_from_drift

DEFAULT_KAPPA = 1e-3


def u_theta(t, w, drift, params, prior: OUPrior, sigma: float, partition: Partition | None = None):
    """Drift mismatch ``(f_p - f_q) / sigma`` on the stochastic coordinates.

    Returns a vector of length |S| (all coordinates when unpartitioned).
    """
    w = ad.as_tensor(w)
    u = u_theta_from_drift(w, drift(t, w, params), prior, sigma, partition)
    if partition is None:
        return u
    return ad.gather(u, np.array(partition.S, dtype=np.intp))


def effective_kappa(kappa_base: float, ratio: float | None) -> float:
    """KL weight scaled by ``1 / r_s``; ``ratio=None`` or 0 leaves it unscaled."""
    if not ratio:
        return kappa_base
    return kappa_base / ratio


@dataclass
class ElboBreakdown:
    log_likelihood: float
    kl_integral: float
    kappa: float
    elbo: float
    num_posterior_samples: int
    objective: Tensor | None = None  # differentiable elbo, when computed on a tape

    def as_dict(self):
        return {
            "elbo": self.elbo,
            "log_likelihood": self.log_likelihood,
            "kl_integral": self.kl_integral,
            "kappa": self.kappa,
            "num_posterior_samples": self.num_posterior_samples,
        }


def sample_seeds(rng: np.random.Generator, n: int):
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n)]


def elbo(model, params: dict, x, y, kappa=DEFAULT_KAPPA, num_samples=1, rng=None,
         noises: Sequence | None = None, dataset_size=None) -> ElboBreakdown:
    """Monte Carlo ELBO on a batch.

    The batch log-likelihood is summed and rescaled by ``dataset_size / batch``
    so that the KL term is weighed against the whole dataset. Pass ``noises``
    to freeze the Brownian paths (one per sample); otherwise they are drawn
    from ``rng``.
    """
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.intp)
    batch = x.shape[0]
    scale = 1.0 if dataset_size is None else dataset_size / batch
    if noises is None:
        if model.schedule.window_steps:
            rng = rng if rng is not None else np.random.default_rng()
            noises = [model.sample_noise(s) for s in sample_seeds(rng, num_samples)]
        else:
            noises = [None] * num_samples
    if len(noises) != num_samples:
        raise ContractError("need exactly one noise path per posterior sample")
    total = None
    ll_sum = 0.0
    kl_sum = 0.0
    for noise in noises:
        logits, kl, _ = model.forward(x, params, noise)
        ll = ad.scale(ad.sum_(ad.cross_entropy(logits, y)), -scale)
        obj = ll - ad.scale(kl, kappa)
        total = obj if total is None else total + obj
        ll_sum += float(ll.data)
        kl_sum += float(kl.data)
    objective = ad.scale(total, 1.0 / num_samples)
    value = float(objective.data)
    if not math.isfinite(value):
        raise NumericsError("non-finite ELBO")
    return ElboBreakdown(
        log_likelihood=ll_sum / num_samples,
        kl_integral=kl_sum / num_samples,
        kappa=kappa,
        elbo=value,
        num_posterior_samples=num_samples,
        objective=objective,
    )


def _as_arrays(params):
    if hasattr(params, "params"):
        params = params.params
    return {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}


def predict_sample(model, params, x, seed, index: int):
    """Class probabilities under the ``index``-th posterior sample of the ``seed`` stream."""
    noise = model.sample_noise((seed, index)) if model.schedule.window_steps else None
    logits, _, _ = model.forward(x, params, noise, compute_kl=False)
    return ad.softmax_np(logits.data)


def predict(model, params, x, num_samples=8, seed=0, batch_size=None) -> np.ndarray:
    """Posterior predictive: mean softmax over ``num_samples`` stochastic passes.

    Sample ``i`` uses the Brownian path seeded by ``(seed, i)`` for every
    batch, so weight paths are shared across the inputs of one sample.
    """
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    params = _as_arrays(params)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if batch_size is None or batch_size >= len(x):
        chunks = [x]
    else:
        chunks = [x[i:i + batch_size] for i in range(0, len(x), batch_size)]
    if not model.schedule.window_steps:
        num_samples = 1  # every pass is identical without a stochastic window
    out = []
    for chunk in chunks:
        acc = None
        for i in range(num_samples):
            p = predict_sample(model, params, chunk, seed, i)
            acc = p if acc is None else acc + p
        out.append(acc / num_samples)
    return np.concatenate(out, axis=0)


def brownian_draws_per_pass(model) -> int:
    n, dim = model.noise_shape()
    return n * dim


# ---------------------------------------------------------------- KL diagnostic

@dataclass
class KlRow:
    num_steps: int
    kl: float

    @property
    def kl_per_step(self):
        return self.kl / self.num_steps


def _value(f, t, w):
    return np.asarray(f(t, w) if callable(f) else f, dtype=np.float64)


def kl_diagnose(sigma_q, sigma_p, f_q: Callable, f_p: Callable, steps_list, t_start=0.0,
                t_end=1.0, w0=0.0, num_paths=1, seed=0) -> list[KlRow]:
    """KL between Euler discretisations of posterior and prior SDEs, per step count N.

    Each transition contributes ``A dt + (rho - 1)/2 - log(rho)/2`` with
    ``A = |f_q - f_p|^2 / (2 sigma_p^2)`` and ``rho = sigma_q^2 / sigma_p^2``;
    the outer expectation over ``w_i`` is a Monte Carlo average over
    ``num_paths`` Euler paths of the posterior. With ``sigma_q != sigma_p``
    the sum grows linearly in N.
    """
    steps_list = [int(n) for n in steps_list]
    if any(b <= a for a, b in zip(steps_list, steps_list[1:])):
        raise ConfigError("steps_list must be strictly increasing")
    rows = []
    for n in steps_list:
        if n <= 0:
            raise ConfigError("step counts must be positive")
        dt = (t_end - t_start) / n
        rng = np.random.default_rng(seed)
        w = np.tile(np.atleast_1d(np.asarray(w0, dtype=np.float64)), (num_paths, 1))
        total = np.zeros(num_paths)
        for i in range(n):
            t = t_start + i * dt
            sq = _value(sigma_q, t, w)
            sp = _value(sigma_p, t, w)
            if np.any(sp <= 0):
                raise ConfigError("sigma_p must be > 0")
            fq = _value(f_q, t, w) * np.ones_like(w)
            fp = _value(f_p, t, w) * np.ones_like(w)
            rho = (sq * sq) / (sp * sp) * np.ones_like(w)
            a = 0.5 * (fq - fp) ** 2 / (sp * sp)
            total += (a * dt + 0.5 * (rho - 1.0) - 0.5 * np.log(rho)).sum(axis=1)
            w = w + fq * dt + sq * math.sqrt(dt) * rng.standard_normal(w.shape)
        rows.append(KlRow(n, float(total.mean())))
    return rows
