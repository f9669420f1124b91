"""The classifier: augmented input -> joint (h, w) integration -> linear head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import (
    HiddenDrift,
    MlpDrift,
    MlpSpec,
    OUPrior,
    Partition,
    augment_input,
    init_mlp,
    split_mlp_drift,
    unflatten,
)
from .errors import ConfigError
from .solvers import JointSystem, RegimeSchedule, integrate_joint, sample_brownian


@dataclass
class ModelConfig:
    d_x: int
    num_classes: int
    augment_dim: int = 0
    hidden_widths: tuple = (16,)  # f_h hidden layers; in/out are d_h
    drift_hidden: tuple = (2, 128, 2)  # f_q bottleneck between d_w and d_w
    drift_hidden_split: tuple = (16,)  # per-block f_q under a horizontal cut
    activation: str = "softplus"
    sigma: float = 0.2
    prior_rate: float = 1.0
    t1: float = 0.9
    t2: float = 1.0
    jump_mode: str = "continue"
    horizontal_m1: int | None = None  # set => horizontal cut with S = first m1 coords
    num_steps: int = 60
    scheme: str = "midpoint"
    w0_gain: float = 1.0
    drift_gain: float = 0.1

    @property
    def d_h(self):
        return self.d_x + self.augment_dim

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden_widths"] = list(self.hidden_widths)
        d["drift_hidden"] = list(self.drift_hidden)
        d["drift_hidden_split"] = list(self.drift_hidden_split)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("hidden_widths", "drift_hidden", "drift_hidden_split"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class PsdeBnn:
    def __init__(self, config: ModelConfig):
        if config.augment_dim < 0:
            raise ConfigError("augment_dim must be >= 0")
        self.config = config
        d_h = config.d_h
        self.f_h = HiddenDrift(MlpSpec((d_h, *config.hidden_widths, d_h), config.activation))
        d_w = self.f_h.d_w
        self.d_w = d_w
        partition = None
        if config.horizontal_m1 is not None:
            partition = Partition.leading(d_w, config.horizontal_m1)
            self.f_q = split_mlp_drift(
                partition, config.drift_hidden_split, config.drift_hidden_split, config.activation
            )
        else:
            self.f_q = MlpDrift(d_w, config.drift_hidden, "theta", config.activation)
        self.schedule = RegimeSchedule(
            t1=config.t1,
            t2=config.t2,
            jump_mode=config.jump_mode,
            partition=partition,
            num_steps=config.num_steps,
            scheme=config.scheme,
        )
        if self.schedule.window_steps and config.sigma <= 0:
            raise ConfigError("sigma must be > 0 when the stochastic window is nonempty")
        self.system = JointSystem(self.f_q, self.f_h, OUPrior(config.prior_rate), config.sigma)
        self.head_spec = MlpSpec((d_h, config.num_classes), "identity", time_input=False)

    @property
    def d_h(self):
        return self.config.d_h

    def param_sizes(self):
        sizes = {"w0": self.d_w, **self.f_q.param_sizes()}
        if self.schedule.jumps and self.schedule.jump_mode == "learnable":
            sizes["w_t2"] = self.d_w
        sizes["head"] = self.head_spec.num_params
        return sizes

    def init_params(self, seed) -> dict:
        rng = np.random.default_rng(seed)
        cfg = self.config
        w0 = init_mlp(self.f_h.spec, rng, gain=cfg.w0_gain)
        params = {"w0": w0}
        params.update(self.f_q.init_params(rng, gain=cfg.drift_gain))
        if "w_t2" in self.param_sizes():
            params["w_t2"] = w0.copy()
        params["head"] = init_mlp(self.head_spec, rng)
        return params

    def noise_shape(self):
        return self.schedule.window_steps, self.schedule.noise_dim(self.d_w)

    def sample_noise(self, seed):
        n, dim = self.noise_shape()
        return sample_brownian(seed, n, dim, self.schedule.window_dt)

    def head(self, h1, params):
        (W, b), = unflatten(params["head"], self.head_spec)
        return ad.matmul(h1, ad.transpose(W)) + ad.tile_rows(b, h1.shape[0])

    def forward(self, x, params, noise, record=False, compute_kl=True):
        """Logits for a batch ``x`` of shape (B, d_x) under one Brownian path."""
        h0 = Tensor(augment_input(np.atleast_2d(x), self.config.augment_dim))
        h1, kl, rec = integrate_joint(
            self.system, h0, params, self.schedule, noise, record=record, compute_kl=compute_kl
        )
        return self.head(h1, params), kl, rec

