"""Drift and diffusion functions of the coupled hidden-state / weight-state system.

The hidden drift ``f_h`` is an MLP whose weights *are* the weight state ``w_t``
(unflattened in a fixed canonical order). The weight drift ``f_q`` is a
hypernetwork over depth with its own parameters ``theta``; under a horizontal
partition it is split into two independent networks over ``w_S`` and ``w_D``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

# Bump whenever the flat layout of MLP parameters changes; stored in checkpoints.
FLATTEN_ORDER_VERSION = 1

ACTIVATIONS = {
    "softplus": ad.softplus,
    "tanh": ad.tanh,
    "identity": ad.identity,
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(in, hidden..., out)``; time is appended to the input when
    ``time_input`` is set, so the first affine map is ``(in + 1) -> hidden``."""

    widths: tuple
    activation: str = "softplus"
    time_input: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"MlpSpec needs at least input and output widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"MlpSpec widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def layer_shapes(self):
        """(out, in) for each affine map, in flattening order."""
        ins = list(self.widths[:-1])
        if self.time_input:
            ins[0] += 1
        return [(o, i) for i, o in zip(ins, self.widths[1:])]

    @property
    def num_params(self):
        return sum(o * i + o for o, i in self.layer_shapes())


def unflatten(flat, spec: MlpSpec):
    """Split a flat parameter vector into ``[(W, b), ...]``; W is (out, in) row-major."""
    flat = ad.as_tensor(flat)
    if flat.shape != (spec.num_params,):
        raise ConfigError(
            f"parameter vector of length {flat.size} does not match MlpSpec {spec.widths} "
            f"({spec.num_params} parameters)"
        )
    layers = []
    pos = 0
    for o, i in spec.layer_shapes():
        W = ad.reshape(ad.slice_(flat, pos, pos + o * i), (o, i))
        pos += o * i
        b = ad.slice_(flat, pos, pos + o)
        pos += o
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(ad.as_tensor(W).data).reshape(-1))
        parts.append(np.asarray(ad.as_tensor(b).data).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def mlp_apply(layers, x, t: float, spec: MlpSpec):
    """Evaluate the MLP on a vector ``(in,)`` or a batch ``(B, in)``."""
    x = ad.as_tensor(x)
    act = ACTIVATIONS[spec.activation]
    batched = x.data.ndim == 2
    if spec.time_input:
        if batched:
            x = ad.concat([x, Tensor(np.full((x.shape[0], 1), float(t)))], axis=1)
        else:
            x = ad.concat([x, Tensor(np.array([float(t)]))])
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        if batched:
            x = ad.matmul(x, ad.transpose(W)) + ad.tile_rows(b, x.shape[0])
        else:
            x = ad.matmul(W, x) + b
        if k < last:
            x = act(x)
    return x


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_last=False, gain=1.0) -> np.ndarray:
    """Scaled-normal weights (std gain/sqrt(fan_in)), zero biases."""
    layers = []
    shapes = spec.layer_shapes()
    for k, (o, i) in enumerate(shapes):
        if zero_last and k == len(shapes) - 1:
            W = np.zeros((o, i))
        else:
            W = rng.normal(0.0, gain / np.sqrt(i), size=(o, i))
        layers.append((W, np.zeros(o)))
    return flatten(layers)


# ---------------------------------------------------------------- partitions

@dataclass(frozen=True)
class Partition:
    """Stochastic (S) and deterministic (D) coordinate sets of the weight vector."""

    S: tuple
    D: tuple

    def __post_init__(self):
        S = tuple(int(i) for i in self.S)
        D = tuple(int(i) for i in self.D)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "D", D)
        if set(S) & set(D):
            raise ConfigError("partition index sets overlap")
        if sorted(S + D) != list(range(len(S) + len(D))):
            raise ConfigError("partition index sets must cover 0..d_w-1 exactly")

    @classmethod
    def leading(cls, d_w: int, m1: int):
        """S = first m1 coordinates, matching the block diffusion matrix."""
        if not 0 <= m1 <= d_w:
            raise ConfigError(f"m1={m1} outside [0, {d_w}]")
        return cls(tuple(range(m1)), tuple(range(m1, d_w)))

    @classmethod
    def full(cls, d_w: int):
        return cls(tuple(range(d_w)), ())

    @property
    def d_w(self):
        return len(self.S) + len(self.D)

    @property
    def m1(self):
        return len(self.S)

    def mask_S(self) -> np.ndarray:
        m = np.zeros(self.d_w)
        m[list(self.S)] = 1.0
        return m

    def mask_D(self) -> np.ndarray:
        return 1.0 - self.mask_S()

    def inverse_perm(self) -> np.ndarray:
        """Index that maps ``concat([v_S, v_D])`` back to canonical order."""
        order = np.array(self.S + self.D, dtype=np.intp)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        return inv

    def to_dict(self):
        return {"S": list(self.S), "D": list(self.D)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["S"]), tuple(d["D"]))


# ---------------------------------------------------------------- weight drifts

class MlpDrift:
    """f_q as an MLP over ``(w, t)``; parameters live under ``name`` in the store."""

    split = False

    def __init__(self, d_w: int, hidden: Sequence[int] = (32,), name="theta", activation="softplus"):
        self.d_w = d_w
        self.name = name
        self.spec = MlpSpec((d_w, *hidden, d_w), activation)

    def param_sizes(self):
        return {self.name: self.spec.num_params}

    def init_params(self, rng, zero_last=False, gain=1.0):
        return {self.name: init_mlp(self.spec, rng, zero_last=zero_last, gain=gain)}

    def __call__(self, t, w, params):
        return mlp_apply(unflatten(params[self.name], self.spec), w, t, self.spec)


class FunctionDrift:
    """Fixed, parameter-free drift ``fn(t, w) -> Tensor`` (toy settings)."""

    split = False

    def __init__(self, fn: Callable, d_w: int):
        self.fn = fn
        self.d_w = d_w

    def param_sizes(self):
        return {}

    def init_params(self, rng, **_):
        return {}

    def __call__(self, t, w, params):
        out = ad.as_tensor(self.fn(t, w))
        if out.shape != (self.d_w,):
            raise ConfigError(f"drift returned shape {out.shape}, expected ({self.d_w},)")
        return out


class SplitDrift:
    """``f_q = [f_S(t, w_S); f_D(t, w_D)]`` reassembled in canonical coordinate order.

    The D block never reads ``w_S``, so deterministic coordinates stay
    deterministic under a horizontal cut.
    """

    split = True

    def __init__(self, partition: Partition, drift_S, drift_D):
        if drift_S.d_w != partition.m1 or drift_D.d_w != len(partition.D):
            raise ConfigError("split drift sizes do not match the partition")
        names_S, names_D = set(drift_S.param_sizes()), set(drift_D.param_sizes())
        if names_S & names_D:
            raise ConfigError("split drifts must use distinct parameter names")
        self.partition = partition
        self.drift_S = drift_S
        self.drift_D = drift_D
        self.d_w = partition.d_w
        self._S = np.array(partition.S, dtype=np.intp)
        self._D = np.array(partition.D, dtype=np.intp)
        self._inv = partition.inverse_perm()

    def param_sizes(self):
        return {**self.drift_S.param_sizes(), **self.drift_D.param_sizes()}

    def init_params(self, rng, **kw):
        return {**self.drift_S.init_params(rng, **kw), **self.drift_D.init_params(rng, **kw)}

    def parts(self, t, w, params):
        parts = []
        if len(self._S):
            parts.append(self.drift_S(t, ad.gather(w, self._S), params))
        if len(self._D):
            parts.append(self.drift_D(t, ad.gather(w, self._D), params))
        return parts

    def __call__(self, t, w, params):
        return ad.gather(ad.concat(self.parts(t, w, params)), self._inv)


def split_mlp_drift(partition: Partition, hidden_S=(16,), hidden_D=(16,), activation="softplus"):
    return SplitDrift(
        partition,
        MlpDrift(partition.m1, hidden_S, "theta_S", activation),
        MlpDrift(len(partition.D), hidden_D, "theta_D", activation),
    )


def f_q_eval(t, w, drift, params):
    return drift(t, w, params)


# ---------------------------------------------------------------- hidden drift

class HiddenDrift:
    """f_h(t, h; w): an MLP over ``(h, t)`` whose flattened parameters are ``w``."""

    def __init__(self, spec: MlpSpec):
        if spec.in_dim != spec.out_dim:
            raise ConfigError("hidden drift must map R^d_h to R^d_h")
        self.spec = spec

    @property
    def d_h(self):
        return self.spec.in_dim

    @property
    def d_w(self):
        return self.spec.num_params

    def __call__(self, t, h, w):
        w = ad.as_tensor(w)
        if w.shape != (self.spec.num_params,):
            raise ConfigError(
                f"weight state has {w.size} entries but f_h needs {self.spec.num_params}"
            )
        return mlp_apply(unflatten(w, self.spec), h, t, self.spec)


def f_h_eval(t, h, w, hidden: HiddenDrift):
    return hidden(t, h, w)


# ---------------------------------------------------------------- prior & diffusion

@dataclass(frozen=True)
class OUPrior:
    """Ornstein-Uhlenbeck prior drift ``-rate * w`` on stochastic coordinates."""

    rate: float = 1.0

    def __call__(self, t, w, mask_S=None):
        w = ad.as_tensor(w)
        out = ad.scale(w, -self.rate)
        if mask_S is not None:
            out = ad.mul(out, Tensor(np.asarray(mask_S, dtype=np.float64)))
        return out


def f_p_eval(t, w, prior: OUPrior = OUPrior(), partition: Partition | None = None):
    mask = None if partition is None else partition.mask_S()
    return prior(t, w, mask)


@dataclass(frozen=True)
class DiffusionSpec:
    """g_p(t, w) = sigma * I on stochastic coordinates inside (t1, t2), zero elsewhere."""

    sigma: float
    t1: float
    t2: float
    partition: Partition | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("diffusion sigma must be nonnegative")

    def active(self, t) -> bool:
        return self.t1 <= t < self.t2

    def diag(self, t, d_w: int) -> np.ndarray:
        if not self.active(t):
            return np.zeros(d_w)
        mask = np.ones(d_w) if self.partition is None else self.partition.mask_S()
        return self.sigma * mask

    def matrix(self, t, d_w: int) -> np.ndarray:
        return np.diag(self.diag(t, d_w))


def augment_input(x, augment_dim: int) -> np.ndarray:
    """h_0 = [x, 0, ..., 0]; works on a single vector or a batch of rows."""
    if augment_dim < 0:
        raise ConfigError("augment_dim must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.concatenate([x, np.zeros(augment_dim)])
    return np.concatenate([x, np.zeros((x.shape[0], augment_dim))], axis=1)
