"""JSON run configuration, named presets, and builders for models and datasets.

Schema (every key optional; defaults shown by ``RunConfig()``)::

    name, preset, seed, threads
    dataset: {kind, n, noise_std, n_per_class, radii, d_x, images, labels, path,
              subset, fractions, seed, normalize, ood_kind, n_ood}
    hidden_widths, drift_hidden, drift_hidden_split, activation, augment_dim
    sigma, prior_rate, t1, t2, jump_mode, horizontal_ratio, stochasticity_ratio,
    num_steps, scheme
    kappa_base, scale_kappa_by_ratio, lr, batch_size, epochs,
    num_posterior_samples, eval_samples, ece_bins, clip_norm

``dataset.kind`` is one of ``two_moons``, ``annulus``, ``mnist`` or ``csv``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .data import OOD_KINDS, data_dir, gen_annulus, gen_ood, gen_two_moons, load_csv, load_mnist_idx, split_dataset
from .dynamics import MlpSpec
from .errors import ConfigError
from .model import ModelConfig, PsdeBnn
from .solvers import JUMP_MODES, SCHEMES
from .training import TrainConfig

DATASET_KINDS = ("two_moons", "annulus", "mnist", "csv")

DATASET_DEFAULTS = {
    "kind": "two_moons",
    "n": 600,
    "noise_std": 0.1,
    "n_per_class": 500,
    "radii": [1.0, 2.0, 3.0],
    "d_x": 2,
    "images": None,
    "labels": None,
    "path": None,
    "subset": None,
    "fractions": [0.6, 0.2, 0.2],
    "seed": 0,
    "normalize": True,
    "ood_kind": "uniform_noise",
    "n_ood": 500,
}


@dataclass
class RunConfig:
    name: str = "run"
    preset: str | None = None
    seed: int = 0
    threads: int = 1
    dataset: dict = field(default_factory=lambda: dict(DATASET_DEFAULTS))
    hidden_widths: list = field(default_factory=lambda: [16])
    drift_hidden: list = field(default_factory=lambda: [2, 128, 2])
    drift_hidden_split: list = field(default_factory=lambda: [16])
    activation: str = "softplus"
    augment_dim: int = 0
    sigma: float = 0.2
    prior_rate: float = 1.0
    t1: float = 0.9
    t2: float = 1.0
    jump_mode: str = "continue"
    horizontal_ratio: float | None = None
    stochasticity_ratio: float = 0.1
    num_steps: int = 60
    scheme: str = "midpoint"
    kappa_base: float = 1e-3
    scale_kappa_by_ratio: bool = True
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    num_posterior_samples: int = 1
    eval_samples: int = 8
    ece_bins: int = 15
    clip_norm: float | None = 10.0

    def __post_init__(self):
        self.dataset = {**DATASET_DEFAULTS, **(self.dataset or {})}
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"field '{name}': {msg}")

        unknown = set(self.dataset) - set(DATASET_DEFAULTS)
        if unknown:
            bad("dataset", f"unknown keys {sorted(unknown)}")
        if self.dataset["kind"] not in DATASET_KINDS:
            bad("dataset.kind", f"must be one of {DATASET_KINDS}")
        if self.dataset["ood_kind"] not in OOD_KINDS:
            bad("dataset.ood_kind", f"must be one of {OOD_KINDS}")
        for name in ("lr", "sigma", "kappa_base", "prior_rate"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0 or (name == "lr" and v == 0):
                bad(name, f"must be a {'positive' if name == 'lr' else 'nonnegative'} number, got {v!r}")
        for name in ("batch_size", "epochs", "num_steps", "num_posterior_samples", "eval_samples",
                     "ece_bins", "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "epochs" else 1):
                bad(name, f"must be a positive integer, got {v!r}")
        if self.augment_dim < 0:
            bad("augment_dim", "must be >= 0")
        if not (0.0 <= self.t1 <= self.t2 <= 1.0):
            bad("t1/t2", f"need 0 <= t1 <= t2 <= 1, got {self.t1}, {self.t2}")
        if self.jump_mode not in JUMP_MODES:
            bad("jump_mode", f"must be one of {JUMP_MODES}")
        if self.scheme not in SCHEMES:
            bad("scheme", f"must be one of {SCHEMES}")
        if self.horizontal_ratio is not None and not (0.0 < self.horizontal_ratio < 1.0):
            bad("horizontal_ratio", "must lie in (0, 1)")
        if not (0.0 <= self.stochasticity_ratio <= 1.0):
            bad("stochasticity_ratio", "must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        preset = d.get("preset")
        if preset is not None:
            # the file's explicit fields win over the preset
            base = apply_preset(cls(), preset, d.get("stochasticity_ratio"))
            d = {**base.to_dict(), **d, "dataset": {**base.dataset, **d.get("dataset", {})}}
        return cls.from_dict(d)


PRESETS = ("sdebnn", "odefirst", "sdefirst", "sdefirst-fixw2", "horcut", "deterministic")


def apply_preset(cfg: RunConfig, name: str, ratio: float | None = None) -> RunConfig:
    """Set the cut points for a named configuration.

    ``ratio`` is the stochasticity ratio r_s (0.1 by default, 0.5 for ``horcut``).
    """
    if name not in PRESETS:
        raise ConfigError(f"field 'preset': unknown preset '{name}', choose from {PRESETS}")
    if name == "sdebnn":
        upd = dict(t1=0.0, t2=1.0, jump_mode="continue", horizontal_ratio=None, stochasticity_ratio=1.0)
    elif name == "deterministic":
        upd = dict(t1=1.0, t2=1.0, jump_mode="continue", horizontal_ratio=None, stochasticity_ratio=0.0)
    elif name == "horcut":
        r = 0.5 if ratio is None else ratio
        upd = dict(t1=0.0, t2=1.0, jump_mode="continue", horizontal_ratio=r, stochasticity_ratio=r)
    else:
        r = 0.1 if ratio is None else ratio
        if name == "odefirst":
            upd = dict(t1=1.0 - r, t2=1.0, jump_mode="continue")
        elif name == "sdefirst":
            upd = dict(t1=0.0, t2=r, jump_mode="continue")
        else:
            upd = dict(t1=0.0, t2=r, jump_mode="learnable")
        upd.update(horizontal_ratio=None, stochasticity_ratio=r)
    return replace(cfg, preset=name, dataset=dict(cfg.dataset), **upd)


def hidden_param_count(cfg: RunConfig, d_x: int) -> int:
    d_h = d_x + cfg.augment_dim
    return MlpSpec((d_h, *cfg.hidden_widths, d_h), cfg.activation).num_params


def model_config(cfg: RunConfig, d_x: int, num_classes: int) -> ModelConfig:
    m1 = None
    if cfg.horizontal_ratio is not None:
        m1 = math.ceil(cfg.horizontal_ratio * hidden_param_count(cfg, d_x))
    return ModelConfig(
        d_x=d_x,
        num_classes=num_classes,
        augment_dim=cfg.augment_dim,
        hidden_widths=tuple(cfg.hidden_widths),
        drift_hidden=tuple(cfg.drift_hidden),
        drift_hidden_split=tuple(cfg.drift_hidden_split),
        activation=cfg.activation,
        sigma=cfg.sigma,
        prior_rate=cfg.prior_rate,
        t1=cfg.t1,
        t2=cfg.t2,
        jump_mode=cfg.jump_mode,
        horizontal_m1=m1,
        num_steps=cfg.num_steps,
        scheme=cfg.scheme,
    )


def build_model(cfg: RunConfig, d_x: int, num_classes: int) -> PsdeBnn:
    return PsdeBnn(model_config(cfg, d_x, num_classes))


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        kappa_base=cfg.kappa_base,
        scale_kappa_by_ratio=cfg.scale_kappa_by_ratio,
        stochasticity_ratio=cfg.stochasticity_ratio,
        num_posterior_samples=cfg.num_posterior_samples,
        eval_samples=cfg.eval_samples,
        ece_bins=cfg.ece_bins,
        seed=cfg.seed,
        threads=cfg.threads,
        clip_norm=cfg.clip_norm,
    )


def load_dataset(spec: dict):
    """The full labelled dataset, tagged train/val/test but not yet normalised."""
    kind = spec["kind"]
    if kind == "two_moons":
        ds = gen_two_moons(spec["n"], spec["noise_std"], spec["seed"])
    elif kind == "annulus":
        r1, r2, r3 = spec["radii"]
        ds = gen_annulus(spec["n_per_class"], r1, r2, r3, spec["seed"], spec["d_x"])
    elif kind == "mnist":
        root = data_dir()
        images = spec["images"] or os.path.join(root, "train-images-idx3-ubyte")
        labels = spec["labels"] or os.path.join(root, "train-labels-idx1-ubyte")
        ds = load_mnist_idx(images, labels, spec["subset"], spec["seed"])
    else:
        if not spec["path"]:
            raise ConfigError("field 'dataset.path': required for kind 'csv'")
        ds = load_csv(spec["path"])
    return split_dataset(ds, tuple(spec["fractions"]), spec["seed"])


def build_datasets(cfg: RunConfig):
    """``(train, val, test, ood)``; OOD inputs live in the same (normalised) input space."""
    spec = cfg.dataset
    ds = load_dataset(spec)
    if spec["normalize"]:
        ds = ds.normalized()
    ood = gen_ood(spec["n_ood"], ds.d_x, spec["ood_kind"], spec["seed"] + 1)
    return ds.part("train"), ds.part("val"), ds.part("test"), ood
