"""Named trainable parameters with gradient slots, Adam state and checkpoint I/O.

Checkpoint layout (``.npz``, i.e. a zip archive of ``.npy`` arrays, stable
across releases):

* ``param/<name>``   float64 parameter array
* ``adam_m/<name>``  float64 first-moment estimate
* ``adam_v/<name>``  float64 second-moment estimate
* ``meta``           uint8 array holding UTF-8 JSON with keys
  ``format_version``, ``flatten_order_version``, ``adam_step`` and any
  caller-supplied metadata (model config, regime schedule, ...).
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from .autodiff import Tape
from .dynamics import FLATTEN_ORDER_VERSION
from .errors import ConfigError, FormatError

CHECKPOINT_FORMAT_VERSION = 1


class ParamStore:
    def __init__(self, params: dict | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def names(self):
        return list(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def watch(self, tape: Tape) -> dict:
        """Register every parameter as a leaf on ``tape``; returns name -> Tensor."""
        return {name: tape.watch(value, name) for name, value in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: dict):
        for name, g in grads.items():
            self.grads[name] += g

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def adam_step(self, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0):
        """One Adam update *descending* the accumulated gradient."""
        if clip_norm is not None:
            norm = self.grad_norm()
            if norm > clip_norm:
                for g in self.grads.values():
                    g *= clip_norm / norm
        b1, b2 = betas
        self.step += 1
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in self.params.items():
            g = self.grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + eps)

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "step": self.step,
        }

    def restore(self, snap):
        for k in self.params:
            self.params[k] = snap["params"][k].copy()
            self.m[k] = snap["m"][k].copy()
            self.v[k] = snap["v"][k].copy()
        self.step = snap["step"]
        self.zero_grad()

    def copy(self):
        other = ParamStore(self.params)
        other.restore(self.snapshot())
        return other

    # ------------------------------------------------------------ checkpoints

    def save(self, path, meta: dict | None = None):
        arrays = {}
        for name in self.params:
            arrays[f"param/{name}"] = self.params[name]
            arrays[f"adam_m/{name}"] = self.m[name]
            arrays[f"adam_v/{name}"] = self.v[name]
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "flatten_order_version": FLATTEN_ORDER_VERSION,
            "adam_step": self.step,
            "param_names": list(self.params),
            **(meta or {}),
        }
        arrays["meta"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        """Returns ``(store, meta)``; raises FormatError on version mismatch."""
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
            archive = np.load(io.BytesIO(raw), allow_pickle=False)
            meta = json.loads(bytes(archive["meta"]).decode())
        except (OSError, ValueError, KeyError) as exc:
            raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"checkpoint format {meta.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
            )
        if meta.get("flatten_order_version") != FLATTEN_ORDER_VERSION:
            raise FormatError(
                f"flatten order {meta.get('flatten_order_version')} != {FLATTEN_ORDER_VERSION}"
            )
        store = cls()
        for name in meta["param_names"]:
            store.add(name, archive[f"param/{name}"])
            store.m[name] = np.array(archive[f"adam_m/{name}"])
            store.v[name] = np.array(archive[f"adam_v/{name}"])
        store.step = int(meta["adam_step"])
        return store, meta
