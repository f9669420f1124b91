"""Adam training loop maximising the ELBO, with best-validation checkpointing."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import NumericsError
from .inference import DEFAULT_KAPPA, effective_kappa, elbo, predict, sample_seeds
from .metrics import PredictionSet, accuracy, ece
from .params import ParamStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    kappa_base: float = DEFAULT_KAPPA
    scale_kappa_by_ratio: bool = True  # kappa_eff = kappa_base / r_s
    stochasticity_ratio: float | None = None  # r_s override; defaults to t2 - t1
    num_posterior_samples: int = 1
    eval_samples: int = 8
    ece_bins: int = 15
    seed: int = 0
    threads: int = 1
    clip_norm: float | None = 10.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    store: ParamStore  # parameters at the best validation accuracy
    final: ParamStore  # parameters after the last epoch
    log: list = field(default_factory=list)
    events: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = -1.0


def kappa_for(model, config: TrainConfig) -> float:
    if not config.scale_kappa_by_ratio:
        return effective_kappa(config.kappa_base, None)
    ratio = config.stochasticity_ratio
    if ratio is None:
        ratio = model.schedule.stochasticity_ratio
    return effective_kappa(config.kappa_base, ratio)


def _shard_grad(model, store, x, y, kappa, noises, dataset_size):
    with Tape() as tape:
        params = store.watch(tape)
        br = elbo(model, params, x, y, kappa=kappa, num_samples=len(noises), noises=noises,
                  dataset_size=dataset_size)
        g = ad.backward(tape, ad.scale(br.objective, -1.0))
    return {name: g[params[name].node] for name in params}, br


def batch_gradient(model, store: ParamStore, x, y, kappa, noises, dataset_size, threads=1):
    """Gradient of ``-ELBO`` for one batch; shards across threads share the noise.

    Returns ``(grads, elbo, log_likelihood, kl)``. Shard results are summed in
    shard order, so the outcome does not depend on thread scheduling.
    """
    batch = len(x)
    if threads <= 1 or batch < 2:
        grads, br = _shard_grad(model, store, x, y, kappa, noises, dataset_size)
        return grads, br.elbo, br.log_likelihood, br.kl_integral
    bounds = np.linspace(0, batch, min(threads, batch) + 1).astype(int)
    jobs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        frac = (b - a) / batch
        jobs.append((x[a:b], y[a:b], frac))

    def run(job):
        xs, ys, frac = job
        # (dataset_size * frac) / |shard| == dataset_size / batch; the KL is split by frac
        return _shard_grad(model, store, xs, ys, kappa * frac, noises, dataset_size * frac)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(run, jobs))
    grads = {k: np.zeros_like(v) for k, v in store.params.items()}
    total = ll = 0.0
    for g, br in results:
        for k in grads:
            grads[k] += g[k]
        total += br.elbo
        ll += br.log_likelihood
    return grads, total, ll, results[0][1].kl_integral


def evaluate(model, store, ds, num_samples=8, seed=0, num_bins=15, batch_size=None):
    probs = predict(model, store, ds.features, num_samples=num_samples, seed=seed,
                    batch_size=batch_size)
    preds = PredictionSet(probs, ds.labels)
    return {"accuracy": accuracy(preds), "ece": ece(preds, num_bins)}, probs


def train(model, train_ds, val_ds, config: TrainConfig, store: ParamStore | None = None,
          stop_when=None, checkpoint_path=None, checkpoint_meta=None) -> TrainResult:
    """Minimise ``-ELBO / N`` with Adam; fresh Brownian noise per batch.

    ``stop_when(row)`` may end training early after any epoch.
    """
    rng = np.random.default_rng(config.seed)
    if store is None:
        store = ParamStore(model.init_params(config.seed))
    kappa = kappa_for(model, config)
    n = len(train_ds)
    x_all, y_all = train_ds.features, train_ds.labels
    result = TrainResult(store=store.copy(), final=store)
    best_snap = store.snapshot()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = {"elbo": 0.0, "log_likelihood": 0.0, "kl_integral": 0.0}
        n_batches = 0
        aborted = False
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if model.schedule.window_steps:
                noises = [model.sample_noise(s) for s in sample_seeds(rng, config.num_posterior_samples)]
            else:
                noises = [None] * config.num_posterior_samples
            try:
                grads, value, ll, kl = batch_gradient(model, store, xb, yb, kappa, noises, n, config.threads)
            except NumericsError as exc:
                store.restore(best_snap)
                result.events.append({"epoch": epoch, "event": "numerics", "detail": str(exc)})
                log.warning("epoch %d aborted: %s; restored last checkpoint", epoch, exc)
                aborted = True
                break
            store.zero_grad()
            store.accumulate({k: v / n for k, v in grads.items()})  # minimise -ELBO / N
            store.adam_step(config.lr, config.betas, config.eps, config.clip_norm)
            sums["elbo"] += value
            sums["log_likelihood"] += ll
            sums["kl_integral"] += kl
            n_batches += 1
        train_time = time.perf_counter() - t0
        metrics, _ = evaluate(model, store, val_ds, config.eval_samples, config.seed, config.ece_bins)
        row = {
            "epoch": epoch,
            "elbo": sums["elbo"] / max(n_batches, 1),
            "log_likelihood": sums["log_likelihood"] / max(n_batches, 1),
            "kl_integral": sums["kl_integral"] / max(n_batches, 1),
            "val_accuracy": metrics["accuracy"],
            "val_ece": metrics["ece"],
            "epoch_time": train_time,
            "aborted": aborted,
        }
        result.log.append(row)
        log.info("epoch %d elbo %.4f val_acc %.4f val_ece %.4f", epoch, row["elbo"],
                 row["val_accuracy"], row["val_ece"])
        if metrics["accuracy"] > result.best_val_accuracy:
            result.best_val_accuracy = metrics["accuracy"]
            result.best_epoch = epoch
            best_snap = store.snapshot()
            if checkpoint_path is not None:
                store.save(checkpoint_path, {**(checkpoint_meta or {}), "epoch": epoch})
        if stop_when is not None and stop_when(row):
            break
    result.store = store.copy()
    result.store.restore(best_snap)
    return result
