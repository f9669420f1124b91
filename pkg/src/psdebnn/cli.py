"""Command-line entry point: ``psdebnn {train,eval,sample-paths,kl-diagnose,gen-data}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from .config import PRESETS, RunConfig, apply_preset, build_datasets, build_model, train_config
from .data import data_dir, gen_annulus, gen_ood, gen_two_moons, load_csv, save_csv
from .errors import PsdeBnnError
from .inference import brownian_draws_per_pass, kl_diagnose, predict
from .metrics import (
    PredictionSet,
    accuracy,
    ece,
    entropy_histogram,
    predictive_entropy,
    roc_auc,
    write_histogram_csv,
    write_metrics_csv,
)
from .model import ModelConfig, PsdeBnn
from .params import ParamStore
from .toys import TOYS, sample_path
from .training import train

log = logging.getLogger("psdebnn")

LOG_COLUMNS = ("epoch", "elbo", "log_likelihood", "kl_integral", "val_accuracy", "val_ece",
               "epoch_time", "aborted")


def resolve_config(args) -> RunConfig:
    """Config file (or defaults), then ``--preset``, then the flag overrides."""
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset, getattr(args, "ratio", None))
    overrides = {}
    for key in ("seed", "threads", "epochs", "name"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = os.path.join(args.out, cfg.name)
    os.makedirs(run_dir, exist_ok=True)
    cfg.to_json(os.path.join(run_dir, "config.json"))
    train_ds, val_ds, test_ds, _ = build_datasets(cfg)
    model = build_model(cfg, train_ds.d_x, train_ds.num_classes)
    tcfg = train_config(cfg)
    meta = {"run_config": cfg.to_dict(), "model_config": model.config.to_dict()}
    ckpt = os.path.join(run_dir, "checkpoint.npz")
    result = train(model, train_ds, val_ds, tcfg, checkpoint_path=ckpt, checkpoint_meta=meta)
    _write_log(os.path.join(run_dir, "log.csv"), result.log)
    if result.events:
        with open(os.path.join(run_dir, "events.json"), "w") as fh:
            json.dump(result.events, fh, indent=2)
    rows = []
    for split, ds in (("val", val_ds), ("test", test_ds)):
        probs = predict(model, result.store, ds.features, cfg.eval_samples, cfg.seed)
        preds = PredictionSet(probs, ds.labels)
        rows += [("accuracy", accuracy(preds), split), ("ece", ece(preds, cfg.ece_bins), split)]
    rows.append(("best_epoch", result.best_epoch, "val"))
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), rows)
    for metric, value, split in rows:
        print(f"{split:5s} {metric:12s} {value:.6f}")
    print(f"run directory: {run_dir}")
    return 0


def load_checkpoint_model(path):
    store, meta = ParamStore.load(path)
    model = PsdeBnn(ModelConfig.from_dict(meta["model_config"]))
    return model, store, meta


def cmd_eval(args) -> int:
    model, store, meta = load_checkpoint_model(args.checkpoint)
    cfg = RunConfig.from_dict(meta["run_config"])
    if args.ood_kind:
        cfg.dataset["ood_kind"] = args.ood_kind
    _, _, test_ds, ood_ds = build_datasets(cfg)
    if args.dataset:
        test_ds = load_csv(args.dataset, num_classes=model.config.num_classes)
    if args.ood_dataset:
        ood_ds = load_csv(args.ood_dataset)
    num_samples = args.num_samples or cfg.eval_samples
    seed = cfg.seed if args.seed is None else args.seed

    start = time.perf_counter()
    probs_id = predict(model, store, test_ds.features, num_samples, seed)
    probs_ood = predict(model, store, ood_ds.features, num_samples, seed)
    elapsed = time.perf_counter() - start
    passes = 2 * num_samples
    draws = brownian_draws_per_pass(model) * passes

    preds = PredictionSet(probs_id, test_ds.labels)
    h_id = predictive_entropy(probs_id)
    h_ood = predictive_entropy(probs_ood)
    roc = roc_auc(h_id, h_ood)
    rows = [
        ("accuracy", accuracy(preds), "test"),
        ("ece", ece(preds, cfg.ece_bins), "test"),
        ("mean_entropy", float(np.mean(h_id)), "ID"),
        ("mean_entropy", float(np.mean(h_ood)), "OOD"),
        ("roc_auc", roc.auc, "OOD"),
        ("inference_seconds", elapsed, "all"),
        ("brownian_draws", draws, "all"),
        ("u_theta_steps", model.schedule.window_steps * passes, "all"),
    ]
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_metrics_csv(os.path.join(out, "eval_metrics.csv"), rows)
    edges = np.linspace(0.0, np.log(model.config.num_classes), 21)
    write_histogram_csv(
        os.path.join(out, "entropy_hist.csv"),
        entropy_histogram(h_id, edges, "ID") + entropy_histogram(h_ood, edges, "OOD"),
    )
    with open(os.path.join(out, "roc.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, f, t in zip(roc.thresholds, roc.fpr, roc.tpr):
            writer.writerow([repr(float(thr)), repr(float(f)), repr(float(t))])
    for metric, value, split in rows:
        print(f"{split:5s} {metric:18s} {value:.6f}")
    return 0


def cmd_sample_paths(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    names = args.toy or list(TOYS)
    written = 0
    for name in names:
        if name not in TOYS:
            raise PsdeBnnError(f"unknown toy '{name}', choose from {sorted(TOYS)}")
        system, schedule, params = TOYS[name]()
        for seed in range(args.seeds):
            rec = sample_path(system, schedule, params, args.seed + seed)
            rec.to_csv(os.path.join(args.out, f"{name}_seed{args.seed + seed}.csv"))
            written += 1
    print(f"wrote {written} path files to {args.out}")
    return 0


def cmd_kl_diagnose(args) -> int:
    gap = args.drift_gap
    rows = kl_diagnose(args.sigma_q, args.sigma_p, lambda t, w: gap, lambda t, w: 0.0, args.steps,
                       num_paths=args.num_paths, seed=args.seed or 0)
    print(f"{'N':>8s} {'KL(N)':>14s} {'KL(N)/N':>14s}")
    for r in rows:
        print(f"{r.num_steps:8d} {r.kl:14.6f} {r.kl_per_step:14.8f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["num_steps", "kl", "kl_per_step"])
            for r in rows:
                writer.writerow([r.num_steps, repr(r.kl), repr(r.kl_per_step)])
    return 0


def cmd_gen_data(args) -> int:
    seed = args.seed or 0
    if args.dataset == "two_moons":
        ds = gen_two_moons(args.n, args.noise_std, seed)
    elif args.dataset == "annulus":
        ds = gen_annulus(args.n // 2, seed=seed)
    else:
        ds = gen_ood(args.n, args.d_x, args.dataset[4:], seed)
    out = args.out or os.path.join(data_dir(), f"{args.dataset}_{seed}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_csv(ds, out)
    print(f"wrote {len(ds)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psdebnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--ratio", type=float, help="stochasticity ratio for the preset")
    p.add_argument("--name")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, calibration and OOD metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="labelled CSV to evaluate instead of the test split")
    p.add_argument("--ood-dataset", help="unlabelled CSV used as OOD inputs")
    p.add_argument("--ood-kind", choices=("uniform_noise", "gaussian_noise", "shifted"))
    p.add_argument("--num-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-paths", help="weight paths for the toy cut examples")
    p.add_argument("--toy", action="append", choices=sorted(TOYS))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", default="paths")
    p.set_defaults(func=cmd_sample_paths)

    p = sub.add_parser("kl-diagnose", help="KL between discretised SDEs as the step count grows")
    p.add_argument("--sigma-q", type=float, default=1.0)
    p.add_argument("--sigma-p", type=float, default=0.5)
    p.add_argument("--drift-gap", type=float, default=0.0)
    p.add_argument("--steps", type=int, nargs="+", default=[16, 64, 256, 1024, 4096, 16384])
    p.add_argument("--num-paths", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_kl_diagnose)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to the CSV cache")
    p.add_argument("dataset", choices=("two_moons", "annulus", "ood_uniform_noise",
                                       "ood_gaussian_noise", "ood_shifted"))
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--d-x", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PsdeBnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
