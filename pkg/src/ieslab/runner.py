"""End-to-end training runs with instance-level exclusion, plus run comparison.

One epoch ``t`` (1-based) of ``run``:

1. forward the whole training set at the current parameters and append the
   per-sample losses to the ledger (validation/test accuracy and the
   optional sharpness diagnostics are measured at the same state);
2. ask the selector which samples stay active;
3. halt if nothing is active or conventional early stopping fires;
4. shuffled mini-batch updates over the active samples only;
5. append one row to ``epochs.csv``.

A final evaluation after the loop feeds ``summary.json``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import datasets, metrics, models
from .ledger import LossLedger, coefficient_of_variation
from .optim import OptimConfig, Optimizer, lr_at
from .selection import (
    ReinclusionTracker,
    SelectorConfig,
    conventional_early_stop,
    report_from_tracker,
    select,
    selector_rng,
)

log = logging.getLogger(__name__)

EPOCH_COLUMNS = [
    "epoch", "n_active", "n_mastered", "backprop_minibatches", "cumulative_minibatch_saved",
    "train_loss_full", "test_accuracy", "val_accuracy", "lr",
    "mean_batch_grad_norm", "sam_value", "hessian_max_eig", "test_error",
    "cv0", "cv1", "cv2", "cv3",
    "wall_ms_forward", "wall_ms_backward",
]
WALL_COLUMNS = ("wall_ms_forward", "wall_ms_backward")
CV_ORDERS = (0, 1, 2, 3)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunConfig:
    name: str = ""
    # data
    dataset: str = "mnist"
    train_size: int = 8000
    val_size: int = 0
    test_size: int = 2000
    data_dir: Optional[str] = None
    noise_rate: float = 0.0
    noise_seed: int = 0
    blobs_n_per_class: int = 500
    blobs_n_classes: int = 2
    blobs_spread: float = 1.0
    blobs_seed: int = 0
    # model
    layer_sizes: Optional[list] = None
    # optimizer
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "exponential"
    gamma: float = 0.96
    milestones: list = field(default_factory=lambda: [50, 100])
    multistep_gamma: float = 0.1
    linear_start_factor: float = 1.0
    linear_end_factor: float = 0.01
    linear_total_iters: int = 150
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    # selector
    selector: str = "ies"
    order: int = 2
    delta: float = 1e-3
    window: int = 1
    anneal_fraction: float = 0.0
    removal_rate: float = 0.0
    patience: Optional[int] = None
    # loop
    epochs: int = 30
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0])
    # logging
    diagnostics: bool = False
    cv: bool = True
    probe_size: int = 256
    probe_seed: int = 12345
    dump_losses: bool = False
    dump_selection: bool = False
    dump_differences: bool = False
    out_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            kind=self.optimizer, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            schedule=self.schedule, gamma=self.gamma, milestones=tuple(self.milestones),
            multistep_gamma=self.multistep_gamma, linear_start_factor=self.linear_start_factor,
            linear_end_factor=self.linear_end_factor, linear_total_iters=self.linear_total_iters,
            betas=tuple(self.betas), eps=self.eps,
        )

    def selector_config(self, seed: int = 0) -> SelectorConfig:
        return SelectorConfig(kind=self.selector, order=self.order, delta=self.delta, window=self.window,
                              anneal_fraction=self.anneal_fraction, removal_rate=self.removal_rate, seed=seed)

    def model_spec(self, n_features: int, n_classes: int) -> models.MlpSpec:
        if self.layer_sizes:
            spec = models.MlpSpec(tuple(self.layer_sizes))
            if spec.layer_sizes[0] != n_features or spec.n_classes != n_classes:
                raise ConfigError(f"layer_sizes {spec.layer_sizes} do not fit data "
                                  f"({n_features} features, {n_classes} classes)")
            return spec
        hidden = (256, 128) if self.dataset == "mnist" else (32, 32)
        return models.MlpSpec((n_features, *hidden, n_classes))

    def validate(self) -> None:
        if self.dataset not in ("mnist", "blobs"):
            raise ConfigError(f"dataset must be 'mnist' or 'blobs', got {self.dataset!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.patience is not None:
            if self.patience < 1:
                raise ConfigError("patience must be >= 1")
            if self.val_size < 1:
                raise ConfigError("conventional early stopping (patience) needs val_size > 0")
        try:
            sel = self.selector_config()
            self.optim_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.epochs < sel.warmup_epochs + 1:
            raise ConfigError(f"epochs ({self.epochs}) must exceed the warmup ({sel.warmup_epochs})")
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must be in [0, 1)")
        if self.probe_size < 1:
            raise ConfigError("probe_size must be >= 1")


def build_data(cfg: RunConfig) -> dict[str, datasets.Dataset]:
    if cfg.dataset == "mnist":
        splits = datasets.mnist_splits(cfg.train_size, cfg.val_size, cfg.test_size, cfg.data_dir)
    else:
        per_class = cfg.blobs_n_per_class
        pool = datasets.synth_blobs(3 * per_class, cfg.blobs_n_classes, cfg.blobs_spread, cfg.blobs_seed)
        # every class contributes 3 * per_class points; split them 1:1:1 by position within class
        pos = np.tile(np.arange(3 * per_class), cfg.blobs_n_classes)
        splits = {
            "train": pool.take(np.flatnonzero(pos < per_class), "train"),
            "test": pool.take(np.flatnonzero(pos >= 2 * per_class), "test"),
        }
        if cfg.val_size:
            splits["val"] = pool.take(np.flatnonzero((pos >= per_class) & (pos < 2 * per_class)), "val")
    if cfg.noise_rate:
        splits["train"] = datasets.inject_symmetric_noise(splits["train"], cfg.noise_rate, cfg.noise_seed)
    return splits


def dataset_hash(splits) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in ("train", "test"):
        h.update(splits[name].digest().encode())
    return h.hexdigest()[:16]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


@dataclass
class RunResult:
    out_dir: Optional[Path]
    records: list[dict]
    summary: dict


class _Dumps:
    """Optional per-sample dump files of one run."""

    def __init__(self, out: Optional[Path], cfg: RunConfig):
        self.losses = self.selection = None
        self.diffs = {n: [] for n in CV_ORDERS} if (cfg.dump_differences and out) else None
        self.diff_epochs = []
        if out and cfg.dump_losses:
            self._lf = open(out / "losses.csv", "w", newline="")
            self.losses = csv.writer(self._lf)
            self.losses.writerow(["epoch", "sample_id", "loss"])
        if out and cfg.dump_selection:
            self._sf = open(out / "selection.csv", "w", newline="")
            self.selection = csv.writer(self._sf)
            self.selection.writerow(["epoch", "sample_id", "status", "weight"])

    def epoch(self, t, ids, losses, ledger, state):
        if self.losses:
            self.losses.writerows((t, int(s), repr(float(v))) for s, v in zip(ids, losses))
        if self.selection:
            status = np.where(state.active_mask, "active", "mastered")
            self.selection.writerows(
                (t, int(s), st, repr(float(w))) for s, st, w in zip(ids, status, state.weights))
        if self.diffs is not None:
            self.diff_epochs.append(t)
            for n in CV_ORDERS:
                d = ledger.differences(n)
                self.diffs[n].append(np.full(len(ids), np.nan) if d is None else d.copy())

    def close(self, out: Optional[Path], ids):
        if self.losses:
            self._lf.close()
        if self.selection:
            self._sf.close()
        if self.diffs is not None:
            np.savez(out / "differences.npz", ids=ids, epochs=np.asarray(self.diff_epochs),
                     **{f"order{n}": np.asarray(v) for n, v in self.diffs.items()})


def run(cfg: RunConfig, seed: Optional[int] = None, out_dir=None) -> RunResult:
    """Train one seed. Writes ``epochs.csv``/``summary.json`` when ``out_dir`` is set."""
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "seeds": [seed]}, indent=2))

    splits = build_data(cfg)
    train, test, val = splits["train"], splits["test"], splits.get("val")
    n = len(train)
    T = cfg.epochs
    spec = cfg.model_spec(train.n_features, train.n_classes)
    params = models.init(spec, seed)
    arrays = params.arrays()
    optim_cfg = cfg.optim_config()
    opt = Optimizer(optim_cfg, names=params.names())
    sel_cfg = cfg.selector_config(seed)
    ledger = LossLedger(train.ids, capacity=max(4, cfg.order + cfg.window))
    tracker = ReinclusionTracker(train.ids)
    row_of = {int(s): i for i, s in enumerate(train.ids)}
    full_batches = math.ceil(n / cfg.batch_size)
    probe = np.sort(np.random.default_rng(cfg.probe_seed).choice(n, size=min(cfg.probe_size, n), replace=False))
    dumps = _Dumps(out, cfg)

    records: list[dict] = []
    val_history: list[float] = []
    executed = 0
    trained_samples = 0
    halt_reason, halt_epoch = None, None
    wall_fwd_total = wall_bwd_total = 0.0
    log.info("run %s seed=%d selector=%s n=%d epochs=%d", cfg.name or "-", seed, cfg.selector, n, T)

    for t in range(1, T + 1):
        t0 = time.perf_counter()
        train_losses, _ = models.evaluate(params, train.features, train.labels)
        ledger.record_epoch_array(t, train_losses)
        _, test_correct = models.evaluate(params, test.features, test.labels)
        val_acc = float("nan")
        if val is not None:
            val_acc = float(models.evaluate(params, val.features, val.labels)[1].mean())
            val_history.append(val_acc)
        wall_fwd = time.perf_counter() - t0

        state = select(sel_cfg, ledger, t, T, selector_rng(seed, t))
        tracker.update(state)
        dumps.epoch(t, train.ids, train_losses, ledger, state)

        cvs = {}
        if cfg.cv:
            for k in CV_ORDERS:
                d = ledger.differences(k)
                cvs[k] = None if d is None else coefficient_of_variation(np.abs(d))

        sam = eig = None
        if cfg.diagnostics:
            objective = metrics.mlp_objective(params, train.features[probe], train.labels[probe])
            sam = metrics.sam_value(objective, arrays)
            eig = metrics.power_iteration_max_eig(objective, arrays, seed=[seed, 3, t])

        if state.n_active == 0:
            halt_reason = "all instances mastered"
        elif cfg.patience is not None and conventional_early_stop(val_history, cfg.patience):
            halt_reason = "conventional early stopping"

        lr = lr_at(optim_cfg, t - 1, T)
        grad_norms = []
        t1 = time.perf_counter()
        n_batches = 0
        if halt_reason is None:
            active_ids = train.ids[state.active_mask]
            plan = datasets.plan_epoch(active_ids, cfg.batch_size, [seed, 1, t])
            for b, batch in enumerate(plan.batches):
                rows = np.fromiter((row_of[int(s)] for s in batch), dtype=np.int64, count=len(batch))
                try:
                    fp = models.forward_per_sample_loss(params, train.features[rows], train.labels[rows])
                    _, grads = fp.gradients(state.weights[rows])
                    grad_norms.append(metrics.batch_grad_norm(grads))
                    opt.step(arrays, grads, lr)
                except (ad.NonFiniteError, FloatingPointError) as e:
                    raise TrainingDiverged(f"epoch {t}, batch {b}: {e}") from e
            n_batches = len(plan.batches)
            trained_samples += len(active_ids)
        wall_bwd = time.perf_counter() - t1
        executed += n_batches
        wall_fwd_total += wall_fwd
        wall_bwd_total += wall_bwd

        test_acc = float(test_correct.mean()) if len(test_correct) else float("nan")
        records.append({
            "epoch": t,
            "n_active": state.n_active,
            "n_mastered": state.n_mastered,
            "backprop_minibatches": n_batches,
            "cumulative_minibatch_saved": 1.0 - executed / (t * full_batches),
            "train_loss_full": float(train_losses.mean()),
            "test_accuracy": test_acc,
            "val_accuracy": val_acc,
            "lr": lr,
            "mean_batch_grad_norm": float(np.mean(grad_norms)) if grad_norms else None,
            "sam_value": sam,
            "hessian_max_eig": eig,
            "test_error": metrics.error_rate(test_correct),
            **{f"cv{k}": cvs.get(k) for k in CV_ORDERS},
            "wall_ms_forward": 1000 * wall_fwd,
            "wall_ms_backward": 1000 * wall_bwd,
        })
        log.info("epoch %3d active=%5d loss=%.5f test=%.4f saved=%.3f", t, state.n_active,
                 records[-1]["train_loss_full"], test_acc, records[-1]["cumulative_minibatch_saved"])
        if halt_reason:
            halt_epoch = t
            log.info("halt at epoch %d: %s", t, halt_reason)
            break

    final_losses, final_correct = models.evaluate(params, train.features, train.labels)
    _, final_test_correct = models.evaluate(params, test.features, test.labels)
    dumps.close(out, train.ids)
    rep = report_from_tracker(tracker)

    summary = {
        "name": cfg.name,
        "seed": seed,
        "selector": cfg.selector,
        "order": cfg.order,
        "delta": cfg.delta,
        "window": cfg.window,
        "removal_rate": cfg.removal_rate,
        "epochs": T,
        "epochs_run": len(records),
        "halt_reason": halt_reason,
        "halt_epoch": halt_epoch,
        "final_test_accuracy": float(final_test_correct.mean()),
        "best_test_accuracy": float(max([r["test_accuracy"] for r in records] + [final_test_correct.mean()])),
        "final_train_loss": float(final_losses.mean()),
        "final_train_accuracy": float(final_correct.mean()),
        "backprop_minibatches": executed,
        "reference_minibatches": T * full_batches,
        "minibatch_saved": 1.0 - executed / (T * full_batches),
        "total_excluded_fraction": 1.0 - trained_samples / (T * n),
        "wall_time_s": wall_fwd_total + wall_bwd_total,
        "wall_forward_s": wall_fwd_total,
        "wall_backward_s": wall_bwd_total,
        "dataset_hash": dataset_hash(splits),
        "n_train": n,
        "n_noisy": len(train.noisy_ids),
        "reinclusion_mean": rep.mean_reinclusions,
        "reinclusion_max": rep.max_reinclusions,
        "ever_removed": rep.ever_removed,
        "early_removed_reinclusion_mean": rep.early_mean_reinclusions,
    }
    if out:
        write_epochs_csv(out / "epochs.csv", records)
        with open(out / "final_samples.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "label", "loss", "correct", "noisy", "first_removed_epoch", "reinclusions"])
            for i, s in enumerate(train.ids):
                w.writerow([int(s), int(train.labels[i]), repr(float(final_losses[i])), int(final_correct[i]),
                            int(int(s) in train.noisy_ids), int(tracker.first_removed[i]), int(tracker.counts[i])])
        (out / "summary.json").write_text(json.dumps({**summary, "config": cfg.to_dict()}, indent=2))
    return RunResult(out, records, summary)


def write_epochs_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_COLUMNS)
        for r in records:
            w.writerow([_fmt(r[c]) for c in EPOCH_COLUMNS])


def read_epochs_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (float(v) if v != "" else None) for k, v in r.items()})
    return out


def run_all(cfg: RunConfig, out_dir=None) -> list[RunResult]:
    """Every seed in ``cfg.seeds``, each under ``<out_dir>/seed_<s>``."""
    out_dir = out_dir or cfg.out_dir
    results = []
    for s in cfg.seeds:
        sub = Path(out_dir) / f"seed_{s}" if out_dir else None
        results.append(run(cfg, s, sub))
    return results


def seed_dirs(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    if (run_dir / "summary.json").exists():
        return [run_dir]
    dirs = sorted(p for p in run_dir.glob("seed_*") if (p / "summary.json").exists())
    if not dirs:
        raise FileNotFoundError(f"{run_dir}: no summary.json found (not a completed run)")
    return dirs


def load_summaries(run_dir) -> list[dict]:
    return [json.loads((d / "summary.json").read_text()) for d in seed_dirs(run_dir)]


def final_third_mean(records, column) -> Optional[float]:
    """Mean of ``column`` over the last ceil(T/3) logged epochs, skipping blanks."""
    k = math.ceil(len(records) / 3)
    vals = [r[column] for r in records[len(records) - k:] if r.get(column) is not None]
    return float(np.mean(vals)) if vals else None


COMPARE_COLUMNS = ["run", "selector", "delta", "n_seeds", "acc_mean", "acc_std", "acc_delta",
                   "minibatch_saved", "excluded_fraction", "wall_s", "speedup", "cv0_final", "cv2_final"]


def compare(run_dirs, reference: Optional[int] = None) -> list[dict]:
    """One row per run directory, seeds aggregated.

    Speedup and accuracy delta are relative to ``run_dirs[reference]``; by
    default the first no-removal run, else the first run.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    groups = [(Path(d), load_summaries(d)) for d in run_dirs]
    hashes = {s["dataset_hash"] for _, ss in groups for s in ss}
    if len(hashes) > 1:
        raise ValueError(f"runs were trained on different datasets (hashes {sorted(hashes)})")
    if reference is None:
        reference = next((i for i, (_, ss) in enumerate(groups) if ss[0]["selector"] == "none"), 0)

    rows = []
    for d, ss in groups:
        accs = np.array([s["final_test_accuracy"] for s in ss])
        cv0, cv2 = [], []
        for sd in seed_dirs(d):
            recs = read_epochs_csv(sd / "epochs.csv")
            cv0.append(final_third_mean(recs, "cv0"))
            cv2.append(final_third_mean(recs, "cv2"))
        rows.append({
            "run": d.name,
            "selector": ss[0]["selector"],
            "delta": ss[0]["delta"],
            "n_seeds": len(ss),
            "acc_mean": float(accs.mean()),
            "acc_std": float(accs.std()),
            "minibatch_saved": float(np.mean([s["minibatch_saved"] for s in ss])),
            "excluded_fraction": float(np.mean([s["total_excluded_fraction"] for s in ss])),
            "wall_s": float(np.mean([s["wall_time_s"] for s in ss])),
            "cv0_final": _mean_or_none(cv0),
            "cv2_final": _mean_or_none(cv2),
        })
    ref = rows[reference]
    for r in rows:
        r["acc_delta"] = r["acc_mean"] - ref["acc_mean"]
        r["speedup"] = ref["wall_s"] / r["wall_s"] if r["wall_s"] > 0 else None
    return rows


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def write_table(rows, columns, csv_path=None) -> str:
    """Write rows as CSV (optional) and return them as aligned text."""
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c)) if not isinstance(r.get(c), str) else r[c] for c in columns])

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def sweep(cfg: RunConfig, scales, out_dir) -> list[Path]:
    """Run ``cfg`` once per delta multiplier; returns the run directories."""
    out_dir = Path(out_dir)
    dirs = []
    for s in scales:
        sub = out_dir / f"delta_x{s:g}"
        run_all(cfg.replace(delta=cfg.delta * s, name=f"{cfg.name or 'ies'}_x{s:g}"), sub)
        dirs.append(sub)
    return dirs


def cv_report(run_dir) -> list[dict]:
    """Final-third mean CV per difference order, one row per seed."""
    rows = []
    for sd in seed_dirs(run_dir):
        recs = read_epochs_csv(sd / "epochs.csv")
        rows.append({"seed_dir": sd.name, **{f"cv{k}": final_third_mean(recs, f"cv{k}") for k in CV_ORDERS}})
    return rows
