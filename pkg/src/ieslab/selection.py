"""Per-epoch choice of which samples take part in backpropagation.

Membership is recomputed from scratch every epoch, so an excluded sample
comes back as soon as its criterion stops holding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ledger import LossLedger

KINDS = ("ies", "none", "random_remove", "small_loss_rescale")


@dataclass(frozen=True)
class SelectorConfig:
    kind: str = "ies"
    order: int = 2
    delta: float = 1e-3
    window: int = 1
    anneal_fraction: float = 0.0
    removal_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.order <= 3:
            raise ValueError(f"difference order must be in 0..3, got {self.order}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.kind == "ies" and not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not 0 <= self.anneal_fraction < 1:
            raise ValueError("anneal_fraction must be in [0, 1)")
        if not 0 <= self.removal_rate < 1:
            raise ValueError("removal_rate must be in [0, 1)")
        if self.kind == "small_loss_rescale" and self.anneal_fraction:
            raise ValueError("small_loss_rescale runs without annealing")

    @property
    def warmup_epochs(self) -> int:
        """Last epoch in which no exclusion can happen."""
        return self.order + self.window - 1 if self.kind == "ies" else 0


@dataclass
class SelectorState:
    epoch: int
    ids: np.ndarray
    active_mask: np.ndarray
    weights: np.ndarray  # per-sample gradient weight, aligned with ids
    annealed: bool = False

    @property
    def mastered_mask(self) -> np.ndarray:
        return ~self.active_mask

    @property
    def active(self) -> set[int]:
        return {int(s) for s in self.ids[self.active_mask]}

    @property
    def mastered(self) -> set[int]:
        return {int(s) for s in self.ids[~self.active_mask]}

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    @property
    def n_mastered(self) -> int:
        return len(self.ids) - self.n_active


def ies_mastered_mask(ledger: LossLedger, cfg: SelectorConfig) -> np.ndarray:
    score = ledger.windowed_abs_difference(cfg.order, cfg.window)
    if score is None:
        return np.zeros(len(ledger), dtype=bool)
    return score < cfg.delta


def ies_mastered_set(ledger: LossLedger, epoch: int, cfg: SelectorConfig) -> set[int]:
    """Samples whose windowed ``|Delta^N loss|`` is below ``delta`` at ``epoch``."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    if ledger.epoch != epoch:
        raise ValueError(f"ledger is at epoch {ledger.epoch}, asked about epoch {epoch}")
    mask = ies_mastered_mask(ledger, cfg)
    return {int(s) for s in ledger.ids[mask]}


def is_annealing(cfg: SelectorConfig, epoch: int, total_epochs: int) -> bool:
    # integer cut-off: exactly round(f * T) trailing epochs run on the full set
    n_anneal = int(round(cfg.anneal_fraction * total_epochs))
    return n_anneal > 0 and epoch > total_epochs - n_anneal


def selector_rng(seed: int, epoch: int) -> np.random.Generator:
    """Stream reserved for selector draws, separate from data shuffling."""
    return np.random.default_rng([seed, 2, epoch])


def select(cfg: SelectorConfig, ledger: LossLedger, epoch: int, total_epochs: int,
           rng: Optional[np.random.Generator] = None) -> SelectorState:
    n = len(ledger)
    ids = ledger.ids
    active = np.ones(n, dtype=bool)
    weights = np.ones(n)
    if rng is None:
        rng = selector_rng(cfg.seed, epoch)

    if is_annealing(cfg, epoch, total_epochs):
        return SelectorState(epoch, ids, active, weights, annealed=True)

    if cfg.kind == "ies":
        active = ~ies_mastered_mask(ledger, cfg)
    elif cfg.kind == "random_remove":
        k = int(round(cfg.removal_rate * n))
        active[rng.choice(n, size=k, replace=False)] = False
    elif cfg.kind == "small_loss_rescale":
        losses = ledger.latest()
        small = np.flatnonzero(losses < losses.mean())
        k = int(round(cfg.removal_rate * len(small)))
        dropped = rng.choice(small, size=k, replace=False)
        active[dropped] = False
        survivors = np.setdiff1d(small, dropped)
        weights[survivors] = 1.0 / (1.0 - cfg.removal_rate)
    return SelectorState(epoch, ids, active, weights)


def conventional_early_stop(val_history: Sequence[float], patience: int) -> bool:
    """True once the best validation accuracy is more than ``patience`` epochs old.

    Ties keep the earliest best, so a flat curve counts as stalled.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(val_history) <= patience:
        return False
    best_epoch = int(np.argmax(val_history)) + 1
    return len(val_history) - best_epoch > patience


@dataclass
class ReinclusionTracker:
    """Counts how often each sample goes from excluded back to active."""

    ids: np.ndarray
    counts: np.ndarray = None
    first_removed: np.ndarray = None  # epoch, 0 = never
    _prev_excluded: np.ndarray = None
    epochs_seen: int = 0

    def __post_init__(self):
        n = len(self.ids)
        self.counts = np.zeros(n, dtype=np.int64)
        self.first_removed = np.zeros(n, dtype=np.int64)
        self._prev_excluded = np.zeros(n, dtype=bool)

    def update(self, state: SelectorState) -> None:
        excluded = state.mastered_mask
        self.counts += self._prev_excluded & ~excluded
        newly = excluded & (self.first_removed == 0)
        self.first_removed[newly] = state.epoch
        self._prev_excluded = excluded.copy()
        self.epochs_seen += 1


@dataclass
class ReinclusionReport:
    mean_reinclusions: float  # over ever-removed samples
    max_reinclusions: int
    counts: dict[int, int]
    ever_removed: int
    early_removed_ids: list[int] = field(default_factory=list)
    early_mean_reinclusions: float = 0.0


def early_removed_cohort(ids, first_removed, fraction: float = 0.05) -> np.ndarray:
    """The first ``fraction`` of ever-removed samples, by first-removal epoch.

    Ties inside the cut-off epoch are broken by sample id.
    """
    ever = np.flatnonzero(first_removed > 0)
    if len(ever) == 0:
        return np.zeros(0, dtype=np.int64)
    k = max(1, int(np.ceil(fraction * len(ever))))
    order = np.lexsort((np.asarray(ids)[ever], first_removed[ever]))
    return np.asarray(ids)[ever[order[:k]]]


def reinclusion_report(states: Sequence[SelectorState], early_fraction: float = 0.05) -> ReinclusionReport:
    if len(states) < 2:
        raise ValueError("need at least 2 epochs of selector state")
    tracker = ReinclusionTracker(states[0].ids)
    for s in states:
        tracker.update(s)
    return report_from_tracker(tracker, early_fraction)


def report_from_tracker(tracker: ReinclusionTracker, early_fraction: float = 0.05) -> ReinclusionReport:
    ever = tracker.first_removed > 0
    counts = {int(s): int(c) for s, c in zip(tracker.ids, tracker.counts)}
    early = early_removed_cohort(tracker.ids, tracker.first_removed, early_fraction)
    early_counts = [counts[int(s)] for s in early]
    return ReinclusionReport(
        mean_reinclusions=float(tracker.counts[ever].mean()) if ever.any() else 0.0,
        max_reinclusions=int(tracker.counts.max()) if len(tracker.counts) else 0,
        counts=counts,
        ever_removed=int(ever.sum()),
        early_removed_ids=[int(s) for s in early],
        early_mean_reinclusions=float(np.mean(early_counts)) if early_counts else 0.0,
    )
