"""Per-sample loss history and finite differences of it."""
from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np


class LedgerError(ValueError):
    pass


def nth_difference(history: Sequence[float], order: int) -> Optional[float]:
    """Iterated backward difference of the newest ``order + 1`` losses.

    ``history`` is oldest -> newest. Order 0 is the newest loss itself; for
    ``[a, b, c]`` order 2 gives ``(c - b) - (b - a)``. Returns ``None`` (not 0)
    when the history is too short.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    if len(history) < order + 1:
        return None
    tail = np.asarray(history[len(history) - order - 1:], dtype=np.float64)
    return float(np.diff(tail, n=order)[0])


def coefficient_of_variation(values) -> Optional[float]:
    """Population sigma / mu; ``None`` when mu == 0 or there are no values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None
    mu = values.mean()
    if mu == 0:
        return None
    return float(values.std() / mu)


class LossLedger:
    """Ring buffer of the most recent epoch-end losses for every sample.

    Buffers are kept right-aligned in one ``[n, capacity]`` array so column
    ``-1`` is always the newest loss; the valid part is the last ``length``
    columns. Every sample gets exactly one entry per epoch.
    """

    def __init__(self, sample_ids, capacity: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.ids = np.asarray(sample_ids, dtype=np.int64)
        self._row = {int(s): i for i, s in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise LedgerError("duplicate sample ids")
        self.capacity = capacity
        self._buf = np.zeros((len(self.ids), capacity))
        self.length = 0
        self.epoch: Optional[int] = None

    def __len__(self):
        return len(self.ids)

    def record_epoch(self, epoch: int, losses: Mapping[int, float]) -> "LossLedger":
        values = np.empty(len(self.ids))
        for i, sid in enumerate(self.ids):
            try:
                values[i] = losses[int(sid)]
            except KeyError:
                raise LedgerError(f"epoch {epoch}: no loss for sample_id {int(sid)}") from None
        extra = set(losses) - set(self._row)
        if extra:
            raise LedgerError(f"epoch {epoch}: unknown sample_id {min(extra)}")
        return self.record_epoch_array(epoch, values)

    def record_epoch_array(self, epoch: int, values) -> "LossLedger":
        """Same as ``record_epoch`` with losses aligned to ``self.ids``."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.ids.shape:
            raise LedgerError(f"epoch {epoch}: expected {len(self.ids)} losses, got {values.shape}")
        if self.epoch is not None and epoch <= self.epoch:
            raise LedgerError(f"epoch {epoch} already recorded (last epoch {self.epoch})")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            bad = int(self.ids[~(np.isfinite(values) & (values >= 0))][0])
            raise LedgerError(f"epoch {epoch}: loss for sample_id {bad} is negative or non-finite")
        self._buf[:, :-1] = self._buf[:, 1:]
        self._buf[:, -1] = values
        self.length = min(self.length + 1, self.capacity)
        self.epoch = epoch
        return self

    def history(self, sample_id: int) -> list[float]:
        row = self._buf[self._row[int(sample_id)]]
        return [float(v) for v in row[self.capacity - self.length:]]

    def latest(self) -> np.ndarray:
        if self.length == 0:
            raise LedgerError("ledger is empty")
        return self._buf[:, -1].copy()

    def differences(self, order: int, lag: int = 0) -> Optional[np.ndarray]:
        """Delta^order for every sample, evaluated ``lag`` epochs back.

        Aligned with ``self.ids``; ``None`` if the history is too short.
        """
        need = order + 1 + lag
        if need > self.capacity:
            raise LedgerError(f"order {order} at lag {lag} needs capacity {need}, have {self.capacity}")
        if self.length < need:
            return None
        end = self.capacity - lag
        return np.diff(self._buf[:, end - order - 1:end], n=order, axis=1)[:, 0]

    def windowed_abs_difference(self, order: int, window: int = 1) -> Optional[np.ndarray]:
        """Sum of ``|Delta^order|`` over the last ``window`` epochs."""
        total = None
        for lag in range(window):
            d = self.differences(order, lag)
            if d is None:
                return None
            total = np.abs(d) if total is None else total + np.abs(d)
        return total

    def difference_map(self, order: int) -> Optional[dict[int, float]]:
        d = self.differences(order)
        if d is None:
            return None
        return {int(s): float(v) for s, v in zip(self.ids, d)}


def cv_of_differences(ledger: LossLedger, order: int, signed: bool = False) -> Optional[float]:
    """CV across samples of ``|Delta^order|`` (or the raw signed values)."""
    d = ledger.differences(order)
    if d is None:
        raise LedgerError(f"not enough history for order {order} (have {ledger.length} epochs)")
    return coefficient_of_variation(d if signed else np.abs(d))
