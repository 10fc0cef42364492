"""Figure-level claim checks computed from persisted run logs only."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .runner import read_epochs_csv
from .selection import early_removed_cohort


class MissingLogError(ValueError):
    pass


@dataclass
class ClaimReport:
    claim: str
    passed: bool
    measured: dict
    tolerance: str
    sources: list[str]
    note: str = ""

    def line(self) -> str:
        vals = ", ".join(f"{k}={_short(v)}" for k, v in self.measured.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.claim}: {vals} ({self.tolerance})" + \
            (f" -- {self.note}" if self.note else "")


def _short(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def _records(run_dir: Path, columns) -> list[dict]:
    path = Path(run_dir) / "epochs.csv"
    if not path.exists():
        raise MissingLogError(f"{path} not found")
    recs = read_epochs_csv(path)
    if recs:
        missing = [c for c in columns if c not in recs[0]]
        if missing:
            raise MissingLogError(f"{path}: missing columns {missing}")
    return recs


def _summary(run_dir: Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise MissingLogError(f"{path} not found")
    return json.loads(path.read_text())


def final_third(records: list[dict]) -> list[dict]:
    return records[len(records) - math.ceil(len(records) / 3):]


def check_cv_ordering(run_dir) -> ClaimReport:
    """Final-third mean CV of |Delta^2| must be strictly below that of the loss."""
    recs = _records(run_dir, ["cv0", "cv1", "cv2"])
    window = final_third(recs)
    cv0 = [r["cv0"] for r in window if r["cv0"] is not None]
    cv2 = [r["cv2"] for r in window if r["cv2"] is not None]
    if not cv0 or not cv2:
        raise MissingLogError(f"{run_dir}: CV columns are empty in the final third")
    m0, m2 = float(np.mean(cv0)), float(np.mean(cv2))
    return ClaimReport("cv_ordering", m2 < m0, {"cv2_final_third": m2, "cv0_final_third": m0},
                       "cv2 < cv0 (strict)", [str(Path(run_dir) / "epochs.csv")])


def check_grad_norm_advantage(ies_dir, baseline_dir) -> ClaimReport:
    """Post-warmup mean batch gradient norm: exclusion run >= full-data run."""
    s_ies, s_base = _summary(ies_dir), _summary(baseline_dir)
    if s_ies["seed"] != s_base["seed"]:
        raise ValueError(f"unpaired runs: seeds {s_ies['seed']} and {s_base['seed']}")
    # post-warmup = epochs > order + window + 1
    start = s_ies["order"] + s_ies["window"] + 1
    ies = _records(ies_dir, ["mean_batch_grad_norm"])
    base = _records(baseline_dir, ["mean_batch_grad_norm"])
    common = min(len(ies), len(base))
    pairs = [(a["mean_batch_grad_norm"], b["mean_batch_grad_norm"])
             for a, b in zip(ies[:common], base[:common])
             if a["epoch"] > start and a["mean_batch_grad_norm"] is not None
             and b["mean_batch_grad_norm"] is not None]
    if not pairs:
        raise MissingLogError("no post-warmup epochs with gradient norms in both runs")
    m_ies = float(np.mean([p[0] for p in pairs]))
    m_base = float(np.mean([p[1] for p in pairs]))
    return ClaimReport("grad_norm_advantage", m_ies >= m_base,
                       {"ies_mean_grad_norm": m_ies, "baseline_mean_grad_norm": m_base, "epochs": len(pairs)},
                       "ies >= baseline", [str(Path(ies_dir) / "epochs.csv"), str(Path(baseline_dir) / "epochs.csv")])


def _first_removed_from_dump(path: Path) -> dict[int, int]:
    first: dict[int, int] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["status"] == "mastered":
                sid = int(row["sample_id"])
                if sid not in first:
                    first[sid] = int(row["epoch"])
    return first


def check_mastered_persistence(run_dir, early_fraction: float = 0.05, margin: float = 0.01) -> ClaimReport:
    """Final train accuracy of the earliest-removed cohort vs the whole set."""
    run_dir = Path(run_dir)
    dump = run_dir / "selection.csv"
    finals = run_dir / "final_samples.csv"
    if not dump.exists():
        raise MissingLogError(f"{dump} not found; run with dump_selection=true")
    if not finals.exists():
        raise MissingLogError(f"{finals} not found")
    first = _first_removed_from_dump(dump)
    correct: dict[int, int] = {}
    with open(finals, newline="") as f:
        for row in csv.DictReader(f):
            correct[int(row["sample_id"])] = int(row["correct"])
    ids = np.array(sorted(correct))
    first_arr = np.array([first.get(int(s), 0) for s in ids])
    cohort = early_removed_cohort(ids, first_arr, early_fraction)
    overall = float(np.mean([correct[int(s)] for s in ids]))
    sources = [str(dump), str(finals)]
    if len(cohort) == 0:
        return ClaimReport("mastered_persistence", True, {"overall_train_acc": overall, "cohort_size": 0},
                           f"cohort acc >= overall - {margin:g}", sources, note="no sample was ever removed (vacuous)")
    cohort_acc = float(np.mean([correct[int(s)] for s in cohort]))
    return ClaimReport("mastered_persistence", cohort_acc >= overall - margin,
                       {"cohort_train_acc": cohort_acc, "overall_train_acc": overall, "cohort_size": len(cohort)},
                       f"cohort acc >= overall - {margin:g}", sources)


def mastered_curve_gap(dir_a, dir_b) -> dict:
    """Max absolute gap between two runs' n_mastered curves (reported, not judged)."""
    a = _records(dir_a, ["n_mastered"])
    b = _records(dir_b, ["n_mastered"])
    k = min(len(a), len(b))
    gaps = [abs(a[i]["n_mastered"] - b[i]["n_mastered"]) for i in range(k)]
    return {"max_abs_gap": max(gaps) if gaps else 0.0, "epochs": k}


def write_claims(reports: list[ClaimReport], path) -> bool:
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2))
    return all(r.passed for r in reports)
