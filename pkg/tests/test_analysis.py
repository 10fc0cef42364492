import csv
import json

import pytest

from ieslab import analysis, runner


def write_run(d, seed=0, order=2, window=1, **cols):
    """Minimal run directory: epochs.csv built from per-column lists plus a summary."""
    d.mkdir(parents=True, exist_ok=True)
    n = len(next(iter(cols.values())))
    recs = []
    for i in range(n):
        r = {c: None for c in runner.EPOCH_COLUMNS}
        r["epoch"] = i + 1
        r.update({k: v[i] for k, v in cols.items()})
        recs.append(r)
    runner.write_epochs_csv(d / "epochs.csv", recs)
    (d / "summary.json").write_text(json.dumps({"seed": seed, "order": order, "window": window}))
    return d


def test_cv_ordering_fixtures(tmp_path):
    ok = write_run(tmp_path / "a", cv0=[1.0] * 9, cv2=[None, None] + [0.1] * 7, cv1=[None] + [0.5] * 8)
    assert analysis.check_cv_ordering(ok).passed
    tie = write_run(tmp_path / "b", cv0=[1.0] * 9, cv2=[1.0] * 9, cv1=[1.0] * 9)
    assert not analysis.check_cv_ordering(tie).passed


def test_cv_ordering_missing_inputs(tmp_path):
    with pytest.raises(analysis.MissingLogError):
        analysis.check_cv_ordering(tmp_path / "nope")
    d = tmp_path / "c"
    d.mkdir()
    (d / "epochs.csv").write_text("epoch,cv0\n1,0.5\n")
    with pytest.raises(analysis.MissingLogError, match="missing columns"):
        analysis.check_cv_ordering(d)


def test_grad_norm_fixtures(tmp_path):
    ies = write_run(tmp_path / "ies", mean_batch_grad_norm=[2.0] * 10)
    base = write_run(tmp_path / "base", mean_batch_grad_norm=[1.0] * 10)
    r = analysis.check_grad_norm_advantage(ies, base)
    assert r.passed and r.measured["epochs"] == 6  # epochs 5..10 are past order + window + 1
    assert analysis.check_grad_norm_advantage(base, base).passed
    assert not analysis.check_grad_norm_advantage(base, ies).passed
    other = write_run(tmp_path / "s1", seed=1, mean_batch_grad_norm=[1.0] * 10)
    with pytest.raises(ValueError, match="unpaired"):
        analysis.check_grad_norm_advantage(ies, other)


def write_persistence(d, statuses, correct):
    """statuses: {epoch: set of mastered ids}; correct: per-id final correctness."""
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "selection.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "sample_id", "status", "weight"])
        for t, mastered in sorted(statuses.items()):
            for sid in range(len(correct)):
                w.writerow([t, sid, "mastered" if sid in mastered else "active", 1.0])
    with open(d / "final_samples.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "loss", "correct", "noisy", "first_removed_epoch", "reinclusions"])
        for sid, c in enumerate(correct):
            w.writerow([sid, 0, 0.1, c, 0, 0, 0])
    return d


def test_persistence_empty_cohort_is_vacuous(tmp_path):
    d = write_persistence(tmp_path / "e", {1: set(), 2: set()}, [1, 0, 1])
    r = analysis.check_mastered_persistence(d)
    assert r.passed and "vacuous" in r.note


def test_persistence_constructed(tmp_path):
    correct = [1] * 99 + [0]
    # sample 0 is the single earliest removal (5% of 20 ever-removed is 1)
    statuses = {3: {0}, 4: set(range(20))}
    r = analysis.check_mastered_persistence(write_persistence(tmp_path / "p", statuses, correct))
    assert r.passed and r.measured["cohort_train_acc"] == 1.0 and r.measured["overall_train_acc"] == 0.99
    bad = [0] + [1] * 99
    r = analysis.check_mastered_persistence(write_persistence(tmp_path / "q", statuses, bad))
    assert not r.passed


def test_persistence_needs_dump(tmp_path):
    d = write_persistence(tmp_path / "m", {1: set()}, [1])
    (d / "selection.csv").unlink()
    with pytest.raises(analysis.MissingLogError, match="dump_selection"):
        analysis.check_mastered_persistence(d)


def test_write_claims(tmp_path):
    r1 = analysis.ClaimReport("a", True, {"x": 1.0}, "t", [])
    r2 = analysis.ClaimReport("b", False, {"x": 2.0}, "t", [])
    assert analysis.write_claims([r1], tmp_path / "c.json")
    assert not analysis.write_claims([r1, r2], tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())[1]["passed"] is False
    assert r2.line().startswith("[FAIL] b")
