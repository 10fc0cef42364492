import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ieslab.ledger import LossLedger
from ieslab.selection import (ReinclusionTracker, SelectorConfig, SelectorState, conventional_early_stop,
                              early_removed_cohort, ies_mastered_set, is_annealing, reinclusion_report,
                              report_from_tracker, select)


def ledger_with(histories):
    """Ledger over ids 0..n-1, each row a full history oldest -> newest."""
    led = LossLedger(range(len(histories)), capacity=4)
    for t in range(len(histories[0])):
        led.record_epoch_array(t + 1, [h[t] for h in histories])
    return led


def test_ies_examples():
    cfg = SelectorConfig(order=2, delta=1e-3)
    led = ledger_with([[0.5, 0.4, 0.3002], [1.0, 0.6, 0.4]])
    assert ies_mastered_set(led, 3, cfg) == {0}
    short = ledger_with([[0.5]])
    assert ies_mastered_set(short, 1, SelectorConfig(order=2, delta=1e9)) == set()
    with pytest.raises(ValueError):
        ies_mastered_set(led, 2, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SelectorConfig(kind="bogus")
    with pytest.raises(ValueError):
        SelectorConfig(order=4)
    with pytest.raises(ValueError):
        SelectorConfig(delta=0.0)
    with pytest.raises(ValueError):
        SelectorConfig(kind="small_loss_rescale", removal_rate=0.3, anneal_fraction=0.1)
    assert SelectorConfig(order=2, window=3).warmup_epochs == 4
    assert SelectorConfig(kind="none").warmup_epochs == 0


def test_none_keeps_everything():
    led = ledger_with([[0.1, 0.1, 0.1]] * 5)
    s = select(SelectorConfig(kind="none"), led, 3, 10)
    assert s.active == set(range(5)) and s.mastered == set()


def test_annealing_epoch_140_of_150():
    cfg = SelectorConfig(order=2, delta=1e9, anneal_fraction=0.1)
    led = ledger_with([[0.3, 0.2, 0.1]] * 4)
    assert select(cfg, led, 3, 150).n_active == 0
    assert is_annealing(cfg, 140, 150)
    assert not is_annealing(cfg, 135, 150) and is_annealing(cfg, 136, 150)
    assert sum(is_annealing(cfg, t, 150) for t in range(1, 151)) == 15


def test_random_remove_exact_count():
    led = ledger_with([[1.0]] * 1000)
    s = select(SelectorConfig(kind="random_remove", removal_rate=0.3), led, 1, 10)
    assert s.n_mastered == 300
    again = select(SelectorConfig(kind="random_remove", removal_rate=0.3), led, 1, 10)
    assert np.array_equal(s.active_mask, again.active_mask)


def test_small_loss_rescale_weights():
    losses = [[v] for v in [0.1, 0.2, 0.3, 0.4, 2.0, 3.0]]  # mean 1.0, four below it
    s = select(SelectorConfig(kind="small_loss_rescale", removal_rate=0.5), ledger_with(losses), 1, 10)
    assert s.n_mastered == 2
    small = np.arange(4)
    dropped = small[~s.active_mask[:4]]
    kept = np.setdiff1d(small, dropped)
    assert np.all(s.weights[kept] == 2.0)
    assert np.all(s.weights[4:] == 1.0) and s.active_mask[4:].all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 5, allow_nan=False), min_size=3, max_size=3), min_size=1, max_size=30),
       st.sampled_from(["ies", "none", "random_remove", "small_loss_rescale"]),
       st.floats(1e-6, 10), st.floats(0, 0.9))
def test_active_and_mastered_partition(hist, kind, delta, rate):
    led = ledger_with(hist)
    cfg = SelectorConfig(kind=kind, delta=delta, removal_rate=rate)
    s = select(cfg, led, 3, 30)
    assert s.active | s.mastered == set(range(len(hist)))
    assert not s.active & s.mastered


def test_delta_limits():
    hist = [[0.9, 0.5, 0.2], [0.4, 0.35, 0.3]]
    led = ledger_with(hist)
    assert select(SelectorConfig(delta=1e-300), led, 3, 10).n_mastered == 0
    assert select(SelectorConfig(delta=1e300), led, 3, 10).n_mastered == 2


def test_conventional_early_stop_examples():
    assert not conventional_early_stop([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], 2)
    hist = [0.1, 0.2, 0.3, 0.4, 0.9] + [0.5] * 11
    assert len(hist) == 16 and conventional_early_stop(hist, 10)
    assert not conventional_early_stop(hist[:15], 10)
    assert not conventional_early_stop([0.5, 0.4], 5)
    with pytest.raises(ValueError):
        conventional_early_stop([0.5], 0)


def state(epoch, excluded, n=3):
    mask = np.ones(n, dtype=bool)
    mask[list(excluded)] = False
    return SelectorState(epoch, np.arange(n), mask, np.ones(n))


def test_reinclusion_examples():
    r = reinclusion_report([state(1, []), state(2, [0]), state(3, []), state(4, [0])])
    assert r.counts == {0: 1, 1: 0, 2: 0}
    assert r.mean_reinclusions == 1.0 and r.ever_removed == 1 and r.max_reinclusions == 1
    none = reinclusion_report([state(t, []) for t in range(1, 5)])
    assert set(none.counts.values()) == {0} and none.mean_reinclusions == 0.0
    with pytest.raises(ValueError):
        reinclusion_report([state(1, [])])


def test_early_cohort_orders_by_epoch_then_id():
    ids = np.array([7, 3, 9, 1, 5])
    first = np.array([4, 2, 2, 0, 3])
    assert early_removed_cohort(ids, first, 0.5).tolist() == [3, 9]
    assert early_removed_cohort(ids, first, 0.05).tolist() == [3]
    assert early_removed_cohort(ids, np.zeros(5, dtype=int)).size == 0


def test_tracker_matches_report():
    states = [state(1, []), state(2, [1, 2]), state(3, [2]), state(4, [])]
    tr = ReinclusionTracker(np.arange(3))
    for s in states:
        tr.update(s)
    a, b = report_from_tracker(tr), reinclusion_report(states)
    assert a.counts == b.counts == {0: 0, 1: 1, 2: 1}
    assert tr.first_removed.tolist() == [0, 2, 2]
