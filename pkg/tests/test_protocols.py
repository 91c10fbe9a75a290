import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prpl.config import TrainConfig
from prpl.data import Dataset, SyntheticSpec, generate_cohort
from prpl.errors import ProtocolError
from prpl.protocols import (KINDS, ProtocolSpec, confusion_matrix, make_folds,
                            metrics_csv, run_noise_sweep, run_protocol)

FAST = TrainConfig(maxepoch=2, batch_size=32)


def cohort(n_subjects=4, per_class=15, spread=2.0, seed=0):
    return generate_cohort(SyntheticSpec(per_class=per_class, d=5, spread=spread),
                           n_subjects=n_subjects, n_sessions=3, n_trials=15, seed=seed)


def ids_dataset(subject, session, trial):
    n = len(subject)
    return Dataset(np.zeros((n, 2)), np.asarray(trial) % 3, np.asarray(subject),
                   np.asarray(session), np.asarray(trial))


# ---------------------------------------------------------------- folds

def test_loso_fold_counts():
    ds = cohort(n_subjects=15, per_class=5)
    assert len(make_folds(ds, ProtocolSpec("cross_subject_cross_session"))) == 15
    assert len(make_folds(ds, ProtocolSpec("cross_subject_single_session"))) == 15


def test_cross_subject_single_session_uses_first_session():
    ds = cohort()
    for f in make_folds(ds, ProtocolSpec("cross_subject_single_session")):
        assert set(ds.session[f.source]) == {1} == set(ds.session[f.target])
        assert len(set(ds.subject[f.target])) == 1
        assert set(ds.subject[f.target]).isdisjoint(ds.subject[f.source])


def test_within_subject_cross_session_split():
    ds = cohort()
    folds = make_folds(ds, ProtocolSpec("within_subject_cross_session"))
    assert len(folds) == 4
    for f in folds:
        assert set(ds.session[f.source]) == {1, 2}
        assert set(ds.session[f.target]) == {3}


def test_within_subject_single_session_trial_split():
    ds = cohort(n_subjects=2)
    folds = make_folds(ds, ProtocolSpec("within_subject_single_session", 9))
    assert len(folds) == 2 * 3
    for f in folds:
        assert sorted(set(ds.trial[f.source])) == list(range(1, 10))
        assert sorted(set(ds.trial[f.target])) == list(range(10, 16))


def test_within_subject_single_session_16_8():
    subj = np.zeros(24 * 2, int)
    sess = np.ones(24 * 2, int)
    trial = np.repeat(np.arange(1, 25), 2)
    folds = make_folds(ids_dataset(subj, sess, trial),
                       ProtocolSpec("within_subject_single_session", 16))
    assert len(np.unique(trial[folds[0].source])) == 16
    assert len(np.unique(trial[folds[0].target])) == 8


def test_cross_session_needs_three_sessions():
    ds = ids_dataset([0, 0, 1, 1], [1, 2, 1, 2], [1, 1, 1, 1])
    with pytest.raises(ProtocolError):
        make_folds(ds, ProtocolSpec("within_subject_cross_session"))


def test_loso_needs_two_subjects():
    with pytest.raises(ProtocolError):
        make_folds(ids_dataset([0, 0], [1, 1], [1, 2]), ProtocolSpec("cross_subject_cross_session"))


def test_protocol_spec_validation():
    with pytest.raises(ProtocolError):
        ProtocolSpec("leave_one_out")
    with pytest.raises(ProtocolError):
        ProtocolSpec("within_subject_single_session", 0)


@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_folds_partition_their_scope(seed, kind):
    rng = np.random.default_rng(seed)
    n = 300
    subj = rng.integers(0, 4, n)
    sess = rng.integers(1, 4, n)
    trial = rng.integers(1, 16, n)
    # make every subject own every session and trial at least once
    grid = np.array([(s, se, t) for s in range(4) for se in range(1, 4) for t in range(1, 16)])
    subj, sess, trial = (np.concatenate([grid[:, k], v]) for k, v in
                         enumerate((subj, sess, trial)))
    ds = ids_dataset(subj, sess, trial)
    for f in make_folds(ds, ProtocolSpec(kind)):
        assert len(np.intersect1d(f.source, f.target)) == 0
        if kind == "cross_subject_cross_session":
            assert len(f.source) + len(f.target) == len(ds)
        if kind == "within_subject_single_session":
            s, se = subj[f.target[0]], sess[f.target[0]]
            scope = np.flatnonzero((subj == s) & (sess == se))
            assert sorted(np.concatenate([f.source, f.target])) == sorted(scope)


# ---------------------------------------------------------------- scoring

def test_confusion_examples():
    np.testing.assert_array_equal(confusion_matrix([0, 1], [0, 0], 2), [[1, 0], [1, 0]])
    y = np.array([0, 1, 1, 2, 2, 2])
    np.testing.assert_array_equal(confusion_matrix(y, y, 3), np.diag([1, 2, 3]))
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 0], 3)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=50))
def test_confusion_conserves_counts(pairs):
    t = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    C = confusion_matrix(t, p, 4)
    assert C.sum() == len(pairs)
    np.testing.assert_array_equal(C.sum(axis=1), np.bincount(t, minlength=4))


@pytest.fixture(scope="module")
def small_result():
    ds = cohort(n_subjects=3)
    return ds, run_protocol(FAST, ds, ProtocolSpec("cross_subject_single_session"))


def test_result_summary_statistics(small_result):
    ds, res = small_result
    acc = res.accuracies
    assert len(acc) == 3
    assert res.mean == pytest.approx(acc.sum() / 3, abs=1e-12)
    assert res.std == pytest.approx(np.sqrt(np.mean((acc - acc.mean()) ** 2)), abs=1e-12)
    first = ds.session == 1
    np.testing.assert_array_equal(res.confusion.sum(axis=1),
                                  np.bincount(ds.labels[first], minlength=3))
    assert "±" in res.summary()


def test_sample_std_flag(small_result):
    ds, res = small_result
    res.population_std = False
    try:
        assert res.std == pytest.approx(np.std(res.accuracies, ddof=1))
    finally:
        res.population_std = True


def test_no_shift_separable_data_is_solved():
    spec = SyntheticSpec(per_class=20, d=5, spread=3.0, rotation_deg=0, translation=0)
    ds = generate_cohort(spec, n_subjects=2, n_sessions=1, n_trials=6, seed=0)
    # every subject shares the class means; the within-subject split keeps shifts out
    res = run_protocol(TrainConfig(maxepoch=15), ds,
                       ProtocolSpec("within_subject_single_session", 3))
    assert res.mean > 0.97


def test_row_order_does_not_change_metrics(small_result):
    ds, res = small_result
    perm = np.random.default_rng(0).permutation(len(ds))
    again = run_protocol(FAST, ds.subset(perm), ProtocolSpec("cross_subject_single_session"))
    np.testing.assert_array_equal(again.accuracies, res.accuracies)


def test_parallel_folds_match_sequential(small_result):
    ds, res = small_result
    par = run_protocol(FAST, ds, ProtocolSpec("cross_subject_single_session"), workers=2)
    np.testing.assert_array_equal(par.accuracies, res.accuracies)


def test_noise_sweep_contract(small_result):
    ds, res = small_result
    labels_before = ds.labels.copy()
    out = run_noise_sweep(FAST, ds, ProtocolSpec("cross_subject_single_session"), [0, 30])
    assert len(out) == 2
    np.testing.assert_array_equal(out[0].accuracies, res.accuracies)
    np.testing.assert_array_equal(ds.labels, labels_before)


def test_metrics_csv_format(small_result):
    _, res = small_result
    text = metrics_csv(res, ["[train]", "lr = 0.001"])
    lines = text.splitlines()
    assert lines[0] == "# [train]" and lines[2] == "fold,accuracy"
    assert lines[-2].startswith("mean,") and lines[-1].startswith("std,")
    assert len(lines) == 3 + 3 + 2
