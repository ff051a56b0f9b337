import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ookgate.calibration import (
    Calibration,
    CorpusMismatchWarning,
    Provenance,
    build_calibration,
    critical_value,
    critical_value_from_sample,
    dumps_calibration,
    ecdf_eval,
    fisher_combine,
    gate_batch,
    gate_query,
    load_calibration,
    loads_calibration,
    p_value,
    per_rank_p_values,
    save_calibration,
    simes_combine,
)
from ookgate.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    EmptyCalibrationSet,
    EmptySample,
    InvalidAlpha,
    InvalidPValue,
    InvariantViolation,
    NeighborListTooShort,
    UnsupportedVersion,
)
from ookgate.statistics import StatisticKind
from ookgate.vecstore import NeighborList, SimilarityMetric, build_index, knn_search


def make_cal(stats, k=1, kind="mss"):
    stats = np.sort(np.asarray(stats, dtype=float))
    pools = np.tile(stats, (k, 1))
    return Calibration(StatisticKind(kind, k=k), SimilarityMetric.COSINE, 2, stats, pools, Provenance.TRUE_IN_KNOWLEDGE, "x")


def test_ecdf_examples():
    assert ecdf_eval([1, 2, 3], 2) == 0.75
    assert ecdf_eval([1, 2, 3], 0.5) == 0.25
    assert ecdf_eval([1, 2, 3], 3) == 1.0
    with pytest.raises(EmptySample):
        ecdf_eval([], 1.0)


def test_p_value_examples():
    cal = make_cal([-0.9, -0.8, -0.7])
    assert p_value(cal, -0.75) == 0.25
    assert p_value(cal, -5.0) == 0.75
    assert p_value(cal, 0.0) == 0.0


def test_critical_value_examples():
    cal = make_cal([1, 2, 3])
    assert critical_value(cal, 0.05) == 3.0
    assert critical_value(cal, 0.5) == 2.0
    assert critical_value(make_cal([5]), 0.3) == 5.0
    with pytest.raises(InvalidAlpha):
        critical_value(cal, 1.0)
    with pytest.raises(InvalidAlpha):
        critical_value(cal, 0.0)


@settings(max_examples=200, deadline=None)
@given(
    samples=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=200),
    probe=st.floats(-120, 120, allow_nan=False),
)
def test_ecdf_matches_literal_count(samples, probe):
    s = sorted(samples)
    literal = (1 + sum(1 for x in s if x <= probe)) / (1 + len(s))
    assert ecdf_eval(s, probe) == literal


@settings(max_examples=200, deadline=None)
@given(samples=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=100, unique=True))
def test_p_value_floor_and_range(samples):
    cal = make_cal(samples)
    n = len(samples)
    for t in samples:
        p = p_value(cal, t)
        assert 0.0 <= p <= n / (1 + n)
    assert p_value(cal, min(samples)) == pytest.approx(1 - 2 / (1 + n), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(samples=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=60), data=st.data())
def test_monotonicity(samples, data):
    cal = make_cal(samples)
    t1 = data.draw(st.floats(-12, 12))
    t2 = data.draw(st.floats(-12, 12))
    lo, hi = min(t1, t2), max(t1, t2)
    assert p_value(cal, hi) <= p_value(cal, lo)
    a1 = data.draw(st.floats(0.001, 0.999))
    a2 = data.draw(st.floats(0.001, 0.999))
    alo, ahi = min(a1, a2), max(a1, a2)
    assert critical_value(cal, ahi) <= critical_value(cal, alo)


def test_decision_consistency_continuous(rng):
    for _ in range(50):
        n = int(rng.integers(1, 400))
        cal = make_cal(rng.standard_normal(n))
        alpha = float(rng.uniform(0.005, 0.5))
        c = critical_value(cal, alpha)
        for t in rng.standard_normal(200) * 1.5:
            assert (p_value(cal, t) <= alpha) == (t >= c)


def test_threshold_semantics_on_tied_alpha():
    # n=19: p(t_18) = 1/20 = alpha exactly; the p <= alpha rule rejects, critical value sits one higher
    s = np.arange(1.0, 20.0)
    cal = make_cal(s)
    assert p_value(cal, 18.0) == 0.05
    assert critical_value(cal, 0.05) == 19.0


def test_fisher_examples():
    assert fisher_combine([1, 1, 1]) == -6.0
    assert fisher_combine([0.5, 0.5]) == -2.0
    assert fisher_combine([0, 0, 0]) == 0.0
    assert fisher_combine([0.5], mode="log") == pytest.approx(-2 * math.log(0.5))
    assert fisher_combine([0.0, 1.0], mode="log", eps=0.25) == pytest.approx(-2 * math.log(0.25))
    with pytest.raises(EmptySample):
        fisher_combine([])
    with pytest.raises(InvalidPValue):
        fisher_combine([1.2])


def test_simes_examples():
    assert simes_combine([1 / 3, 2 / 3, 1]) == pytest.approx(1.0, abs=1e-15)
    assert simes_combine([0.01, 0.5, 0.9]) == pytest.approx(0.03, abs=1e-15)
    assert simes_combine([0.2]) == 0.2
    with pytest.raises(InvalidPValue):
        simes_combine([-0.1])


# values below 1e-9 would change the Fisher sum by less than one ulp
unit_p = st.one_of(st.just(0.0), st.floats(1e-9, 1.0))


@settings(max_examples=200, deadline=None)
@given(p=st.lists(unit_p, min_size=1, max_size=32), data=st.data())
def test_meta_properties(p, data):
    assert simes_combine(p) <= len(p) * min(p) + 1e-15
    assert simes_combine(p) <= max(p) + 1e-15
    i = data.draw(st.integers(0, len(p) - 1))
    if p[i] > 0:
        lowered = list(p)
        lowered[i] = p[i] / 2
        assert fisher_combine(lowered) > fisher_combine(p)


@pytest.fixture
def cluster_setup():
    rng = np.random.default_rng(1)
    center = rng.standard_normal(8)
    docs = center + 0.3 * rng.standard_normal((60, 8))
    idx = build_index(docs, [f"d{i:02d}" for i in range(60)])
    cal_q = center + 0.3 * rng.standard_normal((40, 8))
    return idx, cal_q, rng


def test_build_calibration_mss_matches_brute_force(toy_index):
    queries = np.array([[1.0, 0.2], [0.1, 1.0], [0.7, 0.7]])
    cal = build_calibration(toy_index, queries, StatisticKind("mss", k=2))
    rows = np.asarray(toy_index.rows)
    brute = sorted(-max(float(r @ q) / (np.linalg.norm(r) * np.linalg.norm(q)) for r in rows) for q in queries)
    np.testing.assert_allclose(cal.sorted_stats, brute, atol=1e-15)
    assert cal.n_cal == 3 and cal.rank_pools.shape == (2, 3)
    assert np.all(np.diff(cal.rank_pools, axis=1) >= 0)


def test_build_calibration_errors(toy_index):
    with pytest.raises(EmptyCalibrationSet):
        build_calibration(toy_index, np.empty((0, 2)), StatisticKind("mss"))
    with pytest.raises(DimensionMismatch):
        build_calibration(toy_index, np.ones((2, 3)), StatisticKind("mss"))


def test_effective_k_truncation(toy_index):
    cal = build_calibration(toy_index, [[1.0, 0.1], [0.3, 1.0]], StatisticKind("knn", k=32))
    assert cal.k == 3 and cal.kind.rank_j == 3
    assert cal.rank_pools.shape == (3, 2)


def test_per_rank_p_values_examples():
    pools = np.array([[-0.9, -0.8, -0.7]])
    cal = Calibration(StatisticKind("fisher", k=1), SimilarityMetric.COSINE, 2, np.zeros(3), pools, Provenance.SYNTHETIC, "x")
    assert per_rank_p_values(cal, NeighborList.from_similarities([0.75])).tolist() == [0.25]
    assert per_rank_p_values(cal, NeighborList.from_similarities([0.95])).tolist() == [0.75]
    assert per_rank_p_values(cal, NeighborList.from_similarities([0.1])).tolist() == [0.0]
    with pytest.raises(NeighborListTooShort):
        per_rank_p_values(make_cal([1, 2, 3], k=2), NeighborList.from_similarities([0.5]))


def test_per_rank_extremes(cluster_setup):
    idx, cal_q, _ = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind("fisher", k=5))
    n = cal.n_cal
    hi = np.full(5, 10.0)
    lo = np.full(5, -10.0)
    assert per_rank_p_values(cal, hi).tolist() == [n / (n + 1)] * 5
    assert per_rank_p_values(cal, lo).tolist() == [0.0] * 5


def test_gate_examples():
    idx = build_index([[1.0, 0.0], [-1.0, 0.0]], ["a", "b"], "cosine")
    cal = Calibration(
        StatisticKind("mss", k=1), SimilarityMetric.COSINE, 2, np.array([-0.9, -0.8, -0.7]),
        np.array([[-0.9, -0.8, -0.7]]), Provenance.TRUE_IN_KNOWLEDGE, idx.fingerprint(),
    )
    # a unit query at angle theta to [1,0] has max similarity cos(theta)
    q75 = [0.75, math.sqrt(1 - 0.75**2)]
    d = gate_query(cal, idx, q75, 0.05)
    assert d.statistic == pytest.approx(-0.75, abs=1e-15)
    assert d.p_value == 0.25 and not d.reject
    q10 = [0.1, math.sqrt(1 - 0.01)]
    d = gate_query(cal, idx, q10, 0.05)
    assert d.p_value == 0.0 and d.reject
    with pytest.raises(InvalidAlpha):
        gate_query(cal, idx, q10, 1.5)


@pytest.mark.parametrize("kind", ["mss", "knn", "avgknn", "entropy", "energy", "fisher", "simes"])
def test_gate_on_calibration_query_has_floor(cluster_setup, kind):
    idx, cal_q, _ = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind(kind, k=8))
    n = cal.n_cal
    first = gate_query(cal, idx, cal_q[0], 0.05)
    again = gate_query(cal, idx, cal_q[0], 0.05)
    assert first == again
    if kind != "simes":
        assert first.p_value >= 1 / (1 + n)
        assert first.p_value == pytest.approx(p_value(cal, first.statistic))
    else:
        assert first.statistic == -first.p_value
    assert first.reject == (first.p_value <= 0.05)


def test_gate_batch_equals_single(cluster_setup):
    idx, cal_q, rng = cluster_setup
    for kind in ("energy", "fisher", "simes"):
        cal = build_calibration(idx, cal_q, StatisticKind(kind, k=8))
        Q = rng.standard_normal((10, 8))
        batch = gate_batch(cal, idx, Q, 0.1)
        assert batch == [gate_query(cal, idx, q, 0.1) for q in Q]


def test_fisher_gate_uses_fisher_ecdf(cluster_setup):
    idx, cal_q, rng = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind("fisher", k=8))
    q = rng.standard_normal(8)
    nb = knn_search(idx, q, 8)
    t = fisher_combine(per_rank_p_values(cal, nb))
    d = gate_query(cal, idx, q, 0.05)
    assert d.statistic == t
    assert d.p_value == p_value(cal, t)


def test_simes_gate_uses_combined_value(cluster_setup):
    idx, cal_q, rng = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind("simes", k=8))
    q = rng.standard_normal(8)
    s = simes_combine(per_rank_p_values(cal, knn_search(idx, q, 8)))
    d = gate_query(cal, idx, q, 0.05)
    assert d.p_value == s and d.statistic == -s and d.reject == (s <= 0.05)


def test_fingerprint_mismatch_warns(cluster_setup):
    idx, cal_q, _ = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind("mss", k=4))
    other = build_index(np.asarray(idx.rows) * 2, idx.doc_ids)
    with pytest.warns(CorpusMismatchWarning):
        gate_query(cal, other, cal_q[0], 0.05)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gate_query(cal, idx, cal_q[0], 0.05)


@pytest.mark.parametrize("kind", ["mss", "knn", "energy", "fisher", "simes"])
def test_save_load_round_trip(cluster_setup, tmp_path, kind):
    idx, cal_q, _ = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind(kind, k=6, tau=0.3), Provenance.SYNTHETIC)
    path = tmp_path / "cal.json"
    save_calibration(cal, path)
    back = load_calibration(path)
    assert back == cal
    assert back.sorted_stats.tobytes() == cal.sorted_stats.tobytes()
    doc = json.loads(path.read_text())
    for key in ("version", "kind", "k", "rank_j", "tau", "metric", "dim", "n_cal", "provenance",
                "corpus_fingerprint", "sorted_stats", "rank_pools"):
        assert key in doc
    assert doc["version"] == "1" and doc["provenance"] == "synthetic"


def test_load_rejects_tampering(cluster_setup):
    idx, cal_q, _ = cluster_setup
    cal = build_calibration(idx, cal_q, StatisticKind("energy", k=4))
    doc = json.loads(dumps_calibration(cal))

    unsorted = dict(doc, sorted_stats=doc["sorted_stats"][::-1])
    with pytest.raises(InvariantViolation):
        loads_calibration(json.dumps(unsorted))

    with pytest.raises(UnsupportedVersion):
        loads_calibration(json.dumps(dict(doc, version="2")))

    shifted = dict(doc, sorted_stats=[x - 1.0 for x in doc["sorted_stats"]])
    with pytest.raises(ChecksumMismatch):
        loads_calibration(json.dumps(shifted))

    with pytest.raises(InvariantViolation):
        loads_calibration(json.dumps(dict(doc, n_cal=doc["n_cal"] + 1)))
    with pytest.raises(InvariantViolation):
        loads_calibration("{not json")


def test_critical_value_from_sample_rejects_empty():
    with pytest.raises(EmptySample):
        critical_value_from_sample([], 0.05)
