import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdml.data import Dataset, ImageSample, SynthSpec, generate_synthetic
from cdml.evaluation import (
    CmcCurve,
    EvaluationError,
    cmc,
    distance_matrix,
    evaluate,
    make_single_shot_split,
    match_ranks,
    rank1,
    write_cmc_csv,
)
from cdml.extractor import ExtractorConfig, extract
from cdml.metric import distance
from cdml.model import Model


def oracle_cmc(matrix, probe_ids, gallery_ids):
    """Sort each row and scan for the true match; ties put it last."""
    k = len(gallery_ids)
    hits = np.zeros(k)
    for row, pid in zip(matrix, probe_ids):
        true_j = list(gallery_ids).index(pid)
        # stable sort with the true match after every equal distance
        order = sorted(range(k), key=lambda j: (row[j], j == true_j))
        rank = order.index(true_j) + 1
        hits[rank - 1:] += 1
    return hits / len(probe_ids)


def test_hand_matrix():
    m = np.array([[0.1, 0.9], [0.2, 0.1]])
    assert list(match_ranks(m, ["A", "B"], ["A", "B"])) == [1, 1]
    assert list(cmc(m, ["A", "B"], ["A", "B"]).rates) == [1.0, 1.0]


def test_perfect_model_and_constant_matrix():
    assert cmc(np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1], [0, 1]).rank1 == 1.0
    c = cmc(np.full((4, 4), 0.3), [0, 1, 2, 3], [0, 1, 2, 3])
    assert c.rank1 == 0.0
    assert c.rates[-1] == 1.0


def test_rank1_indexing():
    c = CmcCurve([0.4, 0.7, 1.0])
    assert rank1(c) == 0.4 and c[3] == 1.0
    with pytest.raises(IndexError):
        c[0]
    with pytest.raises(EvaluationError):
        rank1(CmcCurve([]))


def test_missing_true_match():
    with pytest.raises(EvaluationError):
        cmc(np.zeros((1, 2)), [5], [0, 1])
    with pytest.raises(EvaluationError):
        cmc(np.zeros((1, 2)), [0], [0])


def test_cmc_matches_oracle_on_1000_matrices():
    r = np.random.default_rng(0)
    for _ in range(1000):
        k = int(r.integers(1, 9))
        n = int(r.integers(1, 12))
        gallery = r.permutation(100)[:k]
        probes = r.choice(gallery, size=n)
        m = r.integers(0, 4, size=(n, k)).astype(float) if r.random() < 0.4 else r.random((n, k))
        curve = cmc(m, probes, gallery).rates
        np.testing.assert_allclose(curve, oracle_cmc(m, probes, gallery), rtol=0, atol=1e-12)
        assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0


def test_random_scores_rank1_near_chance():
    r = np.random.default_rng(1)
    n, trials = 10, 2000
    hits = sum(cmc(r.random((1, n)), [0], list(range(n))).rank1 for _ in range(trials))
    sigma = np.sqrt(trials * 0.1 * 0.9)
    assert abs(hits - trials * 0.1) <= 3 * sigma


def two_cam(ids=3, per=2):
    return generate_synthetic(SynthSpec(identities=ids, per_camera=per, seed=5))


def test_split_counts_and_determinism():
    ds = two_cam()
    s1 = make_single_shot_split(ds, np.random.default_rng(3))
    s2 = make_single_shot_split(ds, np.random.default_rng(3))
    assert len(s1.gallery) == 3 and len(s1.probes) == 6
    assert sorted(s1.gallery_ids.tolist()) == ds.identities()
    assert all(g.camera == 1 for g in s1.gallery) and all(p.camera == 0 for p in s1.probes)
    assert [g.index for g in s1.gallery] == [g.index for g in s2.gallery]


def test_split_lists_offenders():
    ds = two_cam()
    keep = [s for s in ds.samples if not (s.identity == 2 and s.camera == 1)]
    with pytest.raises(EvaluationError, match=r"\[2\]"):
        make_single_shot_split(Dataset(keep), np.random.default_rng(0))


def test_distance_matrix_definition():
    ds = two_cam()
    model = Model.initial(ExtractorConfig.compact(), seed=1)
    split = make_single_shot_split(ds, np.random.default_rng(0))
    m = distance_matrix(split, model)
    assert m.shape == (6, 3) and np.all(m >= 0)
    for i, p in enumerate(split.probes):
        for j, g in enumerate(split.gallery):
            want = distance(extract(p.pixels, model.extractor), extract(g.pixels, model.extractor), model.metric)
            assert m[i, j] == pytest.approx(want, abs=1e-12)


def test_probe_equal_to_gallery_gives_zero_and_role_swap_symmetry():
    ds = two_cam(ids=2, per=1)
    # copy each camera-1 image into camera 0 so probe == gallery image
    mirrored = [ImageSample(s.pixels, s.identity, 0, s.index) for s in ds.samples if s.camera == 1]
    mirrored += [s for s in ds.samples if s.camera == 1]
    model = Model.initial(ExtractorConfig.compact(), seed=2)
    res = evaluate(Dataset(mirrored), model)
    assert np.allclose(np.diag(res.matrix), 0.0)
    assert res.rank1 == 1.0
    np.testing.assert_allclose(res.matrix, res.matrix.T, atol=1e-12)


def test_untrained_model_curve_valid(tmp_path):
    res = evaluate(two_cam(ids=6), Model.initial(ExtractorConfig.compact(), seed=0))
    rates = res.curve.rates
    assert np.all(np.diff(rates) >= 0) and rates[-1] == 1.0
    path = tmp_path / "cmc.csv"
    write_cmc_csv(res.curve, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["rank", "identification_rate"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    assert [float(r[1]) for r in rows[1:]] == rates.tolist()


@settings(max_examples=200, deadline=None)
@given(k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_property_cmc_monotone_terminal_one(k, n, seed):
    r = np.random.default_rng(seed)
    gallery = np.arange(k)
    probes = r.integers(0, k, size=n)
    rates = cmc(r.random((n, k)), probes, gallery).rates
    assert len(rates) == k
    assert np.all(np.diff(rates) >= 0) and rates[-1] == 1.0
    assert np.all((rates >= 0) & (rates <= 1))
