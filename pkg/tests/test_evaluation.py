import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itigen.core import AttributeSet, AttributeSpec
from itigen.encoders import ToyEncoder
from itigen.errors import IngestionError, PreconditionError, SchemaError, ValidationError
from itigen.evaluation import (EmpiricalDistribution, GaussianStats, classify, classify_many,
                               empirical_distribution, fid, fit_gaussian, ingest_manual_labels,
                               kl_report, kl_to_uniform, label_embeddings, preference_tally,
                               read_preferences)
from itigen.synthetic import make_world


def binary(*names):
    return AttributeSet(AttributeSpec(n, ("c0", "c1")) for n in names)


# KL

def test_kl_reference_values():
    assert kl_to_uniform([26, 26, 26, 26]) == 0.0
    assert kl_to_uniform([104, 0]) == pytest.approx(0.693147, abs=1e-6)
    assert kl_to_uniform([75, 25]) == pytest.approx(0.130812, abs=1e-6)
    assert kl_to_uniform([75, 25]) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)


def test_kl_needs_observations():
    with pytest.raises(PreconditionError):
        kl_to_uniform([0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=16).filter(lambda c: sum(c) > 0),
       st.randoms(use_true_random=False))
def test_kl_bounds_and_permutation_invariance(counts, rnd):
    d = kl_to_uniform(counts)
    assert 0.0 <= d <= math.log(len(counts)) + 1e-12
    shuffled = list(counts)
    rnd.shuffle(shuffled)
    assert kl_to_uniform(shuffled) == pytest.approx(d, abs=1e-12)
    if len(set(counts)) == 1:
        assert d == 0.0


def test_empirical_distribution_examples(rng):
    attrs = binary("x")
    assert empirical_distribution([(0,)] * 104, attrs).counts.tolist() == [104, 0]
    two = binary("x", "y")
    labels = [c for _ in range(2) for c in [(0, 0), (0, 1), (1, 0), (1, 1)]]
    assert empirical_distribution(labels, two).counts.tolist() == [2, 2, 2, 2]
    random = [tuple(rng.integers(0, 2, 2)) for _ in range(1000)]
    dist = empirical_distribution(random, two)
    assert dist.total == 1000
    with pytest.raises(SchemaError):
        empirical_distribution([(2, 0)], two)


def test_kl_report_marginals():
    attrs = binary("x", "y")
    report = kl_report(EmpiricalDistribution([10, 0, 10, 0]), attrs)
    assert report["marginals"]["x"] == 0.0
    assert report["marginals"]["y"] == pytest.approx(math.log(2))
    assert report["joint"] == pytest.approx(math.log(2))


# Gaussian fit and FID

def test_fit_gaussian_examples():
    s = fit_gaussian([[0.0, 0.0], [2.0, 0.0]])
    assert np.array_equal(s.mean, [1.0, 0.0])
    assert np.array_equal(s.covariance, [[2.0, 0.0], [0.0, 0.0]])
    v = np.array([0.1, 0.2, 0.3])
    same = fit_gaussian([v, v, v])
    assert np.array_equal(same.mean, v) and not same.covariance.any()
    with pytest.raises(PreconditionError):
        fit_gaussian([v])


def test_fid_closed_forms():
    a = GaussianStats([0.0], [[1.0]], 10)
    b = GaussianStats([1.0], [[1.0]], 10)
    assert fid(a, b) == pytest.approx(1.0, abs=1e-9)
    assert fid(a, a) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValidationError):
        fid(a, GaussianStats([0.0, 0.0], np.eye(2), 10))
    with pytest.raises(ValidationError):
        GaussianStats([0, 0], [[1, 0.5], [0, 1]], 3)


def random_spd(rng, n=4):
    a = rng.standard_normal((n, n))
    return a @ a.T + 0.1 * np.eye(n)


def oracle_fid(mu1, s1, mu2, s2):
    mpmath.mp.dps = 40
    A, B = mpmath.matrix(s1.tolist()), mpmath.matrix(s2.tolist())
    ev, Q = mpmath.eigsy(A)
    root_a = Q * mpmath.diag([mpmath.sqrt(x) for x in ev]) * Q.T
    inner = root_a * B * root_a
    inner = (inner + inner.T) / 2
    ev2, _ = mpmath.eigsy(inner)
    tr_sqrt = sum(mpmath.sqrt(max(x, 0)) for x in ev2)
    diff = mpmath.matrix((mu1 - mu2).tolist())
    tr = sum(A[i, i] + B[i, i] for i in range(A.rows))
    return float((diff.T * diff)[0] + tr - 2 * tr_sqrt)


def test_fid_matches_high_precision_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        mu1, mu2 = rng.standard_normal(4), rng.standard_normal(4)
        s1, s2 = random_spd(rng), random_spd(rng)
        got = fid(GaussianStats(mu1, s1, 50), GaussianStats(mu2, s2, 50))
        want = oracle_fid(mu1, s1, mu2, s2)
        worst = max(worst, abs(got - want) / abs(want))
    assert worst < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10.0))
def test_fid_symmetry_nonnegativity_and_scaling(seed, s):
    rng = np.random.default_rng(seed)
    a = GaussianStats(rng.standard_normal(4), random_spd(rng), 20)
    b = GaussianStats(rng.standard_normal(4), random_spd(rng), 20)
    ab, ba = fid(a, b), fid(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, abs=1e-6, rel=1e-9)
    sa = GaussianStats(s * a.mean, s * s * a.covariance, 20)
    sb = GaussianStats(s * b.mean, s * s * b.covariance, 20)
    assert fid(sa, sb) == pytest.approx(s * s * ab, abs=1e-6, rel=1e-9)


def test_fid_warns_on_unequal_counts():
    a = GaussianStats([0.0], [[1.0]], 10)
    with pytest.warns(UserWarning, match="unequal"):
        fid(a, GaussianStats([0.0], [[1.0]], 20))


def test_stats_round_trip(tmp_path, rng):
    s = fit_gaussian(rng.standard_normal((30, 3)))
    s.save(tmp_path / "ref.npz")
    back = GaussianStats.load(tmp_path / "ref.npz")
    assert np.array_equal(back.mean, s.mean) and back.sample_count == 30


# classification

def test_classify_argmax_and_ties():
    enc = ToyEncoder(d_tok=16, d_emb=8)
    attrs = AttributeSet([AttributeSpec("x", ("a", "b", "c"))])
    L = label_embeddings(attrs, enc)
    assert classify(L[0][1], attrs, enc, embeddings=L) == (1,)
    tie = AttributeSet([AttributeSpec("x", ("a", "b"), label_prompts={"a": "same", "b": "same"})])
    results = {classify(np.ones(8), tie, enc) for _ in range(5)}
    assert results == {(0,)}


def test_classify_planted_images():
    world = make_world((2, 2), seed=4)
    rng = np.random.default_rng(4)
    combos = [tuple(rng.integers(0, 2, 2)) for _ in range(20)]
    latents = [world.latent(c, rng) for c in combos]
    assert classify_many(latents, world.attr_set, world.encoder) == combos


def test_missing_label_prompt_is_schema_error():
    attrs = AttributeSet([AttributeSpec("x", ("a", "b"), label_prompts={"a": ()})])
    with pytest.raises(SchemaError):
        label_embeddings(attrs, ToyEncoder())


# human study and manual labels

def test_preference_tally():
    rows = [("ITI-GEN", "HPSn", "ITI-GEN")] * 373 + [("ITI-GEN", "HPSn", "HPSn")] * 341
    rates = preference_tally(rows)
    assert round(100 * rates[("ITI-GEN", "HPSn")], 2) == 52.24
    assert rates[("ITI-GEN", "HPSn")] + rates[("HPSn", "ITI-GEN")] == pytest.approx(1.0)
    assert preference_tally([("A", "B", "A")] * 5)[("A", "B")] == 1.0
    assert preference_tally([]) == {}
    with pytest.raises(ValidationError):
        preference_tally([("A", "B", "C")])


def test_read_preferences(tmp_path):
    p = tmp_path / "prefs.csv"
    p.write_text("image_a_method,image_b_method,winner\nSD,HPS,SD\nSD,HPS,\nHPS,SD,HPS\n")
    rates = read_preferences(p)
    assert rates[("SD", "HPS")] == pytest.approx(1 / 3)
    assert rates[("HPS", "SD")] == pytest.approx(1 / 3)


def test_manual_labels(tmp_path):
    attrs = AttributeSet([AttributeSpec("gender", ("female", "male")),
                          AttributeSpec("bald", ("no", "yes"))])
    p = tmp_path / "labels.csv"
    p.write_text("path,gender,bald\n")
    assert ingest_manual_labels(p, attrs) == []
    rows = ["path,bald,gender"] + [f"img{i}.png,{'yes' if i % 3 else 'no'},{'male' if i % 2 else 'female'}"
                                   for i in range(104)]
    p.write_text("\n".join(rows) + "\n")
    records = ingest_manual_labels(p, attrs)
    assert len(records) == 104 and all(r.source == "manual" for r in records)
    assert records[1].combination == (1, 1)
    p.write_text("path,gender,bald\na.png,male,no\nb.png,unknown,no\nc.png,male\nd.png,female,maybe\n")
    with pytest.raises(IngestionError) as info:
        ingest_manual_labels(p, attrs)
    message = str(info.value)
    assert "line 3" in message and "line 4" in message and "line 5" in message
    assert "line 2" not in message
