import logging
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stutterdet.data import (
    FluencyLabel,
    Label,
    Manifest,
    SegmentRecord,
    SplitPlan,
    class_weights,
    fluent_pseudo_label,
    make_split,
    parse_manifest,
    write_manifest,
)
from stutterdet.exceptions import InfeasibleSplitError, ManifestError, MissingClassError

# single-label SEP-28k clip counts
PAPER_COUNTS = {Label.Repetition: 3286, Label.Prolongation: 1770, Label.Block: 2103,
                Label.Interjection: 3995, Label.Fluent: 12419}

HEADER = "id,audio_path,offset_s,duration_s,label,podcast_id\n"


def make_manifest(n_podcasts=10, per_podcast=5, seed=0):
    rng = np.random.default_rng(seed)
    recs = [
        SegmentRecord(f"r{p}_{i}", f"/a/{p}.wav", float(3 * i), 3.0,
                      Label(int(rng.integers(5))), f"pod{p}")
        for p in range(n_podcasts) for i in range(per_podcast)
    ]
    return Manifest(recs, "synthetic")


def test_paper_counts_total():
    assert sum(PAPER_COUNTS.values()) == 23573


def test_paper_class_weights():
    w = class_weights(PAPER_COUNTS)
    expected = {Label.Fluent: 0.3796, Label.Prolongation: 2.6636, Label.Block: 2.2419,
                Label.Repetition: 1.4347, Label.Interjection: 1.1801}
    for label, value in expected.items():
        assert w[label] == pytest.approx(value, abs=1e-4)
        assert w[label] == pytest.approx(23573 / (5 * PAPER_COUNTS[label]), rel=1e-12)


def test_balanced_weights_are_one():
    np.testing.assert_allclose(class_weights(np.repeat(np.arange(5), 7)), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=5, max_size=5))
def test_weighted_counts_sum_to_n(counts):
    w = class_weights(dict(enumerate(counts)))
    n = sum(counts)
    assert float(np.dot(counts, w)) == pytest.approx(n, rel=1e-9)
    np.testing.assert_allclose(np.array(counts) * w, n / 5, rtol=1e-9)


def test_missing_class_is_named():
    with pytest.raises(MissingClassError, match="Block"):
        class_weights({Label.Repetition: 3, Label.Prolongation: 1, Label.Interjection: 2,
                       Label.Fluent: 9})


def test_pseudo_labels():
    rec = SegmentRecord("x", "a.wav", 0, 3, Label.Fluent, "p")
    assert fluent_pseudo_label(rec) == FluencyLabel.Fluent
    assert fluent_pseudo_label(Label.Block) == FluencyLabel.Disfluent
    labels = [label for label, n in PAPER_COUNTS.items() for _ in range(n)]
    disfluent = sum(fluent_pseudo_label(label) == FluencyLabel.Disfluent for label in labels)
    assert disfluent == 23573 - 12419 == 11154


def test_parse_maps_and_excludes(tmp_path, caplog):
    path = tmp_path / "m.csv"
    path.write_text(HEADER + "a,x.wav,0,3,Block,p1\n"
                             "b,x.wav,3,3,NoSpeech,p1\n"
                             "c,x.wav,6,3,Music,p2\n"
                             "d,x.wav,9,3,fluent,p2\n")
    m = parse_manifest(path)
    assert [r.label for r in m] == [Label.Block, Label.Fluent]
    assert m.excluded == 2
    assert m.records[0].audio_path == str(tmp_path / "x.wav")


def test_parse_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "e.csv"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        assert len(parse_manifest(path)) == 0
    assert "empty" in caplog.text


def test_parse_errors_carry_line_numbers(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text(HEADER + "a,x.wav,0,3,Block,p1\nb,x.wav,zero,3,Block,p1\n")
    with pytest.raises(ManifestError, match="line 3"):
        parse_manifest(bad)
    dup = tmp_path / "dup.csv"
    dup.write_text(HEADER + "a,x.wav,0,3,Block,p1\na,x.wav,3,3,Fluent,p1\n")
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest(dup)
    short = tmp_path / "short.csv"
    short.write_text(HEADER + "a,x.wav,0,3,Block\n")
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest(short)
    nohead = tmp_path / "nohead.csv"
    nohead.write_text("id,label\n")
    with pytest.raises(ManifestError):
        parse_manifest(nohead)


def test_roundtrip(tmp_path):
    m = make_manifest()
    write_manifest(m, tmp_path / "m.csv")
    again = parse_manifest(tmp_path / "m.csv")
    assert again == m
    write_manifest(again, tmp_path / "m2.csv")
    assert parse_manifest(tmp_path / "m2.csv") == m


def test_ten_podcasts_ten_folds():
    plan = make_split(make_manifest(10), n_folds=10, seed=5)
    assert len(plan) == 10
    for fold in plan.folds:
        assert (len(fold.train), len(fold.valid), len(fold.test)) == (8, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 40), st.integers(3, 10), st.integers(0, 2**31))
def test_split_soundness(n_podcasts, n_folds, seed):
    m = make_manifest(n_podcasts, per_podcast=2, seed=seed % 7)
    plan = make_split(m, n_folds=n_folds, seed=seed)
    pods = set(m.podcasts)
    tested = []
    for fold in plan.folds:
        for a, b in combinations((fold.train, fold.valid, fold.test), 2):
            assert not (a & b)
        assert fold.train | fold.valid | fold.test == pods
        tested.extend(fold.test)
    assert sorted(tested) == sorted(pods)
    by_pod = {r.podcast_id for r in m}
    assert by_pod == pods


def test_records_of_a_podcast_stay_together():
    m = make_manifest(12, per_podcast=4)
    plan = make_split(m, 10, seed=1)
    for fold in plan.folds:
        sets = [m.subset(s) for s in (fold.train, fold.valid, fold.test)]
        assert sum(len(s) for s in sets) == len(m)
        ids = [set(r.id for r in s) for s in sets]
        for a, b in combinations(ids, 2):
            assert not (a & b)


def test_split_is_seeded():
    m = make_manifest(15)
    assert make_split(m, 10, seed=3).folds == make_split(m, 10, seed=3).folds
    assert make_split(m, 10, seed=3).folds != make_split(m, 10, seed=4).folds


def test_infeasible_split():
    with pytest.raises(InfeasibleSplitError):
        make_split(make_manifest(5), n_folds=10)
    with pytest.raises(InfeasibleSplitError):
        make_split(make_manifest(10), n_folds=2)


def test_plan_serialization(tmp_path):
    plan = make_split(make_manifest(10), 10, seed=0)
    plan.save(tmp_path / "plan.json")
    assert SplitPlan.load(tmp_path / "plan.json").folds == plan.folds
