import datetime as dt
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajtpp.data import (
    BucketSpec,
    CSVFormatError,
    DataError,
    FactRow,
    PatientSequence,
    Vocabulary,
    bin_timestamp,
    build_sequences,
    fit_buckets,
    read_events_csv,
    sequences_to_rows,
    split_patients,
    write_events_csv,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def vocab():
    return Vocabulary(
        indicative=["dx_a", "dx_b", "rx_c"],
        numeric=["bmi", "hba1c"],
        static_levels={"gender": ["F", "M"], "race": ["A", "B", "C"]},
    )


def _rows(pid, n, vocab, start=0, numeric=()):
    rows = [FactRow(pid, start, "gender=F"), FactRow(pid, start, "race=B"), FactRow(pid, start, "pseudo_age=47")]
    for i in range(n):
        rows.append(FactRow(pid, start + i // 2, vocab.indicative[i % 3]))
    rows.extend(numeric)
    return rows


def test_bin_timestamp_examples():
    assert bin_timestamp(dt.date(2007, 2, 15), "2007Q1") == 0
    assert bin_timestamp("2007-04-01", "2007Q1") == 1
    # 2009Q4 is (2009-2007)*4 + 3 quarters after 2007Q1
    assert bin_timestamp("2009-12-31", "2007Q1") == 11


def test_bin_timestamp_rejects_pre_epoch():
    with pytest.raises(DataError):
        bin_timestamp("2006-12-31", "2007Q1")


def test_vocabulary_layout(vocab):
    assert vocab.tokens[0] == "<pad>"
    assert vocab.index("gender") == 1 and vocab.index("dx_a") == 4 and vocab.index("bmi") == 7
    assert vocab.n_types == 6
    with pytest.raises(DataError):
        Vocabulary(indicative=["x", "x"])
    with pytest.raises(DataError):
        Vocabulary(indicative=["x"], numeric=["x"])


def test_vocabulary_json_roundtrip(vocab, tmp_path):
    vocab.save(tmp_path / "v.json")
    back = Vocabulary.load(tmp_path / "v.json")
    assert back.tokens == vocab.tokens and back.digest() == vocab.digest()


def test_below_minimum_excluded(vocab):
    seqs, rep = build_sequences(_rows("p1", 31, vocab), vocab)
    assert seqs == [] and rep.excluded == {"p1": "below minimum"}


def test_right_truncation(vocab):
    rows = _rows("p1", 70, vocab)
    seqs, rep = build_sequences(rows, vocab)
    s = seqs[0]
    assert s.length == 64
    expected = [vocab.index(vocab.indicative[i % 3]) for i in range(64)]
    assert s.types.tolist() == expected


def test_exactly_max_len_no_padding(vocab):
    (s,), _ = build_sequences(_rows("p1", 64, vocab), vocab)
    assert s.length == 64 and (s.types != 0).all()


def test_padding_and_static(vocab):
    (s,), _ = build_sequences(_rows("p1", 40, vocab), vocab)
    assert s.length == 40 and (s.types[40:] == 0).all()
    assert s.static.tolist() == [1, 2, 5]


def test_numeric_clipped_to_retained_span(vocab):
    numeric = [FactRow("p1", 3, "bmi", 31.0), FactRow("p1", 40, "bmi", 29.0), FactRow("p1", 31, "hba1c", 6.1)]
    (s,), _ = build_sequences(_rows("p1", 64, vocab, numeric=numeric), vocab)
    # last retained indicative interval is 31
    assert s.num_times.tolist() == [3.0, 31.0]
    assert s.num_bucket.tolist() == [-1, -1]


def test_unknown_concepts_counted(vocab):
    rows = _rows("p1", 40, vocab) + [FactRow("p1", 1, "mystery"), FactRow("p1", 2, "mystery")]
    _, rep = build_sequences(rows, vocab)
    assert rep.unknown_concepts["mystery"] == 2


def test_ties_keep_file_order(vocab):
    rows = [FactRow("p", 0, c) for c in ["rx_c", "dx_a", "dx_b"] * 11]
    (s,), _ = build_sequences(rows, vocab)
    assert s.types[:3].tolist() == [6, 4, 5]


def test_exclusion_plus_retained_equals_input(vocab):
    rows = []
    for i, n in enumerate([10, 32, 50, 31, 80]):
        rows += _rows(f"p{i}", n, vocab)
    seqs, rep = build_sequences(rows, vocab)
    assert rep.n_input == 5 and len(seqs) == 3


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 30), st.sampled_from(["dx_a", "dx_b", "rx_c", "bmi", "junk"])),
        min_size=0,
        max_size=300,
    )
)
def test_build_sequences_idempotent_and_bounded(raw):
    vocab = Vocabulary(indicative=["dx_a", "dx_b", "rx_c"], numeric=["bmi"])
    rows = [FactRow(f"p{p}", iv, c, 25.0 + iv if c == "bmi" else None) for p, iv, c in raw]
    seqs, rep = build_sequences(rows, vocab)
    assert rep.n_input == len({r.patient_id for r in rows})
    for s in seqs:
        assert 32 <= s.length <= 64
        assert (np.diff(s.times[: s.length]) >= 0).all()
    again, _ = build_sequences(sequences_to_rows(seqs, vocab), vocab)
    assert len(again) == len(seqs)
    for a, b in zip(seqs, again):
        assert a.patient_id == b.patient_id
        assert a.types.tolist() == b.types.tolist()
        assert a.times.tolist() == b.times.tolist()
        assert a.num_values.tolist() == b.num_values.tolist()


def test_fit_buckets_golden(vocab):
    rows = [FactRow("p", 0, "bmi", float(v)) for v in range(1, 101)]
    rows += [FactRow("p", 0, "hba1c", float(v)) for v in range(1, 101)]
    spec = fit_buckets(rows, vocab)
    golden = json.loads((GOLDEN / "buckets_1_to_100.json").read_text())
    assert spec.to_json()["bmi"] == golden["bmi"]
    np.testing.assert_allclose(spec.boundaries["bmi"], [20.8, 40.6, 60.4, 80.2])


def test_bucket_rules():
    spec = BucketSpec({"bmi": [20.0, 25.0, 30.0, 35.0]})
    assert spec.assign("bmi", [1, 5, 19.9]).tolist() == [0, 0, 0]
    assert spec.assign("bmi", [20.0, 25.0, 35.0, 99.0]).tolist() == [1, 2, 4, 4]


def test_bucket_populations_balanced(vocab):
    rng = np.random.default_rng(0)
    vals = rng.permutation(np.arange(1000.0))
    rows = [FactRow("p", 0, "bmi", v) for v in vals] + [FactRow("p", 0, "hba1c", v) for v in vals]
    spec = fit_buckets(rows, vocab)
    counts = np.bincount(spec.assign("bmi", vals), minlength=5)
    assert counts.sum() == 1000
    assert counts.max() - counts.min() <= 1


def test_fit_buckets_rejects_few_values(vocab):
    rows = [FactRow("p", 0, "bmi", float(v % 4)) for v in range(50)]
    rows += [FactRow("p", 0, "hba1c", float(v)) for v in range(50)]
    with pytest.raises(DataError, match="bmi"):
        fit_buckets(rows, vocab)


def test_split_examples():
    ids = [f"id{i}" for i in range(10)]
    tr, va, te = split_patients(ids, (0.8, 0.1, 0.1), seed=7)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert set(tr) | set(va) | set(te) == set(ids)
    assert split_patients(ids, (0.8, 0.1, 0.1), seed=7) == (tr, va, te)
    tr, va, te = split_patients(ids, (1, 0, 0), seed=3)
    assert len(tr) == 10 and not va and not te
    with pytest.raises(DataError):
        split_patients(["a", "a"], (1, 0, 0))


def test_events_csv_roundtrip_and_errors(vocab, tmp_path):
    rows = _rows("p1", 33, vocab, numeric=[FactRow("p1", 2, "bmi", 27.5)])
    path = tmp_path / "events.csv"
    write_events_csv(path, rows)
    assert read_events_csv(path) == rows
    bad = tmp_path / "bad.csv"
    bad.write_text("patient_id,interval,concept,value\np1,0,dx_a,\np1,x,dx_a,\n")
    with pytest.raises(CSVFormatError) as info:
        read_events_csv(bad)
    assert info.value.line == 3


def test_from_events_rejects_unsorted():
    with pytest.raises(DataError):
        PatientSequence.from_events("p", [4, 5], [2.0, 1.0])
