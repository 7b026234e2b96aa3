import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from onenet.errors import DataError, ParseError
from onenet.metrics import (COLUMNS, MetricsRecord, MetricsWriter, error_counts, read_csv,
                            read_jsonl, topk_errors)


def brute_topk(scores, labels, k):
    """Sort each row by (-score, class index) and look for the label in the first k."""
    wrong = 0
    for s, y in zip(scores, labels):
        order = sorted(range(len(s)), key=lambda c: (-s[c], c))
        wrong += y not in order[:k]
    return 100.0 * wrong / len(labels)


class TestTopk:
    def test_ties_break_to_lower_index(self):
        scores = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        errs = topk_errors(scores, np.array([0, 1]), ks=(1, 2))
        assert errs == {1: 50.0, 2: 0.0}

    def test_top5_with_few_classes_is_zero(self):
        scores = np.random.default_rng(0).standard_normal((10, 3))
        assert topk_errors(scores, np.zeros(10, dtype=int))[5] == 0.0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int8, st.tuples(st.integers(1, 12), st.integers(2, 8)), elements=st.integers(-2, 2)),
           st.data())
    def test_matches_brute_force(self, scores, data):
        n, c = scores.shape
        labels = np.array(data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n)))
        scores = scores.astype(np.float64)
        errs = topk_errors(scores, labels, ks=(1, 2, 5))
        for k in (1, 2, 5):
            assert errs[k] == pytest.approx(brute_topk(scores, labels, k))

    def test_counts(self):
        scores = np.eye(4)[[0, 1, 2, 0]]
        assert error_counts(scores, np.array([0, 1, 2, 3]), ks=(1,)) == {1: 1}


def records():
    return [MetricsRecord(0, "train", "branch0", 0.1, 12.5, 30.0, 1 / 3, 0.25, 0.1 + 0.2, wall_time=9.0),
            MetricsRecord(0, "test", "teacher", 0.1, 10.0, 1.0, 0.7)]


class TestWriter:
    def test_csv_and_jsonl_mirror(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.write(records())
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(COLUMNS)
        assert "0.3333333333333333" in lines[1] and "0.30000000000000004" in lines[1]
        assert "wall" not in lines[0]
        csv_rows = read_csv(tmp_path / "m.csv")
        assert csv_rows == read_jsonl(tmp_path / "m.jsonl")
        assert csv_rows == [r.row() for r in records()]

    def test_truncate_after(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.write(records() + [MetricsRecord(1, "train", "branch0", 0.1, 1.0, 0.0, 0.1)])
        w.truncate_after(1)
        assert [r["epoch"] for r in read_csv(tmp_path / "m.csv")] == [0, 0]
        assert len(read_jsonl(tmp_path / "m.jsonl")) == 2

    def test_rerun_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            MetricsWriter(tmp_path / f"{name}.csv").write(records())
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_jsonl_lines_are_objects(self, tmp_path):
        MetricsWriter(tmp_path / "m.csv").write(records())
        for line in (tmp_path / "m.jsonl").read_text().splitlines():
            assert list(json.loads(line)) == list(COLUMNS)


class TestReadErrors:
    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_csv(tmp_path / "none.csv")

    def test_wrong_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ParseError):
            read_csv(tmp_path / "m.csv")

    def test_short_row(self, tmp_path):
        (tmp_path / "m.csv").write_text(",".join(COLUMNS) + "\n0,train,net,0.1\n")
        with pytest.raises(ParseError, match=":2:"):
            read_csv(tmp_path / "m.csv")
