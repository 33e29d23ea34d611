"""Result tables: stats, formatting, ordering, round trips."""
import pytest

from promptst.reporting import (CellStats, aggregate, emit, table_from_json)


def _records():
    return [
        {"row": "mask", "col": "N=16|mu=4", "metric": "accuracy",
         "values": [0.8, 1.0]},
        {"row": "dropout", "col": "N=16|mu=4", "metric": "accuracy",
         "values": [0.9, 0.9]},
        {"row": "mask", "col": "N=16|mu=0", "metric": "accuracy",
         "values": [0.7, 0.8]},
    ]


def test_cell_stats_population_std():
    s = CellStats.from_values([0.8, 1.0])
    assert s.mean == 0.9
    assert abs(s.std - 0.1) < 1e-15  # population std, not sample
    assert s.n == 2


def test_aggregate_row_and_col_order():
    t = aggregate(_records())
    assert t.rows == ["dropout", "mask"]  # canonical augmentation order
    assert t.cols == ["N=16|mu=0", "N=16|mu=4"]  # numeric-aware sort


def test_aggregate_order_invariant():
    a = aggregate(_records())
    b = aggregate(list(reversed(_records())))
    assert a.rows == b.rows and a.cols == b.cols
    assert emit(a, "csv") == emit(b, "csv")


def test_aggregate_rejects_mixed_metrics():
    recs = _records()
    recs[1]["metric"] = "f1"
    with pytest.raises(ValueError, match="mix"):
        aggregate(recs)


def test_aggregate_rejects_duplicates():
    recs = _records() + [_records()[0]]
    with pytest.raises(ValueError, match="duplicate"):
        aggregate(recs)


def test_single_value_warns_and_zero_std():
    t = aggregate([{"row": "mask", "col": "N=16|mu=4",
                    "metric": "accuracy", "values": [0.91]}])
    s = t.cells[("mask", "N=16|mu=4")]
    assert s.std == 0.0 and s.n == 1
    assert any("single value" in w for w in t.warnings)


def test_markdown_percent_format():
    t = aggregate([{"row": "mask", "col": "N=16|mu=4",
                    "metric": "accuracy", "values": [0.903, 0.917]}])
    md = emit(t, "markdown")
    assert "91.0 (0.7)" in md
    assert md.startswith("| accuracy | N=16|mu=4 |")


def test_markdown_missing_cell_dash():
    recs = _records()[:2]
    recs[1]["col"] = "N=16|mu=0"
    md = emit(aggregate(recs), "markdown")
    assert " - " in md


def test_csv_schema(tmp_path):
    t = aggregate(_records())
    path = tmp_path / "r.csv"
    text = emit(t, "csv", path=str(path))
    assert path.read_text() == text
    lines = text.splitlines()
    assert lines[0] == "row_key,col_key,mean,std,n"
    assert len(lines) == 4  # header + 3 cells
    assert lines[1].startswith("dropout,N=16|mu=4,")


def test_json_round_trip(tmp_path):
    t = aggregate(_records())
    obj = emit(t, "json", path=str(tmp_path / "t.json"))
    back = table_from_json(obj)
    assert back.rows == t.rows and back.cols == t.cols
    assert back.cells[("mask", "N=16|mu=4")].values == [0.8, 1.0]
    assert emit(back, "csv") == emit(t, "csv")


def test_unknown_format():
    with pytest.raises(ValueError, match="format"):
        emit(aggregate(_records()), "xml")


def test_empty_values_rejected():
    with pytest.raises(ValueError, match="values"):
        aggregate([{"row": "mask", "col": "c", "metric": "a", "values": []}])
