import pandas as pd
import pytest

from core.grammar import column_leaf, node, table_leaf, value_leaf
from core.metrics import (
    ExampleScore, beam_metrics, check_monotonic, delta_table, em, ex, per_schema_em,
    score_example, scores_frame, summarize, to_markdown,
)
from utils.error_handler import DatasetIntegrityError


def _older_than(value):
    return node("project", column_leaf("people.name"),
                node("select", node(">", column_leaf("people.age"), value_leaf(value)), table_leaf("people")))


@pytest.fixture
def failing_query():
    return node("project", node("sum", column_leaf("people.name")), table_leaf("people"))


def test_em_ignores_keep_wrappers(old_people_query):
    wrapped = node("keep", node("keep", old_people_query))
    assert em(wrapped, old_people_query) == 1
    assert em(_older_than(50), old_people_query) == 0


def test_ex_compares_result_rows(old_people_query, people_db, failing_query):
    assert ex(_older_than(50), old_people_query, people_db) == 1
    assert ex(_older_than(20), old_people_query, people_db) == 0
    assert ex(failing_query, old_people_query, people_db) == 0


def test_failing_gold_is_a_dataset_error(old_people_query, people_db, failing_query):
    with pytest.raises(DatasetIntegrityError):
        ex(old_people_query, failing_query, people_db)


def test_beam_metrics_take_the_best_candidate(old_people_query, people_db, failing_query):
    assert beam_metrics([], old_people_query, people_db) == (0, 0)
    assert beam_metrics([failing_query, _older_than(50)], old_people_query, people_db) == (0, 1)
    assert beam_metrics([_older_than(20), old_people_query], old_people_query, people_db) == (1, 1)


def test_score_example_top_one_and_beam(old_people_query, people_db):
    score = score_example("zoo-001", "zoo", 0, "base", [_older_than(20), old_people_query],
                          old_people_query, people_db)
    assert (score.EM, score.EX, score.BEM, score.BEX) == (0, 0, 1, 1)
    empty = score_example("zoo-002", "zoo", 0, "base", [], old_people_query, people_db)
    assert (empty.EM, empty.EX, empty.BEM, empty.BEX) == (0, 0, 0, 0)


def _frame():
    base = [("a", "s1", 0, 1), ("b", "s1", 0, 0), ("c", "s2", 0, 1),
            ("a", "s1", 1, 1), ("b", "s1", 1, 1), ("c", "s2", 1, 0)]
    scores = [ExampleScore(i, s, split, "base", v, v, 1, 1) for i, s, split, v in base]
    scores += [ExampleScore(i, s, split, "cbr", 1, 1, 1, 1) for i, s, split, _ in base]
    return scores_frame(scores)


def test_summarize_per_schema_micro_and_mean():
    summary = summarize(_frame())
    row = summary[(summary["method"] == "base") & (summary["split"] == 0) & (summary["schema_id"] == "s1")]
    assert row["EM"].iloc[0] == pytest.approx(50.0)
    micro = summary[(summary["method"] == "base") & (summary["split"] == 0) & (summary["schema_id"] == "micro")]
    assert micro["EM"].iloc[0] == pytest.approx(200.0 / 3)
    assert micro["count"].iloc[0] == 3
    mean = summary[(summary["method"] == "base") & (summary["split"] == "mean")].set_index("schema_id")
    assert mean.loc["s1", "EM"] == pytest.approx(75.0)
    assert mean.loc["s2", "EM"] == pytest.approx(50.0)
    assert mean.loc["micro", "count"] == 6


def test_summarize_empty_frame():
    summary = summarize(scores_frame([]))
    assert summary.empty
    assert list(summary.columns) == ["method", "split", "schema_id", "count", "EM", "EX", "BEM", "BEX"]


def test_delta_table_reports_gains_over_base():
    deltas = delta_table(summarize(_frame())).set_index(["method", "schema_id"])
    assert deltas.loc[("base", "s1"), "kind"] == "abs"
    assert deltas.loc[("cbr", "s1"), "EM"] == pytest.approx(25.0)
    assert deltas.loc[("cbr", "s2"), "EM"] == pytest.approx(50.0)
    assert deltas.loc[("cbr", "micro"), "EM"] == pytest.approx(33.33)
    with pytest.raises(DatasetIntegrityError):
        delta_table(summarize(_frame()), base_method="gtm")


def test_per_schema_em():
    frame = _frame()
    assert per_schema_em(frame, "base") == {"s1": 75.0, "s2": 50.0}
    assert per_schema_em(frame, "cbr") == {"s1": 100.0, "s2": 100.0}
    assert per_schema_em(frame, "missing") == {}


def test_check_monotonic():
    check_monotonic(_frame())
    bad = scores_frame([ExampleScore("x", "s1", 0, "base", 1, 1, 0, 1)])
    with pytest.raises(DatasetIntegrityError):
        check_monotonic(bad)


def test_to_markdown_formats_floats():
    table = to_markdown(pd.DataFrame({"method": ["base"], "EM": [12.3456]}))
    lines = table.splitlines()
    assert lines[0] == "| method | EM |"
    assert lines[1] == "|---|---|"
    assert lines[2] == "| base | 12.35 |"
