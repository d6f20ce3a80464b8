"""
Evaluation Metrics
Exact match on canonical trees, execution match on the schema database and
their best-in-beam variants, aggregated per schema and micro-averaged.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import pandas as pd

from core.grammar import QueryTree, canonicalize
from data.executor import ResultTable, execute, results_equal
from data.schema import Database
from utils.error_handler import DatasetIntegrityError, ExecutionError

logger = logging.getLogger(__name__)

METRICS = ("EM", "EX", "BEM", "BEX")
MICRO = "micro"


def em(pred: QueryTree, gold: QueryTree) -> int:
    return int(canonicalize(pred) == canonicalize(gold))


def gold_result(gold: QueryTree, db: Database) -> ResultTable:
    try:
        return execute(gold, db)
    except ExecutionError as e:
        raise DatasetIntegrityError(f"gold query fails to execute: {e.message}", original_error=e)


def ex(pred: QueryTree, gold: QueryTree, db: Database, gold_rows: Optional[ResultTable] = None) -> int:
    """1 iff both queries return the same multiset of rows; a failing prediction scores 0"""
    expected = gold_rows if gold_rows is not None else gold_result(gold, db)
    try:
        got = execute(pred, db)
    except ExecutionError:
        return 0
    return int(results_equal(got, expected))


def beam_metrics(beam: Sequence[QueryTree], gold: QueryTree, db: Database) -> Tuple[int, int]:
    """(BEM, BEX): best EM / EX over the beam; (0, 0) for an empty beam"""
    if not beam:
        return 0, 0
    expected = gold_result(gold, db)
    bem = max(em(t, gold) for t in beam)
    bex = 0
    for tree in beam:
        if ex(tree, gold, db, expected):
            bex = 1
            break
    return bem, bex


@dataclass
class ExampleScore:
    example_id: str
    schema_id: str
    split: int
    method: str
    EM: int
    EX: int
    BEM: int
    BEX: int


def score_example(example_id: str, schema_id: str, split: int, method: str, beam: Sequence[QueryTree],
                  gold: QueryTree, db: Database) -> ExampleScore:
    expected = gold_result(gold, db)
    top_em = em(beam[0], gold) if beam else 0
    top_ex = ex(beam[0], gold, db, expected) if beam else 0
    bem, bex = beam_metrics(beam, gold, db)
    return ExampleScore(example_id, schema_id, split, method, top_em, top_ex, bem, bex)


def scores_frame(scores: Sequence[ExampleScore]) -> pd.DataFrame:
    columns = ["example_id", "schema_id", "split", "method", *METRICS]
    return pd.DataFrame([asdict(s) for s in scores], columns=columns)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Percent metrics per (method, split, schema) plus a micro-average row per
    (method, split) pooled over all test instances, then the mean over splits.
    """
    if frame.empty:
        return pd.DataFrame(columns=["method", "split", "schema_id", "count", *METRICS])
    per_schema = frame.groupby(["method", "split", "schema_id"], sort=True)[list(METRICS)].mean() * 100.0
    per_schema["count"] = frame.groupby(["method", "split", "schema_id"], sort=True).size()
    micro = frame.groupby(["method", "split"], sort=True)[list(METRICS)].mean() * 100.0
    micro["count"] = frame.groupby(["method", "split"], sort=True).size()
    micro["schema_id"] = MICRO
    micro = micro.reset_index().set_index(["method", "split", "schema_id"])
    by_split = pd.concat([per_schema, micro]).reset_index()
    mean = by_split.groupby(["method", "schema_id"], sort=True).agg(
        {**{m: "mean" for m in METRICS}, "count": "sum"}).reset_index()
    mean["split"] = "mean"
    out = pd.concat([by_split, mean], ignore_index=True)
    return out[["method", "split", "schema_id", "count", *METRICS]]


def delta_table(summary: pd.DataFrame, base_method: str = "base") -> pd.DataFrame:
    """Base row absolute, every other method as a delta over base (mean over splits)"""
    mean = summary[summary["split"] == "mean"].set_index(["method", "schema_id"])
    if base_method not in mean.index.get_level_values(0):
        raise DatasetIntegrityError(f"no {base_method!r} rows to compute deltas against")
    base = mean.loc[base_method][list(METRICS)]
    rows = []
    for method in mean.index.get_level_values(0).unique():
        values = mean.loc[method][list(METRICS)]
        shown = values if method == base_method else values - base.reindex(values.index)
        for schema_id, row in shown.iterrows():
            rows.append({"method": method, "schema_id": schema_id, "kind": "abs" if method == base_method else "delta",
                         **{m: round(float(row[m]), 2) for m in METRICS}})
    return pd.DataFrame(rows)


def check_monotonic(frame: pd.DataFrame) -> None:
    """BEM >= EM and BEX >= EX on every example"""
    bad = frame[(frame["BEM"] < frame["EM"]) | (frame["BEX"] < frame["EX"])]
    if not bad.empty:
        raise DatasetIntegrityError(f"beam metrics below top-1 metrics for {list(bad['example_id'][:3])}")


def to_markdown(frame: pd.DataFrame, floatfmt: str = "{:.2f}") -> str:
    """Pipe table of a DataFrame"""
    headers = [str(c) for c in frame.columns]
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    for _, row in frame.iterrows():
        cells = [floatfmt.format(v) if isinstance(v, float) else str(v) for v in row.tolist()]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def per_schema_em(frame: pd.DataFrame, method: str) -> Dict[str, float]:
    rows = frame[frame["method"] == method]
    return {str(k): float(v) * 100.0 for k, v in rows.groupby("schema_id")["EM"].mean().items()}
