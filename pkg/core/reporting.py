"""
Report Writers
Each experiment command writes `<out>/reports/<name>.md` and `<name>.json`;
`report` gathers them into a summary with an Excel workbook.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from core.metrics import to_markdown
from utils.file_utils import atomic_write, read_json, write_json

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary"


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return [{k: (None if isinstance(v, float) and v != v else v) for k, v in row.items()}
            for row in frame.to_dict(orient="records")]


def write_report(reports_dir: Path, name: str, title: str, tables: Dict[str, pd.DataFrame],
                 extra: Optional[Dict[str, Any]] = None, notes: Optional[List[str]] = None) -> Dict[str, Path]:
    """
    Write one report as markdown and JSON.

    Args:
        reports_dir: Usually `<out>/reports`
        name: File stem
        title: Markdown heading
        tables: Section title -> table
        extra: Scalar facts (hashes, counters) stored in JSON and listed in markdown
        notes: Free lines appended to the markdown

    Returns:
        {"md": path, "json": path}
    """
    reports_dir = Path(reports_dir)
    lines = [f"# {title}", ""]
    for section, frame in tables.items():
        lines += [f"## {section}", "", to_markdown(frame) if not frame.empty else "_no rows_", ""]
    if extra:
        lines += ["## Facts", ""]
        lines += [f"- {key}: {value}" for key, value in extra.items()]
        lines.append("")
    for note in notes or []:
        lines.append(note)
    md_path = reports_dir / f"{name}.md"
    json_path = reports_dir / f"{name}.json"
    atomic_write("\n".join(lines).encode("utf-8"), md_path)
    write_json({"title": title, "tables": {k: _records(v) for k, v in tables.items()}, "facts": extra or {}},
               json_path)
    logger.info(f"Report written: {md_path}")
    return {"md": md_path, "json": json_path}


def load_report_tables(json_path: Path) -> Dict[str, pd.DataFrame]:
    document = read_json(json_path)
    return {section: pd.DataFrame(rows) for section, rows in document.get("tables", {}).items()}


def _sheet_name(report: str, section: str, used: set) -> str:
    # Excel caps sheet names at 31 characters
    base = f"{report}-{section}"[:31]
    name, n = base, 1
    while name in used:
        suffix = f"~{n}"
        name = base[:31 - len(suffix)] + suffix
        n += 1
    used.add(name)
    return name


def write_workbook(path: Path, sheets: Dict[str, pd.DataFrame]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        if not sheets:
            pd.DataFrame().to_excel(writer, sheet_name="empty", index=False)
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name, index=False)
    logger.info(f"Workbook saved: {path}")
    return path


def summarize_reports(reports_dir: Path, manifest: Dict[str, Any]) -> Dict[str, Path]:
    """Index every report of the run, link the manifest, export all tables to summary.xlsx"""
    reports_dir = Path(reports_dir)
    sheets: Dict[str, pd.DataFrame] = {}
    used: set = set()
    index_rows = []
    for json_path in sorted(reports_dir.glob("*.json")):
        if json_path.stem == SUMMARY_NAME:
            continue
        try:
            tables = load_report_tables(json_path)
        except Exception as e:
            logger.warning(f"Skipping unreadable report {json_path.name}: {e}")
            continue
        index_rows.append({"report": json_path.stem, "markdown": f"{json_path.stem}.md",
                           "tables": len(tables)})
        for section, frame in tables.items():
            sheets[_sheet_name(json_path.stem, section, used)] = frame

    phases = pd.DataFrame([
        {"phase": name, "seconds": entry.get("seconds"), "gradient_updates": entry.get("gradient_updates")}
        for name, entry in sorted(manifest.get("phases", {}).items())
    ])
    parameters = pd.DataFrame([
        {"artifact": name, "hash": entry.get("hash"), "path": entry.get("path")}
        for name, entry in sorted(manifest.get("parameters", {}).items())
    ])
    facts = {
        "config_hash": manifest.get("config_hash"),
        "corpus_hash": manifest.get("corpus_hash"),
        "artifact_version": manifest.get("artifact_version"),
        "manifest": "../manifest.json",
    }
    paths = write_report(reports_dir, SUMMARY_NAME, "Run summary",
                         {"Reports": pd.DataFrame(index_rows), "Phases": phases, "Parameters": parameters},
                         extra=facts)
    sheets["phases"] = phases
    sheets["parameters"] = parameters
    paths["xlsx"] = write_workbook(reports_dir / f"{SUMMARY_NAME}.xlsx", sheets)
    return paths
