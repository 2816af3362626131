"""Machine-readable report files and their manifest.

Scaling reports are written as CSV (one row per estimate, an optional summary
row holding the fitted slope) and/or as JSON. Every write updates
`manifest.json` in the same directory: the files, their columns and the
fingerprint of the configuration that produced them.
"""
from __future__ import annotations

import csv
import io
import json
import pathlib
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import orjson
import pydantic

import spdelab.logging
from spdelab.errors import InvalidArgumentError, ReportError
from spdelab.experiments import ScalingReport, ScalingRow, SlopeFit
from spdelab.kernels import KernelReport
from spdelab.rate_fn import RateResult
from spdelab.types import ReportFormat
from spdelab.utilities import format_number, get_hash, parse_number

__all__ = (
    "MANIFEST_NAME",
    "SCALING_COLUMNS",
    "emit_report",
    "fingerprint",
    "read_manifest",
    "read_report_csv",
)

MANIFEST_NAME = "manifest.json"

SCALING_COLUMNS = (
    "row",
    "epsilon",
    "lambda",
    "parameter",
    "estimate",
    "std_error",
    "n_effective",
    "diverged",
    "slope",
    "intercept",
    "r_squared",
    "slope_stderr",
)
KERNEL_COLUMNS = ("id", "name", "severity", "success", "value", "message")
RATE_COLUMNS = ("iteration", "residual")
EXTRA_PREFIX = "extra."

Report = Union[ScalingReport, KernelReport, RateResult]


def fingerprint(config: Optional[pydantic.BaseModel]) -> Optional[str]:
    """blake2b of the canonical (key-sorted) JSON of a configuration."""
    if config is None:
        return None
    return get_hash(json.loads(config.json()))


def _report_name(report: Report) -> str:
    if isinstance(report, ScalingReport):
        return report.experiment.value
    if isinstance(report, KernelReport):
        return "kernel_report"
    return "rate_eval"


def _extra_keys(report: ScalingReport) -> List[str]:
    return sorted({key for row in report.rows for key in row.extra})


def _scaling_table(report: ScalingReport) -> Dict[str, Any]:
    extras = _extra_keys(report)
    columns = list(SCALING_COLUMNS) + [EXTRA_PREFIX + key for key in extras]
    rows = []
    for row in report.rows:
        cells = {
            "row": "data",
            "epsilon": format_number(row.epsilon),
            "lambda": format_number(row.lambda_),
            "parameter": format_number(row.parameter),
            "estimate": format_number(row.estimate),
            "std_error": format_number(row.std_error),
            "n_effective": format_number(row.n_effective),
            "diverged": format_number(row.diverged),
        }
        for key in extras:
            cells[EXTRA_PREFIX + key] = format_number(row.extra.get(key))
        rows.append(cells)
    if report.fit is not None:
        rows.append(
            {
                "row": "summary",
                "slope": format_number(report.fit.slope),
                "intercept": format_number(report.fit.intercept),
                "r_squared": format_number(report.fit.r_squared),
                "slope_stderr": format_number(report.fit.stderr),
            }
        )
    return {"columns": columns, "rows": rows}


def _kernel_table(report: KernelReport) -> Dict[str, Any]:
    rows = [
        {
            "id": check.id,
            "name": check.name,
            "severity": check.severity.value,
            "success": format_number(check.success),
            "value": format_number(check.value),
            "message": check.message or "",
        }
        for check in report.checks
    ]
    return {"columns": list(KERNEL_COLUMNS), "rows": rows}


def _rate_table(report: RateResult) -> Dict[str, Any]:
    rows = [
        {"iteration": format_number(i), "residual": format_number(residual)}
        for i, residual in enumerate(report.residual_history)
    ]
    return {"columns": list(RATE_COLUMNS), "rows": rows}


def _table(report: Report) -> Dict[str, Any]:
    if isinstance(report, ScalingReport):
        return _scaling_table(report)
    if isinstance(report, KernelReport):
        return _kernel_table(report)
    return _rate_table(report)


def _csv_text(columns: Sequence[str], rows: Iterable[Dict[str, str]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), restval="", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def _json_text(report: Report) -> str:
    if isinstance(report, RateResult):
        # the optimal control is nt x nx; the target and the history are what a reader plots
        return report.json(exclude={"control_star"}, by_alias=True, indent=2)
    return report.json(by_alias=True, indent=2)


def read_manifest(directory: Union[str, pathlib.Path]) -> Dict[str, Any]:
    path = pathlib.Path(directory) / MANIFEST_NAME
    if not path.exists():
        return {"reports": {}}
    try:
        return orjson.loads(path.read_bytes())
    except (OSError, orjson.JSONDecodeError) as error:
        raise ReportError(f"unable to read manifest {path}: {error}") from error


def _manifest_entry(report: Report, files: List[Dict[str, Any]], config_fingerprint: Optional[str]) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"kind": type(report).__name__, "files": files, "config_fingerprint": config_fingerprint}
    if isinstance(report, ScalingReport):
        entry.update(
            experiment=report.experiment.value,
            label=report.label,
            flags=report.flags,
            summary={key: format_number(value) for key, value in report.summary.items()},
        )
    return entry


@spdelab.logging.log_execution
def emit_report(
    report: Report,
    directory: Union[str, pathlib.Path],
    formats: Sequence[ReportFormat] = (ReportFormat.csv, ReportFormat.json),
    *,
    config: Optional[pydantic.BaseModel] = None,
    name: Optional[str] = None,
) -> List[pathlib.Path]:
    """Write `report` into `directory` in each requested format and update the manifest.

    Returns the written paths, the manifest last.

    Raises:
        ReportError: Raised when the directory or a file cannot be written.
    """
    formats = list(dict.fromkeys(ReportFormat(f) for f in formats))
    if not formats:
        raise InvalidArgumentError("at least one report format is required")
    directory = pathlib.Path(directory)
    name = name or _report_name(report)
    table = _table(report)

    written: List[pathlib.Path] = []
    files: List[Dict[str, Any]] = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for format_ in formats:
            path = directory / f"{name}.{format_.value}"
            if format_ == ReportFormat.csv:
                path.write_text(_csv_text(table["columns"], table["rows"]))
                files.append({"path": path.name, "format": format_.value, "columns": table["columns"]})
            else:
                path.write_text(_json_text(report))
                files.append({"path": path.name, "format": format_.value})
            written.append(path)
            spdelab.logging.logger.info(f"wrote {path}")

        manifest = read_manifest(directory)
        manifest.setdefault("reports", {})[name] = _manifest_entry(report, files, fingerprint(config))
        manifest_path = directory / MANIFEST_NAME
        manifest_path.write_bytes(orjson.dumps(manifest, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
        written.append(manifest_path)
    except OSError as error:
        raise ReportError(f"unable to write report '{name}' into {directory}: {error}") from error

    return written


def read_report_csv(path: Union[str, pathlib.Path]) -> ScalingReport:
    """Parse a scaling CSV (and its manifest entry) back into a `ScalingReport`.

    Floats are written with `repr`, so every number round-trips exactly.
    """
    path = pathlib.Path(path)
    try:
        text = path.read_text()
    except OSError as error:
        raise ReportError(f"unable to read report {path}: {error}") from error

    manifest = read_manifest(path.parent)
    entry = manifest.get("reports", {}).get(path.stem)
    if entry is None or entry.get("kind") != ScalingReport.__name__:
        raise ReportError(f"{path} is not listed as a scaling report in {path.parent / MANIFEST_NAME}")

    rows: List[ScalingRow] = []
    fit: Optional[SlopeFit] = None
    for record in csv.DictReader(io.StringIO(text)):
        if record["row"] == "summary":
            fit = SlopeFit(
                slope=parse_number(record["slope"]),
                intercept=parse_number(record["intercept"]),
                r_squared=parse_number(record["r_squared"]),
                stderr=parse_number(record["slope_stderr"]),
            )
            continue
        extra = {
            key[len(EXTRA_PREFIX):]: parse_number(value)
            for key, value in record.items()
            if key.startswith(EXTRA_PREFIX) and value != ""
        }
        rows.append(
            ScalingRow(
                epsilon=parse_number(record["epsilon"]),
                lambda_=parse_number(record["lambda"]),
                parameter=parse_number(record["parameter"]),
                estimate=parse_number(record["estimate"]),
                std_error=parse_number(record["std_error"]),
                n_effective=int(record["n_effective"]),
                diverged=int(record["diverged"]),
                extra=extra,
            )
        )

    return ScalingReport(
        experiment=entry["experiment"],
        label=entry["label"],
        rows=rows,
        fit=fit,
        flags=entry.get("flags", {}),
        summary={key: float(value) for key, value in entry.get("summary", {}).items()},
    )
