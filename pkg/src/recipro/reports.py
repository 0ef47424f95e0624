"""Deterministic serialization of reports, ledgers and plot-ready tables."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import FlowLedger
from .reciprocity import ReciprocityReport, SnrReport, histogram

SIGNIFICANT_DIGITS = 12


def clean_number(x):
    """Round to fixed precision so reruns serialize byte-identically.

    Infinities become the strings "inf"/"-inf" and NaN becomes null, since
    JSON has no literal for either.
    """
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(f"{x:.{SIGNIFICANT_DIGITS}g}")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return clean_number(obj)
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def snr_dict(report: SnrReport | None):
    if report is None:
        return None
    return {
        "outflow": report.percentiles("outflow"),
        "inflow": report.percentiles("inflow"),
        "excluded_outflow": report.excluded_outflow,
        "excluded_inflow": report.excluded_inflow,
    }


def report_dict(report: ReciprocityReport) -> dict:
    """The reciprocity summary in the shape of ``schemas/report.schema.json``."""
    return {
        "method": report.method,
        "n_individuals": int(len(report.scores)),
        "n_excluded": report.n_excluded,
        "p_alpha": [[p, a] for p, a in report.p_alpha_curve],
        "correlation": report.correlation,
        "negative_fractions": {"inflow": report.negative_inflow_fraction,
                               "outflow": report.negative_outflow_fraction},
        "snr_percentiles": snr_dict(report.snr),
    }


def load_schema(name: str = "report.schema.json") -> dict:
    return json.loads(resources.files("recipro").joinpath("schemas", name).read_text())


# ---------------------------------------------------------------------------
# CSV tables


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        v = clean_number(x)
        return "nan" if v is None else str(v)
    return str(x)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_histogram(path, values, edges, what: str) -> Path:
    """Histogram table whose header comment declares the fixed bin edges."""
    edge_text = ",".join(_fmt(float(e)) for e in edges)
    rows = histogram(values, edges)
    return write_rows(path, ["bin_low", "bin_high", "count"], rows,
                      comments=[f"{what}", f"bin_edges: {edge_text}"])


def read_histogram(path) -> tuple[np.ndarray, np.ndarray]:
    """(edges, counts) from a file written by ``write_histogram``."""
    edges = None
    counts = []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("# bin_edges:"):
                edges = np.array([float(v) for v in line.split(":", 1)[1].split(",")])
            elif line.startswith("#") or line.startswith("bin_low"):
                continue
            elif line.strip():
                counts.append(int(line.rstrip().split(",")[2]))
    if edges is None:
        raise ValueError(f"{path}: missing bin_edges header")
    return edges, np.array(counts)


def write_ledger(path, ledger: FlowLedger) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ledger.to_csv(path)
    return path
