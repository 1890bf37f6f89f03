"""
Fixed-schema CSV writing shared by traces, metrics and grid outputs.

Floats are written with 17 significant digits so every value read back
parses to the identical float64.
"""

import csv
import io
from pathlib import Path
from typing import Iterable, List, Sequence, Union


def fmt(value) -> str:
    """Format one cell: floats with 17 significant digits, bools as 0/1."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".17g")
    if hasattr(value, "dtype"):
        if value.dtype.kind == "b":
            return "1" if bool(value) else "0"
        if value.dtype.kind == "f":
            return format(float(value), ".17g")
        return str(value.item())
    if value is None:
        return ""
    return str(value)


def rows_to_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buffer.getvalue()


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_text(header, rows), encoding="utf-8")
    return path


def read_csv(source: Union[str, Path]) -> List[dict]:
    """Read a CSV file (or CSV text when given a str containing newlines)."""
    if isinstance(source, str) and "\n" in source:
        text = source
    else:
        text = Path(source).read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))
