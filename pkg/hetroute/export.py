"""
Artifact output: CSV tables and JSON reports

Artifacts are staged in memory and written together by flush(), so a failing
command leaves no partial output behind.
"""

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from hetroute.utils import format_float

logger = logging.getLogger(__name__)


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def jsonable(obj: Any) -> Any:
    """Convert numpy values and non-finite floats to JSON-safe Python objects"""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(obj, complex):
        return {"re": jsonable(obj.real), "im": jsonable(obj.imag)}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Comma-separated, LF line endings, floats with 17 significant digits"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def render_json(obj: Any) -> str:
    """Sorted keys, indent 2; Python float repr is shortest round-trip exact"""
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class ArtifactWriter:
    """
    Staged writer for one command's output files
    """

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self._staged: Dict[str, str] = {}

    def add_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
        self._staged[name] = render_csv(header, rows)

    def add_json(self, name: str, obj: Any) -> None:
        self._staged[name] = render_json(obj)

    def add_text(self, name: str, text: str) -> None:
        self._staged[name] = text

    @property
    def staged(self) -> List[str]:
        return sorted(self._staged)

    def flush(self) -> List[Path]:
        """
        Write every staged artifact

        Returns:
            Paths written, in name order
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self._staged):
            path = self.output_dir / name
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(self._staged[name])
            written.append(path)
        logger.info(f"Wrote {len(written)} artifact(s) to {self.output_dir}")
        self._staged.clear()
        return written
