"""Trace files: a '#'-prefixed ``key: value`` header block, then CSV rows.

Columns are exactly ``step,f,grad_norm_sq,gap,seed,method``. Floats are
written with ``repr`` (shortest round-trip form), so write -> read -> write
reproduces the file byte for byte.
"""
import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from ..core.optimizers import TraceRecord
from ..errors import IoError

COLUMNS = ('step', 'f', 'grad_norm_sq', 'gap', 'seed', 'method')


def _format_value(value: Any) -> str:
    if value is None:
        return 'null'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse_value(text: str) -> Any:
    if text == 'null':
        return None
    if text in ('true', 'false'):
        return text == 'true'
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _format_float(value: Optional[float]) -> str:
    return '' if value is None else repr(float(value))


def _parse_float(text: str) -> Optional[float]:
    return None if text == '' else float(text)


@dataclass
class TraceFile:
    header: Dict[str, Any] = field(default_factory=dict)
    records: List[TraceRecord] = field(default_factory=list)

    @property
    def method(self) -> Optional[str]:
        return self.header.get('method')

    @property
    def label(self) -> str:
        return str(self.header.get('label') or self.header.get('method') or 'unknown')

    @property
    def diverged(self) -> bool:
        return bool(self.header.get('diverged', False))

    def check_order(self) -> None:
        steps = [r.t for r in self.records]
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise IoError("Trace rows must be ordered by step")

    def dumps(self) -> str:
        self.check_order()
        buf = io.StringIO()
        for key, value in self.header.items():
            if '\n' in str(key) or '\n' in _format_value(value):
                raise IoError(f"Header entry '{key}' spans several lines")
            buf.write(f"# {key}: {_format_value(value)}\n")
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(COLUMNS)
        for r in self.records:
            values = (r.f_value, r.grad_norm_sq, r.gap)
            writer.writerow([r.t, *map(_format_float, values), r.seed, r.method])
        return buf.getvalue()

    def write(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', newline='') as f:
                f.write(self.dumps())
        except OSError as e:
            raise IoError(f"Cannot write trace {path}: {e}") from e
        return path

    @classmethod
    def loads(cls, text: str) -> 'TraceFile':
        header: Dict[str, Any] = {}
        lines = text.splitlines()
        i = 0
        while i < len(lines) and lines[i].startswith('#'):
            key, sep, value = lines[i][1:].strip().partition(': ')
            if not sep:
                key, value = key.rstrip(':'), ''
            header[key] = _parse_value(value)
            i += 1
        rows = list(csv.reader(lines[i:]))
        if not rows or tuple(rows[0]) != COLUMNS:
            raise IoError(f"Trace columns must be {','.join(COLUMNS)}")
        records = []
        try:
            for row in rows[1:]:
                step, f_value, grad_sq, gap, seed, method = row
                records.append(
                    TraceRecord(
                        t=int(step),
                        f_value=float(f_value),
                        grad_norm_sq=float(grad_sq),
                        gap=_parse_float(gap),
                        seed=int(seed),
                        method=method,
                    )
                )
        except ValueError as e:
            raise IoError(f"Malformed trace row: {e}") from e
        if header.get('diverged') and records:
            records[-1] = replace(records[-1], diverged=True)
        trace = cls(header=header, records=records)
        trace.check_order()
        return trace

    @classmethod
    def read(cls, path: Path) -> 'TraceFile':
        try:
            with open(path, 'r', newline='') as f:
                return cls.loads(f.read())
        except OSError as e:
            raise IoError(f"Cannot read trace {path}: {e}") from e

    def final_gap(self) -> Optional[float]:
        for r in reversed(self.records):
            if not r.diverged:
                return r.gap
        return None

    def final_grad_norm_sq(self) -> float:
        for r in reversed(self.records):
            if not r.diverged:
                return r.grad_norm_sq
        return math.inf
