import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.optimizers import iterations_to_gap
from ..errors import InvalidConfig
from .traces import TraceFile

logger = logging.getLogger(__name__)

# margins are reported only for chains with a GD inner solver
THEOREM_METHODS = ('rac_lora', 'fpft')


@dataclass(frozen=True)
class SummaryRow:
    label: str
    method: str
    runs: int
    diverged: int
    final_gap_mean: Optional[float]
    final_gap_std: Optional[float]
    final_grad_norm_sq_mean: Optional[float]
    final_grad_norm_sq_std: Optional[float]
    reached_threshold: int
    iters_to_threshold_mean: Optional[float]
    grad_bound_margin: Optional[float]
    rate_margin: Optional[float]


def _mean_std(values: List[float]):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _grad_bound_margin(trace: TraceFile) -> Optional[float]:
    """2 (f(W^0) - f^*) / (lambda gamma T) minus min_t ||grad f(W^t)||^2."""
    h = trace.header
    if trace.method not in THEOREM_METHODS or h.get('inner', 'gd') != 'gd' or trace.diverged:
        return None
    if None in (h.get('lambda_min'), h.get('gamma'), h.get('f_star')):
        return None
    steps = len(trace.records) - 1
    if steps < 1:
        return None
    bound = 2.0 * (trace.records[0].f_value - h['f_star']) / (h['lambda_min'] * h['gamma'] * steps)
    return bound - min(r.grad_norm_sq for r in trace.records[:steps])


def _rate_margin(trace: TraceFile) -> Optional[float]:
    """(1 - gamma mu lambda)^T gap(0) minus gap(T)."""
    h = trace.header
    if trace.method not in THEOREM_METHODS or h.get('inner', 'gd') != 'gd' or trace.diverged:
        return None
    if None in (h.get('lambda_min'), h.get('gamma'), h.get('mu')):
        return None
    first, last = trace.records[0], trace.records[-1]
    if first.gap is None or last.gap is None:
        return None
    rate = 1.0 - h['gamma'] * h['mu'] * h['lambda_min']
    return rate ** last.t * first.gap - last.gap


def summarize(traces: Sequence[TraceFile], gap_threshold: float = 1e-6) -> List[SummaryRow]:
    """One row per trace label, averaged over seeds."""
    if not traces:
        raise InvalidConfig("Nothing to summarize")
    objectives = {t.header.get('objective') for t in traces}
    if len(objectives) > 1:
        raise InvalidConfig(f"Traces mix objectives: {sorted(map(str, objectives))}")

    groups: Dict[str, List[TraceFile]] = {}
    for trace in traces:
        groups.setdefault(trace.label, []).append(trace)

    rows = []
    for label, group in groups.items():
        alive = [t for t in group if not t.diverged]
        gaps = [t.final_gap() for t in alive if t.final_gap() is not None]
        grads = [t.final_grad_norm_sq() for t in alive]
        iters = [iterations_to_gap(t.records, gap_threshold) for t in group]
        reached = [i for i in iters if i is not None]
        bound = [m for m in (_grad_bound_margin(t) for t in group) if m is not None]
        rate = [m for m in (_rate_margin(t) for t in group) if m is not None]
        gap_mean, gap_std = _mean_std(gaps)
        grad_mean, grad_std = _mean_std(grads)
        rows.append(
            SummaryRow(
                label=label,
                method=str(group[0].method),
                runs=len(group),
                diverged=len(group) - len(alive),
                final_gap_mean=gap_mean,
                final_gap_std=gap_std,
                final_grad_norm_sq_mean=grad_mean,
                final_grad_norm_sq_std=grad_std,
                reached_threshold=len(reached),
                iters_to_threshold_mean=float(np.mean(reached)) if reached else None,
                grad_bound_margin=float(np.mean(bound)) if bound else None,
                rate_margin=float(np.mean(rate)) if rate else None,
            )
        )
    logger.debug(f"Summarized {len(traces)} traces into {len(rows)} rows")
    return rows


def _cell(value) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return 'inf' if math.isinf(value) else f"{value:.4g}"
    return str(value)


def format_table(rows: Sequence[SummaryRow]) -> str:
    """Fixed-width text table for the terminal."""
    names = list(SummaryRow.__dataclass_fields__)
    cells = [names] + [[_cell(v) for v in asdict(row).values()] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(names))]
    lines = ['  '.join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return '\n'.join(lines)


def to_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(SummaryRow.__dataclass_fields__), lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ('' if v is None else v) for k, v in asdict(row).items()})
    return buf.getvalue()
