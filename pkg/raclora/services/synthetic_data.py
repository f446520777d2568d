"""Synthetic dataset generation and dataset snapshot IO.

A dataset directory holds ``meta.yaml`` plus plain CSV matrices written with
17 significant digits, so a snapshot reloads to the same float64 values and
regenerating with the same seed reproduces the files byte for byte.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import yaml

from ..core.objectives import (
    RegressionSpec,
    synthetic_linear_regression,
    synthetic_logistic_regression,
)
from ..errors import InvalidConfig, IoError

logger = logging.getLogger(__name__)

DATASET_KINDS = ('linreg', 'logreg')
FLOAT_FORMAT = '%.17g'


@dataclass(frozen=True)
class Dataset:
    kind: str
    fine: RegressionSpec
    w0: np.ndarray
    pre: Optional[RegressionSpec] = None
    seed: Optional[int] = None


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    try:
        np.savetxt(path, np.atleast_2d(matrix), fmt=FLOAT_FORMAT, delimiter=',')
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e


def read_matrix(path: Path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=',', dtype=np.float64))
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e
    except ValueError as e:
        raise IoError(f"Malformed matrix file {path}: {e}") from e


def _write_task(path: Path, spec: RegressionSpec) -> None:
    write_matrix(path, np.column_stack([spec.x, spec.y]))


def _read_task(path: Path, reg_lambda: float, shape: Tuple[int, int]) -> RegressionSpec:
    data = read_matrix(path)
    return RegressionSpec(x=data[:, :-1], y=data[:, -1], reg_lambda=reg_lambda, shape=shape)


def gen_synthetic(
    kind: str,
    out_dir: Path,
    seed: int,
    shape: Tuple[int, int] = (10, 10),
    reg_lambda: Optional[float] = None,
    n_pretrain: int = 3000,
    n_finetune: int = 1000,
    n_samples: int = 2000,
    noise: float = 0.01,
    shift: float = 0.5,
) -> Dict[str, Path]:
    """Generate a dataset and write it under ``out_dir``.

    Returns:
        Mapping from file role to path
    """
    if kind not in DATASET_KINDS:
        raise InvalidConfig(f"Unknown dataset kind '{kind}', expected one of {', '.join(DATASET_KINDS)}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create dataset directory {out_dir}: {e}") from e

    files = {
        'meta': out_dir / 'meta.yaml',
        'finetune': out_dir / 'finetune.csv',
        'w0': out_dir / 'w0.csv',
    }
    meta = {'kind': kind, 'seed': int(seed), 'rows': int(shape[0]), 'cols': int(shape[1])}
    if kind == 'linreg':
        reg_lambda = 1e-4 if reg_lambda is None else reg_lambda
        pre, fine, w0 = synthetic_linear_regression(
            rng, n_pretrain, n_finetune, shape, reg_lambda=reg_lambda, noise=noise, shift=shift
        )
        files['pretrain'] = out_dir / 'pretrain.csv'
        _write_task(files['pretrain'], pre)
        meta.update(n_pretrain=n_pretrain, n_finetune=n_finetune, noise=noise, shift=shift)
    else:
        reg_lambda = 0.1 if reg_lambda is None else reg_lambda
        fine = synthetic_logistic_regression(rng, n_samples, shape, reg_lambda=reg_lambda)
        w0 = np.zeros(shape)
        meta.update(n_samples=n_samples)
    meta['reg_lambda'] = float(reg_lambda)

    _write_task(files['finetune'], fine)
    write_matrix(files['w0'], w0)
    try:
        with open(files['meta'], 'w') as f:
            yaml.safe_dump(meta, f, sort_keys=True, default_flow_style=False)
    except OSError as e:
        raise IoError(f"Cannot write {files['meta']}: {e}") from e
    logger.info(f"Wrote {kind} dataset (seed {seed}) to {out_dir}")
    return files


def load_dataset(path: Path) -> Dataset:
    """Load a directory written by :func:`gen_synthetic`."""
    path = Path(path)
    try:
        with open(path / 'meta.yaml', 'r') as f:
            meta = yaml.safe_load(f)
    except OSError as e:
        raise IoError(f"Cannot read dataset metadata in {path}: {e}") from e
    if not isinstance(meta, dict) or meta.get('kind') not in DATASET_KINDS:
        raise IoError(f"{path / 'meta.yaml'} does not describe a known dataset")
    shape = (int(meta['rows']), int(meta['cols']))
    reg_lambda = float(meta['reg_lambda'])
    fine = _read_task(path / 'finetune.csv', reg_lambda, shape)
    pre = None
    if (path / 'pretrain.csv').exists():
        pre = _read_task(path / 'pretrain.csv', reg_lambda, shape)
    w0 = read_matrix(path / 'w0.csv').reshape(shape)
    return Dataset(kind=meta['kind'], fine=fine, w0=w0, pre=pre, seed=meta.get('seed'))
