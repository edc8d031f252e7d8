"""
Synthetic generators and CSV ingestion.

Every generator draws from ``config.make_rng(seed)`` so a seed always yields the same matrix.
"""

import csv
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from stein_select.config import make_rng
from stein_select.errors import IngestionError
from stein_select.schemas import DataMatrix, Decision, PpcaScenario, ToyScenario

logger = logging.getLogger(__name__)

TOY_COVARIANCES = {
    ToyScenario.DS: np.diag([1.0, 0.5]),
    ToyScenario.NESTED_DS: np.eye(2),
    ToyScenario.MS: np.eye(2),
    ToyScenario.NESTED_MS: np.eye(2),
}

PPCA_SIM_H = np.array([
    [1.0, 0.0],
    [-1.0, 1.0],
    [0.0, 1.0],
    [-1.0, -1.0],
])
PPCA_SIM_NOISE = 1.0
SPIKE_VARIANCE = 0.05
FOOLER_CORRELATION = 0.99


def generate_toy(scenario: ToyScenario, n: int, seed: int) -> DataMatrix:
    """n i.i.d. draws from N(0, Sigma0); Sigma0 = diag(1, 1/2) for ds and I otherwise."""
    cov = TOY_COVARIANCES[ToyScenario(scenario)]
    rng = make_rng(seed)
    x = rng.standard_normal((n, 2)) * np.sqrt(np.diag(cov))
    return DataMatrix(values=x)


def generate_ppca_sim(scenario: PpcaScenario, n: int, seed: int) -> Tuple[DataMatrix, List[Decision]]:
    """
    Dims 1-4 from pPCA(k=2, H, v=1); dims 5-6 from a two-component mixture chosen by
    W ~ Bernoulli(1/2):

        A: N(0, 0.05^W I)
        B: N(0, [[1, (-1)^W 0.99], [(-1)^W 0.99, 1]])
    """
    scenario = PpcaScenario(scenario)
    rng = make_rng(seed)
    z = rng.standard_normal((n, PPCA_SIM_H.shape[1]))
    clean = z @ PPCA_SIM_H.T + np.sqrt(PPCA_SIM_NOISE) * rng.standard_normal((n, PPCA_SIM_H.shape[0]))

    w = rng.integers(0, 2, size=n)
    e = rng.standard_normal((n, 2))
    if scenario == PpcaScenario.A:
        corrupt = e * np.sqrt(SPIKE_VARIANCE ** w)[:, None]
    else:
        rho = FOOLER_CORRELATION * (-1.0) ** w
        corrupt = np.column_stack([e[:, 0], rho * e[:, 0] + np.sqrt(1.0 - rho ** 2) * e[:, 1]])

    truth = [Decision.INCLUDE] * PPCA_SIM_H.shape[0] + [Decision.EXCLUDE] * 2
    names = [f"x{i + 1}" for i in range(len(truth))]
    return DataMatrix(values=np.hstack([clean, corrupt]), column_names=names), truth


def _parse_row(row: List[str], line: int) -> List[float]:
    values = []
    for col, cell in enumerate(row):
        try:
            value = float(cell)
        except ValueError:
            raise IngestionError(f"Non-numeric cell {cell!r} at row {line}, column {col + 1}")
        if not np.isfinite(value):
            raise IngestionError(f"Non-finite cell {cell!r} at row {line}, column {col + 1}")
        values.append(value)
    return values


def _is_header(row: List[str]) -> bool:
    for cell in row:
        try:
            float(cell)
        except ValueError:
            return True
    return False


def standardize_columns(x: np.ndarray, names: Optional[List[str]] = None) -> np.ndarray:
    """Mean 0, variance 1 per column with the population divisor N."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = np.flatnonzero(std == 0)
    if constant.size:
        labels = [names[i] if names else str(i + 1) for i in constant]
        raise IngestionError(f"Cannot standardize constant column(s): {', '.join(labels)}")
    return (x - mean) / std


def ingest_csv(path, standardize: bool = True) -> DataMatrix:
    """
    Read a rectangular numeric CSV. A first row with any non-numeric cell is taken as
    the header; rows and columns in error messages are 1-based file positions.
    """
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = [row for row in csv.reader(f) if row and any(cell.strip() for cell in row)]
    except OSError as e:
        raise IngestionError(f"Cannot read {path}: {e}")
    if not rows:
        raise IngestionError(f"{path} is empty")

    names = None
    start = 1
    if _is_header(rows[0]):
        names = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
        start = 2
    if not rows:
        raise IngestionError(f"{path} has a header but no data rows")

    width = len(names) if names else len(rows[0])
    parsed = []
    for offset, row in enumerate(rows):
        line = start + offset
        if len(row) != width:
            raise IngestionError(f"Ragged row {line} in {path}: {len(row)} cells, expected {width}")
        parsed.append(_parse_row([cell.strip() for cell in row], line))
    x = np.asarray(parsed, dtype=float)
    if x.shape[0] < 2:
        raise IngestionError(f"{path} has {x.shape[0]} data row(s); at least 2 are required")

    if standardize:
        x = standardize_columns(x, names)
    logger.info(f"Loaded {x.shape[0]} x {x.shape[1]} matrix from {path} (standardized: {standardize})")
    return DataMatrix(values=x, column_names=names)
