"""
Data ingestion and simulation.

CSV schema: one row per observation, response columns y1..yC holding
proportions, every other column is a covariate.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from compositional_core import (
    CompositionMatrix, SIMPLEX_TOL_INPUT, needs_transform, sample_dirichlet_columns,
    transform_to_open_interval,
)
from exceptions import ArityError, DataIOError, SchemaError, ValidationError
from model_spec import (
    CovariateTable, FormulaSpec, build_design_matrix, parse_formula, vectorize_predictor,
)

logger = logging.getLogger(__name__)

RESPONSE_RE = re.compile(r'^y(\d+)$')


@dataclass(frozen=True)
class SimulationDesign:
    name: str
    formula: str
    # truth per category, in the term order of that category's block
    truth: Tuple[Tuple[float, ...], ...]

    @property
    def n_categories(self) -> int:
        return len(self.truth)

    def coefficients(self) -> np.ndarray:
        """Truth in design-column order (category-major)"""
        return np.array([value for block in self.truth for value in block], dtype=float)


SIMULATION_DESIGNS: Dict[str, SimulationDesign] = {
    'sim1': SimulationDesign(
        name='sim1',
        formula='y ~ 1 | 1 | 1 | 1',
        truth=((-2.4,), (1.2,), (-3.1,), (1.3,)),
    ),
    'sim2': SimulationDesign(
        name='sim2',
        formula='y ~ 1 + v1 | 1 + v2 | 1 + v3 | 1 + v4',
        truth=((-1.5, 2.0), (1.0, -3.0), (-3.0, -1.0), (1.5, 5.0)),
    ),
}


@dataclass(frozen=True)
class Dataset:
    Y: CompositionMatrix
    covariates: CovariateTable
    transformed: bool = False

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.Y.to_rows(), columns=[f"y{c + 1}" for c in range(self.Y.n_categories)]
        )
        for name, values in self.covariates.columns.items():
            frame[name] = values
        return frame


def simulate_covariates(names: Sequence[str], n_obs: int, rng: np.random.Generator,
                        law: str = 'uniform') -> CovariateTable:
    """Independent covariate columns, Uniform(0, 1) by default"""
    columns = {}
    for name in names:
        if law == 'uniform':
            columns[name] = rng.uniform(0.0, 1.0, n_obs)
        elif law == 'normal':
            columns[name] = rng.standard_normal(n_obs)
        else:
            raise ValidationError(f"Unknown covariate law '{law}' (use 'uniform' or 'normal')")
    return CovariateTable(columns, n_obs=n_obs)


def simulate_dataset(formula: FormulaSpec, coefficients: Sequence[float], n_obs: int,
                     seed: int, law: str = 'uniform') -> Dataset:
    """Draw covariates and then responses from Dirichlet(exp(A x))"""
    x = np.asarray(coefficients, dtype=float)
    if x.size != formula.n_coefficients:
        raise ArityError(
            f"Formula needs {formula.n_coefficients} coefficients, got {x.size}"
        )
    rng = np.random.default_rng(seed)
    covariates = simulate_covariates(formula.covariate_names(), n_obs, rng, law)
    A = build_design_matrix(formula, covariates)
    eta = vectorize_predictor(A, x).reshape(n_obs, formula.n_categories)
    Y = sample_dirichlet_columns(np.exp(eta).T, rng)
    return Dataset(Y=Y, covariates=covariates)


def simulate_design(name: str, n_obs: int, seed: int) -> Dataset:
    try:
        design = SIMULATION_DESIGNS[name]
    except KeyError:
        raise ValidationError(f"Unknown simulation design '{name}'; choose from {sorted(SIMULATION_DESIGNS)}") from None
    spec = parse_formula(design.formula, design.n_categories)
    return simulate_dataset(spec, design.coefficients(), n_obs, seed)


def read_table(path) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise DataIOError(f"Data file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"Data file {path} is empty") from e
    except (OSError, pd.errors.ParserError) as e:
        raise DataIOError(f"Could not read {path}: {e}") from e
    if frame.empty:
        raise SchemaError(f"Data file {path} has no rows")
    return frame


def response_columns(frame: pd.DataFrame) -> List[str]:
    """y1..yC in category order; raises unless they are contiguous from y1"""
    found = {int(m.group(1)): col for col in frame.columns if (m := RESPONSE_RE.match(str(col)))}
    if not found:
        raise SchemaError(f"No response columns y1..yC found in {list(frame.columns)}")
    C = max(found)
    missing = [f"y{c}" for c in range(1, C + 1) if c not in found]
    if missing:
        raise SchemaError(f"Response columns {missing} are missing")
    if C < 2:
        raise SchemaError("At least two response columns (y1, y2) are required")
    return [found[c] for c in range(1, C + 1)]


def prepare_response(rows: np.ndarray) -> Tuple[CompositionMatrix, bool]:
    """Validate an N x C table of proportions, compressing it if it touches the boundary"""
    if not np.all(np.isfinite(rows)):
        raise SchemaError("Response columns contain missing or non-numeric values")
    data = rows.T
    if needs_transform(data):
        logger.warning("Responses contain zeros or ones; applying the open-interval transform")
        return transform_to_open_interval(data), True
    return CompositionMatrix(data, tol=SIMPLEX_TOL_INPUT), False


def load_dataset(path, formula_text: Optional[str] = None) -> Tuple[Dataset, Optional[FormulaSpec]]:
    """Read a CSV in the y1..yC + covariates schema"""
    frame = read_table(path)
    ycols = response_columns(frame)
    try:
        rows = frame[ycols].apply(pd.to_numeric).to_numpy(dtype=float)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"Response columns are not numeric: {e}") from e
    Y, transformed = prepare_response(rows)

    spec = parse_formula(formula_text, len(ycols)) if formula_text else None
    names = spec.covariate_names() if spec else [c for c in frame.columns if c not in ycols]
    covariates = CovariateTable.from_frame(frame, names) if names else CovariateTable({}, n_obs=len(frame))
    return Dataset(Y=Y, covariates=covariates, transformed=transformed), spec


def load_covariates(path, names: Optional[Sequence[str]] = None) -> CovariateTable:
    frame = read_table(path)
    if names is not None and not names:
        return CovariateTable({}, n_obs=len(frame))
    return CovariateTable.from_frame(frame, names)


GLACIAL_CATEGORIES = ('red_sandstone', 'gray_sandstone', 'crystalline', 'miscellaneous')
GLACIAL_FORMULA = 'y ~ 1 + pcount | 1 + pcount | 1 + pcount | 1 + pcount'


def load_glacial_tills(path) -> Dataset:
    """Pebble compositions with total counts, ready for the abundance model.

    Accepts either y1..y4 or the four category names as response columns,
    as percentages or proportions, plus a `pcount` column (any case) holding
    the total pebble count, which is divided by 100.
    """
    frame = read_table(path)
    lowered = {str(c).lower(): c for c in frame.columns}
    if 'pcount' not in lowered:
        raise SchemaError("Glacial-tills data needs a 'pcount' column")

    if all(name in lowered for name in GLACIAL_CATEGORIES):
        ycols = [lowered[name] for name in GLACIAL_CATEGORIES]
    else:
        ycols = response_columns(frame)
        if len(ycols) != 4:
            raise SchemaError(f"Glacial-tills data needs 4 response columns, found {len(ycols)}")

    rows = frame[ycols].apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    if np.any(~np.isfinite(rows)) or np.any(rows < 0):
        raise SchemaError("Glacial-tills compositions must be non-negative numbers")
    totals = rows.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise SchemaError("Every glacial-tills row needs a positive total")
    rows = rows / totals

    Y, transformed = prepare_response(rows)
    pcount = pd.to_numeric(frame[lowered['pcount']], errors='coerce').to_numpy(dtype=float) / 100.0
    covariates = CovariateTable({'pcount': pcount}, n_obs=len(frame))
    logger.info(f"Loaded {len(frame)} glacial-tills samples (transform applied: {transformed})")
    return Dataset(Y=Y, covariates=covariates, transformed=transformed)
