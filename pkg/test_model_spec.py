#!/usr/bin/env python3
"""
Tests for formula parsing, covariate lookup and the stacked design matrix
"""

import numpy as np
import pandas as pd
import pytest

from exceptions import (
    ArityError, CovariateLookupError, DomainError, ParseError, ShapeError, ValidationError,
)
from model_spec import (
    INTERCEPT, CovariateTable, FormulaSpec, LatentField, build_design_matrix, parse_formula,
    prior_precision_diagonal, vectorize_predictor,
)


def test_parse_formula_blocks():
    spec = parse_formula('y ~ 1 + v1 | 1 + v2', 2)
    assert spec.per_category_terms == ((INTERCEPT, 'v1'), (INTERCEPT, 'v2'))
    assert spec.n_coefficients == 4
    assert spec.covariate_names() == ['v1', 'v2']
    assert spec.column_offsets() == [0, 2]
    assert spec.render() == 'y ~ 1 + v1 | 1 + v2'


def test_parse_formula_shared_covariate_listed_once():
    spec = parse_formula('y ~ 1 + x | x | 1', 3)
    assert spec.covariate_names() == ['x']
    assert spec.column_labels() == [(0, INTERCEPT), (0, 'x'), (1, 'x'), (2, INTERCEPT)]


def test_parse_formula_arity_mismatch():
    with pytest.raises(ArityError):
        parse_formula('y ~ 1 | 1', 3)


def test_parse_formula_syntax_error_reports_position():
    with pytest.raises(ParseError) as info:
        parse_formula('y ~ 1 + $v', 1)
    assert info.value.position == 8


def test_parse_formula_rejects_dangling_operator():
    with pytest.raises(ParseError):
        parse_formula('y ~ 1 +', 1)


def test_parse_formula_rejects_constant_other_than_one():
    with pytest.raises(ParseError):
        parse_formula('y ~ 2 | 1', 2)


def test_parse_formula_rejects_duplicate_term():
    with pytest.raises(ValidationError, match="Duplicate"):
        parse_formula('y ~ 1 + v1 + v1 | 1', 2)


def test_formula_spec_rejects_empty_block():
    with pytest.raises(ValidationError):
        FormulaSpec(((INTERCEPT,), ()))


def test_covariate_lookup_error_names_missing_covariate():
    table = CovariateTable({'v1': [0.1, 0.2]}, n_obs=2)
    with pytest.raises(CovariateLookupError, match="v9"):
        table['v9']
    np.testing.assert_allclose(table['v1'], [0.1, 0.2])


def test_covariate_table_shape_and_values():
    with pytest.raises(ShapeError):
        CovariateTable({'v1': [0.1, 0.2, 0.3]}, n_obs=2)
    with pytest.raises(ValidationError):
        CovariateTable({'v1': [0.1, np.nan]}, n_obs=2)


def test_covariate_table_from_frame():
    frame = pd.DataFrame({'v1': [1, 2], 'v2': [3.5, 4.5]})
    table = CovariateTable.from_frame(frame, ['v2'])
    assert table.names() == ['v2']
    with pytest.raises(CovariateLookupError):
        CovariateTable.from_frame(frame, ['v3'])


def test_build_design_matrix_layout():
    spec = parse_formula('y ~ 1 + v1 | 1 + v2', 2)
    data = CovariateTable({'v1': [0.5, -1.0, 2.0], 'v2': [1.5, 0.0, 3.0]}, n_obs=3)
    A = build_design_matrix(spec, data)
    assert A.shape == (6, 4)
    # explicit zeros from covariate values are kept
    assert A.entries.nnz == 3 * 4
    np.testing.assert_allclose(A.observation_block(0), [[1, 0.5, 0, 0], [0, 0, 1, 1.5]])
    np.testing.assert_allclose(A.observation_block(1), [[1, -1.0, 0, 0], [0, 0, 1, 0.0]])
    assert A.dense_blocks().shape == (3, 2, 4)


def test_build_design_matrix_unknown_covariate():
    spec = parse_formula('y ~ 1 + v1 | 1', 2)
    with pytest.raises(CovariateLookupError):
        build_design_matrix(spec, CovariateTable({'v2': [1.0]}, n_obs=1))


def test_vectorize_predictor():
    spec = parse_formula('y ~ 1 + v1 | 1 + v2', 2)
    data = CovariateTable({'v1': [0.5, -1.0], 'v2': [1.5, 2.0]}, n_obs=2)
    A = build_design_matrix(spec, data)
    eta = vectorize_predictor(A, np.array([1.0, 2.0, -1.0, 0.5]))
    np.testing.assert_allclose(eta, [2.0, -0.25, -1.0, 0.0])
    with pytest.raises(ShapeError):
        vectorize_predictor(A, np.zeros(3))


def test_latent_field_and_prior_precision():
    field = LatentField(np.zeros(3), prior_precision=2.0)
    np.testing.assert_allclose(field.precision_diagonal, [2.0, 2.0, 2.0])
    np.testing.assert_allclose(prior_precision_diagonal([1.0, 2.0], 2), [1.0, 2.0])
    with pytest.raises(ShapeError):
        prior_precision_diagonal([1.0, 2.0], 3)
    with pytest.raises(DomainError):
        LatentField(np.zeros(2), prior_precision=0.0)
