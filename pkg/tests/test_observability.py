import math

import numpy as np
import pytest

from planecal.exceptions import InvalidArgumentError, SingularIndexError
from planecal.models import ParameterVector
from planecal.observability import (
    identifiable_columns,
    observability_index,
    observability_report,
    singular_values,
    stack_jacobians,
)


def test_stack_shape(nominal):
    q = np.random.default_rng(0).uniform(-1, 1, (7, 6))
    J = stack_jacobians(nominal, q)
    assert J.matrix.shape == (21, 24)
    assert J.n_configurations == 7


def test_singular_values_of_diagonal():
    np.testing.assert_allclose(singular_values(np.diag([3.0, 1.0, 2.0])), [3.0, 2.0, 1.0])


def test_singular_values_reject_non_finite():
    with pytest.raises(InvalidArgumentError):
        singular_values(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_inverse_mean_index_values():
    assert observability_index([1.0, 1.0]) == pytest.approx(1.0)
    assert observability_index([1.0, 2.0], V=2) == pytest.approx(0.625 ** -0.5)
    assert observability_index([1.0, 0.0]) == 0.0


def test_as_printed_index():
    value = observability_index([1.0, 2.0], V=2, variant="as-printed", n_configurations=2)
    assert value == pytest.approx(math.sqrt(1.25 / 2))
    with pytest.raises(SingularIndexError):
        observability_index([1.0, 0.0], variant="as-printed")


def test_index_argument_errors():
    with pytest.raises(InvalidArgumentError):
        observability_index([])
    with pytest.raises(InvalidArgumentError):
        observability_index([1.0, -1.0])
    with pytest.raises(InvalidArgumentError):
        observability_index([1.0], V=0)
    with pytest.raises(InvalidArgumentError):
        observability_index([1.0], variant="nope")


def test_identifiable_columns_drop_dead_and_duplicate_parameters(nominal):
    cols = set(identifiable_columns(nominal).tolist())
    assert ParameterVector.index("alpha", 6) not in cols
    assert ParameterVector.index("theta", 6) not in cols
    # parallel axes 2 and 3: their d offsets act identically
    assert not {ParameterVector.index("d", 2), ParameterVector.index("d", 3)} <= cols
    assert ParameterVector.index("a", 2) in cols


def test_index_grows_with_more_configurations(nominal):
    """Adding rows can only raise the singular values (interlacing)."""
    cols = identifiable_columns(nominal)
    q = np.random.default_rng(4).uniform(-np.pi, np.pi, (60, 6))
    values = [observability_report(stack_jacobians(nominal, q[:n]), columns=cols).index_value
              for n in (10, 20, 40, 60)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] > 0.0


def test_report_carries_configuration_count(nominal):
    q = np.random.default_rng(5).uniform(-1, 1, (12, 6))
    cols = identifiable_columns(nominal)
    report = observability_report(stack_jacobians(nominal, q), variant="as-printed", columns=cols)
    assert report.n_configurations == 12
    assert report.variant == "as-printed"
    assert len(report.singular_values) == len(cols)
