import pytest

from config import Config
from forms import ConfigValidationError, validate_run_config
from tensor import ConfigurationError


def settings(**overrides):
    return dict(Config.DEFAULTS, dataset="BasicMotions", **overrides)


def test_defaults_are_valid():
    cleaned = validate_run_config(settings())
    assert cleaned["ratio"] == 1.0
    assert cleaned["pool"] is None
    assert cleaned["min_score"] is None
    assert cleaned["dataset"] == "BasicMotions"


@pytest.mark.parametrize(
    "field, value",
    [
        ("ratio", 1.5),
        ("ratio", -0.1),
        ("epochs", 0),
        ("lr", 0.0),
        ("pool", 0),
        ("embed_dim", 0),
        ("lam", -1.0),
        ("k", 2),
        ("method", "svm"),
        ("batch_size", -1),
        ("min_score", 1.5),
    ],
)
def test_invalid_values_name_the_field(field, value):
    with pytest.raises(ConfigValidationError) as info:
        validate_run_config(settings(**{field: value}))
    assert field in info.value.errors
    assert field in str(info.value)


def test_validation_error_is_a_configuration_error():
    assert issubclass(ConfigValidationError, ConfigurationError)


def test_several_errors_are_reported_together():
    with pytest.raises(ConfigValidationError) as info:
        validate_run_config(settings(ratio=2.0, k=4))
    assert set(info.value.errors) == {"ratio", "k"}
