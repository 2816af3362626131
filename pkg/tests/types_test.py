import json

import numpy as np
import pydantic
import pytest

from spdelab.types import BaseModel, ExperimentName, FrozenModel, ReportFormat


class Sample(FrozenModel):
    label: str
    values: np.ndarray


class Mutable(BaseModel):
    count: pydantic.PositiveInt = 1


def test_frozen_models_reject_assignment() -> None:
    sample = Sample(label="a", values=np.zeros(2))
    with pytest.raises(TypeError):
        sample.label = "b"


def test_mutable_models_validate_assignment() -> None:
    model = Mutable()
    model.count = 3
    assert model.count == 3
    with pytest.raises(pydantic.ValidationError):
        model.count = 0


def test_numpy_values_serialize() -> None:
    sample = Sample(label="a", values=np.array([0.5, 1.5]))
    assert json.loads(sample.json()) == {"label": "a", "values": [0.5, 1.5]}


def test_indented_json() -> None:
    sample = Sample(label="a", values=np.array([1.0]))
    assert "\n  " in sample.json(indent=2)


def test_enums_are_strings() -> None:
    assert ExperimentName("clt") == "clt"
    assert ReportFormat.csv.value == "csv"
    assert {name.value for name in ExperimentName} >= {"clt", "mdp", "girsanov"}
