import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latsys.core_types import (
    CONFIGURAL_PARTS,
    CONSTITUENT_PARTS,
    DecisionTrace,
    InputDomainError,
    PartKind,
    PartPrediction,
    Perception,
    PhaseSignal,
    as_probability_vector,
    check_label,
    label_from_species_id,
    species_name,
)


def test_part_vocabulary():
    assert len(PartKind) == 13
    assert len(CONSTITUENT_PARTS) == 11
    assert CONFIGURAL_PARTS == (PartKind.FACE,)
    names = {p.value for p in CONSTITUENT_PARTS}
    assert names == {"back", "beak", "belly", "breast", "crown", "eye", "forehead",
                     "nape", "tail", "throat", "wing"}
    assert PartKind.WHOLE_IMAGE not in CONSTITUENT_PARTS


def test_species_ids_are_one_based():
    assert label_from_species_id("class-183") == 182
    assert label_from_species_id(1) == 0
    assert species_name(182) == "class-183"
    with pytest.raises(InputDomainError):
        label_from_species_id("class-0")


def test_check_label():
    assert check_label(3, 4) == 3
    for bad in (4, -1, True, 1.5):
        with pytest.raises(InputDomainError):
            check_label(bad, 4)


def test_unrecognized_prediction_has_zero_probability():
    p = PartPrediction.unrecognized(PartKind.BEAK)
    assert not p.recognized and p.probability == 0.0
    with pytest.raises(InputDomainError):
        PartPrediction(PartKind.BEAK, 1, 0.3, recognized=False)


def test_prediction_from_probabilities():
    p = PartPrediction.from_probabilities(PartKind.TAIL, np.array([0.1, 0.9]))
    assert (p.label, p.probability, p.recognized) == (1, 0.9, True)
    assert not PartPrediction.from_probabilities(PartKind.TAIL, None).recognized


@pytest.mark.parametrize("bad", [1.5, -0.1, float("nan")])
def test_prediction_rejects_bad_probability(bad):
    with pytest.raises(InputDomainError):
        PartPrediction(PartKind.WING, 0, bad)


def test_probability_vector_validation():
    v = as_probability_vector([0.2, 0.8], softmax=True)
    assert not v.flags.writeable
    with pytest.raises(InputDomainError):
        as_probability_vector([0.2, 0.9], softmax=True)
    with pytest.raises(InputDomainError):
        as_probability_vector([0.5, 0.5], n_classes=3)
    with pytest.raises(InputDomainError):
        as_probability_vector([-0.1, 1.0])


def _trace(**kw):
    base = dict(image_id="img", context_clp=Perception(1, 100.0, False),
                hlp=Perception(1, 0.9, False), confident=True,
                signal=PhaseSignal.INHIBIT, final_label=1, rule="inhibit",
                cm_c=[0.0, 100.0, 33.333], top_scores={"hlp": [(1, 0.9)]})
    base.update(kw)
    return DecisionTrace(**base)


def test_inhibited_trace_cannot_hold_attention_results():
    with pytest.raises(InputDomainError):
        _trace(attention_clp=Perception(1, 100.0, False))
    with pytest.raises(InputDomainError):
        _trace(cm_a=[0.0, 100.0, 0.0])


def test_trace_rounds_matrices_for_display():
    assert _trace().cm_c == (0.0, 100.0, 33.33)


def test_trace_json_round_trip():
    excited = _trace(signal=PhaseSignal.EXCITE, confident=False, rule="fallback",
                     attention_clp=Perception(2, 100.0, False),
                     cm_a=[0.0, 10.0, 100.0], cm_f=[0.0, 200.0, 150.0],
                     final_label=1, attention_extractions=4,
                     scales={"final": "sum"})
    for trace in (_trace(), excited):
        text = trace.to_json()
        again = DecisionTrace.from_json(text)
        assert again == trace
        assert again.to_json() == text
        assert json.loads(text)["schema_version"] == 1


def test_trace_rejects_unknown_schema():
    data = _trace().to_dict()
    data["schema_version"] = 99
    with pytest.raises(InputDomainError):
        DecisionTrace.from_dict(data)


@given(st.sampled_from(list(PartKind)), st.integers(0, 199),
       st.floats(0, 1, allow_nan=False))
def test_prediction_dict_round_trip(part, label, prob):
    p = PartPrediction(part, label, prob)
    assert PartPrediction.from_dict(json.loads(json.dumps(p.to_dict()))) == p


@given(st.integers(0, 50), st.floats(0, 300, allow_nan=False), st.booleans())
def test_perception_dict_round_trip(label, score, confused):
    p = Perception(label, score, confused)
    assert Perception.from_dict(json.loads(json.dumps(p.to_dict()))) == p
