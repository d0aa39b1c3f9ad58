import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latsys.class_matrix import ClassMatrix, Scale, constituent_perception
from latsys.core_types import InputDomainError, PartKind, PhaseSignal
from latsys.dataprep import ImageSample, PartBox
from latsys.engine import (
    CANCELLED,
    PhaseGate,
    PredictorBank,
    analyse_feedback,
    context_from_evidence,
    decide,
    majority_label,
    narrate,
    run_attention,
    run_context,
)
from latsys.features import ExtractionCounter
from latsys.predictors import Predictor

from oracles import brute_force_decision

N = 4
PARTS = (PartKind.CROWN, PartKind.WING, PartKind.BELLY)


class Fixed(Predictor):
    """Returns a fixed vector per part; optional counter mimics feature work."""

    def __init__(self, probs, counter=None, fail=False):
        self.probs = None if probs is None else np.asarray(probs, dtype=float)
        self.n_classes = N
        self.counter = counter
        self.fail = fail

    def predict_proba(self, sample, part):
        if self.fail:
            raise RuntimeError("model crashed")
        if self.counter is not None:
            self.counter.add(1)
        return self.probs


def onehot(c, p=0.9):
    v = np.full(N, (1 - p) / (N - 1))
    v[c] = p
    return v


def sample():
    boxes = {p: PartBox(p, 0, 0, 8, 8, "synthetic") for p in PARTS}
    return ImageSample("img-1", np.zeros((16, 16)), boxes, 0)


def banks(context_labels, holistic_label, forest_labels, counter=None):
    context = PredictorBank({p: Fixed(onehot(c)) for p, c in zip(PARTS, context_labels)},
                            Fixed(onehot(holistic_label, 0.7)))
    attention = {p: Fixed(onehot(c, 1.0), counter) for p, c in zip(PARTS, forest_labels)}
    return context, attention


def test_unanimous_context_inhibits_and_skips_attention():
    counter = ExtractionCounter()
    context, attention = banks([2, 2, 2], 2, [1, 1, 1], counter)
    trace = decide(sample(), context, attention, extraction_count=lambda: counter.count)
    assert trace.signal is PhaseSignal.INHIBIT and trace.confident
    assert trace.final_label == 2 and trace.rule == "inhibit"
    assert trace.attention_clp is None and trace.cm_a is None
    assert counter.count == 0 and trace.attention_extractions == 0


def test_disagreement_excites_and_majority_decides():
    counter = ExtractionCounter()
    context, attention = banks([3, 3, 1], 1, [1, 1, 0], counter)
    trace = decide(sample(), context, attention, extraction_count=lambda: counter.count)
    assert trace.signal is PhaseSignal.EXCITE and not trace.confident
    assert trace.context_clp.label == 3 and trace.hlp.label == 1
    assert trace.attention_clp.label == 1
    assert trace.final_label == 1 and trace.rule == "majority"
    assert trace.attention_extractions == 3


def test_confused_clp_excites_even_when_hlp_matches():
    cm_c = ClassMatrix([100, 100, 0, 0], Scale.NORMALIZED)
    ctx = context_from_evidence(cm_c, [0.9, 0.1, 0, 0])
    assert ctx.clp.confused and ctx.hlp.label == ctx.clp.label == 0
    assert ctx.signal is PhaseSignal.EXCITE


def test_parallel_and_sequential_traces_match():
    for labels in ([2, 2, 2], [3, 3, 1], [0, 1, 2]):
        context, attention = banks(labels, 1, [2, 0, 1])
        seq = decide(sample(), context, attention)
        par = decide(sample(), context, attention, parallel=True)
        assert seq.to_json() == par.to_json()


def test_parallel_inhibit_does_no_attention_work():
    counter = ExtractionCounter()
    context, attention = banks([2, 2, 2], 2, [1, 1, 1], counter)
    for _ in range(20):
        decide(sample(), context, attention, parallel=True)
    assert counter.count == 0


def test_gate_cancelled_before_any_part():
    counter = ExtractionCounter()
    _, attention = banks([0, 0, 0], 0, [1, 1, 1], counter)
    gate = PhaseGate(PhaseSignal.INHIBIT)
    assert run_attention(sample(), attention, N, gate) is CANCELLED
    assert counter.count == 0


def test_gate_is_single_writer():
    gate = PhaseGate()
    gate.send(PhaseSignal.EXCITE)
    with pytest.raises(RuntimeError):
        gate.cancel()


def test_gate_blocks_until_signal():
    gate = PhaseGate()
    seen = []
    worker = threading.Thread(target=lambda: seen.append(gate.proceed(timeout=5)))
    worker.start()
    gate.send(PhaseSignal.EXCITE)
    worker.join()
    assert seen == [True]
    with pytest.raises(TimeoutError):
        PhaseGate().proceed(timeout=0.01)


def test_attention_single_part():
    bank = {PartKind.CROWN: Fixed(onehot(3, 1.0))}
    out = run_attention(sample(), bank, N)
    assert out.cm_a.entries.tolist() == [0, 0, 0, 100]
    assert out.clp.label == 3


def test_attention_two_parts_hand_sum():
    bank = {PartKind.CROWN: Fixed(onehot(2, 0.6)), PartKind.WING: Fixed(onehot(3, 0.9))}
    out = run_attention(sample(), bank, N)
    np.testing.assert_allclose(out.cm_a.entries, [0, 0, 100 * 0.6 / 0.9, 100])
    assert out.clp.label == 3


def test_missing_box_contributes_nothing():
    s = sample()
    boxes = {PartKind.CROWN: s.boxes[PartKind.CROWN]}
    bank = {PartKind.CROWN: Fixed(onehot(1, 0.8)), PartKind.TAIL: Fixed(onehot(2, 1.0))}
    out = run_attention(ImageSample(s.image_id, s.pixels, boxes, 0), bank, N)
    assert out.clp.label == 1
    assert not out.predictions[1].recognized


def test_failing_predictor_loses_its_vote():
    context = PredictorBank({PartKind.CROWN: Fixed(None, fail=True),
                             PartKind.WING: Fixed(onehot(2))}, Fixed(onehot(2)))
    ctx = run_context(sample(), context)
    assert ctx.clp.label == 2
    assert not ctx.predictions[0].recognized


def test_face_toggle():
    bank = PredictorBank({PartKind.FACE: Fixed(onehot(1)), PartKind.CROWN: Fixed(onehot(2))},
                         Fixed(onehot(2)), include_face=False)
    assert bank.matrix_parts() == [PartKind.CROWN]
    with pytest.raises(InputDomainError):
        PredictorBank({PartKind.WHOLE_IMAGE: Fixed(onehot(1))}, Fixed(onehot(1)))


def test_majority_label():
    assert majority_label([1, 2, 1]) == 1
    assert majority_label([1, 2, 3]) is None
    assert majority_label([4, 4, 4]) == 4


def test_narrate_mentions_each_step():
    context, attention = banks([3, 3, 1], 1, [0, 2, 0])
    text = narrate(decide(sample(), context, attention))
    assert "excite" in text and "final" in text


vectors = arrays(np.float64, N, elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=300)
@given(vectors, vectors, vectors)
def test_feedback_matches_brute_force(c, a, h):
    cm_c = ClassMatrix(c * 100, Scale.NORMALIZED)
    cm_a = ClassMatrix(a * 100, Scale.NORMALIZED)
    verdict = analyse_feedback(cm_c, cm_a, h)
    label, rule = brute_force_decision(c * 100, a * 100, h)
    assert (verdict.final.label, verdict.rule) == (label, rule)
