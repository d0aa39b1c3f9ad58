"""Two-phase lateralized decision making.

The context phase turns part-level and whole-image probabilities into a
constituent perception (CLP) and a holistic perception (HLP). When they agree
and the CLP is not tied, it inhibits the attention phase and the agreed class
is final. Otherwise it excites the attention phase, whose forest-based CLP
joins a majority vote; without a majority the three evidence vectors are
summed and the largest entry wins.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from latsys.class_matrix import (
    ClassMatrix,
    Scale,
    accumulate,
    combine_final,
    constituent_perception,
    final_prediction,
    holistic_perception,
    normalize,
    top_k,
)
from latsys.core_types import (
    DecisionTrace,
    InputDomainError,
    PartKind,
    PartPrediction,
    Perception,
    PhaseSignal,
)
from latsys.dataprep import ImageSample, PartBox
from latsys.predictors import Predictor

log = logging.getLogger(__name__)

BoxSource = Callable[[ImageSample], Mapping[PartKind, PartBox]]


@dataclass
class PredictorBank:
    """Context-phase models: one per matrix part plus the whole-image model.

    ``include_face=False`` keeps the face model out of the constituent matrix.
    """

    constituent: dict[PartKind, Predictor]
    holistic: Predictor
    include_face: bool = True

    def __post_init__(self) -> None:
        if PartKind.WHOLE_IMAGE in self.constituent:
            raise InputDomainError("the whole image is not a constituent part")
        if not self.constituent:
            raise InputDomainError("a bank needs at least one constituent model")

    @property
    def n_classes(self) -> int:
        return self.holistic.n_classes

    def matrix_parts(self) -> list[PartKind]:
        return [p for p in self.constituent
                if self.include_face or p is not PartKind.FACE]


class PhaseGate:
    """Single-writer channel carrying the context phase's signal.

    The attention phase calls :meth:`proceed` before each part; it blocks
    until a signal has been sent and returns ``False`` on inhibit.
    """

    def __init__(self, signal: Optional[PhaseSignal] = None):
        self._event = threading.Event()
        self._signal: Optional[PhaseSignal] = None
        if signal is not None:
            self.send(signal)

    def send(self, signal: PhaseSignal) -> None:
        if self._event.is_set():
            raise RuntimeError("the phase signal was already sent")
        self._signal = PhaseSignal(signal)
        self._event.set()

    def cancel(self) -> None:
        self.send(PhaseSignal.INHIBIT)

    @property
    def signal(self) -> Optional[PhaseSignal]:
        return self._signal if self._event.is_set() else None

    @property
    def cancelled(self) -> bool:
        return self.signal is PhaseSignal.INHIBIT

    def proceed(self, timeout: Optional[float] = None) -> bool:
        if not self._event.wait(timeout):
            raise TimeoutError("no signal from the context phase")
        return self._signal is PhaseSignal.EXCITE


@dataclass(frozen=True)
class ContextOutcome:
    clp: Perception
    hlp: Perception
    cm_c: ClassMatrix
    holistic: np.ndarray
    confident: bool
    signal: PhaseSignal
    predictions: tuple[PartPrediction, ...] = ()


@dataclass(frozen=True)
class AttentionOutcome:
    cancelled: bool
    cm_a: Optional[ClassMatrix] = None
    clp: Optional[Perception] = None
    predictions: tuple[PartPrediction, ...] = ()


CANCELLED = AttentionOutcome(cancelled=True)


def _safe_predict(model: Predictor, sample: ImageSample, part: PartKind) -> PartPrediction:
    try:
        return model.predict(sample, part)
    except Exception:  # a failing model only loses its vote
        log.warning("predictor for %s failed on %s", part.value, sample.image_id,
                    exc_info=True)
        return PartPrediction.unrecognized(part)


def run_context(sample: ImageSample, bank: PredictorBank) -> ContextOutcome:
    n = bank.n_classes
    preds = tuple(_safe_predict(bank.constituent[p], sample, p)
                  for p in bank.matrix_parts())
    cm_c = normalize(accumulate(preds, n))
    try:
        holistic = bank.holistic.predict_proba(sample, PartKind.WHOLE_IMAGE)
    except Exception:
        log.warning("holistic predictor failed on %s", sample.image_id, exc_info=True)
        holistic = None
    holistic = np.zeros(n) if holistic is None else holistic
    return context_from_evidence(cm_c, holistic, preds)


def context_from_evidence(cm_c: ClassMatrix, holistic,
                          predictions: tuple[PartPrediction, ...] = ()
                          ) -> ContextOutcome:
    """CLP, HLP, confident flag and signal from a normalized matrix and the
    holistic probability vector."""
    holistic = np.asarray(holistic, dtype=np.float64)
    if holistic.size != cm_c.n_classes:
        raise InputDomainError("holistic vector and matrix disagree on class count")
    clp = constituent_perception(cm_c)
    hlp = holistic_perception(holistic)
    confident = clp.label == hlp.label and not clp.confused
    signal = PhaseSignal.INHIBIT if confident else PhaseSignal.EXCITE
    return ContextOutcome(clp, hlp, cm_c, holistic, confident, signal, predictions)


def run_attention(sample: ImageSample, bank: Mapping[PartKind, Predictor],
                  n_classes: int, gate: Optional[PhaseGate] = None,
                  box_source: Optional[BoxSource] = None) -> AttentionOutcome:
    """Forest-based constituent matrix and CLP.

    ``gate`` is polled before every part; an inhibit abandons the work and
    returns :data:`CANCELLED`. Parts without a box contribute nothing.
    """
    boxes = dict(box_source(sample) if box_source is not None else sample.boxes)
    view = ImageSample(sample.image_id, sample.pixels, boxes, sample.label)
    preds = []
    for part, model in bank.items():
        if gate is not None and not gate.proceed():
            return CANCELLED
        if part not in boxes:
            preds.append(PartPrediction.unrecognized(part))
            continue
        preds.append(_safe_predict(model, view, part))
    cm_a = normalize(accumulate(preds, n_classes))
    return AttentionOutcome(False, cm_a, constituent_perception(cm_a), tuple(preds))


def majority_label(labels: list[int]) -> Optional[int]:
    """Label shared by at least two of the perceptions, if any."""
    label, count = Counter(labels).most_common(1)[0]
    return label if count >= 2 else None


@dataclass(frozen=True)
class Verdict:
    final: Perception
    rule: str
    cm_f: Optional[ClassMatrix] = None


def analyse_feedback(cm_c: ClassMatrix, cm_a: ClassMatrix,
                     holistic: np.ndarray) -> Verdict:
    """Majority of {deep CLP, forest CLP, HLP}; else argmax of the summed matrix."""
    deep = constituent_perception(cm_c)
    forest = constituent_perception(cm_a)
    hlp = holistic_perception(holistic)
    winner = majority_label([deep.label, forest.label, hlp.label])
    if winner is not None:
        score = cm_c.entries[winner] + cm_a.entries[winner] + 100.0 * holistic[winner]
        return Verdict(Perception(winner, score, False), "majority")
    cm_f = combine_final(cm_c, cm_a, holistic)
    return Verdict(final_prediction(cm_f), "fallback", cm_f)


def decide(sample: ImageSample, context_bank: PredictorBank,
           attention_bank: Mapping[PartKind, Predictor], *,
           box_source: Optional[BoxSource] = None, parallel: bool = False,
           extraction_count: Optional[Callable[[], int]] = None,
           top: int = 2) -> DecisionTrace:
    """Run both phases on one image and record how the label was reached.

    In ``parallel`` mode the attention phase starts on a worker thread at the
    same time as the context phase and waits at its gate; either way the
    trace is identical. ``extraction_count`` (e.g. a feature counter's
    ``count``) is sampled around the attention phase for the trace.
    """
    n = context_bank.n_classes
    before = extraction_count() if extraction_count else 0
    gate = PhaseGate()
    if parallel:
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(run_attention, sample, attention_bank, n, gate,
                                  box_source)
            ctx = run_context(sample, context_bank)
            gate.send(ctx.signal)
            attention = pending.result()
    else:
        ctx = run_context(sample, context_bank)
        gate.send(ctx.signal)
        attention = (CANCELLED if ctx.signal is PhaseSignal.INHIBIT
                     else run_attention(sample, attention_bank, n, gate, box_source))
    extractions = (extraction_count() - before) if extraction_count else 0
    return build_trace(sample.image_id, ctx, attention, extractions, top)


def build_trace(image_id: str, ctx: ContextOutcome, attention: AttentionOutcome,
                extractions: int = 0, top: int = 2) -> DecisionTrace:
    """Apply the decision rule to both phases' outcomes and record it."""
    tops = {"context_clp": top_k(ctx.cm_c.entries, top),
            "hlp": top_k(ctx.holistic, top)}
    scales = {"context_clp": Scale.NORMALIZED.value, "hlp": "probability"}
    common = dict(image_id=image_id, context_clp=ctx.clp, hlp=ctx.hlp,
                  confident=ctx.confident, signal=ctx.signal,
                  attention_extractions=extractions)

    if ctx.signal is PhaseSignal.INHIBIT:
        return DecisionTrace(**common, final_label=ctx.clp.label, rule="inhibit",
                             cm_c=ctx.cm_c.entries, top_scores=tops, scales=scales)
    if attention.cancelled:
        raise RuntimeError("excited context phase but the attention phase was cancelled")

    verdict = analyse_feedback(ctx.cm_c, attention.cm_a, ctx.holistic)
    tops["attention_clp"] = top_k(attention.cm_a.entries, top)
    scales["attention_clp"] = Scale.NORMALIZED.value
    if verdict.cm_f is not None:
        tops["final"] = top_k(verdict.cm_f.entries, top)
        scales["final"] = "sum of three 0-100 terms"
    return DecisionTrace(
        **common, final_label=verdict.final.label, rule=verdict.rule,
        final_confused=verdict.final.confused, attention_clp=attention.clp,
        cm_c=ctx.cm_c.entries, cm_a=attention.cm_a.entries,
        cm_f=None if verdict.cm_f is None else verdict.cm_f.entries,
        top_scores=tops, scales=scales)


def narrate(trace: DecisionTrace, name: Callable[[int], str] = lambda i: f"class-{i + 1}"
            ) -> str:
    """Plain-text account of a decision, one line per step."""

    def listing(key: str, scale: float = 1.0) -> str:
        pairs = trace.top_scores.get(key, ())
        return " and ".join(f"{s * scale:.2f}% {name(l)}" for l, s in pairs) or "nothing"

    lines = [f"{trace.image_id}:",
             f"  holistic model: {listing('hlp', 100.0)}",
             f"  constituent models: {listing('context_clp')}"
             + (" (confused)" if trace.context_clp.confused else "")]
    if trace.signal is PhaseSignal.INHIBIT:
        lines.append(f"  CLP and HLP agree -> inhibit attention; final {name(trace.final_label)}")
        return "\n".join(lines)
    lines.append("  CLP and HLP disagree -> excite attention")
    lines.append(f"  forest models: {listing('attention_clp')}")
    if trace.rule == "majority":
        lines.append(f"  two perceptions favour {name(trace.final_label)} -> final")
    else:
        lines.append(f"  no majority; summed matrix: {listing('final')}"
                     f" -> final {name(trace.final_label)}")
    return "\n".join(lines)
