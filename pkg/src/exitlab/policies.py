"""Halt/continue state machines over a stream of per-layer predictions.

The flexible patience policy counts consecutive cross-layer similarity
scores below a threshold and halts once the counter reaches the patience
value; the classic patience policy is the same recurrence with an
exact-prediction-match test. Confidence baselines (entropy, max-prob,
learned head) and a fixed-layer policy round out the set.

All policies are deterministic functions of the prediction stream and
their parameters. State is per-sample: call ``reset()`` (or build a fresh
state) before each new input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .similarity import SLC, ProbDist, entropy

__all__ = [
    "ExitDecision",
    "TraceEntry",
    "ExitTrace",
    "FPabeeState",
    "PabeeState",
    "fpabee_step",
    "pabee_step",
    "entropy_step",
    "maxprob_step",
    "learned_confidence_step",
    "fixed_exit",
    "prediction_match_scorer",
    "ExitPolicy",
    "FPabee",
    "Pabee",
    "EntropyThreshold",
    "MaxProb",
    "LearnedConfidence",
    "FixedExit",
]

PATIENCE_REACHED = "patience-reached"
CONFIDENCE = "confidence"
FIXED_LAYER = "fixed-layer"
FINAL_FALLBACK = "final-layer-fallback"

Scorer = Callable[[ProbDist, ProbDist], float]


@dataclass(frozen=True)
class ExitDecision:
    """Outcome of one policy step; ``reason`` is set only when halting."""

    halt: bool
    reason: str | None = None


@dataclass(frozen=True)
class TraceEntry:
    """One executed layer: prediction summary plus the policy's view of it."""

    layer: int
    prediction: int | frozenset[int]
    score: float | None
    pat: int | None
    decision: ExitDecision


@dataclass(frozen=True)
class ExitTrace:
    """Per-sample record of every executed layer and the final exit."""

    entries: tuple[TraceEntry, ...]
    exit_layer: int
    reason: str

    def __post_init__(self):
        halts = [e for e in self.entries if e.decision.halt]
        if len(halts) != 1 or halts[0] is not self.entries[-1]:
            raise ValueError("trace must contain exactly one halting decision, at its last entry")
        if self.entries[-1].layer != self.exit_layer:
            raise ValueError("exit_layer must match the last recorded layer")


def _summary(p: ProbDist) -> int | frozenset[int]:
    return p.argmax() if p.kind == SLC else p.label_set()


# -- flexible patience ---------------------------------------------------


@dataclass(frozen=True)
class FPabeeState:
    """Counter state for the similarity-threshold patience recurrence.

    ``pat`` counts consecutive comparisons with score strictly below
    ``thre``; a score >= thre resets it to 0. ``prev`` is empty until the
    first prediction arrives, so the first comparison happens at the
    second layer.
    """

    thre: float
    patience: int
    pat: int = 0
    prev: ProbDist | None = None
    last_score: float | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be a positive integer")


def fpabee_step(state: FPabeeState, p: ProbDist, scorer: Scorer) -> tuple[FPabeeState, ExitDecision]:
    """Consume one layer's prediction; halt once ``pat`` reaches the patience.

    ``scorer`` is any ``(prev, cur) -> float`` callable; a
    :class:`~exitlab.similarity.SimilarityMeasure` works directly.
    """
    if state.prev is None:
        return replace(state, prev=p, last_score=None), ExitDecision(False)
    s = float(scorer(state.prev, p))
    pat = state.pat + 1 if s < state.thre else 0
    halt = pat >= state.patience
    new = replace(state, pat=pat, prev=p, last_score=s)
    return new, ExitDecision(halt, PATIENCE_REACHED if halt else None)


# -- classic patience ------------------------------------------------------


@dataclass(frozen=True)
class PabeeState:
    """Counter state for exact-prediction-match patience."""

    patience: int
    pat: int = 0
    prev: ProbDist | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be a positive integer")


def _same_prediction(a: ProbDist, b: ProbDist) -> bool:
    if a.kind == SLC:
        return a.argmax() == b.argmax()
    return a.label_set() == b.label_set()


def pabee_step(state: PabeeState, p: ProbDist) -> tuple[PabeeState, ExitDecision]:
    """Increment on unchanged argmax (or unchanged 0.5-threshold label set)."""
    if state.prev is None:
        return replace(state, prev=p), ExitDecision(False)
    pat = state.pat + 1 if _same_prediction(state.prev, p) else 0
    halt = pat >= state.patience
    return replace(state, pat=pat, prev=p), ExitDecision(halt, PATIENCE_REACHED if halt else None)


def prediction_match_scorer(prev: ProbDist, cur: ProbDist) -> float:
    """0.0 when predictions match, 1.0 otherwise.

    Plugged into the flexible recurrence with any thre in (0, 1] it
    reproduces classic patience exiting decision-for-decision.
    """
    return 0.0 if _same_prediction(prev, cur) else 1.0


# -- confidence baselines --------------------------------------------------


def entropy_step(p: ProbDist, threshold: float) -> ExitDecision:
    """Halt when prediction entropy drops strictly below ``threshold``."""
    halt = entropy(p) < threshold
    return ExitDecision(halt, CONFIDENCE if halt else None)


def maxprob_step(p: ProbDist, threshold: float) -> ExitDecision:
    """Halt when the winning probability strictly exceeds ``threshold``.

    For mlc the weakest label decides: min over labels of max(p, 1-p).
    """
    if p.kind == SLC:
        conf = float(p.probs.max())
    else:
        conf = float(p.probs.max(axis=1).min())
    halt = conf > threshold
    return ExitDecision(halt, CONFIDENCE if halt else None)


def learned_confidence_step(confidence: float, threshold: float) -> ExitDecision:
    """Halt when a trained per-layer confidence head exceeds ``threshold``."""
    halt = confidence > threshold
    return ExitDecision(halt, CONFIDENCE if halt else None)


# -- policy objects ---------------------------------------------------------


class ExitPolicy:
    """Common protocol: ``reset()`` per sample, then one ``step`` per layer.

    ``last_score`` and ``pat`` are populated by patience policies so the
    caller can record them in the trace.
    """

    name = "base"
    last_score: float | None = None
    pat: int | None = None

    def reset(self) -> None:
        pass

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        raise NotImplementedError


class FPabee(ExitPolicy):
    name = "fpabee"

    def __init__(self, scorer: Scorer, thre: float, patience: int):
        self.scorer = scorer
        self.thre = float(thre)
        self.patience = int(patience)
        self.reset()

    def reset(self) -> None:
        self._state = FPabeeState(self.thre, self.patience)
        self.last_score = None
        self.pat = 0

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        self._state, decision = fpabee_step(self._state, probs, self.scorer)
        self.last_score = self._state.last_score
        self.pat = self._state.pat
        return decision


class Pabee(ExitPolicy):
    name = "pabee"

    def __init__(self, patience: int):
        self.patience = int(patience)
        self.reset()

    def reset(self) -> None:
        self._state = PabeeState(self.patience)
        self.pat = 0

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        self._state, decision = pabee_step(self._state, probs)
        self.pat = self._state.pat
        return decision


class EntropyThreshold(ExitPolicy):
    name = "entropy"

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        return entropy_step(probs, self.threshold)


class MaxProb(ExitPolicy):
    name = "maxprob"

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        return maxprob_step(probs, self.threshold)


class LearnedConfidence(ExitPolicy):
    name = "learned"

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        if confidence is None:
            raise ValueError("learned-confidence policy needs the per-layer confidence value")
        return learned_confidence_step(confidence, self.threshold)


class FixedExit(ExitPolicy):
    name = "fixed"

    def __init__(self, layer: int):
        if layer < 1:
            raise ValueError("fixed exit layer must be >= 1")
        self.layer = int(layer)

    def step(self, layer: int, probs: ProbDist, confidence: float | None = None) -> ExitDecision:
        halt = layer == self.layer
        return ExitDecision(halt, FIXED_LAYER if halt else None)


def fixed_exit(layer: int) -> FixedExit:
    """Policy that halts exactly at ``layer`` (final-layer fallback if > n)."""
    return FixedExit(layer)
