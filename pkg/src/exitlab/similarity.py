"""Cross-layer similarity scores between successive classifier outputs.

Four variants, all built from one cross-entropy primitive:

    kd(p, q)    = -sum_j p_j * ln(q_j)            (forward distillation)
    rekd(p, q)  = kd(q, p)                        (reverse direction)
    symkd(p, q) = kd(p, q) + kd(q, p)
    jskd(p, q)  = kd(p, m)/2 + kd(q, m)/2,  m = (p + q)/2

Scores are cross-entropies as written, so a pair of identical
distributions scores its own entropy, not zero; thresholds are in nats.
Set ``subtract_self_entropy`` on a measure to get the KL-style variant
(identical inputs score 0) for ablations.

Multi-label distributions are treated as k independent binary problems
and the per-label scores are summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ProbDist",
    "SimilarityMeasure",
    "VARIANTS",
    "score_kd",
    "score_rekd",
    "score_symkd",
    "score_jskd",
    "score",
    "entropy",
]

SLC = "slc"
MLC = "mlc"
VARIANTS = ("kd", "rekd", "symkd", "jskd")

_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ProbDist:
    """A classifier output: one categorical vector, or k Bernoulli pairs.

    ``probs`` has shape (k,) for single-label and (k, 2) for multi-label,
    where row j is (p_j, 1 - p_j).
    """

    kind: str
    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)
        if self.kind == SLC:
            if arr.ndim != 1 or arr.shape[0] < 2:
                raise ValueError(f"slc distribution needs a vector of k >= 2, got shape {arr.shape}")
            if arr.min() < -_SUM_TOL or abs(arr.sum() - 1.0) > _SUM_TOL:
                raise ValueError("slc probabilities must be nonnegative and sum to 1")
        elif self.kind == MLC:
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
                raise ValueError(f"mlc distribution needs (k, 2) pairs with k >= 1, got shape {arr.shape}")
            if arr.min() < -_SUM_TOL or np.abs(arr.sum(axis=1) - 1.0).max() > _SUM_TOL:
                raise ValueError("every mlc pair must be nonnegative and sum to 1")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def slc(cls, probs) -> "ProbDist":
        return cls(SLC, np.asarray(probs, dtype=np.float64))

    @classmethod
    def mlc(cls, positive_probs) -> "ProbDist":
        """Build Bernoulli pairs from per-label positive-class probabilities."""
        p = np.asarray(positive_probs, dtype=np.float64)
        return cls(MLC, np.stack([p, 1.0 - p], axis=-1))

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> int:
        if self.kind != SLC:
            raise ValueError("argmax is defined for slc distributions")
        return int(np.argmax(self.probs))

    def label_set(self, threshold: float = 0.5) -> frozenset[int]:
        """Labels whose positive probability exceeds ``threshold`` (strict)."""
        if self.kind != MLC:
            raise ValueError("label_set is defined for mlc distributions")
        return frozenset(np.flatnonzero(self.probs[:, 0] > threshold).tolist())

    def flat(self) -> np.ndarray:
        """Probability mass as a flat vector (pairs unrolled for mlc)."""
        return self.probs.reshape(-1)


@dataclass(frozen=True)
class SimilarityMeasure:
    """A named score variant plus its log floor.

    Instances are callable as ``measure(prev, cur)`` so anything expecting
    a plain scorer can take one directly.
    """

    variant: str = "jskd"
    epsilon: float = 1e-12
    subtract_self_entropy: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown similarity variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epsilon <= 0:
            raise ValueError("epsilon floor must be positive")

    def __call__(self, prev: ProbDist, cur: ProbDist) -> float:
        return score(self, prev, cur)


def _check_pair(prev: ProbDist, cur: ProbDist) -> None:
    if prev.kind != cur.kind:
        raise ValueError(f"distribution kinds differ: {prev.kind!r} vs {cur.kind!r}")
    if prev.k != cur.k:
        raise ValueError(f"class counts differ: {prev.k} vs {cur.k}")


def _cross_entropy(w: np.ndarray, q: np.ndarray, epsilon: float) -> float:
    return float(-(w * np.log(np.maximum(q, epsilon))).sum())


def score_kd(
    prev: ProbDist,
    cur: ProbDist,
    epsilon: float = 1e-12,
    subtract_self_entropy: bool = False,
) -> float:
    """Cross-entropy of ``cur`` under ``prev``'s mass (summed over labels for mlc)."""
    _check_pair(prev, cur)
    w = prev.flat()
    s = _cross_entropy(w, cur.flat(), epsilon)
    if subtract_self_entropy:
        s -= _cross_entropy(w, w, epsilon)
    return s


def score_rekd(
    prev: ProbDist,
    cur: ProbDist,
    epsilon: float = 1e-12,
    subtract_self_entropy: bool = False,
) -> float:
    """The reverse direction: exactly ``score_kd(cur, prev)``."""
    return score_kd(cur, prev, epsilon, subtract_self_entropy)


def score_symkd(
    prev: ProbDist,
    cur: ProbDist,
    epsilon: float = 1e-12,
    subtract_self_entropy: bool = False,
) -> float:
    """Symmetric sum of both directions."""
    return score_kd(prev, cur, epsilon, subtract_self_entropy) + score_kd(
        cur, prev, epsilon, subtract_self_entropy
    )


def score_jskd(
    prev: ProbDist,
    cur: ProbDist,
    epsilon: float = 1e-12,
    subtract_self_entropy: bool = False,
) -> float:
    """Both directions against the midpoint mixture, averaged."""
    _check_pair(prev, cur)
    mid = ProbDist(prev.kind, (prev.probs + cur.probs) / 2.0)
    return 0.5 * score_kd(prev, mid, epsilon, subtract_self_entropy) + 0.5 * score_kd(
        cur, mid, epsilon, subtract_self_entropy
    )


_DISPATCH = {
    "kd": score_kd,
    "rekd": score_rekd,
    "symkd": score_symkd,
    "jskd": score_jskd,
}


def score(measure: SimilarityMeasure, prev: ProbDist, cur: ProbDist) -> float:
    """Apply ``measure`` to a pair of same-kind, same-k distributions."""
    return _DISPATCH[measure.variant](prev, cur, measure.epsilon, measure.subtract_self_entropy)


def entropy(dist: ProbDist, epsilon: float = 1e-12) -> float:
    """Shannon entropy in nats; mean per-label binary entropy for mlc."""
    if dist.kind == SLC:
        p = dist.probs
        return float(-(p * np.log(np.maximum(p, epsilon))).sum())
    per_label = -(dist.probs * np.log(np.maximum(dist.probs, epsilon))).sum(axis=1)
    return float(per_label.mean())
