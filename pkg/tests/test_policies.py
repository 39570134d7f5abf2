"""Exit policies: recurrence semantics, baselines, and monotonicity laws."""

import math

import numpy as np
import pytest

from exitlab.policies import (
    CONFIDENCE,
    FINAL_FALLBACK,
    FIXED_LAYER,
    PATIENCE_REACHED,
    ExitDecision,
    ExitTrace,
    FixedExit,
    FPabee,
    FPabeeState,
    Pabee,
    PabeeState,
    TraceEntry,
    entropy_step,
    fixed_exit,
    fpabee_step,
    learned_confidence_step,
    maxprob_step,
    pabee_step,
    prediction_match_scorer,
)
from exitlab.similarity import ProbDist


def simulate_patience_exit(scores, thre, patience, n_layers):
    """Independent reference: step the counter recurrence over raw scores.

    ``scores[i]`` is the comparison between layers i+1 and i+2, so the
    first comparison happens at layer 2. Returns the exit layer (final
    layer if the counter never reaches the patience value).
    """
    pat = 0
    for i, s in enumerate(scores):
        pat = pat + 1 if s < thre else 0
        if pat >= patience:
            return i + 2
    return n_layers


def run_fpabee_on_scores(scores, thre, patience):
    """Drive fpabee_step with a scripted scorer replaying ``scores``."""
    queue = list(scores)
    scorer = lambda prev, cur: queue.pop(0)
    dummy = ProbDist.slc([0.5, 0.5])
    state = FPabeeState(thre, patience)
    for layer in range(1, len(scores) + 2):
        state, decision = fpabee_step(state, dummy, scorer)
        if decision.halt:
            return layer
    return len(scores) + 1


def uniform_stream(rng, n, k=3):
    out = []
    for _ in range(n):
        out.append(ProbDist.slc(rng.dirichlet(np.ones(k))))
    return out


class TestFPabeeStep:
    def test_hand_stepped_sequence(self):
        # thre=0.5, scores [0.4, 0.6, 0.3, 0.2] -> pat 1,0,1,2; halt on the
        # 4th comparison, i.e. at layer 5
        dummy = ProbDist.slc([0.5, 0.5])
        queue = [0.4, 0.6, 0.3, 0.2]
        scorer = lambda p, c: queue.pop(0)
        state = FPabeeState(thre=0.5, patience=2)
        state, d = fpabee_step(state, dummy, scorer)  # layer 1, no comparison
        assert state.pat == 0 and not d.halt
        expected_pat = [1, 0, 1, 2]
        for layer, want in zip(range(2, 6), expected_pat):
            state, d = fpabee_step(state, dummy, scorer)
            assert state.pat == want
            assert d.halt == (layer == 5)
        assert d.reason == PATIENCE_REACHED

    def test_infinite_threshold_exits_at_patience_plus_one(self):
        for patience in (1, 2, 3, 5):
            scores = [1e9] * 10
            assert run_fpabee_on_scores(scores, math.inf, patience) == patience + 1

    def test_zero_threshold_never_halts(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(0.0, 5.0, size=10).tolist()
        # scores are >= 0 >= thre, so every comparison resets
        assert run_fpabee_on_scores(scores, 0.0, 1) == 11

    def test_matches_direct_simulation_on_random_streams(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            n = int(rng.integers(2, 12))
            scores = rng.uniform(0, 2, size=n - 1).tolist()
            thre = float(rng.uniform(0, 2))
            patience = int(rng.integers(1, 5))
            assert run_fpabee_on_scores(scores, thre, patience) == simulate_patience_exit(
                scores, thre, patience, n
            )

    def test_score_equal_to_threshold_resets(self):
        assert run_fpabee_on_scores([0.5, 0.5], 0.5, 1) == 3  # neither increments

    def test_patience_must_be_positive(self):
        with pytest.raises(ValueError, match="positive"):
            FPabeeState(0.5, 0)


class TestPabee:
    def test_stable_argmax_halts_after_patience(self):
        stream = [ProbDist.slc([0.1, 0.2, 0.7])] * 3
        state = PabeeState(patience=2)
        decisions = []
        for p in stream:
            state, d = pabee_step(state, p)
            decisions.append(d.halt)
        assert decisions == [False, False, True]

    def test_alternating_argmax_never_halts(self):
        a = ProbDist.slc([0.8, 0.2])
        b = ProbDist.slc([0.2, 0.8])
        state = PabeeState(patience=1)
        for p in [a, b, a, b, a, b]:
            state, d = pabee_step(state, p)
            assert not d.halt

    def test_equivalent_to_flexible_policy_with_match_scorer(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(2, 10))
            patience = int(rng.integers(1, 4))
            stream = uniform_stream(rng, n)
            pab = Pabee(patience)
            flex = FPabee(prediction_match_scorer, thre=0.5, patience=patience)
            for layer, p in enumerate(stream, start=1):
                d1 = pab.step(layer, p)
                d2 = flex.step(layer, p)
                assert d1.halt == d2.halt
                if d1.halt:
                    break

    def test_mlc_uses_threshold_label_sets(self):
        a = ProbDist.mlc([0.9, 0.1, 0.6])
        b = ProbDist.mlc([0.7, 0.2, 0.55])  # same set {0, 2}
        c = ProbDist.mlc([0.7, 0.6, 0.55])  # set {0, 1, 2}
        state = PabeeState(patience=1)
        state, d = pabee_step(state, a)
        state, d = pabee_step(state, b)
        assert d.halt
        state = PabeeState(patience=1)
        state, d = pabee_step(state, a)
        state, d = pabee_step(state, c)
        assert not d.halt


class TestConfidenceBaselines:
    def test_entropy_one_hot_halts_for_any_positive_threshold(self):
        d = entropy_step(ProbDist.slc([1.0, 0.0]), threshold=1e-6)
        assert d.halt and d.reason == CONFIDENCE

    def test_entropy_uniform_does_not_halt_at_half(self):
        assert not entropy_step(ProbDist.slc([0.5, 0.5]), threshold=0.5).halt

    def test_entropy_boundary_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.dirichlet(np.ones(4))
            h = float(-(p * np.log(np.maximum(p, 1e-12))).sum())
            for threshold in (0.2, 0.5, 1.0):
                assert entropy_step(ProbDist.slc(p), threshold).halt == (h < threshold)

    def test_maxprob_halts_above_threshold(self):
        assert maxprob_step(ProbDist.slc([0.9, 0.1]), 0.8).halt

    def test_maxprob_uniform_never_halts_above_chance(self):
        assert not maxprob_step(ProbDist.slc([0.25] * 4), 0.5).halt

    def test_maxprob_tie_with_threshold_does_not_halt(self):
        assert not maxprob_step(ProbDist.slc([0.8, 0.2]), 0.8).halt

    def test_maxprob_mlc_uses_weakest_label(self):
        p = ProbDist.mlc([0.95, 0.60])  # weakest label confidence 0.60
        assert maxprob_step(p, 0.55).halt
        assert not maxprob_step(p, 0.65).halt

    def test_learned_confidence_threshold(self):
        assert learned_confidence_step(0.9, 0.8).halt
        assert not learned_confidence_step(0.5, 1.0).halt  # threshold 1 never halts


class TestFixedExit:
    def test_halts_exactly_at_layer(self):
        policy = fixed_exit(3)
        dummy = ProbDist.slc([0.5, 0.5])
        assert not policy.step(1, dummy).halt
        assert not policy.step(2, dummy).halt
        d = policy.step(3, dummy)
        assert d.halt and d.reason == FIXED_LAYER

    def test_layer_must_be_positive(self):
        with pytest.raises(ValueError):
            FixedExit(0)


class TestMonotonicity:
    """Raising thre never delays an exit; raising patience never hastens one."""

    def test_exit_layer_nonincreasing_in_threshold(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(3, 14))
            scores = rng.uniform(0, 2, size=n - 1).tolist()
            patience = int(rng.integers(1, 4))
            thresholds = sorted(rng.uniform(0, 2, size=5))
            exits = [simulate_patience_exit(scores, t, patience, n) for t in thresholds]
            assert all(a >= b for a, b in zip(exits, exits[1:]))

    def test_exit_layer_nondecreasing_in_patience(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(3, 14))
            scores = rng.uniform(0, 2, size=n - 1).tolist()
            thre = float(rng.uniform(0, 2))
            exits = [simulate_patience_exit(scores, thre, p, n) for p in range(1, 6)]
            assert all(a <= b for a, b in zip(exits, exits[1:]))

    def test_early_halt_needs_at_least_patience_comparisons(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(3, 14))
            scores = rng.uniform(0, 2, size=n - 1).tolist()
            patience = int(rng.integers(1, 5))
            exit_layer = simulate_patience_exit(scores, 1.0, patience, n)
            assert exit_layer == n or exit_layer >= patience + 1


class TestExitTrace:
    def _entry(self, layer, halt, reason=None):
        return TraceEntry(layer, 0, None, None, ExitDecision(halt, reason))

    def test_requires_single_halt_at_end(self):
        good = ExitTrace(
            (self._entry(1, False), self._entry(2, True, PATIENCE_REACHED)), 2, PATIENCE_REACHED
        )
        assert good.exit_layer == 2
        with pytest.raises(ValueError, match="halting"):
            ExitTrace((self._entry(1, False), self._entry(2, False)), 2, FINAL_FALLBACK)
        with pytest.raises(ValueError, match="halting"):
            ExitTrace(
                (self._entry(1, True, FIXED_LAYER), self._entry(2, True, FIXED_LAYER)),
                2,
                FIXED_LAYER,
            )

    def test_exit_layer_must_match_last_entry(self):
        with pytest.raises(ValueError, match="exit_layer"):
            ExitTrace((self._entry(1, True, FIXED_LAYER),), 2, FIXED_LAYER)
