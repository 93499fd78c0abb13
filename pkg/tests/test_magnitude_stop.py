import numpy as np
import pytest

from minidarts.bilevel_trainer import EpochMetrics, TrainConfig, new_state
from minidarts.errors import ConfigError, DomainError, IntegrityError
from minidarts.magnitude_stop import (MagnitudeTrace, StopCriterion, criterion_peak, criterion_rank_stable,
                                      criterion_residual_peak, criterion_skip_count, early_stop_run,
                                      learnable_ranking, magnitude, magnitude_trace, parse_criteria,
                                      peak_watcher, residual_scores, selective_stop)
from minidarts.search_space import DEFAULT_OPS, SupernetSpec, discretize, init_alpha, init_weights
from minidarts.tracking import EpochState

SPEC = SupernetSpec()


def two_op_trace(column):
    column = np.asarray(column, dtype=float)
    return MagnitudeTrace(("a", "b"), np.column_stack([column, 1.0 - column]))


def alpha_with_skips(n_skips):
    alpha = np.zeros((SPEC.N, SPEC.op_set.M))
    alpha[:, SPEC.op_set.index("op_small")] = 1.0
    alpha[:n_skips, SPEC.op_set.index("skip_connect")] = 2.0
    return alpha


class TestMagnitude:
    def test_uniform(self):
        np.testing.assert_allclose(magnitude(np.zeros((6, 5))), np.full(5, 0.2))

    def test_edge_average(self):
        alpha = np.log(np.array([[0.2, 0.8], [0.4, 0.6]]))
        assert magnitude(alpha)[0] == pytest.approx(0.3)

    def test_single_op(self):
        np.testing.assert_array_equal(magnitude(np.array([[3.0], [-1.0]])), [1.0])

    def test_edge_count_checked(self):
        with pytest.raises(DomainError):
            magnitude(np.zeros((6, 5)), N=5)

    def test_trace_is_normalized(self, rng):
        trace = magnitude_trace([rng.normal(size=(6, 5)) * 3 for _ in range(20)], DEFAULT_OPS.names)
        trace.check_normalized()
        assert trace.epochs == 20

    def test_unnormalized_rejected(self):
        with pytest.raises(DomainError):
            MagnitudeTrace(("a", "b"), np.array([[0.5, 0.6]])).check_normalized()


class TestPeakCriteria:
    def test_peak(self):
        assert criterion_peak(two_op_trace([0.2, 0.5, 0.4]), "a") == 2

    def test_constant_trace_ties_to_first(self):
        assert criterion_peak(two_op_trace([0.5, 0.5, 0.5]), "a") == 1

    def test_unknown_op(self):
        with pytest.raises(DomainError):
            criterion_peak(two_op_trace([0.5]), "c")

    def test_residual_hand_value(self):
        trace = MagnitudeTrace(("x", "y", "z"), np.array([[0.5, 0.3, 0.2]]))
        assert residual_scores(trace, "x")[0] == pytest.approx(0.5)

    def test_residual_uniform_is_zero(self):
        trace = MagnitudeTrace(("x", "y", "z"), np.full((4, 3), 1 / 3))
        np.testing.assert_allclose(residual_scores(trace, "y"), 0.0, atol=1e-15)

    def test_residual_needs_two_ops(self):
        with pytest.raises(DomainError):
            residual_scores(MagnitudeTrace(("x",), np.ones((2, 1))), "x")

    def test_residual_peak_equals_peak_on_random_traces(self, rng):
        for _ in range(1000):
            M = int(rng.integers(2, 7))
            T = int(rng.integers(1, 60))
            values = rng.dirichlet(np.ones(M), size=T)
            trace = MagnitudeTrace(tuple(f"o{i}" for i in range(M)), values)
            for op in trace.op_names:
                assert criterion_residual_peak(trace, op) == criterion_peak(trace, op)


class TestDartsPlusCriteria:
    def test_skip_count_fires(self):
        assert criterion_skip_count(alpha_with_skips(2), SPEC, 2)

    def test_all_zero_alpha_has_no_skips(self):
        assert not criterion_skip_count(np.zeros((6, 5)), SPEC, 1)

    def test_impossible_count(self):
        assert not criterion_skip_count(alpha_with_skips(6), SPEC, SPEC.N + 1)

    def test_skip_count_needs_skip(self):
        spec = SupernetSpec(op_set=DEFAULT_OPS.model_copy(update={"ops": DEFAULT_OPS.ops[2:]}))
        with pytest.raises(DomainError):
            criterion_skip_count(np.zeros((6, 3)), spec, 1)

    def test_rank_stable_over_window(self):
        ranking = learnable_ranking(alpha_with_skips(0), DEFAULT_OPS)
        assert criterion_rank_stable([ranking] * 10, 10)
        assert not criterion_rank_stable([ranking] * 9, 10)

    def test_rank_flip_at_last_epoch(self):
        a = alpha_with_skips(0)
        b = a.copy()
        b[0, DEFAULT_OPS.index("op_large")] = 5.0
        history = [learnable_ranking(a, DEFAULT_OPS)] * 9 + [learnable_ranking(b, DEFAULT_OPS)]
        assert not criterion_rank_stable(history, 10)

    def test_window_one(self):
        assert criterion_rank_stable([learnable_ranking(np.zeros((6, 5)), DEFAULT_OPS)], 1)
        assert not criterion_rank_stable([], 1)


class TestParse:
    @pytest.mark.parametrize("text,label", [
        ("peak:op_large", "peak_op_large"),
        ("residual:op_large:3", "residual_op_large"),
        ("sc:2", "sc_2"),
        ("rt:10", "rt_10"),
    ])
    def test_labels(self, text, label):
        assert StopCriterion.parse(text).label == label

    @pytest.mark.parametrize("text", ["peak", "sc:0", "rt:x", "median:op_large", "peak:op_large:0"])
    def test_bad(self, text):
        with pytest.raises(ConfigError):
            StopCriterion.parse(text)

    def test_list(self):
        assert parse_criteria("") == []
        assert [c.kind for c in parse_criteria("peak:none, sc:3")] == ["peak", "skip_count"]


class TestSelectiveStop:
    def _run(self, rng, T=12):
        alphas = [rng.normal(size=(6, 5)) * 2 for _ in range(T)]
        return alphas, magnitude_trace(alphas, DEFAULT_OPS.names)

    def test_peak_rolls_back_to_its_epoch(self, rng):
        alphas, trace = self._run(rng)
        decisions = selective_stop(trace, alphas, lambda t: alphas[t - 1], [StopCriterion.parse("peak:op_large")], SPEC)
        d = decisions["peak_op_large"]
        assert d.epoch == int(np.argmax(trace.column("op_large"))) + 1
        assert d.architecture == discretize(alphas[d.epoch - 1], SPEC)
        assert d.fired and d.stopped_at == 12

    def test_one_architecture_per_op_peak(self, rng):
        alphas, trace = self._run(rng)
        criteria = [StopCriterion("peak", op=op) for op in DEFAULT_OPS.names]
        decisions = selective_stop(trace, alphas, lambda t: alphas[t - 1], criteria, SPEC)
        assert len(decisions) == 5

    def test_skip_count_replay(self, rng):
        alphas = [alpha_with_skips(0)] * 3 + [alpha_with_skips(2)] + [alpha_with_skips(3)] * 2
        trace = magnitude_trace(alphas, DEFAULT_OPS.names)
        d = selective_stop(trace, alphas, lambda t: alphas[t - 1], [StopCriterion.parse("sc:2")], SPEC)["sc_2"]
        assert (d.epoch, d.fired) == (4, True)
        assert d.architecture == discretize(alphas[3], SPEC)

    def test_never_fired_uses_last_epoch(self, rng):
        alphas = [alpha_with_skips(0)] * 4
        trace = magnitude_trace(alphas, DEFAULT_OPS.names)
        d = selective_stop(trace, alphas, lambda t: alphas[t - 1], [StopCriterion.parse("sc:2")], SPEC)["sc_2"]
        assert (d.epoch, d.fired) == (4, False)

    def test_empty_criteria(self, rng):
        alphas, trace = self._run(rng)
        assert selective_stop(trace, alphas, lambda t: alphas[t - 1], [], SPEC) == {}

    def test_missing_checkpoint(self, rng):
        alphas, trace = self._run(rng)

        def load(t):
            raise FileNotFoundError(t)

        with pytest.raises(IntegrityError) as info:
            selective_stop(trace, alphas, load, [StopCriterion.parse("peak:none")], SPEC)
        assert info.value.epoch is not None


def _snap(t, alpha):
    return EpochState(epoch=t, metrics=EpochMetrics(t, 0, 0, 0, 0, 0, 0), alpha=alpha, fired=(), elapsed=0.0)


class TestEarlyStop:
    def test_peak_with_patience_on_unimodal_trace(self):
        large = SPEC.op_set.index("op_large")
        heights = [0.0, 0.5, 1.0, 2.0, 1.5, 1.0, 0.8, 0.6, 0.4, 0.2, 0.1]
        check, best = peak_watcher(large, patience=5)
        fired_at = None
        for t, h in enumerate(heights, start=1):
            alpha = np.zeros((6, 5))
            alpha[:, large] = h
            if check(_snap(t, alpha)):
                fired_at = t
                break
        assert fired_at == 4 + 5
        epoch, alpha = best()
        assert epoch == 4
        assert alpha[0, large] == 2.0

    def _state(self, spec, config):
        rng = np.random.default_rng(config.seed)
        return new_state(config, spec, init_weights(spec, rng), init_alpha(spec), rng)

    def test_window_one_fires_at_first_epoch(self, tiny_spec, tiny_data):
        config = TrainConfig(total_epochs=4, batch_size=16)
        state = self._state(tiny_spec, config)
        d = early_stop_run(state, config, tiny_spec, tiny_data.train, tiny_data.val, StopCriterion.parse("rt:1"))
        assert (d.epoch, d.stopped_at, d.fired) == (1, 1, True)
        assert state.epoch == 1
        assert d.architecture == discretize(state.alpha, tiny_spec)

    def test_fallback_to_end_of_training(self, tiny_spec, tiny_data):
        config = TrainConfig(total_epochs=3, batch_size=16)
        state = self._state(tiny_spec, config)
        seen = []
        d = early_stop_run(state, config, tiny_spec, tiny_data.train, tiny_data.val,
                           StopCriterion.parse("rt:50"), on_epoch=lambda snap: seen.append(snap.epoch))
        assert (d.epoch, d.fired) == (3, False)
        assert seen == [1, 2, 3]
        assert d.architecture == discretize(state.alpha, tiny_spec)
