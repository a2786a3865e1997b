import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tamatch import debiaser, simplex
from tamatch.debiaser import DebiaserConfig, DebiaserState, PseudoBatch
from tamatch.errors import (
    DegenerateEntropy,
    DegenerateModelDistribution,
    DimensionMismatch,
    EmptyBatch,
    LambdaOutOfRange,
    ThresholdOutOfRange,
)

# mpmath, 30 digits: 1 + KL((.8,.2)||(.5,.5)) / (H(.8,.2) / 2)
R_MAX_08 = 1.77035900689257249933
R_MIN_08_SYM = 0.564857182134629710905


def state_with(p_model, p_target, **cfg):
    c = len(p_model)
    return DebiaserState(np.asarray(p_model, float), np.asarray(p_target, float), DebiaserConfig(c, **cfg))


def dirichlet(rng, c, conc=1.0):
    return rng.dirichlet(np.full(c, conc))


class TestConfig:
    def test_defaults(self):
        cfg = DebiaserConfig(10)
        assert (cfg.tau, cfg.lambda_model, cfg.lambda_target) == (0.95, 0.999, 1.0)
        assert cfg.weight_lower_mode == "paper_one"

    def test_imbalanced_defaults(self):
        assert DebiaserConfig.imbalanced(10).lambda_target == 0.99999

    def test_baseline_turns_everything_off(self):
        cfg = DebiaserConfig.baseline(3)
        assert not (cfg.enable_rescale or cfg.enable_reweight or cfg.enable_clipping or cfg.enable_target_update)

    @pytest.mark.parametrize("tau", [0.0, 1.0, 1.2])
    def test_tau_range(self, tau):
        with pytest.raises(ThresholdOutOfRange):
            DebiaserConfig(2, tau=tau)

    def test_lambda_range(self):
        with pytest.raises(LambdaOutOfRange):
            DebiaserConfig(2, lambda_model=1.01)

    def test_initial_state_is_uniform(self):
        s = DebiaserState.initial(DebiaserConfig(5))
        assert s.step == 0
        assert s.p_model.tolist() == s.p_target.tolist() == [0.2] * 5


class TestScalingFactor:
    def test_equal_distributions(self):
        s = state_with([0.3, 0.7], [0.3, 0.7])
        assert debiaser.scaling_factor(s).tolist() == [1.0, 1.0]

    def test_model_skewed(self):
        s = state_with([0.75, 0.25], [0.5, 0.5])
        np.testing.assert_allclose(debiaser.scaling_factor(s), [2 / 3, 2.0], atol=1e-15)

    def test_target_skewed(self):
        s = state_with([0.5, 0.5], [0.1, 0.9])
        np.testing.assert_allclose(debiaser.scaling_factor(s), [0.2, 1.8], atol=1e-15)

    def test_degenerate_model(self):
        s = state_with([1.0, 0.0], [0.5, 0.5])
        with pytest.raises(DegenerateModelDistribution):
            debiaser.scaling_factor(s)


class TestRescale:
    def test_example(self):
        np.testing.assert_allclose(debiaser.rescale([0.6, 0.4], [2 / 3, 2.0]), [1 / 3, 2 / 3], atol=1e-15)

    def test_identity(self):
        p = [0.1, 0.2, 0.7]
        assert debiaser.rescale(p, [1, 1, 1]).tolist() == p

    def test_point_mass_fixed(self):
        assert debiaser.rescale([1.0, 0.0], [0.3, 50.0]).tolist() == [1.0, 0.0]

    def test_dimension(self):
        with pytest.raises(DimensionMismatch):
            debiaser.rescale([0.5, 0.5], [1, 1, 1])

    @settings(max_examples=200)
    @given(st.integers(2, 100), st.integers(0, 2**32 - 1))
    def test_preserves_simplex(self, c, seed):
        rng = np.random.default_rng(seed)
        p = dirichlet(rng, c, 0.3)
        r = np.exp(rng.normal(0, 3, c))
        simplex.check_simplex(debiaser.rescale(p, r))


class TestAdaptiveBound:
    def test_converges_to_one_one(self):
        s = state_with([0.2, 0.3, 0.5], [0.2, 0.3, 0.5])
        assert debiaser.adaptive_bound(s) == (1.0, 1.0)

    def test_two_class_value(self):
        s = state_with([0.8, 0.2], [0.5, 0.5])
        lo, hi = debiaser.adaptive_bound(s)
        assert lo == 1.0
        assert hi == pytest.approx(R_MAX_08, abs=1e-13)

    def test_symmetric_reciprocal(self):
        s = state_with([0.8, 0.2], [0.5, 0.5], weight_lower_mode="symmetric_reciprocal")
        lo, hi = debiaser.adaptive_bound(s)
        assert lo == pytest.approx(R_MIN_08_SYM, abs=1e-13)
        assert lo * hi == pytest.approx(1.0, abs=1e-15)

    def test_degenerate_entropy(self):
        s = state_with([1.0, 0.0], [0.5, 0.5])
        with pytest.raises(DegenerateEntropy):
            debiaser.adaptive_bound(s)

    def test_continuous_at_target(self):
        rng = np.random.default_rng(0)
        target = dirichlet(rng, 6) * 0.9 + 0.1 / 6
        direction = rng.normal(size=6)
        direction -= direction.mean()
        prev = None
        for eps in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]:
            s = state_with(target + eps * direction / 10, target)
            excess = debiaser.adaptive_bound(s)[1] - 1.0
            assert excess >= 0
            if prev is not None:
                assert excess < prev
            prev = excess
        assert prev < 1e-10


class TestGenerate:
    def test_threshold_examples(self):
        s = state_with([0.5, 0.5], [0.5, 0.5])
        pb = debiaser.generate(s, [[0.97, 0.03], [0.90, 0.10]])
        assert pb.labels.tolist() == [0, 0]
        assert pb.masks.tolist() == [1.0, 0.0]

    def test_threshold_is_strict(self):
        s = state_with([0.5, 0.5], [0.5, 0.5], tau=0.75)
        pb = debiaser.generate(s, [[0.75, 0.25]])
        assert pb.masks.tolist() == [0.0]

    def test_uniform_state_gives_unit_weights(self):
        s = DebiaserState.initial(DebiaserConfig(4))
        rng = np.random.default_rng(1)
        pb = debiaser.generate(s, rng.dirichlet(np.ones(4), 32))
        assert pb.weights.tolist() == [1.0] * 32

    def test_rescale_moves_labels(self):
        # strong class 0 loses its borderline instance to class 1
        s = state_with([0.75, 0.25], [0.5, 0.5])
        pb = debiaser.generate(s, [[0.6, 0.4]])
        assert pb.labels.tolist() == [1]

    def test_pure_read(self):
        rng = np.random.default_rng(5)
        s = state_with([0.6, 0.3, 0.1], [0.2, 0.3, 0.5], tau=0.5)
        before = s.to_record()
        batch = rng.dirichlet(np.ones(3) * 0.3, 50)
        a = debiaser.generate(s, batch)
        b = debiaser.generate(s, batch)
        assert s.to_record() == before
        for f in ("labels", "masks", "weights"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_weights_inside_bounds(self):
        rng = np.random.default_rng(11)
        for mode in ("paper_one", "symmetric_reciprocal"):
            for _ in range(100):
                s = state_with(dirichlet(rng, 5) * 0.9 + 0.02, simplex.uniform(5), weight_lower_mode=mode, tau=0.3)
                pb = debiaser.generate(s, rng.dirichlet(np.ones(5) * 0.2, 20))
                lo, hi = pb.bounds
                assert np.all(pb.weights >= lo) and np.all(pb.weights <= hi)

    def test_unclipped_weights_are_capped(self, caplog):
        s = state_with([1 - 1e-9, 1e-9], [0.5, 0.5], enable_clipping=False)
        pb = debiaser.generate(s, [[0.0, 1.0]])
        assert pb.weights.tolist() == [debiaser.UNCLIPPED_WEIGHT_CAP]
        assert "capped" in caplog.text

    def test_baseline_mode_is_plain_threshold(self):
        rng = np.random.default_rng(9)
        p_w = rng.dirichlet(np.ones(4) * 0.2, 64)
        s = state_with([0.7, 0.1, 0.1, 0.1], [0.25] * 4)
        s.config = DebiaserConfig.baseline(4)
        pb = debiaser.generate(s, p_w)
        assert pb.labels.tolist() == np.argmax(p_w, axis=1).tolist()
        assert pb.masks.tolist() == (p_w.max(axis=1) > 0.95).astype(float).tolist()
        assert pb.weights.tolist() == [1.0] * 64

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            debiaser.generate(DebiaserState.initial(DebiaserConfig(2)), np.zeros((0, 2)))


class TestProperties:
    @settings(max_examples=200)
    @given(st.integers(2, 12), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_argmax_invariant_under_scaled_r(self, c, scale, seed):
        rng = np.random.default_rng(seed)
        p_w = rng.dirichlet(np.ones(c) * 0.5, 16)
        r = np.exp(rng.normal(0, 1, c))
        q1 = debiaser.rescale(p_w, r)
        q2 = debiaser.rescale(p_w, scale * r)
        np.testing.assert_allclose(q1, q2, rtol=1e-12, atol=1e-15)
        assert np.array_equal(simplex.argmax_deterministic(q1), simplex.argmax_deterministic(q2))

    def test_scaled_r_through_generate(self):
        # p_model and p_target scaled by a common positive factor give the same pseudo-batch
        rng = np.random.default_rng(21)
        for _ in range(200):
            pm, pt = dirichlet(rng, 4) * 0.9 + 0.025, dirichlet(rng, 4) * 0.9 + 0.025
            cfg = DebiaserConfig(4, tau=0.6, enable_clipping=False)
            p_w = rng.dirichlet(np.ones(4) * 0.3, 8)
            a = debiaser.generate(DebiaserState(pm, pt, cfg), p_w)
            k = float(rng.uniform(0.1, 10))
            r = debiaser.scaling_factor(DebiaserState(pm, pt, cfg))
            q = debiaser.rescale(p_w, k * r)
            assert np.array_equal(a.labels, simplex.argmax_deterministic(q))
            assert np.array_equal(a.masks, (q.max(axis=1) > 0.6).astype(float))
            np.testing.assert_allclose(k * a.weights, (k * r)[a.labels], rtol=1e-14)

    def test_strong_classes_lose_odds(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            c = int(rng.integers(2, 8))
            pm, pt = dirichlet(rng, c) + 1e-3, dirichlet(rng, c) + 1e-3
            pm, pt = pm / pm.sum(), pt / pt.sum()
            s = state_with(pm, pt)
            p_w = dirichlet(rng, c) + 1e-6
            p_w /= p_w.sum()
            q = debiaser.rescale(p_w, debiaser.scaling_factor(s))
            ratio = pm / pt
            for a in range(c):
                for b in range(c):
                    if ratio[b] < ratio[a] * (1 - 1e-9):
                        assert q[a] / q[b] < p_w[a] / p_w[b]

    @pytest.mark.parametrize("mode", ["paper_one", "symmetric_reciprocal"])
    def test_weight_ordering_strong_le_weak(self, mode):
        rng = np.random.default_rng(8)
        for _ in range(500):
            c = int(rng.integers(2, 8))
            pm = dirichlet(rng, c) * 0.95 + 0.05 / c
            pt = dirichlet(rng, c) * 0.95 + 0.05 / c
            s = state_with(pm, pt, weight_lower_mode=mode, tau=0.01)
            strong = [i for i in range(c) if pm[i] > pt[i]]
            weak = [i for i in range(c) if pm[i] < pt[i]]
            # instances that are point masses on each class keep that label under rescaling
            pb = debiaser.generate(s, np.eye(c))
            for a in strong:
                for b in weak:
                    assert pb.weights[b] >= pb.weights[a]


class TestUpdates:
    def test_model_full_momentum(self):
        s = DebiaserState.initial(DebiaserConfig(2, lambda_model=1.0))
        assert debiaser.update_model_dist(s, [[0.9, 0.1]]).p_model.tolist() == [0.5, 0.5]

    def test_model_arithmetic(self):
        s = DebiaserState.initial(DebiaserConfig(2))
        out = debiaser.update_model_dist(s, [[0.8, 0.2], [0.6, 0.4]])
        np.testing.assert_allclose(out.p_model, [0.5002, 0.4998], atol=1e-15)
        assert out.step == s.step
        assert s.p_model.tolist() == [0.5, 0.5]

    def test_model_single_instance(self):
        s = DebiaserState.initial(DebiaserConfig(3, lambda_model=0.0))
        assert debiaser.update_model_dist(s, [[0.2, 0.3, 0.5]]).p_model.tolist() == [0.2, 0.3, 0.5]

    def test_model_uses_raw_predictions(self):
        s = state_with([0.9, 0.1], [0.5, 0.5], lambda_model=0.0)
        out = debiaser.update_model_dist(s, [[0.7, 0.3]])
        assert out.p_model.tolist() == [0.7, 0.3]

    def test_model_empty(self):
        with pytest.raises(EmptyBatch):
            debiaser.update_model_dist(DebiaserState.initial(DebiaserConfig(2)), np.zeros((0, 2)))

    def test_target_frozen(self):
        s = state_with([0.6, 0.4], [0.5, 0.5], lambda_target=1.0)
        assert debiaser.update_target_dist(s).p_target.tolist() == [0.5, 0.5]

    def test_target_disabled(self):
        s = state_with([0.6, 0.4], [0.5, 0.5], lambda_target=0.0, enable_target_update=False)
        assert debiaser.update_target_dist(s).p_target.tolist() == [0.5, 0.5]

    def test_target_jumps_to_model(self):
        s = state_with([0.6, 0.4], [0.5, 0.5], lambda_target=0.0)
        assert debiaser.update_target_dist(s).p_target.tolist() == [0.6, 0.4]

    def test_target_arithmetic(self):
        s = state_with([0.6, 0.4], [0.5, 0.5], lambda_target=0.99999)
        np.testing.assert_allclose(debiaser.update_target_dist(s).p_target, [0.500001, 0.499999], atol=1e-15)

    def test_advance_uses_fresh_model(self):
        s = state_with([0.5, 0.5], [0.5, 0.5], lambda_model=0.0, lambda_target=0.0)
        out = debiaser.advance(s, [[0.8, 0.2]])
        assert out.p_target.tolist() == [0.8, 0.2]


class TestLoss:
    def test_all_masked_out(self):
        pb = PseudoBatch(np.array([0, 1]), np.zeros(2), np.ones(2))
        assert debiaser.weighted_masked_ce([[0.5, 0.5], [0.0, 1.0]], pb) == 0.0

    def test_single(self):
        pb = PseudoBatch(np.array([0]), np.ones(1), np.ones(1))
        assert debiaser.weighted_masked_ce([[0.5, 0.5]], pb) == pytest.approx(math.log(2), abs=1e-15)

    def test_divides_by_full_batch(self):
        pb = PseudoBatch(np.array([0, 0]), np.array([1.0, 0.0]), np.ones(2))
        assert debiaser.weighted_masked_ce([[0.5, 0.5], [0.1, 0.9]], pb) == pytest.approx(math.log(2) / 2, abs=1e-15)

    def test_masked_zero_probability_is_ignored(self):
        pb = PseudoBatch(np.array([0]), np.zeros(1), np.ones(1))
        assert debiaser.weighted_masked_ce([[0.0, 1.0]], pb) == 0.0

    def test_weight_two_equals_two_copies(self):
        p = [[0.3, 0.7]]
        one = debiaser.weighted_masked_ce(p, PseudoBatch(np.array([1]), np.ones(1), np.array([2.0])))
        two = debiaser.weighted_masked_ce(p * 2, PseudoBatch(np.array([1, 1]), np.ones(2), np.ones(2)))
        assert one == pytest.approx(2 * two, rel=1e-15)

    def test_dimension(self):
        with pytest.raises(DimensionMismatch):
            debiaser.weighted_masked_ce([[0.5, 0.5]], PseudoBatch(np.array([0, 1]), np.ones(2), np.ones(2)))


def test_state_record_roundtrip():
    s = state_with([0.123456789012345, 0.876543210987655], [0.3, 0.7], lambda_target=0.99, tau=0.8)
    s.step = 17
    rec = json.loads(json.dumps(s.to_record()))
    back = DebiaserState.from_record(rec)
    assert back.step == 17
    assert back.config == s.config
    assert back.p_model.tolist() == s.p_model.tolist()
    assert back.p_target.tolist() == s.p_target.tolist()


def test_copy_is_independent():
    s = DebiaserState.initial(DebiaserConfig(3))
    c = s.copy()
    c.p_model[0] = 0.9
    assert s.p_model[0] == pytest.approx(1 / 3)
