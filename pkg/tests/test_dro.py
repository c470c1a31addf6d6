import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csrcfl import (
    AmbiguitySpec,
    ModelParams,
    TabularDataset,
    TrainSettings,
    empirical_loss,
    gen_logistic_clients,
    robust_loss,
    robust_loss_linear,
    robust_loss_logistic,
    train_erm,
    train_robust,
)
from csrcfl.dro import logistic_dual_objective
from csrcfl.errors import ValidationError

from instances import random_instance
from oracles import logistic_dual_lp, ternary_min, worst_case_abs_loss


families = st.sampled_from(["linear_l1", "logistic"])
seeds = st.integers(0, 2**32 - 1)


class TestLinear:
    def test_zero_radius_is_empirical(self):
        for s in range(20):
            m, d = random_instance(s, "linear_l1")
            assert robust_loss_linear(m, d, AmbiguitySpec(0.0)).value == empirical_loss(m, d)

    def test_closed_form_example(self):
        d = TabularDataset(np.ones((4, 2)), np.full(4, 3.0))
        r = robust_loss_linear(ModelParams.zeros(2, "linear_l1"), d, AmbiguitySpec(2.0))
        assert (r.value, r.alpha, r.empirical_part) == (5.0, 1.0, 3.0)

    def test_perturbation_oracle_small_radius(self):
        for s in range(5):
            m, d = random_instance(100 + s, "linear_l1")
            oracle = worst_case_abs_loss(m.weights, d.features, d.targets, 0.01)
            value = robust_loss_linear(m, d, AmbiguitySpec(0.01)).value
            assert abs(value - oracle) <= 0.01 * value

    @given(seed=seeds, eps=st.floats(0, 10))
    def test_alpha_is_closed_form(self, seed, eps):
        m, d = random_instance(seed, "linear_l1")
        r = robust_loss_linear(m, d, AmbiguitySpec(eps))
        assert r.alpha == pytest.approx(math.sqrt(m.weights @ m.weights + 1), rel=1e-12)
        assert r.value == pytest.approx(eps * r.alpha + r.empirical_part, rel=1e-12, abs=1e-12)

    def test_family_and_dimension_checks(self):
        m, d = random_instance(0, "linear_l1")
        with pytest.raises(ValidationError):
            robust_loss_linear(ModelParams(m.weights, "logistic"), d, AmbiguitySpec(1.0))
        with pytest.raises(ValidationError):
            robust_loss_linear(ModelParams.zeros(m.n_features + 1, "linear_l1"), d, AmbiguitySpec(1.0))


class TestLogistic:
    @pytest.mark.parametrize("eps, kappa", [(0.0, 1.0), (0.3, 1.0), (5.0, 0.1), (0.01, 7.0)])
    def test_zero_weights(self, eps, kappa):
        _, d = random_instance(3, "logistic")
        r = robust_loss_logistic(ModelParams.zeros(d.n_features, "logistic"), d, AmbiguitySpec(eps, kappa))
        assert r.value == pytest.approx(math.log(2), abs=1e-15)
        assert r.alpha == 0.0

    def test_zero_radius_is_empirical(self):
        for s in range(20):
            m, d = random_instance(s, "logistic")
            r = robust_loss_logistic(m, d, AmbiguitySpec(0.0))
            assert r.value == empirical_loss(m, d)
            assert r.alpha == pytest.approx(np.linalg.norm(m.weights))

    def test_scan_matches_ternary_search(self):
        spec = AmbiguitySpec(0.3, 1.0)
        for s in range(20):
            m, d = random_instance(s, "logistic")
            a = float(np.linalg.norm(m.weights))
            oracle = ternary_min(lambda al: logistic_dual_objective(al, m, d, spec), a, a + 50)
            assert robust_loss_logistic(m, d, spec).value == pytest.approx(oracle, abs=1e-6)

    @given(seed=seeds, eps=st.floats(0, 3), kappa=st.floats(0.05, 5))
    def test_scan_matches_dual_lp(self, seed, eps, kappa):
        m, d = random_instance(seed, "logistic")
        r = robust_loss_logistic(m, d, AmbiguitySpec(eps, kappa))
        oracle = logistic_dual_lp(m.weights, d.features, d.targets, eps, kappa)
        assert r.value == pytest.approx(oracle, abs=1e-7, rel=1e-9)
        assert r.alpha >= np.linalg.norm(m.weights) - 1e-12
        assert r.value == pytest.approx(eps * r.alpha + r.empirical_part, rel=1e-12, abs=1e-12)

    def test_huge_margins_do_not_overflow(self):
        d = TabularDataset(np.array([[1.0], [-1.0]]), [1.0, 1.0])
        r = robust_loss_logistic(ModelParams(np.array([1e4]), "logistic"), d, AmbiguitySpec(0.5))
        assert np.isfinite(r.value)

    def test_rejects_unsigned_labels(self):
        d = TabularDataset(np.ones((2, 1)), [0.0, 1.0])
        with pytest.raises(ValidationError):
            robust_loss_logistic(ModelParams.zeros(1, "logistic"), d, AmbiguitySpec(0.1))


class TestProperties:
    @given(seed=seeds, family=families, e1=st.floats(0, 5), e2=st.floats(0, 5))
    def test_monotone_in_radius(self, seed, family, e1, e2):
        lo, hi = sorted((e1, e2))
        m, d = random_instance(seed, family)
        v_lo = robust_loss(m, d, AmbiguitySpec(lo)).value
        v_hi = robust_loss(m, d, AmbiguitySpec(hi)).value
        assert v_lo <= v_hi + 1e-12
        if hi - lo > 1e-6 and np.linalg.norm(m.weights) > 1e-3:
            assert v_hi > v_lo

    @given(seed=seeds, family=families, eps=st.floats(0, 5))
    def test_lower_bounded_by_empirical(self, seed, family, eps):
        m, d = random_instance(seed, family)
        assert robust_loss(m, d, AmbiguitySpec(eps)).value >= empirical_loss(m, d) - 1e-12

    @given(seed=seeds, family=families, eps=st.floats(0, 3), size=st.integers(1, 5))
    def test_jensen_bound(self, seed, family, eps, size):
        rng = np.random.default_rng(seed)
        _, d = random_instance(seed, family)
        thetas = 2 * rng.normal(size=(size, d.n_features))
        spec = AmbiguitySpec(eps)
        mean_model = ModelParams(thetas.mean(axis=0), family)
        lhs = robust_loss(mean_model, d, spec).value
        rhs = np.mean([robust_loss(ModelParams(t, family), d, spec).value for t in thetas])
        assert lhs <= rhs + 1e-10


class TestTrainRobust:
    @pytest.mark.parametrize("family", ["linear_l1", "logistic"])
    def test_zero_radius_matches_erm(self, family):
        m, d = random_instance(11, family, n_max=60)
        a = train_robust(d, family, AmbiguitySpec(0.0))
        b = train_erm(d, family)
        assert abs(empirical_loss(a, d) - empirical_loss(b, d)) <= 1e-6

    def test_huge_radius_shrinks_linear_weights(self):
        _, d = random_instance(12, "linear_l1", n_max=60)
        m = train_robust(d, "linear_l1", AmbiguitySpec(1e6))
        assert np.linalg.norm(m.weights) <= 1e-3

    def test_logistic_beats_erm_on_its_own_objective(self):
        c = gen_logistic_clients(n_clients=1, n_features=10, n_true_weights=1, rng_seed=4)
        d = c.datasets[0]
        spec = AmbiguitySpec(0.05)
        robust = train_robust(d, "logistic", spec)
        erm = train_erm(d, "logistic")
        assert robust_loss(robust, d, spec).value <= robust_loss(erm, d, spec).value

    @pytest.mark.parametrize("family", ["linear_l1", "logistic"])
    @pytest.mark.parametrize("eps", [0.05, 0.5, 2.0])
    def test_no_worse_than_zero_and_deterministic(self, family, eps):
        _, d = random_instance(13, family, n_max=50)
        spec = AmbiguitySpec(eps)
        settings = TrainSettings(max_iters=300)
        a = train_robust(d, family, spec, settings)
        assert a == train_robust(d, family, spec, settings)
        zero = ModelParams.zeros(d.n_features, family)
        assert robust_loss(a, d, spec).value <= robust_loss(zero, d, spec).value
