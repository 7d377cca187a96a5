import json
import math

import numpy as np
import pytest

from core.errors import ShapeMismatchError, TheoryError
from research.theory import (
    LabelRecoveryInstance,
    LinearInstance,
    attack_training_error,
    bias_inversion_check,
    label_recovery_check,
    lanczos_gamma,
    lanczos_log_gamma,
    linear_forward,
    montecarlo_margin,
    passport_distance_trend,
    passport_spread_bound,
    random_well_conditioned,
    recovery_probability_bound,
    recovery_probability_montecarlo,
    scale_inversion_check,
)
from research.theory_report import render_text, verify_theory


def test_recovery_probability_bound_examples():
    assert recovery_probability_bound(2, 1.0, 10.0) == pytest.approx(math.pi / 100, rel=1e-12)
    assert recovery_probability_bound(1, 1.0, 2.0) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(TheoryError):
        recovery_probability_bound(0, 1.0, 2.0)


@pytest.mark.parametrize("z", [0.3, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 42.5])
def test_lanczos_matches_math_gamma(z):
    assert lanczos_gamma(z) == pytest.approx(math.gamma(z), rel=1e-10)
    assert lanczos_log_gamma(z) == pytest.approx(math.lgamma(z), abs=1e-10)


def test_lanczos_rejects_non_positive():
    with pytest.raises(TheoryError):
        lanczos_log_gamma(0.0)


def test_linear_forward_applies_both_rules():
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    inst = LinearInstance(W_p=W, W_a=np.eye(2), x=np.array([1.0, 1.0]), s_gamma_p=np.array([1.0, 2.0]),
                          s_beta_p=np.array([0.5, 0.0]))
    H, y = linear_forward(inst)
    np.testing.assert_allclose(H, [2.0 * 2.0 + 1.0, 2.0 * 1.0 + 0.0])
    np.testing.assert_allclose(y, H)
    with pytest.raises(ShapeMismatchError):
        LinearInstance(W_p=W, W_a=np.eye(3), x=np.ones(2))


def test_beta_inversion_error_equals_passport_error(rng):
    for _ in range(50):
        d = int(rng.integers(2, 6))
        W = random_well_conditioned(rng, d + 2, d)
        inst = LinearInstance(W_p=W, W_a=np.eye(d + 2), x=rng.standard_normal(d), s_beta_p=rng.uniform(-10, 0, d))
        actual, predicted = bias_inversion_check(inst, rng.uniform(-10, 0, d))
        assert actual == pytest.approx(predicted, abs=1e-8)
    inst = LinearInstance(W_p=np.eye(2), W_a=np.eye(2), x=np.ones(2), s_beta_p=np.array([-1.0, -2.0]))
    assert bias_inversion_check(inst, np.array([-1.0, -2.0]))[0] == pytest.approx(0.0, abs=1e-12)


def test_gamma_inversion_error_respects_lower_bound(rng):
    for _ in range(50):
        W = random_well_conditioned(rng, 3, 3)
        inst = LinearInstance(W_p=W, W_a=np.eye(3), x=rng.standard_normal(3), s_gamma_p=rng.uniform(-10, 0, 3))
        actual, bound = scale_inversion_check(inst, rng.uniform(-10, 0, 3))
        assert actual >= bound - 1e-9
    with pytest.raises(TheoryError):
        scale_inversion_check(LinearInstance(W_p=np.ones((3, 2)), W_a=np.eye(3), x=np.ones(2),
                                          s_gamma_p=np.ones(2)), np.ones(2))


def test_montecarlo_guard_rails(rng):
    inst = LinearInstance(W_p=np.eye(2), W_a=np.eye(2), x=np.zeros(2), s_beta_p=np.array([-1.0, -1.0]))
    with pytest.raises(TheoryError):
        recovery_probability_montecarlo(inst, 0.5, 2.0, trials=999, rng=rng)
    big = LinearInstance(W_p=np.eye(5), W_a=np.eye(5), x=np.zeros(5), s_beta_p=-np.ones(5))
    with pytest.raises(TheoryError):
        recovery_probability_montecarlo(big, 0.5, 2.0, trials=5000, rng=rng)


def test_montecarlo_hits_the_bound_for_a_centred_passport(rng):
    trials = 40_000
    inst = LinearInstance(W_p=np.array([[3.0]]), W_a=np.eye(1), x=np.array([0.7]), s_beta_p=np.array([-1.0]))
    p = recovery_probability_montecarlo(inst, eps=0.25, N=2.0, trials=trials, rng=rng)
    bound = recovery_probability_bound(1, 0.25, 2.0)
    assert bound == pytest.approx(0.25)
    assert abs(p - bound) <= 4.0 / 3.0 * montecarlo_margin(bound, trials)


def test_montecarlo_stays_below_bound(rng):
    for m, N, eps in [(2, 2.0, 0.5), (3, 5.0, 0.5)]:
        W = random_well_conditioned(rng, m, m)
        inst = LinearInstance(W_p=W, W_a=np.eye(m), x=rng.standard_normal(m), s_beta_p=rng.uniform(-N, 0, m))
        p = recovery_probability_montecarlo(inst, eps, N, trials=20_000, rng=rng)
        assert p <= recovery_probability_bound(m, eps, N) + montecarlo_margin(p, 20_000)


def test_attack_training_error_example():
    inst = LabelRecoveryInstance(W_a=np.eye(2), H=[np.ones(2)], passports=[np.array([1.0, 2.0])])
    np.testing.assert_allclose(inst.y[0], [1.0, 2.0])
    assert attack_training_error(inst, np.eye(2)) == pytest.approx(1.0)


def test_two_sample_minimum_equals_label_distance(rng):
    W_a = random_well_conditioned(rng, 3, 3)
    h = rng.standard_normal(3)
    inst = LabelRecoveryInstance(W_a=W_a, H=[h, h], passports=[rng.normal(-5, 1, 3) for _ in range(2)])
    result = label_recovery_check(inst)
    distance = np.linalg.norm(inst.y[0] - inst.y[1])
    assert result.pairwise_bound == pytest.approx(distance)
    assert result.oracle_min_error == pytest.approx(distance, rel=1e-8)


def test_minimum_attack_error_respects_pairwise_bound(rng):
    for _ in range(5):
        n_a = int(rng.integers(2, 6))
        d = int(rng.integers(2, 5))
        h = rng.standard_normal(d)
        inst = LabelRecoveryInstance(W_a=random_well_conditioned(rng, d, d), H=[h] * n_a,
                                     passports=[rng.normal(-5, 1, d) for _ in range(n_a)])
        result = label_recovery_check(inst)
        assert result.oracle_min_error >= result.pairwise_bound - 1e-6
        assert result.iterations > 0


def test_no_linear_attack_head_beats_the_pairwise_bound(rng):
    for _ in range(50):
        n_a = int(rng.integers(2, 6))
        d = int(rng.integers(2, 5))
        h = rng.standard_normal(d)
        inst = LabelRecoveryInstance(W_a=random_well_conditioned(rng, d, d), H=[h] * n_a,
                                     passports=[rng.normal(-5, 1, d) for _ in range(n_a)])
        bound = sum(np.linalg.norm(a - b) for i, a in enumerate(inst.y) for b in inst.y[i + 1:]) / (n_a - 1)
        sol, *_ = np.linalg.lstsq(np.stack(inst.H), np.stack(inst.y), rcond=None)
        assert attack_training_error(inst, sol.T) >= bound - 1e-6
        assert attack_training_error(inst, rng.standard_normal((d, d))) >= bound - 1e-6


def test_identity_head_bound_is_passport_spread(rng):
    passports = [rng.normal(-5, 1, 3) for _ in range(4)]
    inst = LabelRecoveryInstance(W_a=np.eye(3), H=[np.ones(3)] * 4, passports=passports)
    assert label_recovery_check(inst).pairwise_bound == pytest.approx(passport_spread_bound(passports), abs=1e-12)
    assert passport_spread_bound([np.zeros(2), np.array([3.0, 4.0])]) == pytest.approx(5.0)
    with pytest.raises(TheoryError):
        passport_spread_bound([np.zeros(2)])


def test_passport_distance_grows_with_variance(rng):
    trend = passport_distance_trend((0.0, 1.0, 4.0, 16.0), pairs=200, dim=8, N=50.0, rng=rng)
    values = list(trend.values())
    assert values[0] == 0.0
    assert all(a < b for a, b in zip(values, values[1:]))


@pytest.mark.slow
def test_verify_theory_writes_passing_report(tmp_path):
    report = verify_theory(str(tmp_path), seed=0, trials=5000, instances=6)
    assert report["passed"]
    saved = json.loads((tmp_path / "theory_report.json").read_text())
    assert saved["passed"] is True and len(saved["recovery_probability"]) == 8
    text = (tmp_path / "theory_report.txt").read_text()
    assert text == render_text(report) and text.startswith("Theory verification (seed=0): PASS")
