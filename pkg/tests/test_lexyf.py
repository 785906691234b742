import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import models
from dsngd.checks import random_class_matrix
from dsngd.exceptions import InteriorityError, SpecError
from dsngd.lexyf import (
    ClassicalParams,
    ExpectationParams,
    GroundTruth,
    ModelSpec,
    NaturalParams,
    classical_to_natural,
    conditional_entropy,
    conditional_table,
    conditional_y_given_x,
    decode_dual,
    expectation_to_natural,
    expected_kl,
    expected_nll,
    h_vector,
    joint_log_prob,
    joint_log_table,
    log_partition,
    natural_to_expectation,
    random_natural,
    sample,
    sample_stream,
    stacked_statistic,
)
from dsngd.geometry import finite_difference_gradient


def enumerate_joint(spec, eta):
    logits = np.array([[stacked_statistic(spec, x, y) @ eta.stacked() for y in range(spec.s)]
                       for x in range(spec.m)])
    P = np.exp(logits)
    return P / P.sum()


# -- spec and value types -------------------------------------------------------

def test_spec_shapes():
    spec = ModelSpec(3, 5)
    assert (spec.a, spec.t, spec.dim) == (2, 4, 2 + 12)
    np.testing.assert_array_equal(spec.S[-1], 0)
    np.testing.assert_array_equal(spec.T[-1], 0)
    onehot = ModelSpec(3, 5, "onehot")
    np.testing.assert_array_equal(onehot.S, np.eye(3))
    assert onehot.dim == 3 + 12 and not onehot.minimal


@pytest.mark.parametrize("kwargs", [
    dict(s=1, m=3), dict(s=3, m=1), dict(s=2.5, m=3), dict(s=3, m=3, class_stat="weird"),
    dict(s=3, m=3, class_stat="custom"),
    dict(s=3, m=3, class_stat="custom", class_matrix=np.ones((3, 2))),
    dict(s=3, m=3, class_stat="custom", class_matrix=np.ones((2, 2))),
])
def test_spec_rejects_bad_input(kwargs):
    with pytest.raises(SpecError):
        ModelSpec(**kwargs)


def test_spec_index_check_and_serialisation():
    spec = ModelSpec(3, 4, "custom", class_matrix=random_class_matrix(3, np.random.default_rng(0)))
    with pytest.raises(IndexError):
        spec.check_index(4, 0)
    with pytest.raises(IndexError):
        spec.check_index(0, 3)
    back = ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    np.testing.assert_array_equal(back.S, spec.S)
    assert (back.s, back.m, back.class_stat) == (3, 4, "custom")


def test_natural_params_validation():
    spec = ModelSpec(2, 3)
    with pytest.raises(SpecError):
        NaturalParams(np.zeros(1), np.zeros((2, 1))).check(spec)
    with pytest.raises(SpecError):
        NaturalParams(np.array([np.inf]), np.zeros((2, 2))).check(spec)
    eta = NaturalParams.from_stacked(spec, np.arange(5.0))
    np.testing.assert_array_equal(eta.beta, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(NaturalParams.from_dict(eta.to_dict()).stacked(), eta.stacked())


def test_ground_truth_validation_and_json(tmp_path):
    with pytest.raises(SpecError):
        GroundTruth(np.array([[0.5, 0.5], [0.0, 0.0]]))
    with pytest.raises(SpecError):
        GroundTruth(np.full((2, 2), 0.3))
    with pytest.raises(SpecError):
        GroundTruth.from_json(json.dumps({"s": 2, "m": 2, "table": [0.5, 0.5]}))
    truth = GroundTruth.random_table(3, 4, np.random.default_rng(1))
    d = json.loads(truth.to_json())
    assert set(d) == {"s", "m", "table"} and (d["s"], d["m"]) == (3, 4)
    # row-major over (x, y)
    assert d["table"][1 * 3 + 2] == truth.table[1, 2]
    truth.save(tmp_path / "t.json")
    np.testing.assert_array_equal(GroundTruth.load(tmp_path / "t.json").table, truth.table)


# -- primal side --------------------------------------------------------------

def test_log_partition_examples():
    for s, m in [(2, 2), (3, 5), (4, 3)]:
        spec = ModelSpec(s, m)
        assert log_partition(spec, NaturalParams.zeros(spec)) == pytest.approx(np.log(s * m), abs=1e-14)
    spec = ModelSpec(2, 2)
    eta = NaturalParams([np.log(3)], np.zeros((2, 1)))
    assert log_partition(spec, eta) == pytest.approx(np.log(8), abs=1e-14)


def test_log_partition_survives_large_parameters():
    spec = ModelSpec(3, 3)
    eta = NaturalParams.from_stacked(spec, np.full(spec.dim, 800.0))
    assert np.isfinite(log_partition(spec, eta))


@given(models(("minimal", "onehot", "custom")), st.floats(0.05, 0.95))
def test_log_partition_convex_along_lines(model, w):
    spec, eta = model
    other = random_natural(spec, np.random.default_rng(7))
    mid = NaturalParams.from_stacked(spec, w * eta.stacked() + (1 - w) * other.stacked())
    assert log_partition(spec, mid) <= w * log_partition(spec, eta) + (1 - w) * log_partition(spec, other) + 1e-12


def test_uniform_examples():
    spec = ModelSpec(2, 2)
    eta = NaturalParams.zeros(spec)
    for x in range(2):
        for y in range(2):
            assert joint_log_prob(spec, eta, x, y) == pytest.approx(-np.log(4))
    np.testing.assert_allclose(h_vector(spec, eta, 0), [-np.log(4), -np.log(4)])
    np.testing.assert_allclose(conditional_y_given_x(ModelSpec(4, 3), NaturalParams.zeros(ModelSpec(4, 3)), 1),
                               np.full(4, 0.25))
    skew = NaturalParams([np.log(3)], np.zeros((2, 1)))
    for x in range(2):
        np.testing.assert_allclose(conditional_y_given_x(spec, skew, x), [0.75, 0.25], atol=1e-15)


def test_joint_log_prob_index_errors():
    spec = ModelSpec(2, 3)
    with pytest.raises(IndexError):
        joint_log_prob(spec, NaturalParams.zeros(spec), 3, 0)
    with pytest.raises(IndexError):
        h_vector(spec, NaturalParams.zeros(spec), -1)


@given(models(("minimal", "onehot", "custom")))
def test_enumeration_identities(model):
    spec, eta = model
    P = np.exp(joint_log_table(spec, eta))
    assert abs(P.sum() - 1) <= 1e-12
    assert abs(sum(np.exp(h_vector(spec, eta, x)).sum() for x in range(spec.m)) - 1) <= 1e-12
    # P(x, y) = P(y) P(x | y)
    py = P.sum(axis=0)
    assert np.max(np.abs(P - py * (P / py))) <= 1e-12
    lam = log_partition(spec, eta)
    C = conditional_table(spec, eta)
    for x in range(spec.m):
        cond = conditional_y_given_x(spec, eta, x)
        assert abs(cond.sum() - 1) <= 1e-12 and np.all(cond > 0)
        np.testing.assert_allclose(cond, P[x] / P[x].sum(), atol=1e-12)
        np.testing.assert_allclose(C[x], cond, atol=1e-15)
        for y in range(spec.s):
            lin = stacked_statistic(spec, x, y) @ eta.stacked() - lam
            assert abs(joint_log_prob(spec, eta, x, y) - lin) <= 1e-12
    np.testing.assert_allclose(P, enumerate_joint(spec, eta), atol=1e-14)


def test_stacked_statistic_examples():
    spec = ModelSpec(2, 2)
    np.testing.assert_array_equal(stacked_statistic(spec, 0, 0), [1, 1, 0])
    np.testing.assert_array_equal(stacked_statistic(spec, 1, 1), [0, 0, 0])
    assert len(stacked_statistic(ModelSpec(3, 4), 0, 0)) == 2 + 3 * 3


# -- dual side ------------------------------------------------------------------

def test_natural_to_expectation_examples():
    spec = ModelSpec(2, 2)
    es = natural_to_expectation(spec, NaturalParams.zeros(spec))
    np.testing.assert_allclose(es.stacked(), [0.5, 0.25, 0.25], atol=1e-15)
    onehot = ModelSpec(3, 2, "onehot")
    np.testing.assert_allclose(natural_to_expectation(onehot, NaturalParams.zeros(onehot)).alpha_star,
                               np.full(3, 1 / 3), atol=1e-15)


@given(models(("minimal", "onehot", "custom")))
def test_expectation_is_mean_statistic_and_fd_gradient(model):
    spec, eta = model
    P = np.exp(joint_log_table(spec, eta))
    mean = sum(P[x, y] * stacked_statistic(spec, x, y) for x in range(spec.m) for y in range(spec.s))
    es = natural_to_expectation(spec, eta).stacked()
    assert np.max(np.abs(es - mean)) <= 1e-12
    fd = finite_difference_gradient(lambda v: log_partition(spec, NaturalParams.from_stacked(spec, v)),
                                    eta.stacked())
    assert np.max(np.abs(es - fd)) <= 1e-6


def test_expectation_to_natural_examples():
    spec = ModelSpec(2, 2)
    np.testing.assert_allclose(
        expectation_to_natural(spec, ExpectationParams.from_stacked(spec, [0.5, 0.25, 0.25])).stacked(),
        0, atol=1e-14)
    es = ExpectationParams.from_stacked(spec, [0.75, 0.375, 0.125])
    pi, theta, rest, n = decode_dual(spec, es)
    np.testing.assert_allclose(pi, [0.75, 0.25])
    np.testing.assert_allclose(theta[:, 0], [0.5, 0.5])
    assert n == 0
    back = natural_to_expectation(spec, expectation_to_natural(spec, es))
    np.testing.assert_allclose(back.stacked(), es.stacked(), atol=1e-14)


@given(models(("minimal", "custom")))
def test_roundtrip_minimal(model):
    spec, eta = model
    back = expectation_to_natural(spec, natural_to_expectation(spec, eta), strict=True)
    assert np.max(np.abs(back.stacked() - eta.stacked())) <= 1e-8


@given(models(("onehot",)))
def test_roundtrip_onehot(model):
    # one-hot natural parameters are only determined up to a common shift of alpha
    spec, eta = model
    back = expectation_to_natural(spec, natural_to_expectation(spec, eta), strict=True)
    shift = back.alpha - eta.alpha
    assert np.ptp(shift) <= 1e-8
    assert np.max(np.abs(back.beta - eta.beta)) <= 1e-8
    np.testing.assert_allclose(joint_log_table(spec, back), joint_log_table(spec, eta), atol=1e-8)


@given(models(("minimal", "custom")))
def test_class_probabilities_from_alpha_star(model):
    spec, eta = model
    es = natural_to_expectation(spec, eta)
    py = np.exp(joint_log_table(spec, eta)).sum(axis=0)
    head = spec.M_inv @ (es.alpha_star - spec.S[-1])
    assert np.max(np.abs(head - py[:-1])) <= 1e-10
    if spec.class_stat == "minimal":
        # the reference statistic is zero, so this is just S_M^{-1} alpha*
        S_M_inv = np.linalg.inv(spec.S_M)
        assert np.max(np.abs(S_M_inv @ es.alpha_star - S_M_inv @ spec.S[-1] - py[:-1])) <= 1e-10


def test_decode_clamps_or_raises():
    spec = ModelSpec(2, 3)
    bad = ExpectationParams.from_stacked(spec, [1.2, 0.5, 0.1, 0.0, 0.0])
    with pytest.raises(InteriorityError):
        decode_dual(spec, bad, strict=True)
    pi, theta, rest, n = decode_dual(spec, bad)
    assert n > 0
    assert np.all(pi > 0) and abs(pi.sum() - 1) < 1e-12
    assert np.all(theta >= 1e-8) and np.all(rest >= 1e-8 * 0.99)


@given(models(("minimal", "custom"), sizes=(2, 3, 4)), st.integers(0, 2**32 - 1))
def test_classical_to_natural_matches_enumeration(model, seed):
    spec, _ = model
    rng = np.random.default_rng(seed)
    c = ClassicalParams(rng.uniform(-2, 2, spec.s - 1), rng.uniform(-2, 2, (spec.s, spec.t)))
    P = np.exp(joint_log_table(spec, classical_to_natural(spec, c)))
    logit_y = spec.S @ c.alpha_bar
    py = np.exp(logit_y - logit_y.max())
    py /= py.sum()
    assert np.max(np.abs(P.sum(axis=0) - py)) <= 1e-10
    lx = spec.T @ c.theta_bar.T  # (m, s)
    px_y = np.exp(lx) / np.exp(lx).sum(axis=0)
    assert np.max(np.abs(P / P.sum(axis=0) - px_y)) <= 1e-10


def test_classical_zero_theta_keeps_alpha():
    spec = ModelSpec(3, 4)
    c = ClassicalParams([0.3, -0.2], np.zeros((3, 3)))
    np.testing.assert_allclose(classical_to_natural(spec, c).alpha, [0.3, -0.2], atol=1e-14)


# -- objectives and sampling -----------------------------------------------------

def test_objective_examples():
    for s, m in [(2, 2), (3, 4)]:
        spec = ModelSpec(s, m)
        truth = GroundTruth(np.full((m, s), 1 / (m * s)))
        eta = NaturalParams.zeros(spec)
        assert expected_nll(spec, eta, truth) == pytest.approx(np.log(s), abs=1e-14)
        assert expected_kl(spec, eta, truth) == pytest.approx(0, abs=1e-15)


@given(models(sizes=(2, 3, 4)))
def test_kl_zero_and_minimum_at_generating_parameters(model):
    spec, eta = model
    truth = GroundTruth.from_model(spec, eta)
    assert expected_kl(spec, eta, truth) <= 1e-12
    rng = np.random.default_rng(0)
    base = expected_nll(spec, eta, truth)
    for _ in range(50):
        other = NaturalParams.from_stacked(spec, eta.stacked() + rng.normal(0, 0.3, spec.dim))
        assert expected_nll(spec, other, truth) >= base - 1e-12
        assert expected_kl(spec, other, truth) >= 0


def test_nll_minus_kl_is_conditional_entropy(rng):
    spec = ModelSpec(3, 4)
    truth = GroundTruth.random_table(3, 4, rng)
    gaps = [expected_nll(spec, e, truth) - expected_kl(spec, e, truth)
            for e in (random_natural(spec, rng) for _ in range(10))]
    assert np.var(gaps) <= 1e-10
    assert np.mean(gaps) == pytest.approx(conditional_entropy(truth), abs=1e-12)


def test_expected_nll_matches_monte_carlo(rng):
    spec = ModelSpec(3, 4)
    truth = GroundTruth.random_table(3, 4, rng)
    eta = random_natural(spec, rng)
    xs, ys = sample_stream(truth, 10**6, rng)
    logc = np.log(conditional_table(spec, eta))[xs, ys]
    se = logc.std() / np.sqrt(len(logc))
    assert abs(-logc.mean() - expected_nll(spec, eta, truth)) <= 3 * se


def test_sampling():
    delta = 1e-15
    table = np.full((2, 2), delta)
    table[0, 0] = 1 - 3 * delta
    xs, ys = sample_stream(GroundTruth(table), 10000, np.random.default_rng(0))
    assert np.all(xs == 0) and np.all(ys == 0)

    uniform = GroundTruth(np.full((2, 2), 0.25))
    xs, ys = sample_stream(uniform, 10**6, np.random.default_rng(1))
    freq = np.bincount(xs * 2 + ys, minlength=4) / 10**6
    assert np.all(np.abs(freq - 0.25) <= 0.002)

    a = sample_stream(uniform, 100, np.random.default_rng(5))
    b = sample_stream(uniform, 100, np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])

    spec = ModelSpec(3, 3)
    x, y = sample((spec, random_natural(spec, np.random.default_rng(2))), np.random.default_rng(3))
    assert 0 <= x < 3 and 0 <= y < 3


def test_sampling_from_model_matches_table():
    spec = ModelSpec(2, 3)
    eta = random_natural(spec, np.random.default_rng(4))
    xs, ys = sample_stream((spec, eta), 200000, np.random.default_rng(6))
    freq = np.bincount(xs * 2 + ys, minlength=6) / 200000
    P = np.exp(joint_log_table(spec, eta)).ravel()
    assert np.all(np.abs(freq - P) <= 6 * np.sqrt(P * (1 - P) / 200000))
