from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaprom.adjoint import (CountingObjective, NondifferentiablePointError, ObjectiveSpec,
                             OptimizerConfig, OutsideDomainError, dR_dy, evaluate_objective,
                             finite_difference_gradient, lk_norm, minimize_box,
                             objective_and_gradient, optimize, optimize_finite_difference)
from adaprom.mor import ReducedSystem
from adaprom.sbr import Normalization, SbrConfig, fit_operator_surrogate, thompson_draw
from test_sbr import _samples


@pytest.mark.parametrize("k", [1.0, 2.0, 7.5, 200.0])
def test_lk_norm_matches_direct_formula(k):
    m = np.array([0.3, 1.2, 0.7, 2.0])
    assert lk_norm(m, k) == pytest.approx(np.sum(m ** k) ** (1 / k), rel=1e-13)


def test_lk_norm_limits_and_overflow():
    m = np.array([1e200, 3e200])
    assert lk_norm(m, 50.0) == pytest.approx(3e200, rel=1e-6)
    assert lk_norm(m, np.inf) == 3e200
    assert lk_norm(np.zeros(3), 2.0) == 0.0
    # larger k moves the norm towards the peak value
    m = np.array([1.0, 0.5, 0.2])
    assert lk_norm(m, 1) > lk_norm(m, 2) > lk_norm(m, 20) > 1.0


def test_objective_spec_validation():
    assert len(ObjectiveSpec(50, 100).grid) == 51
    with pytest.raises(ValueError):
        ObjectiveSpec(100, 50)
    with pytest.raises(ValueError):
        ObjectiveSpec(50, 100, k=0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.complex_numbers(min_magnitude=0.1, max_magnitude=10), min_size=1, max_size=6),
       st.floats(1.0, 8.0))
def test_wirtinger_coefficients_give_the_magnitude_derivative(y, k):
    # d R = 2 Re[sum c_i dy_i] for any complex perturbation dy
    y = np.array(y)
    c = dR_dy(y, k)
    rng = np.random.default_rng(len(y))
    dy = rng.normal(size=y.size) + 1j * rng.normal(size=y.size)
    h = 1e-7
    fd = (lk_norm(np.abs(y + h * dy), k) - lk_norm(np.abs(y - h * dy), k)) / (2 * h)
    assert 2 * np.real(c @ dy) == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_vanishing_output_is_nondifferentiable():
    with pytest.raises(NondifferentiablePointError):
        dR_dy(np.array([1.0, 0.0]), 1.0)
    rom = ReducedSystem(M=np.eye(2), C=np.eye(2), K=np.eye(2), f=np.ones(2), g=np.zeros(2))
    with pytest.raises(NondifferentiablePointError):
        evaluate_objective(rom, ObjectiveSpec(1, 2))


@pytest.fixture(scope="module")
def surrogate():
    samples, nrm = _samples(r=3, n=10, seed=4)
    return fit_operator_surrogate(samples, nrm, SbrConfig())


@pytest.mark.parametrize("k,log", [(1.0, True), (1.0, False), (4.0, True)])
def test_adjoint_gradient_matches_finite_differences(surrogate, k, log):
    spec = ObjectiveSpec(0.1, 0.6, k=k, n_points=11, log_objective=log)
    draw = thompson_draw(surrogate, seed=3)
    nrm = surrogate.normalization
    for u in ([0.3, 0.6], [0.8, 0.2]):
        p = nrm.from_unit(u)
        value, grad = objective_and_gradient(draw, p, spec)
        fun = lambda q: objective_and_gradient(draw, q, spec)[0]  # noqa: E731
        fd = finite_difference_gradient(fun, p, 1e-6 * nrm.width)
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-8 * np.abs(fd).max())


def test_flipped_derivative_gives_opposite_gradient(surrogate):
    spec = ObjectiveSpec(0.1, 0.6, n_points=5)
    draw = thompson_draw(surrogate, seed=1)
    p = surrogate.normalization.from_unit([0.4, 0.4])
    g = objective_and_gradient(draw, p, spec)[1]
    assert np.allclose(objective_and_gradient(draw, p, spec, _flip_derivative=True)[1], -g)


def test_gradient_outside_box_is_rejected(surrogate):
    draw = surrogate.mean_draw()
    with pytest.raises(OutsideDomainError):
        objective_and_gradient(draw, surrogate.normalization.hi + 1e-3,
                               ObjectiveSpec(0.1, 0.6, n_points=3))


def test_workspace_holds_adjoint_vectors(surrogate):
    spec = ObjectiveSpec(0.1, 0.6, n_points=4)
    draw = thompson_draw(surrogate, seed=2)
    p = surrogate.normalization.from_unit([0.5, 0.5])
    _, _, total, ws = objective_and_gradient(draw, p, spec, return_workspace=True)
    rom = draw(p)
    for i, s in enumerate(total.s):
        Kt = rom.K + s * rom.C + s * s * rom.M
        assert np.allclose(Kt.T @ ws.eta[i], dR_dy(total.y, 1.0)[i] * rom.g)
    assert ws.pseudo_load.shape == (2, 4, 3)


def test_box_finite_differences_stay_inside_bounds():
    seen = []
    fun = CountingObjective(lambda p: seen.append(p.copy()) or float(p @ p))
    g = finite_difference_gradient(fun, np.array([0.0, 0.5]), 0.1, lower=[0, 0], upper=[1, 1])
    assert fun.count == 4
    assert np.all(np.array(seen) >= 0)
    assert g == pytest.approx([0.1, 1.0])


def _quadratic(center, scale=(1.0, 10.0)):
    c, w = np.asarray(center), np.asarray(scale)
    return lambda x: (float(np.sum(w * (x - c) ** 2)), 2 * w * (x - c))


@pytest.mark.parametrize("center,expected", [([0.3, 0.7], [0.3, 0.7]),
                                             ([1.4, 0.5], [1.0, 0.5]),
                                             ([-0.2, 1.3], [0.0, 1.0])])
def test_projected_bfgs_finds_box_constrained_minimum(center, expected):
    x, f, g, conv, msg, it, trace = minimize_box(_quadratic(center), [0.5, 0.1])
    assert conv, msg
    assert np.allclose(x, expected, atol=1e-7)
    assert all(b["f"] <= a["f"] for a, b in zip(trace, trace[1:]))


def test_optimizer_survives_failing_trial_points():
    def fun_grad(x):
        if x[0] > 0.8:
            raise NondifferentiablePointError("hole")
        return _quadratic([0.6, 0.4])(x)
    x = minimize_box(fun_grad, [0.0, 0.0])[0]
    assert np.allclose(x, [0.6, 0.4], atol=1e-6)


def test_surrogate_optimizer_reports_raw_parameters(surrogate):
    spec = ObjectiveSpec(0.1, 0.6, n_points=6)
    draw = thompson_draw(surrogate, seed=9)
    res = optimize(draw, spec, OptimizerConfig(n_starts=2), seed=1)
    nrm = surrogate.normalization
    assert nrm.contains(res.p)
    assert res.n_objective == res.n_gradient >= res.iterations
    assert res.trace[-1]["p"] == pytest.approx(list(res.p))
    again = optimize(draw, spec, OptimizerConfig(n_starts=2), seed=1)
    assert np.array_equal(res.p, again.p)


def test_finite_difference_optimizer_counts_every_evaluation():
    nrm = Normalization([0.0, 0.0], [2.0, 4.0])
    fun = lambda p: float((p[0] - 1.2) ** 2 + 0.1 * (p[1] - 3.0) ** 2)  # noqa: E731
    res = optimize_finite_difference(fun, nrm, x0=[0.5, 0.5])
    assert np.allclose(res.p, [1.2, 3.0], atol=1e-5)
    # one value plus 2 d evaluations per gradient, plus rejected trial points
    assert res.n_objective >= (1 + 2 * nrm.d) * res.n_gradient


def _scalar_stiffness_draw():
    """Surrogate with K(p) = p on [1, 3], no mass or damping, unit input and output."""
    from adaprom.sbr import OperatorSurrogate, PolynomialBasis
    mean = np.zeros((3, 1, 2))
    mean[0, 0] = [1.0, 2.0]  # K = 1 + 2u with u = (p - 1) / 2
    sur = OperatorSurrogate(basis=PolynomialBasis(1, 1), normalization=Normalization([1.0], [3.0]),
                            r=1, f_r=np.ones(1), g_r=np.ones(1), mean=mean,
                            covariance=np.zeros((3, 1, 2, 2)))
    return sur.mean_draw()


def test_static_scalar_gradient_is_analytic():
    draw = _scalar_stiffness_draw()
    raw = ObjectiveSpec(0.0, 0.0, n_points=1, log_objective=False)
    value, grad = objective_and_gradient(draw, [2.0], raw)
    assert value == pytest.approx(0.5) and grad[0] == pytest.approx(-0.25, rel=1e-12)
    value, grad = objective_and_gradient(draw, [2.0], replace(raw, log_objective=True))
    assert value == pytest.approx(np.log(0.5)) and grad[0] == pytest.approx(-0.5, rel=1e-12)


def test_log_gradient_is_the_scaled_raw_gradient(surrogate):
    spec = ObjectiveSpec(0.1, 0.6, k=3.0, n_points=7, log_objective=False)
    draw = thompson_draw(surrogate, seed=6)
    p = surrogate.normalization.from_unit([0.35, 0.65])
    R, g_raw = objective_and_gradient(draw, p, spec)
    _, g_log = objective_and_gradient(draw, p, replace(spec, log_objective=True))
    assert np.allclose(g_log, g_raw / R, rtol=1e-12, atol=0)


def test_wirtinger_coefficient_examples():
    assert dR_dy(np.array([3 + 4j]), 1.0)[0] == pytest.approx(0.5 * (3 - 4j) / 5)
    c = dR_dy(np.array([3.0, 3j]), 2.0)
    assert abs(c[0]) == pytest.approx(abs(c[1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=40), st.floats(1.0, 50.0))
def test_lk_norm_is_bracketed_by_the_peak(mags, k):
    m = np.array(mags)
    R = lk_norm(m, k)
    assert m.max() * (1 - 1e-12) <= R <= len(m) ** (1 / k) * m.max() * (1 + 1e-12)


def test_two_equal_outputs():
    assert lk_norm([3.0, 3.0], 1) == pytest.approx(6.0)
    assert lk_norm([3.0, 3.0], 2) == pytest.approx(3 * np.sqrt(2))


def test_interior_quadratic_converges_quickly():
    x, f, g, conv, msg, it, trace = minimize_box(_quadratic([0.42, 0.58], (1.0, 100.0)),
                                                 [0.9, 0.1])
    assert conv and it <= 50
    assert np.allclose(x, [0.42, 0.58], atol=1e-6)


def test_finite_difference_costs_two_evaluations_per_parameter():
    fun = CountingObjective(lambda p: float(3 * p[0] - 2 * p[1] + p[2]))
    g = finite_difference_gradient(fun, np.array([0.1, 0.2, 0.3]), 0.5)
    assert fun.count == 6 and np.allclose(g, [3, -2, 1], rtol=1e-14)
