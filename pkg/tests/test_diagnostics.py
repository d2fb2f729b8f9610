import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agemlab.diagnostics import (
    ControlParams,
    InadmissibleParamsError,
    InsufficientDataError,
    ToyNetwork,
    control_decay_check,
    control_E,
    control_E_rate,
    epsilon_thresholds,
    eta_star_probe,
    gram_matrix_pl,
    jacobian_fd_error,
    lojasiewicz_fit,
    lyapunov_Q,
    pl_constant_estimate,
    rate_bound_check,
    rate_bound_rhs,
    theorem_power_exponent,
    theta_rate_check,
)
from agemlab.dynamics import OdeSystem, initial_state, integrate_rk4
from agemlab.objective import F_value, Objective, make_builtin, root_view
from agemlab.optim import run

MU = 1.0 / 32.0


@pytest.fixture(scope="module")
def sine():
    return root_view(make_builtin("pl_sine"))


def test_lyapunov_Q_examples():
    view = root_view(make_builtin("quadratic"))
    assert lyapunov_Q(view, [1.0], math.sqrt(2), [0.0], 0.1) == pytest.approx(math.sqrt(2))
    assert lyapunov_Q(view, [1.0], math.sqrt(2), [1 / math.sqrt(2)], 0.1) == pytest.approx(1.05 * math.sqrt(2))
    with pytest.raises(ValueError):
        lyapunov_Q(view, [1.0], 0.0, [0.0], 0.1)


def test_epsilon_thresholds_pl_sine():
    F0 = math.sqrt(4 + 3 * math.sin(2.0) ** 2 + 1)
    th = epsilon_thresholds(MU, 8.0, F0, 1.0, 1.0, 0.5)
    assert th.eps1 == pytest.approx(0.25 / (16 * F0), rel=1e-14)
    assert th.eps2 == pytest.approx(1.5 * 0.5 * (F0 + 1 / F0) / (2 * MU * F0), rel=1e-14)
    assert th.min == th.eps1


@settings(max_examples=40)
@given(d=st.floats(0.01, 0.99))
def test_eps1_symmetric_in_delta(d):
    a = epsilon_thresholds(MU, 8.0, 2.0, 1.0, 1.0, d).eps1
    b = epsilon_thresholds(MU, 8.0, 2.0, 1.0, 1.0, 1.0 - d).eps1
    assert a == pytest.approx(b, rel=1e-12)


def test_eps1_degenerates_at_delta_edges():
    small = [epsilon_thresholds(MU, 8.0, 2.0, 1.0, 1.0, d).eps1 for d in (1e-3, 1e-6)]
    assert small[1] < small[0] < 1e-3
    with pytest.raises(ValueError):
        epsilon_thresholds(MU, 8.0, 2.0, 1.0, 1.0, 1.0)


def test_control_E_at_start_and_minimizer(sine):
    F0 = F_value(sine, [2.0])
    p = ControlParams.admissible(0.5, 0.005, MU, 8.0, F0, 1.0, 1.0)
    f0 = float(sine.base.eval(np.array([2.0])))
    assert control_E(sine, [2.0], [0.0], F0, p, 0.0) == pytest.approx(p.a * f0, rel=1e-15)
    assert control_E(sine, [0.0], [0.0], 1.0, p, 0.0) == 0.0


def test_control_E_rate_matches_trajectory_derivative(sine):
    F0 = F_value(sine, [2.0])
    eps = 0.005
    p = ControlParams.admissible(0.5, eps, MU, 8.0, F0, 1.0, 1.0)
    tr = integrate_rk4(OdeSystem("agem_limit", sine, eps=eps), initial_state(sine, [2.0]), 0.02, 1e-5)
    E = [control_E(sine, tr.theta[i], tr.v[i], tr.r[i], p, 0.0) for i in range(len(tr))]
    i = len(tr) // 2
    fd = (E[i + 1] - E[i - 1]) / (tr.time[i + 1] - tr.time[i - 1])
    _, dE, _ = control_E_rate(sine, tr.theta[i], tr.v[i], tr.r[i], p, 0.0)
    assert dE == pytest.approx(fd, rel=1e-4)


@pytest.fixture(scope="module")
def linear_rate_run(sine):
    from agemlab.objective import hessian_max_eig

    L = hessian_max_eig(sine.base, [[-math.pi, math.pi]])
    F0 = F_value(sine, [2.0])
    eps = 0.9 * epsilon_thresholds(MU, L, F0, 1.0, 1.0, 0.5).min
    tr = integrate_rk4(OdeSystem("agem_limit", sine, eps=eps), initial_state(sine, [2.0]), 10.0, eps / 10)
    p = ControlParams.admissible(0.5, eps, MU, L, F0, 1.0, float(tr.r[-1]))
    return tr, p


def test_rate_bound_holds(linear_rate_run):
    tr, p = linear_rate_run
    v = rate_bound_check(tr, p, 0.0)
    assert v.passed and v.min_slack >= 0
    f0 = tr.f[0]
    assert rate_bound_rhs(0.0, p, f0) == pytest.approx(f0 * (1 + 2 * MU * p.eps / (0.5 * 1.5)))
    assert v.slack[0] >= 0


def test_rate_bound_rejects_inadmissible_eps(linear_rate_run):
    tr, p = linear_rate_run
    bad = ControlParams.admissible(0.5, 10 * p.eps, MU, p.L, p.F0, 1.0, p.r_star)
    with pytest.raises(InadmissibleParamsError):
        rate_bound_check(tr, bad, 0.0)
    with pytest.raises(InadmissibleParamsError):
        ControlParams(0.5, 2 * p.a, p.lam, p.eps, MU, p.L, p.r_star, p.F0, 1.0).check()


def test_control_function_decays(linear_rate_run, sine):
    tr, p = linear_rate_run
    v = control_decay_check(tr, sine, p, 0.0)
    assert v.passed
    assert v.min_b >= 0.5
    assert v.envelope_margin >= -1e-6


def test_pl_constant_examples():
    assert pl_constant_estimate(make_builtin("pl_sine"), grid=10_000) >= MU - 1e-9
    assert pl_constant_estimate(make_builtin("quadratic"), grid=10_000) == pytest.approx(2.0, abs=1e-9)
    coarse = pl_constant_estimate(make_builtin("quartic"), [[-1.0, 1.0]], grid=101)
    fine = pl_constant_estimate(make_builtin("quartic"), [[-1.0, 1.0]], grid=10_001)
    # 8 theta^2 at the smallest kept |theta| = 1e-3 (points with f < 1e-12 are skipped)
    assert fine < coarse and fine == pytest.approx(8e-6, rel=1e-9)


def test_pl_constant_needs_fstar():
    obj = Objective("anon", 1, lambda t: t[..., 0] ** 2, lambda t: 2 * t, box=np.array([[-1.0, 1.0]]),
                    batched=True)
    with pytest.raises(ValueError):
        pl_constant_estimate(obj)
    assert pl_constant_estimate(obj, f_star=0.0, grid=11) == pytest.approx(2.0)


@pytest.mark.parametrize("name,theta0,alpha,tol", [("quadratic", [2.0], 0.5, 0.02),
                                                    ("quartic", [1.0], 0.25, 0.02),
                                                    ("pl_sine", [2.0], 0.5, 0.05)])
def test_lojasiewicz_fit(name, theta0, alpha, tol):
    view = root_view(make_builtin(name))
    T = 1000.0 if name == "quartic" else 20.0
    tr = integrate_rk4(OdeSystem("agem_limit", view, eps=0.5), initial_state(view, theta0), T, 0.05)
    fit = lojasiewicz_fit(tr, 0.0)
    assert fit.alpha == pytest.approx(alpha, abs=tol)
    assert fit.n_samples >= 10


def test_lojasiewicz_fit_needs_samples():
    tr = run("agem", make_builtin("quadratic"), [2.0], 0.1, 0.0, budget=3)
    with pytest.raises(InsufficientDataError):
        lojasiewicz_fit(tr, 0.0)


def test_theorem_power_exponent():
    assert theorem_power_exponent(0.25) == pytest.approx(-0.5)
    assert theorem_power_exponent(0.5) is None
    assert theorem_power_exponent(0.75) == pytest.approx(-1.5)
    with pytest.raises(ValueError):
        theorem_power_exponent(1.0)


def test_theta_rate_quadratic_exponential():
    view = root_view(make_builtin("quadratic"))
    tr = integrate_rk4(OdeSystem("agem_limit", view, eps=0.05), initial_state(view, [2.0]), 15.0, 5e-3)
    v = theta_rate_check(tr, [0.0], 0.5)
    assert v.passed and v.fit.model == "exponential"
    assert v.fit.rate_or_exponent > 0 and v.fit.rsq >= 0.99


def test_theta_rate_quartic_power():
    view = root_view(make_builtin("quartic"))
    tr = integrate_rk4(OdeSystem("agem_limit", view, eps=0.5), initial_state(view, [1.0]), 1000.0, 0.05)
    v = theta_rate_check(tr, [0.0], 0.25)
    assert v.passed and v.fit.model == "power"
    assert v.fit.rate_or_exponent <= -0.4
    assert v.theorem_exponent == pytest.approx(-0.5)


def test_theta_rate_vacuous_at_minimizer():
    view = root_view(make_builtin("quadratic"))
    tr = integrate_rk4(OdeSystem("agem_limit", view, eps=0.05), initial_state(view, [0.0]), 1.0, 5e-3)
    v = theta_rate_check(tr, [0.0], 0.5)
    assert v.passed and v.vacuous


def test_theta_rate_exponential_requires_convergence():
    view = root_view(make_builtin("quadratic"))
    tr = integrate_rk4(OdeSystem("agem_limit", view, eps=0.05), initial_state(view, [2.0]), 1.0, 5e-3)
    with pytest.raises(InsufficientDataError):
        theta_rate_check(tr, [0.0], 0.5)


# ---------------------------------------------------------------------------
# Gram matrix


def test_toy_network_jacobian_matches_fd():
    net = ToyNetwork(16)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (5, 1))
    for _ in range(5):
        assert jacobian_fd_error(net, net.random_params(rng), X) <= 1e-6


def test_loss_grad_matches_fd():
    net = ToyNetwork(4, input_dim=2)
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((3, 2)), rng.standard_normal(3)
    th = net.random_params(rng)
    g = net.loss_grad(th, X, y)
    h = 1e-6
    fd = [(net.loss(th + h * e, X, y) - net.loss(th - h * e, X, y)) / (2 * h) for e in np.eye(net.n_params)]
    np.testing.assert_allclose(g, fd, atol=1e-7)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31 - 1))
def test_gram_identity_random_draws(seed):
    rng = np.random.default_rng(seed)
    net = ToyNetwork(16)
    X, y = rng.uniform(-1, 1, (5, 1)), rng.standard_normal(5)
    g = gram_matrix_pl(net, X, y, net.random_params(rng))
    assert g.residual <= 1e-10
    assert g.min_eig >= -1e-10


def test_gram_scalar_and_duplicate_cases():
    net = ToyNetwork(16)
    rng = np.random.default_rng(2)
    th = net.random_params(rng)
    X = np.array([[0.3]])
    g = gram_matrix_pl(net, X, [0.1], th)
    J = net.jacobian(th, X)
    assert g.H.shape == (1, 1) and g.min_eig == pytest.approx((J @ J.T)[0, 0], rel=1e-14)
    g = gram_matrix_pl(net, np.array([[0.3], [0.3], [-0.5]]), [0.1, 0.2, 0.0], th)
    assert abs(g.min_eig) <= 1e-10 * np.abs(g.H).max()
    with pytest.raises(ValueError):
        gram_matrix_pl(net, np.zeros((21, 1)), np.zeros(21), th)


# ---------------------------------------------------------------------------
# step-size probes


def test_eta_probe_quadratic():
    p = eta_star_probe(make_builtin("quadratic"), [1.0], [[-5.0, 5.0]])
    for x in (p.eta1_hat, p.eta2_hat, p.eta3_hat, p.delta_F_hat):
        assert 0 < x < math.inf


def test_eta_probe_empty_sublevel_set():
    with pytest.raises(InsufficientDataError):
        eta_star_probe(make_builtin("quadratic"), [0.0], [[4.0, 5.0]])


def test_eta3_scales_inverse_square_in_r0():
    # with f_b = 4 f_a + 3 and c = 1, F_b = 2 F_a pointwise
    a = make_builtin("quadratic")
    b = Objective("quadratic_x4", 1, lambda t: 4.0 * a.eval(t) + 3.0, lambda t: 4.0 * a.grad(t),
                  shift_c=1.0, known_fstar=3.0, known_minimizers=a.known_minimizers, box=a.box,
                  batched=True)
    pa = eta_star_probe(a, [1.0], grid=401)
    pb = eta_star_probe(b, [1.0], grid=401)
    # r0, F* and L_F all double, so eta3 = 2 F* / (r0^2 L_F) drops by 4
    assert pb.eta3_hat / pa.eta3_hat == pytest.approx(0.25, rel=1e-3)
