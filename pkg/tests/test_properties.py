"""Property tests for invariants that must hold for all valid inputs."""

import math

import numpy as np
from hypothesis import given, settings, strategies as st

from dppasgd.datasets import Table, normalize_unit_ball
from dppasgd.engine import cumulative_cost
from dppasgd.models import LossKernel, clipped_minibatch_gradient
from dppasgd.planner import (Budgets, bound_F, lr_constraint, max_learning_rate, optimal_sigma,
                             resource_cost, solve)
from dppasgd.privacy import calibrate_sigma, total_epsilon

from conftest import paper_constants

deltas = st.floats(1e-8, 0.1)
budgets = st.builds(Budgets, C_th=st.floats(150, 3000), epsilon_th=st.floats(0.2, 30),
                    delta=st.floats(1e-7, 1e-2))


@given(K=st.integers(1, 10**5), G=st.floats(0.01, 10), X=st.integers(1, 1024),
       eps=st.floats(0.01, 100), delta=deltas)
def test_calibration_round_trip(K, G, X, eps, delta):
    sigma = calibrate_sigma(K, G, X, eps, delta)
    assert math.isclose(total_epsilon(K, G, X, sigma, delta), eps, rel_tol=1e-9)


@given(K=st.integers(1, 5000), G=st.floats(0.1, 5), X=st.integers(1, 512),
       s1=st.floats(0.01, 10), s2=st.floats(0.01, 10), delta=deltas)
def test_epsilon_decreases_with_noise(K, G, X, s1, s2, delta):
    lo, hi = sorted((s1, s2))
    assert total_epsilon(K, G, X, hi, delta) <= total_epsilon(K, G, X, lo, delta)


@given(L=st.floats(0.01, 10), tau=st.integers(1, 200))
def test_max_learning_rate_is_on_the_constraint(L, tau):
    eta = max_learning_rate(L, tau)
    assert math.isclose(lr_constraint(eta, L, tau), 1.0, rel_tol=1e-9)


@given(k=st.integers(0, 10**4), tau=st.integers(1, 100))
def test_cost_at_round_boundaries(k, tau):
    K = k * tau
    assert math.isclose(cumulative_cost(K, tau, 100, 1), resource_cost(K, tau, 100, 1))


@given(b=budgets)
@settings(max_examples=30, deadline=None)
def test_plans_respect_budgets(b):
    plan = solve(paper_constants(), b)
    assert plan.cost <= b.C_th * (1 + 1e-12)
    assert plan.K % plan.tau == 0 and plan.K >= 1
    assert all(math.isclose(e, b.epsilon_th, rel_tol=1e-9) for e in plan.epsilons)
    assert lr_constraint(plan.eta, paper_constants().L, plan.tau) <= 1 + 1e-12


@given(tau=st.integers(1, 50), K=st.integers(1, 900), bump=st.floats(1e-3, 0.5))
def test_bound_increases_with_tau_and_noise(tau, K, bump):
    c = paper_constants()
    eta = 0.5 * max_learning_rate(c.L, 51, c.lam)
    sigma = optimal_sigma(K, c, Budgets())
    F = bound_F(c, eta, tau, K, sigma)
    assert bound_F(c, eta, tau + bump, K, sigma) > F
    assert bound_F(c, eta, tau, K, [s * (1 + bump) for s in sigma]) > F


@given(seed=st.integers(0, 2**31), G=st.floats(0.05, 5), batch=st.integers(1, 32),
       kind=st.sampled_from(["logistic", "svm"]))
@settings(max_examples=50)
def test_neighbouring_batches_within_sensitivity(seed, G, batch, kind):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(batch + 1, 4))
    y = np.where(rng.random(batch + 1) < 0.5, -1.0, 1.0)
    theta = rng.normal(size=4) * 3
    kernel = LossKernel(kind, 0.1)
    a = clipped_minibatch_gradient(kernel, theta, X[:batch], y[:batch], G)
    swapped = np.vstack([X[:batch - 1], X[batch:]])
    b = clipped_minibatch_gradient(kernel, theta, swapped, np.append(y[:batch - 1], y[batch]), G)
    assert np.linalg.norm(a - b) <= 2 * G / batch + 1e-12


@given(rows=st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=20))
def test_normalized_rows_in_unit_ball(rows):
    X = np.array(rows)
    out = normalize_unit_ball(Table(X, np.ones(len(X)), ["a", "b", "c"])).features
    assert np.all(np.linalg.norm(out, axis=1) <= 1 + 1e-12)
