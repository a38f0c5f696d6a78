from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from hybridmp import LQSpec, NonConvergence, TimeGrid
from hybridmp.adjoint import PolyBasis
from hybridmp.lq import (
    PiecewisePolyPolicy,
    default_spec,
    full_observation_baseline,
    lq_control_formula,
    riccati_backward,
    riccati_cost,
    solve_lq,
)


@pytest.fixture(scope="module")
def solved(lq):
    grid = TimeGrid(1.0, 100)
    return grid, solve_lq(lq, grid, n_paths=1024, seed=3, keep_paths=True)


class TestControlFormula:
    def test_zero_adjoint_is_zero_control(self, lq):
        u = lq_control_formula(lq, 0.7, 0.4, 0.0, 0.0)
        assert u == pytest.approx(0.0, abs=1e-15)

    def test_hand_point(self, lq):
        # p=1/2: bbar=0.75, Rbar=1.5, gain term 0.3*0.5*0.25/0.3=0.125
        u = lq_control_formula(lq, 0.0, 0.5, 1.0, 0.3)
        assert u == pytest.approx(-(0.75 + 0.125) / 1.5, abs=1e-12)

    def test_respects_control_domain(self, lq):
        import dataclasses

        bounded = dataclasses.replace(lq, control_domain=(-0.2, 0.2))
        u = lq_control_formula(bounded, 0.0, 0.5, 5.0, 0.0)
        assert u == pytest.approx(-0.2)


class TestRiccati:
    def test_terminal_values(self, lq):
        K, c = riccati_backward(lq, TimeGrid(1.0, 50))
        assert np.allclose(K[-1], lq.G)
        assert np.allclose(c[-1], 0.0)

    def test_uncontrolled_constant_case_is_exact(self):
        # a=b=0, no switching, Q=0: K stays at G and c integrates
        # sigma^2 G/2, so J = G/2 (x0^2 + sigma^2 T)
        hand = LQSpec(a=(0.0, 0.0), b=(0.0, 0.0), sigma=0.4, Q=(0.0, 0.0),
                      R=(1.0, 1.0), G=(2.0, 2.0), lambda1=0.0, lambda2=0.0,
                      horizon=1.5, x0=1.2, pi0=1.0)
        K, c = riccati_backward(hand, TimeGrid(1.5, 300))
        exact = 0.5 * 2.0 * (1.2**2 + 0.4**2 * 1.5)
        assert riccati_cost(hand, K, c) == pytest.approx(exact, abs=1e-12)

    def test_regime_free_matches_ivp_oracle(self, regime_free):
        grid = TimeGrid(1.0, 250)
        K, c = riccati_backward(regime_free, grid)
        a, b = regime_free.a[0], regime_free.b[0]
        q, r, g = regime_free.Q[0], regime_free.R[0], regime_free.G[0]
        sig = regime_free.sigma

        def rhs(t, y):
            return [-(2 * a * y[0] + q - y[0] ** 2 * b**2 / r),
                    -0.5 * sig**2 * y[0]]

        sol = solve_ivp(rhs, [1.0, 0.0], [g, 0.0], rtol=1e-10, atol=1e-12)
        assert abs(K[0, 0] - sol.y[0, -1]) <= 1e-8
        assert abs(c[0, 0] - sol.y[1, -1]) <= 1e-8
        # regimes are interchangeable here
        assert np.allclose(K[:, 0], K[:, 1], atol=1e-12)

    def test_full_observation_baseline_single_regime(self):
        # lambda=0 and pi0=1: the chain never leaves regime 1, so the
        # Monte Carlo side must match the scalar analytic cost
        single = LQSpec(a=(0.5, 0.0), b=(1.0, 1.0), sigma=0.3, Q=(1.0, 1.0),
                        R=(1.0, 1.0), G=(1.0, 1.0), lambda1=0.0,
                        lambda2=0.0, horizon=1.0, x0=1.0, pi0=1.0)
        grid = TimeGrid(1.0, 500)
        est, analytic = full_observation_baseline(single, grid, 20_000, 7)
        assert abs(est.mean - analytic) <= 3.0 * est.std_error + 2.0 * grid.dt


class TestPiecewisePolicy:
    def test_recovers_polynomial_feedback(self, rng):
        grid = TimeGrid(1.0, 4)
        n = 500
        states = np.repeat(rng.normal(0.0, 1.0, (n, 1)), 5, axis=1)
        probs = np.repeat(rng.uniform(0.1, 0.9, (n, 1))[:, :, None],
                          5, axis=1).repeat(2, axis=2)
        x, p = states[:, 0], probs[:, 0, 0]
        u = 0.4 - 1.1 * x + 0.6 * x * p - 0.2 * p**3
        controls = np.repeat(u[:, None], 4, axis=1)
        policy = PiecewisePolyPolicy.fit(grid, states, probs, controls)
        got = policy(0.3, x, p)
        assert np.max(np.abs(got - u)) <= 1e-8
        assert policy.fit_max_residual <= 1e-8

    def test_clips_to_training_envelope(self, rng):
        grid = TimeGrid(1.0, 2)
        n = 200
        states = rng.normal(0.0, 1.0, (n, 3))
        probs = rng.uniform(0.3, 0.7, (n, 3, 1)).repeat(2, axis=2)
        controls = rng.normal(0.0, 1.0, (n, 2))
        policy = PiecewisePolyPolicy.fit(grid, states, probs, controls)
        far = policy(0.0, np.array([1e6]), np.array([0.5]))
        lo, hi = policy.u_range[0]
        assert lo <= far[0] <= hi


class TestSolveLq:
    def test_converges_with_certificate(self, lq, solved):
        grid, sol = solved
        assert sol.converged
        assert sol.iterations <= 30
        assert sol.cost.mean == pytest.approx(0.80, abs=0.05)
        ratio = sol.residual["residual"] / sol.trace[0]["residual"]
        assert ratio <= 1e-2

    def test_trace_costs_never_increase_beyond_noise(self, solved):
        _, sol = solved
        costs = [row["cost"] for row in sol.trace]
        ses = [row["cost_se"] for row in sol.trace]
        for i in range(len(costs) - 1):
            slack = 3.0 * math.hypot(ses[i], ses[i + 1])
            assert costs[i + 1] <= costs[i] + slack

    def test_trace_row_contract(self, solved):
        _, sol = solved
        assert sorted(sol.trace[0]) == ["cost", "cost_se", "fit_residual",
                                        "iteration", "r2_min", "residual",
                                        "sup_change"]
        assert [row["iteration"] for row in sol.trace] == \
            list(range(1, len(sol.trace) + 1))

    def test_policy_tracks_stationary_formula(self, lq, solved):
        # the fitted feedback surface must agree with the explicit
        # stationary control evaluated with the fitted adjoint
        grid, sol = solved
        path, adj = sol.path, sol.adjoint
        scale = max(1.0, float(np.max(np.abs(path.controls))))
        worst = 0.0
        for k in range(grid.n_steps):
            x = path.states[:, k]
            p = path.probs[:, k, 0]
            upol = sol.policy(grid.times[k], x, p)
            uform = lq_control_formula(lq, x, p, adj.phi_pred[:, k, 0],
                                       adj.lam[:, k, 1])
            worst = max(worst, float(np.max(np.abs(upol - uform))))
        assert worst <= 0.05 * scale

    def test_zero_cost_weights_give_zero_control(self):
        flat = LQSpec(a=(0.5, -0.5), b=(1.0, 0.5), sigma=0.3, Q=(0.0, 0.0),
                      R=(1.0, 2.0), G=(0.0, 0.0), lambda1=1.0, lambda2=1.0,
                      horizon=1.0, x0=1.0, pi0=0.5)
        sol = solve_lq(flat, TimeGrid(1.0, 50), n_paths=512, seed=1)
        assert sol.converged
        assert abs(sol.cost.mean) <= 1e-10

    def test_nonconvergence_carries_best_iterate(self, lq):
        with pytest.raises(NonConvergence) as exc:
            solve_lq(lq, TimeGrid(1.0, 60), n_paths=512, seed=1, max_iter=2)
        sol = exc.value.solution
        assert not sol.converged
        assert sol.iterations == 2
        assert len(sol.trace) == 2

    def test_label_swap_symmetry(self, lq):
        # relabeling the regimes and mirroring pi0 is a pathwise
        # symmetry of the innovation system, so the solve must land on
        # the same cost (the polynomial basis is closed under p -> 1-p)
        swapped = LQSpec(a=(lq.a[1], lq.a[0]), b=(lq.b[1], lq.b[0]),
                         sigma=lq.sigma, Q=(lq.Q[1], lq.Q[0]),
                         R=(lq.R[1], lq.R[0]), G=(lq.G[1], lq.G[0]),
                         lambda1=lq.lambda2, lambda2=lq.lambda1,
                         horizon=lq.horizon, x0=lq.x0, pi0=1.0 - lq.pi0)
        grid = TimeGrid(1.0, 60)
        s1 = solve_lq(lq, grid, n_paths=640, seed=3, max_iter=40)
        s2 = solve_lq(swapped, grid, n_paths=640, seed=3, max_iter=40)
        se = math.hypot(s1.cost.std_error, s2.cost.std_error)
        assert abs(s1.cost.mean - s2.cost.mean) <= 3.0 * se

    def test_physical_forward_mode(self, lq):
        sol = solve_lq(lq, TimeGrid(1.0, 60), n_paths=640, seed=3,
                       max_iter=40, forward_mode="physical")
        assert sol.converged
        assert sol.cost.mean == pytest.approx(0.79, abs=0.06)

    def test_quadratic_basis_still_converges(self, lq):
        sol = solve_lq(lq, TimeGrid(1.0, 50), n_paths=512, seed=2,
                       basis=PolyBasis(2))
        assert sol.converged
        assert sol.cost.mean == pytest.approx(0.80, abs=0.06)

    def test_default_spec_constants(self):
        lq = default_spec()
        assert lq.a == (0.5, -0.5)
        assert lq.b == (1.0, 0.5)
        assert lq.sigma == 0.3
        assert lq.pi0 == 0.5
