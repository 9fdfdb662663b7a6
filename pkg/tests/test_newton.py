import csv

import numpy as np
import pytest

from ocuflow.forms import PhysicalParams, conduction_state
from ocuflow.newton import (LineSearch, NewtonConfig, NewtonError, NewtonLog, compute_crit, line_search,
                            newton_solve)
from ocuflow.scenario import make_cavity_scenario, make_eye_scenario, make_lid_scenario


class TestCrit:
    def test_equal_increments(self):
        d = [np.ones(3), np.arange(4.0), np.array([2.0])]
        assert compute_crit(d, d) == 1.0

    def test_zero_increments(self):
        d0 = [np.ones(3), np.ones(2), np.ones(1)]
        assert compute_crit([np.zeros(3), np.zeros(2), np.zeros(1)], d0) == 0.0

    def test_maximum_ratio(self):
        d0 = [np.ones(1), np.ones(1), np.ones(1)]
        assert compute_crit([0.1 * np.ones(1), 0.5 * np.ones(1), 0.2 * np.ones(1)], d0) == 0.5

    def test_skips_zero_reference(self):
        d0 = [np.ones(2), np.zeros(2), np.ones(2)]
        assert compute_crit([0.1 * np.ones(2), np.ones(2), 0.3 * np.ones(2)], d0) == pytest.approx(0.3)


class TestLineSearch:
    def test_exact_step_accepted(self):
        # linear residual R(x) = x - 2: the Newton direction zeroes it
        res = line_search(np.array([5.0]), np.array([-3.0]), lambda y: y - 2.0)
        assert res.alpha == 1.0
        assert res.residual_norm == 0.0

    def test_zero_direction_flags_stagnation(self):
        res = line_search(np.array([1.0]), np.zeros(1), lambda y: y**2)
        assert res.alpha == 1.0
        assert res.residual_norm == 1.0
        assert "stagnation" in res.warning

    def test_toy_quadratic_plain(self):
        # R(x) = x^2 from x = 1 along -1.5: R(-0.5) = 0.25 <= 0.9 already at alpha = 1
        res = line_search(np.array([1.0]), np.array([-1.5]), lambda y: y**2, LineSearch(c=0.1, shrink=0.5))
        assert res.alpha == 1.0

    def test_toy_quadratic_refined(self):
        # refinement keeps halving while R drops: R(0.25) = 0.0625 < 0.25, R(0.625) > 0.0625
        ls = LineSearch(c=0.1, shrink=0.5, refine=True)
        res = line_search(np.array([1.0]), np.array([-1.5]), lambda y: y**2, ls)
        assert res.alpha == 0.5
        assert res.residual_norm == pytest.approx(0.0625)

    def test_backtracks_on_overshoot(self):
        # R(x) = x^2 from 1 along -4: R(-3) = 9, R(-1) = 1, R(0) = 0
        res = line_search(np.array([1.0]), np.array([-4.0]), lambda y: y**2, LineSearch(c=0.1))
        assert res.alpha == 0.25

    def test_non_finite_everywhere(self):
        with pytest.raises(NewtonError, match="non-finite"):
            line_search(np.array([1.0]), np.array([1.0]), lambda y: np.array([np.nan]),
                        LineSearch(max_halvings=3))

    def test_max_halvings_warning(self):
        res = line_search(np.array([0.0]), np.array([1.0]), lambda y: 1.0 + y**2, LineSearch(max_halvings=2))
        assert res.alpha == 0.25
        assert "max_halvings" in res.warning

    def test_none_takes_full_step(self):
        res = line_search(np.array([1.0]), np.array([-4.0]), lambda y: y**2, LineSearch(kind="none"))
        assert res.alpha == 1.0

    @pytest.mark.parametrize("kw", [{"kind": "wolfe"}, {"shrink": 1.0}, {"c": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LineSearch(**kw)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"eps_tol": 0.0}, {"max_iters": 0}, {"radiation_jacobian": "lagged"},
                                    {"init": "random"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            NewtonConfig(**kw)


class TestLinearProblems:
    def test_lid_stokes_single_iteration(self):
        spec = make_lid_scenario(4)
        r = newton_solve(spec.build_problem(), cfg=NewtonConfig(init="constant"), solver="table2")
        assert r.converged
        assert r.iterations == 1
        assert r.log.records[0].alpha == 1.0

    def test_no_buoyancy_keeps_rest_and_conduction(self, eye_problem):
        spec = make_eye_scenario(n=1, variant=("stokes", "linearized"), params=PhysicalParams(beta=0.0))
        problem = spec.build_problem()
        r = newton_solve(problem, cfg=NewtonConfig(init="constant"), solver="direct")
        assert r.converged
        assert r.iterations <= 2
        assert np.abs(r.state.u.coeffs).max() == 0.0
        oracle = conduction_state(problem)
        np.testing.assert_allclose(r.state.T.coeffs, oracle.T.coeffs, rtol=0, atol=1e-9)

    def test_already_converged_start(self, eye_problem):
        # a conduction start with beta = 0 is the solution: no iteration is needed
        spec = make_eye_scenario(n=1, params=PhysicalParams(beta=0.0))
        r = newton_solve(spec.build_problem(), solver="direct")
        assert r.converged
        assert r.iterations <= 1


@pytest.fixture(scope="module")
def cavity_run():
    spec = make_cavity_scenario(8, 2.0)
    cfg = NewtonConfig(residual_rtol=0.0, noise_floor=0.0)
    problem = spec.build_problem()
    return problem, newton_solve(problem, cfg=cfg, solver="direct")


class TestNonlinear:
    def test_cavity_converges_with_quadratic_tail(self, cavity_run):
        _, r = cavity_run
        assert r.converged
        c = r.log.crits
        assert c[-1] <= 1e-8
        assert c[-2] < 1e-3
        assert c[-1] <= 10 * c[-2] ** 2

    def test_restart_from_solution(self, cavity_run):
        problem, r = cavity_run
        again = newton_solve(problem, init=r.state, cfg=NewtonConfig(), solver="direct")
        assert again.converged
        assert again.iterations <= 1
        np.testing.assert_allclose(again.state.u.coeffs, r.state.u.coeffs, rtol=0,
                                   atol=1e-8 * np.abs(r.state.u.coeffs).max())

    def test_iterative_tree_matches_direct(self, cavity_run):
        problem, r = cavity_run
        it = newton_solve(problem, cfg=NewtonConfig(residual_rtol=0.0, noise_floor=0.0), solver="table2")
        assert it.converged
        u, ud = it.state.u.coeffs, r.state.u.coeffs
        assert np.linalg.norm(u - ud) <= 1e-6 * np.linalg.norm(ud)

    def test_frozen_radiation_jacobian_converges(self):
        spec = make_eye_scenario(n=1)
        r = newton_solve(spec.build_problem(), cfg=NewtonConfig(radiation_jacobian="frozen"), solver="direct")
        assert r.converged

    def test_max_iters_status(self):
        spec = make_cavity_scenario(8, 2.0)
        r = newton_solve(spec.build_problem(), cfg=NewtonConfig(max_iters=2), solver="direct")
        assert not r.converged
        assert r.status == "max_iters"
        assert r.iterations == 2

    def test_stokes_close_to_navier_stokes_on_eye_slice(self):
        # inertia is negligible at these velocities
        runs = {}
        for flow in ("navier_stokes", "stokes"):
            spec = make_eye_scenario(n=1, variant=(flow, "nonlinear"))
            runs[flow] = newton_solve(spec.build_problem(), solver="direct")
        u_ns, u_s = (runs[f].state.u.coeffs for f in ("navier_stokes", "stokes"))
        assert all(r.converged for r in runs.values())
        assert np.linalg.norm(u_ns - u_s) <= 0.05 * np.linalg.norm(u_ns)


class TestLog:
    def test_csv_columns(self, cavity_run, tmp_path):
        _, r = cavity_run
        path = tmp_path / "log.csv"
        r.log.to_csv(path)
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == NewtonLog.COLUMNS
        assert len(rows) == r.iterations + 1
        assert [int(row[0]) for row in rows[1:]] == list(range(r.iterations))
        assert float(rows[1][1]) == 1.0

    def test_residual_norms_recorded(self, cavity_run):
        _, r = cavity_run
        rec = r.log.records[-1]
        assert rec.r_T < r.log.records[0].r_T
        assert all(rec.linear_converged for rec in r.log.records)
