from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ocuflow.forms import build_newton_system, conduction_state
from ocuflow.krylov import (PRESETS, BlockOperators, SolverError, SolverNode, amg_build, cg, export_matrix_market,
                            fgmres, gmres, preset, project_nullspace, solve_block_system)
from ocuflow.newton import block_operators


def poisson_1d(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def poisson_2d(n):
    """P1 Laplacian on the structured right-triangle mesh: the 5-point stencil on interior nodes."""
    T = poisson_1d(n)
    eye = sp.identity(n)
    return (sp.kron(T, eye) + sp.kron(eye, T)).tocsr()


class TestGMRES:
    def test_identity(self, rng):
        b = rng.standard_normal(10)
        x, rep = gmres(sp.identity(10), b)
        assert rep.iterations == 1
        np.testing.assert_allclose(x, b, rtol=1e-14)

    def test_two_by_two(self):
        x, rep = gmres(np.array([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]), tol=1e-14)
        assert rep.converged
        np.testing.assert_allclose(x, (1 / 11, 7 / 11), rtol=1e-13)

    def test_random_spd(self, rng):
        M = rng.standard_normal((50, 50))
        A = M @ M.T + 50 * np.eye(50)
        b = rng.standard_normal(50)
        x, rep = gmres(A, b, tol=1e-10)
        assert rep.converged
        np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=0, atol=1e-8 * np.abs(x).max())

    def test_true_residual_reported(self, rng):
        A = poisson_1d(40)
        b = rng.standard_normal(40)
        x, rep = gmres(A, b, tol=1e-9)
        assert rep.residual_norm == pytest.approx(np.linalg.norm(b - A @ x), rel=1e-12)
        assert rep.relative_residual <= 1e-9

    def test_non_convergence_is_reported_not_raised(self, rng):
        x, rep = gmres(poisson_1d(200), rng.standard_normal(200), tol=1e-12, restart=5, maxit=10)
        assert not rep.converged
        assert rep.iterations == 10

    def test_zero_rhs(self):
        x, rep = gmres(poisson_1d(5), np.zeros(5))
        assert rep.converged
        assert np.all(x == 0)

    def test_fgmres_matches_gmres_with_stationary_pc(self, rng):
        A = poisson_1d(60) + sp.diags(rng.uniform(0, 1, 60))
        b = rng.standard_normal(60)
        d = 1.0 / A.diagonal()
        x1, r1 = gmres(A, b, lambda r: d * r, tol=1e-10)
        x2, r2 = fgmres(A, b, lambda r: d * r, tol=1e-10)
        assert r1.iterations == r2.iterations
        np.testing.assert_allclose(x1, x2, rtol=1e-8)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 8))
    def test_restarts_converge(self, n, restart):
        A = poisson_1d(n) + 0.5 * sp.identity(n)
        b = np.arange(1, n + 1, dtype=float)
        x, rep = gmres(A, b, tol=1e-10, restart=restart, maxit=2000)
        assert rep.converged
        np.testing.assert_allclose(A @ x, b, rtol=0, atol=1e-8 * np.linalg.norm(b))


class TestCG:
    def test_poisson(self, rng):
        A = poisson_1d(30)
        b = rng.standard_normal(30)
        x, rep = cg(A, b, tol=1e-12)
        assert rep.converged
        np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), b), rtol=1e-9)


class TestNullspace:
    def test_mean_removal(self):
        np.testing.assert_allclose(project_nullspace(np.array([1.0, 2.0, 3.0])), (-1.0, 0.0, 1.0))

    def test_constant_vector(self):
        np.testing.assert_allclose(project_nullspace(np.full(7, 3.5)), 0.0, atol=1e-15)

    def test_orthogonal_unchanged(self):
        v = np.array([1.0, -2.0, 1.0])
        np.testing.assert_array_equal(project_nullspace(v), v)

    def test_explicit_basis(self):
        basis = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        out = project_nullspace(np.array([1.0, 2.0, 3.0]), basis)
        np.testing.assert_allclose(out, (0.0, 0.0, 3.0), atol=1e-15)


class TestAMG:
    def test_poisson_1d_pcg(self, rng):
        A = poisson_1d(127)
        b = rng.standard_normal(127)
        h = amg_build(A)
        x, rep = cg(A, b, h.apply, tol=1e-8)
        assert rep.converged
        assert rep.iterations <= 15
        np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), b), rtol=0, atol=1e-6 * np.abs(x).max())

    def test_identity_returns_residual(self, rng):
        r = rng.standard_normal(20)
        h = amg_build(sp.identity(20, format="csr"))
        np.testing.assert_allclose(h.apply(r), r, rtol=1e-14)

    def test_linear_map(self, rng):
        h = amg_build(poisson_2d(20))
        a, b = rng.standard_normal((2, 400))
        np.testing.assert_allclose(h.apply(2 * a + b), 2 * h.apply(a) + h.apply(b), rtol=1e-10, atol=1e-12)

    def test_mesh_independence(self, rng):
        its = []
        for n in (32, 64):
            A = poisson_2d(n)
            _, rep = cg(A, rng.standard_normal(n * n), amg_build(A).apply, tol=1e-8)
            its.append(rep.iterations)
        assert its[1] <= 1.5 * its[0]

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            amg_build(sp.csr_matrix(np.ones((2, 3))))


class TestSolverTree:
    def test_presets_validate(self):
        for name in PRESETS:
            assert preset(name).validate() is not None

    def test_unknown_preset(self):
        with pytest.raises(KeyError, match="nope"):
            preset("nope")

    @pytest.mark.parametrize("node, msg", [
        (SolverNode("cg"), "ksp"),
        (SolverNode("gmres", "ilu"), "pc"),
        (SolverNode("preonly", "none"), "preonly"),
        (SolverNode("gmres", "schur-upper"), "velocity"),
        (SolverNode("gmres", tol=0.0), "tolerance"),
    ])
    def test_invalid_nodes(self, node, msg):
        with pytest.raises(ValueError, match=msg):
            node.validate()

    def test_stationarity(self):
        t = preset("table2")
        assert not t.is_stationary()
        assert t.children["fluid"].children["velocity"].is_stationary()
        assert not preset("table2-velocity-gmres").children["fluid"].children["velocity"].is_stationary()

    def test_with_child(self):
        t = preset("table2").with_child("fluid.schur", pc="jacobi")
        assert t.children["fluid"].children["schur"].pc == "jacobi"
        assert preset("table2").children["fluid"].children["schur"].pc == "amg"


def _toy_stokes(rng, nu=6, np_=3):
    """Diagonal velocity block and ``B^T 1 = 0``, so the diagonal Schur approximation is exact."""
    A = sp.diags(rng.uniform(1, 2, nu), format="csr")
    B = rng.standard_normal((np_, nu))
    B[-1] = -B[:-1].sum(axis=0)
    B = sp.csr_matrix(B)
    full = sp.bmat([[A, B.T], [B, None]], format="csr")
    return BlockOperators(full, A, B, None, sp.identity(np_, format="csr"), np.zeros(nu, dtype=int), 1.0)


def _exact_schur_upper(ksp="fgmres"):
    return SolverNode(ksp, "schur-upper", tol=1e-12, children={
        "velocity": SolverNode("preonly", "lu"),
        "schur": SolverNode("gmres", "none", tol=1e-14, options={"approximation": "diag"})})


class TestBlockSolves:
    def test_exact_schur_upper_converges_fast(self, rng):
        ops = _toy_stokes(rng)
        b = rng.standard_normal(9)
        x, rep = solve_block_system(ops, b, _exact_schur_upper())
        assert rep.converged
        assert rep.iterations <= 3

    def test_fieldsplit_with_exact_blocks_decoupled(self, rng):
        fl = _toy_stokes(rng)
        K = poisson_1d(5).tocsr()
        full = sp.block_diag([fl.full, K], format="csr")
        ops = BlockOperators(full, fl.A, fl.B, K, fl.Mp, fl.u_components, 1.0)
        tree = SolverNode("gmres", "fieldsplit-additive", tol=1e-10, children={
            "fluid": _exact_schur_upper(), "heat": SolverNode("direct", "lu")})
        x, rep = solve_block_system(ops, rng.standard_normal(14), tree)
        assert rep.converged
        assert rep.iterations <= 2

    def test_block_jacobi_exact_on_component_diagonal(self, rng):
        n = 8
        A = sp.block_diag([poisson_1d(n), 2 * poisson_1d(n)], format="csr")
        comps = np.repeat([0, 1], n)
        ops = BlockOperators(A, A, sp.csr_matrix((0, 2 * n)), None, sp.csr_matrix((0, 0)), comps, 1.0)
        node = SolverNode("gmres", "block-jacobi", tol=1e-12,
                          children={"component": SolverNode("preonly", "lu")})
        x, rep = solve_block_system(ops, rng.standard_normal(2 * n), node)
        assert rep.converged
        assert rep.iterations <= 2

    def test_jacobi_on_diagonal_matrix(self, rng):
        d = rng.uniform(1, 3, 12)
        A = sp.diags(d, format="csr")
        ops = BlockOperators(A, A, sp.csr_matrix((0, 12)), None, sp.csr_matrix((0, 0)), np.zeros(12, int), 1.0)
        x, rep = solve_block_system(ops, np.ones(12), SolverNode("gmres", "jacobi", tol=1e-12))
        assert rep.iterations == 1
        np.testing.assert_allclose(x, 1 / d, rtol=1e-13)

    def test_zero_diagonal_named(self):
        A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        ops = BlockOperators(A, A, sp.csr_matrix((0, 2)), None, sp.csr_matrix((0, 0)), np.zeros(2, int), 1.0)
        with pytest.raises(SolverError, match="outer"):
            solve_block_system(ops, np.ones(2), SolverNode("gmres", "jacobi"))

    def test_table2_beats_unpreconditioned_on_coupled_system(self, eye_problem, rng):
        st = conduction_state(eye_problem)
        st.u.coeffs[eye_problem.u_free] = 1e-4 * rng.standard_normal(len(eye_problem.u_free))
        system = build_newton_system(eye_problem, st)
        ops = block_operators(eye_problem, system)
        b = system.rhs()
        x1, r1 = solve_block_system(ops, b, preset("table2"))
        x2, r2 = solve_block_system(ops, b, replace(preset("unpreconditioned"), maxit=3000))
        xd, _ = solve_block_system(ops, b, preset("direct"))
        assert r1.converged
        assert r1.iterations < r2.iterations
        np.testing.assert_allclose(x1, xd, rtol=0, atol=1e-5 * np.abs(xd).max())
        assert set(r1.levels) >= {"fluid", "heat"}

    def test_direct_preset_pressure_is_mean_free(self, eye_problem):
        system = build_newton_system(eye_problem, conduction_state(eye_problem))
        x, rep = solve_block_system(block_operators(eye_problem, system), system.rhs(), preset("direct"))
        nu, np_, _ = system.sizes
        assert abs(x[nu:nu + np_].sum()) <= 1e-10 * np.abs(x[nu:nu + np_]).max()


def test_matrix_market_header(tmp_path):
    path = tmp_path / "A.mtx"
    export_matrix_market(poisson_1d(4), path)
    assert path.read_text().splitlines()[0] == "%%MatrixMarket matrix coordinate real general"
