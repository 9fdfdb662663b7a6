import numpy as np
import pytest
import sympy
from conftest import jacobian_fd_error, random_state

from ocuflow.fem import assemble_cells, build_space, interpolate
from ocuflow.forms import (HeatFluidProblem, PhysicalParams, _pressure_kernel, assemble_constant_blocks,
                           assemble_forms, assemble_residual, assemble_state_blocks, build_newton_system,
                           conduction_state, initial_state, pack, unpack)
from ocuflow.mesh import Mesh, mesh_stats
from ocuflow.scenario import make_eye_scenario

VARIANTS = [("navier_stokes", "nonlinear"), ("navier_stokes", "linearized"),
            ("stokes", "nonlinear"), ("stokes", "linearized")]


class TestParams:
    def test_defaults(self):
        p = PhysicalParams()
        assert (p.T_amb, p.h_amb, p.epsilon, p.E) == (294.0, 10.0, 0.975, 40.0)
        assert (p.h_bl, p.T_bl, p.T_ref) == (65.0, 310.0, 298.0)
        np.testing.assert_allclose(p.gravity, (0.0, -9.81, 0.0))

    def test_unknown_tissue(self):
        with pytest.raises(KeyError, match="vitreousBody"):
            PhysicalParams().conductivity("vitreousBody")

    def test_linearized_coefficient(self):
        p = PhysicalParams()
        assert p.h_rad == pytest.approx(4 * p.sigma_SB * p.epsilon * p.T_amb**3, rel=1e-14)

    @pytest.mark.parametrize("field", ["mu", "rho", "T_amb"])
    def test_rejects_nonpositive(self, field):
        with pytest.raises(ValueError):
            PhysicalParams(**{field: 0.0})


class TestProblem:
    def test_bad_variant(self):
        with pytest.raises(ValueError, match="flow"):
            make_eye_scenario(n=1, variant=("euler", "nonlinear")).build_problem()

    def test_overlapping_boundaries(self):
        p = make_eye_scenario(n=1).build_problem()
        with pytest.raises(ValueError, match="both"):
            HeatFluidProblem(p.mesh, "aqueousHumor", p.params, gamma_amb="cornea_surface",
                             gamma_body="cornea_surface")

    def test_pack_round_trip(self, eye_problem, rng):
        st = random_state(eye_problem, rng)
        x = pack(eye_problem, st)
        back = unpack(eye_problem, x, st)
        for a, b in zip((st.u, st.p, st.T), (back.u, back.p, back.T)):
            np.testing.assert_array_equal(a.coeffs, b.coeffs)

    def test_unpack_rejects_nan(self, eye_problem):
        x = np.zeros(sum(eye_problem.sizes))
        x[3] = np.nan
        with pytest.raises(FloatingPointError):
            unpack(eye_problem, x)


def _triangle_problem(**params):
    m = Mesh.from_names([[0, 0], [2, 0], [0, 1]], [[0, 1, 2]], ["aqueousHumor"])
    return HeatFluidProblem(m, "aqueousHumor", PhysicalParams(gravity_dir=(0.0, -1.0), **params))


class TestConstantBlocks:
    def test_zero_beta_gives_zero_coupling(self):
        D = assemble_constant_blocks(_triangle_problem(beta=0.0))["D"]
        assert abs(D).max() == 0.0

    def test_divergence_block_symbolic(self):
        # q^T B v = -int q div v with P2 v and P1 q reproduced exactly by interpolation
        x, y = sympy.symbols("x y")
        v = (x**2 + 2 * x * y, y**2 - 3 * x)
        q = 1 + 2 * x - y
        div = sympy.diff(v[0], x) + sympy.diff(v[1], y)
        exact = -sympy.integrate(sympy.integrate(q * div, (y, 0, 1 - x / 2)), (x, 0, 2))
        m = _triangle_problem().mesh
        V = build_space(m, 2, components=2)
        Q = build_space(m, 1)
        fv = sympy.lambdify((x, y), v, "numpy")
        fq = sympy.lambdify((x, y), q, "numpy")
        vh = interpolate(V, lambda p: np.stack(np.broadcast_arrays(*fv(p[:, 0], p[:, 1])), axis=-1))
        qh = interpolate(Q, lambda p: fq(p[:, 0], p[:, 1]))
        B = assemble_cells(_pressure_kernel(), V, Q)
        assert qh.coeffs @ (B @ vh.coeffs) == pytest.approx(float(exact), rel=1e-13)

    def test_viscous_block_annihilates_rotation(self, eye_problem):
        N = assemble_constant_blocks(eye_problem)["N"]
        u = interpolate(eye_problem.V, lambda p: np.stack([-p[:, 1], p[:, 0]], axis=-1))
        assert np.abs(N @ u.coeffs).max() <= 1e-10 * abs(N).max() * np.abs(u.coeffs).max()

    def test_symmetric_blocks(self, eye_problem):
        cb = assemble_constant_blocks(eye_problem)
        for key in ("N", "F0", "Mp"):
            A = cb[key]
            assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


class TestStateBlocks:
    def test_zero_velocity(self, eye_problem, rng):
        st = random_state(eye_problem, rng, u_scale=0.0)
        st.u.coeffs[:] = 0.0
        sb = assemble_state_blocks(eye_problem, st)
        for key in ("V", "W", "E2"):
            assert abs(sb[key]).max() == 0.0

    def test_constant_temperature(self, eye_problem):
        # compared with a unit temperature gradient; a constant T0 leaves round-off of order eps T0 / h
        T0 = 300.0
        unit = assemble_state_blocks(eye_problem, initial_state(eye_problem, T0 + eye_problem.W.dof_coords[:, 0]))
        flat = assemble_state_blocks(eye_problem, initial_state(eye_problem, T0))
        h = mesh_stats(eye_problem.mesh).h_min
        assert abs(flat["E1"]).max() <= 1e-13 * T0 / h * abs(unit["E1"]).max()

    def test_radiation_row_sum_matches_facet_oracle(self, eye_problem):
        T0 = 305.0
        st = initial_state(eye_problem, T0)
        F = assemble_state_blocks(eye_problem, st)["F_rad"]
        m = eye_problem.mesh
        facets = m.facets[m.facets_in("cornea_surface")]
        length = np.linalg.norm(m.vertices[facets[:, 1]] - m.vertices[facets[:, 0]], axis=1).sum()
        pr = eye_problem.params
        assert F.sum() == pytest.approx(4 * pr.sigma_SB * pr.epsilon * T0**3 * length, rel=1e-12)

    def test_robin_row_sum(self, eye_problem):
        F0 = assemble_constant_blocks(eye_problem)["F0"]
        m = eye_problem.mesh
        pr = eye_problem.params

        def length(labels):
            idx = np.concatenate([m.facets_in(lab) for lab in labels])
            f = m.facets[idx]
            return np.linalg.norm(m.vertices[f[:, 1]] - m.vertices[f[:, 0]], axis=1).sum()

        # conduction rows sum to zero, leaving the Robin boundary measures
        expected = pr.h_amb * length(eye_problem.gamma_amb) + pr.h_bl * length(eye_problem.gamma_body)
        assert F0.sum() == pytest.approx(expected, rel=1e-10)

    def test_linearized_variant_has_no_radiation_matrix(self):
        p = make_eye_scenario(n=1, variant=("stokes", "linearized")).build_problem()
        assert assemble_state_blocks(p, initial_state(p))["F_rad"].nnz == 0

    def test_rejects_non_finite(self, eye_problem):
        st = initial_state(eye_problem)
        st.T.coeffs[0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            assemble_state_blocks(eye_problem, st)


class TestResidual:
    def test_rest_at_reference_temperature(self, eye_problem):
        r = assemble_residual(eye_problem, initial_state(eye_problem))
        assert np.abs(r.r_u).max() == 0.0

    def test_solenoidal_field(self, eye_problem):
        st = initial_state(eye_problem)
        st.u = interpolate(eye_problem.V, lambda p: np.stack([p[:, 0] ** 2, -2 * p[:, 0] * p[:, 1]], axis=-1))
        r = assemble_residual(eye_problem, st)
        assert np.abs(r.r_p).max() <= 1e-14 * np.abs(st.u.coeffs).max()

    def test_conduction_state(self, eye_problem):
        st = conduction_state(eye_problem)
        r = assemble_residual(eye_problem, st)
        cold = initial_state(eye_problem, 0.0)
        loads = np.linalg.norm(assemble_residual(eye_problem, cold).r_T)
        assert np.linalg.norm(r.r_T) <= 1e-10 * loads

    def test_buoyancy_consistency(self, eye_problem):
        # a uniform temperature offset c adds D c to F_u, i.e. the body force -rho beta c g
        st0 = initial_state(eye_problem)
        st1 = initial_state(eye_problem, eye_problem.params.T_ref + 2.0)
        dr = assemble_residual(eye_problem, st1).r_u - assemble_residual(eye_problem, st0).r_u
        D = build_newton_system(eye_problem, st0).blocks["D"]
        np.testing.assert_allclose(-dr, D @ np.full(D.shape[1], 2.0), rtol=0, atol=1e-12 * np.abs(dr).max())

    def test_net_buoyancy_force(self, eye_problem):
        # P2 basis functions sum to one, so the full vertical load is rho beta c g_y |fluid|
        pr = eye_problem.params
        c = 2.0
        F0 = assemble_forms(eye_problem, initial_state(eye_problem))[0]
        F1 = assemble_forms(eye_problem, initial_state(eye_problem, pr.T_ref + c))[0]
        V = eye_problem.V
        fy = (F1 - F0)[V.component_dofs(1, np.arange(V.n_scalar))].sum()
        area = eye_problem.mesh.measure("aqueousHumor")
        assert fy == pytest.approx(pr.rho * pr.beta * c * pr.gravity[1] * area, rel=1e-12)

    def test_pressure_residual_is_mean_free(self, eye_problem, rng):
        r = assemble_residual(eye_problem, random_state(eye_problem, rng))
        assert abs(r.r_p.sum()) <= 1e-12 * np.abs(r.r_p).max()


class TestNewtonSystem:
    def test_zero_state_reduces_to_stokes_and_conduction(self, eye_problem):
        st = initial_state(eye_problem, 0.0)
        sys_ = build_newton_system(eye_problem, st)
        for key in ("V", "W", "E1", "E2"):
            assert abs(sys_.blocks[key]).max() == 0.0

    def test_matvec_equals_matrix(self, eye_problem, rng):
        sys_ = build_newton_system(eye_problem, random_state(eye_problem, rng))
        x = rng.standard_normal(sum(sys_.sizes))
        y = sys_.matrix() @ x
        np.testing.assert_allclose(sys_.matvec(x), y, rtol=0, atol=1e-13 * np.abs(y).max())

    def test_fluid_heat_split(self, eye_problem, rng):
        sys_ = build_newton_system(eye_problem, random_state(eye_problem, rng))
        M = sys_.matrix()
        n0 = sys_.K00.shape[0]
        assert abs(M[:n0, :n0] - sys_.K00).max() == 0
        assert abs(M[:n0, n0:] - sys_.K01).max() == 0
        assert abs(M[n0:, :n0] - sys_.K10).max() == 0
        assert abs(M[n0:, n0:] - sys_.K11).max() == 0

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_jacobian_matches_finite_differences(self, variant, rng):
        problem = make_eye_scenario(n=1, variant=variant).build_problem()
        for _ in range(2):
            assert jacobian_fd_error(problem, random_state(problem, rng), rng) <= 1e-5
