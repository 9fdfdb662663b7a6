import math

import numpy as np
import pytest

from ocuflow.fem import integrate
from ocuflow.forms import PhysicalParams
from ocuflow.newton import NewtonConfig, newton_solve
from ocuflow.scenario import (MMS_PARAMS, Posture, ScenarioError, ScenarioSpec, as_posture, dumps_config,
                              interpolate_exact, make_cavity_scenario, make_eye_scenario, make_mms_scenario,
                              manufactured_sources, mms_errors, solve_scenario)


class TestPosture:
    @pytest.mark.parametrize("posture, g", [("standing", (0.0, -9.81, 0.0)), ("supine", (9.81, 0.0, 0.0)),
                                            ("prone", (-9.81, 0.0, 0.0))])
    def test_gravity_vectors(self, posture, g):
        assert Posture(posture).gravity() == pytest.approx(g)

    def test_two_dimensional_projection(self):
        assert Posture.SUPINE.gravity_dir(2) == (1.0, 0.0)

    def test_case_insensitive(self):
        assert as_posture("Standing") is Posture.STANDING

    def test_unknown(self):
        with pytest.raises(ScenarioError, match="sitting"):
            as_posture("sitting")

    def test_spec_gravity(self):
        spec = make_eye_scenario(n=1, posture="supine")
        assert spec.gravity(3) == pytest.approx((9.81, 0.0, 0.0))
        assert spec.with_posture("standing").gravity(2) == pytest.approx((0.0, -9.81))


class TestSpec:
    def test_table_defaults(self):
        spec = make_eye_scenario(n=1)
        p = spec.params
        assert (p.T_amb, p.h_amb, p.epsilon, p.E, p.h_bl, p.T_bl) == (294.0, 10.0, 0.975, 40.0, 65.0, 310.0)
        assert spec.gravity(3) == pytest.approx((0.0, -9.81, 0.0))

    def test_config_round_trip(self, tmp_path):
        spec = make_cavity_scenario(6, 1.5, width=3e-3).replace(newton={"eps_tol": 1e-9, "line_search.refine": True})
        path = tmp_path / "cfg.toml"
        spec.save(path)
        back = ScenarioSpec.load(path)
        assert back == spec
        assert dumps_config(back.to_config()) == path.read_text()

    def test_mms_round_trip(self, tmp_path):
        spec = make_mms_scenario(n=3)
        spec.save(tmp_path / "mms.toml")
        assert ScenarioSpec.load(tmp_path / "mms.toml") == spec

    def test_unknown_key(self):
        cfg = make_cavity_scenario(2, 1.0).to_config()
        cfg["params.viscosity"] = 1.0
        with pytest.raises(ScenarioError, match="viscosity"):
            ScenarioSpec.from_config(cfg)

    def test_unknown_section(self):
        cfg = make_cavity_scenario(2, 1.0).to_config()
        cfg["output.format"] = "vtk"
        with pytest.raises(ScenarioError, match="output.format"):
            ScenarioSpec.from_config(cfg)

    @pytest.mark.parametrize("key, value", [("params.gravity_dir", 0), ("params.k_by_label.lens", "soft"),
                                            ("fluid.labels", 3)])
    def test_wrongly_typed_value(self, key, value):
        cfg = make_cavity_scenario(2, 1.0).to_config()
        cfg[key] = value
        with pytest.raises(ScenarioError, match=key.split(".")[0]):
            ScenarioSpec.from_config(cfg)

    def test_unknown_newton_option(self):
        spec = make_cavity_scenario(2, 1.0).replace(newton={"tolerance": 1e-3})
        with pytest.raises(ScenarioError, match="tolerance"):
            spec.newton_config()

    def test_newton_options(self):
        spec = make_cavity_scenario(2, 1.0).replace(newton={"max_iters": 7, "line_search": "none",
                                                            "line_search.c": 0.2})
        cfg = spec.newton_config()
        assert cfg.max_iters == 7
        assert cfg.line_search.kind == "none"
        assert cfg.line_search.c == 0.2

    def test_mesh_missing(self, tmp_path):
        spec = make_eye_scenario(mesh=tmp_path / "absent.msh")
        with pytest.raises(FileNotFoundError, match="absent.msh"):
            spec.build_problem()

    def test_unknown_conductivity_label(self, minimal_msh):
        spec = make_eye_scenario(mesh=minimal_msh, fluid_labels=("body",))
        with pytest.raises(ScenarioError, match="body"):
            spec.build_problem()

    def test_needs_mesh_source(self):
        with pytest.raises(ScenarioError, match="exactly one"):
            ScenarioSpec(name="x", fluid_labels=("a",))

    def test_with_param(self):
        spec = make_eye_scenario(n=1).with_param("params.T_amb", 310.0)
        assert spec.params.T_amb == 310.0
        with pytest.raises(ScenarioError, match="T_sky"):
            spec.with_param("T_sky", 1.0)

    def test_refined(self):
        spec = make_cavity_scenario(4, 1.0).refined(2)
        assert spec.generator_args["nx"] == 8
        assert spec.generator_args["width"] == 4e-3

    def test_walls_must_cover_fluid_boundary(self):
        spec = make_eye_scenario(n=1, wall_labels=("wall_cornea",))
        with pytest.raises(ScenarioError, match="wall_iris"):
            spec.build_problem()

    def test_eye_slice_geometry(self):
        mesh = make_eye_scenario(n=1).build_mesh()
        assert set(mesh.subdomain_names.values()) == {"sclera", "iris", "lens", "aqueousHumor", "cornea"}
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert r.max() == pytest.approx(8.35e-3, rel=1e-12)


class TestCavity:
    def test_isothermal_rest(self):
        run = solve_scenario(make_cavity_scenario(4, 0.0), solver="direct")
        assert run.converged
        assert np.abs(run.state.u.coeffs).max() <= 1e-12

    def test_hot_side_rises(self):
        run = solve_scenario(make_cavity_scenario(8, 2.0), solver="direct")
        assert run.converged
        p = run.problem
        V = p.V
        x = V.dof_coords
        w = 4e-3
        u = run.state.u.coeffs
        uy = u[V.component_dofs(1, np.arange(V.n_scalar))]
        mid = np.isclose(x[:, 1], w / 2)
        left = mid & (x[:, 0] < 0.25 * w)
        right = mid & (x[:, 0] > 0.75 * w)
        assert uy[left].max() > 0 > uy[right].min()


def _reflection_index(coords, height):
    """Index of the dof at ``(x, H - y)`` for every dof at ``(x, y)``."""
    key = {tuple(np.round(c / height, 9)): i for i, c in enumerate(coords)}
    return np.array([key[tuple(np.round(np.array([c[0], height - c[1]]) / height, 9))] for c in coords])


def _solve_with_gravity(spec, sign):
    spec = spec.replace(posture=None, params=spec.params.replace(gravity_dir=(0.0, -sign)))
    return solve_scenario(spec, solver="direct")


class TestMirror:
    def test_negation_when_temperature_is_decoupled(self):
        # negligible heat capacity makes T the conduction profile, so the flow is linear in g
        spec = make_cavity_scenario(8, 2.0, params=PhysicalParams(Cp=1e-9), variant=("stokes", "linearized"))
        up, um = (_solve_with_gravity(spec, s).state.u.coeffs for s in (1.0, -1.0))
        assert np.abs(up + um).max() <= 1e-8 * np.abs(up).max()

    def test_reflection_for_navier_stokes(self):
        # with inertia, -g is the mirror image y -> H - y of the +g solution
        spec = make_cavity_scenario(8, 2.0)
        rp, rm = (_solve_with_gravity(spec, s) for s in (1.0, -1.0))
        V = rp.problem.V
        idx = _reflection_index(V.dof_coords[:V.n_scalar], 4e-3)
        n = V.n_scalar
        up, um = rp.state.u.coeffs, rm.state.u.coeffs
        mirrored = np.concatenate([up[:n][idx], -up[n:][idx]])
        assert np.abs(um - mirrored).max() <= 1e-8 * np.abs(up).max()


class TestManufactured:
    def test_trivial_fields_have_zero_sources(self):
        pr = PhysicalParams(**MMS_PARAMS)
        mf = manufactured_sources(("0", "0"), "0", str(pr.T_ref), pr)
        x = np.random.default_rng(0).uniform(size=(20, 2))
        for f in (mf.f_u, mf.f_p, mf.f_T):
            assert np.all(np.asarray(f(x)) == 0)

    @staticmethod
    def _div_squared(spec, n):
        p = spec.refined(n).build_problem()
        u = interpolate_exact(p, spec.manufactured(2)).u
        div = integrate(p.fluid_domain, lambda ctx: np.trace(ctx.grad(u), axis1=2, axis2=3) ** 2, 6)
        grad = integrate(p.fluid_domain, lambda ctx: (ctx.grad(u) ** 2).sum(axis=(2, 3)), 6)
        return div / grad

    def test_curl_of_bump_is_solenoidal_at_interpolation_order(self):
        # u = curl psi with psi = exp(x y) sin(x + 2 y)
        psi_y = "exp(x*y)*(x*sin(x + 2*y) + 2*cos(x + 2*y))"
        psi_x = "exp(x*y)*(y*sin(x + 2*y) + cos(x + 2*y))"
        spec = make_mms_scenario(u_exact=(psi_y, "-(" + psi_x + ")"))
        d1, d2 = self._div_squared(spec, 1), self._div_squared(spec, 2)
        # the gradient interpolation error is O(h^2), so the squared divergence drops like h^4
        assert math.log2(d1 / d2) >= 3.5

    def test_default_field_is_solenoidal(self):
        assert self._div_squared(make_mms_scenario(), 1) <= 1e-24

    def test_patch_test(self):
        spec = make_mms_scenario(u_exact=("x**2", "-2*x*y"), p_exact="x + 2*y", T_exact="1 + x - y/2", n=2)
        run = solve_scenario(spec)
        assert run.converged
        err = mms_errors(run.problem, run.state, spec.manufactured(2))
        assert max(err.values()) <= 1e-10

    def test_smooth_solution_errors_decrease(self):
        errs = []
        for n in (4, 8):
            spec = make_mms_scenario(n=n)
            run = solve_scenario(spec)
            errs.append(mms_errors(run.problem, run.state, spec.manufactured(2)))
        for k in ("u", "p", "T"):
            assert errs[1][k] < errs[0][k]

    def test_linear_variant_sources(self):
        pr = PhysicalParams(**MMS_PARAMS)
        nav = manufactured_sources(("y", "0"), "0", "1", pr, "navier_stokes")
        sto = manufactured_sources(("y", "0"), "0", "1", pr, "stokes")
        x = np.array([[0.3, 0.7]])
        # (u.grad)u = (y d/dx y, 0) = 0 for this shear, so both flows share the source
        np.testing.assert_allclose(nav.f_u(x), sto.f_u(x))


def test_solve_scenario_timings():
    tm = {}
    run = solve_scenario(make_cavity_scenario(4, 1.0), solver="direct", timings=tm)
    assert run.converged
    assert set(tm) >= {"init", "assembly", "solve"}
    assert all(v > 0 for v in tm.values())


def test_newton_settings_are_used():
    spec = make_cavity_scenario(4, 2.0).replace(newton={"max_iters": 1})
    run = solve_scenario(spec, solver="direct")
    assert not run.converged
    assert run.result.iterations == 1
    assert newton_solve(run.problem, cfg=NewtonConfig(), solver="direct").converged
