import numpy as np
import pytest

from ocuflow.mesh import Mesh

MINIMAL_MSH = """$MeshFormat
4.1 0 8
$EndMeshFormat
$PhysicalNames
1
3 1 "body"
$EndPhysicalNames
$Entities
0 0 0 1
1 0 0 0 1 1 1 1 1 0
$EndEntities
$Nodes
1 4 1 4
3 1 0 4
1
2
3
4
0 0 0
1 0 0
0 1 0
0 0 1
$EndNodes
$Elements
1 1 1 1
3 1 4 1
1 1 2 3 4
$EndElements
"""


@pytest.fixture
def minimal_msh(tmp_path):
    path = tmp_path / "tet.msh"
    path.write_text(MINIMAL_MSH)
    return path


@pytest.fixture
def unit_triangle():
    """Single right triangle with unit legs."""
    return Mesh.from_names([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], ["body"],
                           facets=[[0, 1], [1, 2], [0, 2]], facet_names=["bottom", "hyp", "left"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(problem, rng, u_scale=1e-4, p_scale=1e-2, T_spread=5.0):
    """Random state around ``T_ref`` respecting the Dirichlet data."""
    from ocuflow.forms import initial_state

    st = initial_state(problem)
    st.u.coeffs[problem.u_free] = u_scale * rng.standard_normal(len(problem.u_free))
    st.p.coeffs[:] = p_scale * rng.standard_normal(problem.Q.n_dofs)
    st.T.coeffs[problem.T_free] += T_spread * rng.standard_normal(len(problem.T_free))
    return st


def jacobian_fd_error(problem, st, rng, h=1e-6):
    """Largest per-block relative error between ``J v`` and a central difference of ``F = -r``.

    The random direction ``v`` is scaled per block by the state magnitude so
    that the step ``h`` is relative.
    """
    from ocuflow.forms import assemble_residual, build_newton_system, pack, unpack

    x = pack(problem, st)
    nu, np_, nT = problem.sizes
    scale = np.concatenate([
        np.full(nu, max(np.abs(x[:nu]).max(), 1e-12)),
        np.full(np_, max(np.abs(x[nu:nu + np_]).max(), 1e-12)),
        np.full(nT, max(np.abs(x[nu + np_:]).max(), 1e-12)),
    ])
    v = scale * rng.standard_normal(len(x))
    F = lambda y: -assemble_residual(problem, unpack(problem, y, st)).vector
    fd = (F(x + h * v) - F(x - h * v)) / (2 * h)
    Jv = build_newton_system(problem, st).matvec(v)
    cuts = np.cumsum([0, nu, np_, nT])
    return max(float(np.linalg.norm(Jv[a:b] - fd[a:b]) / np.linalg.norm(Jv[a:b]))
               for a, b in zip(cuts[:-1], cuts[1:]) if b > a)


@pytest.fixture(scope="session")
def eye_problem():
    """Coarsest eye slice with every physical term active."""
    from ocuflow.scenario import make_eye_scenario

    return make_eye_scenario(n=1).build_problem()
