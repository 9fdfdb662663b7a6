"""Variational forms, residuals and Newton blocks of the coupled flow/heat problem.

Unknowns are the velocity ``u`` (vector P2) and pressure ``p`` (P1) on the
fluid submesh and the temperature ``T`` (P1) on the whole mesh. With the
forms

    a1(z, u, v) = rho (z . grad) u . v
    a2(u, v)    = mu D(u) : grad v
    b(p, v)     = -p div v
    d(T, v)     = rho beta T g . v
    e(u, T, phi)= rho Cp u . grad T phi                 (fluid cells only)
    f(T, phi)   = k grad T . grad phi + [h_amb T + sigma eps T^4] phi on Gamma_amb
                  + h_bl T phi on Gamma_body

the nonlinear residual is ``r = l - F(x)`` and the Newton correction solves
``J dx = r`` with ``J = dF/dx``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .fem import Domain, Field, FunctionSpace, Kernel, assemble_cells, assemble_facets, build_space
from .mesh import Mesh, SubMesh, extract_subdomain

# Table of nominal tissue conductivities [W/(m K)]
TISSUE_CONDUCTIVITY = {
    "lens": 0.4,
    "cornea": 0.58,
    "sclera": 1.0042,
    "iris": 1.0042,
    "lamina": 1.0042,
    "opticNerve": 1.0042,
    "aqueousHumor": 0.28,
    "vitreousHumor": 0.603,
    "choroid": 0.52,
    "retina": 0.52,
}

FLOW_VARIANTS = ("navier_stokes", "stokes")
RADIATION_VARIANTS = ("nonlinear", "linearized")


@dataclass(frozen=True)
class PhysicalParams:
    """Physical coefficients (SI units) with nominal physiological defaults.

    Attributes
    ----------
    mu : float
        Dynamic viscosity [N s/m^2].
    rho : float
        Density [kg/m^3]; also the Boussinesq reference density.
    Cp : float
        Specific heat [J/(kg K)].
    beta : float
        Volume expansion coefficient [1/K].
    g_mag : float
        Gravitational acceleration [m/s^2].
    T_ref, T_bl, T_amb : float
        Reference, blood and ambient temperatures [K].
    h_bl, h_amb : float
        Heat transfer coefficients [W/(m^2 K)].
    E : float
        Evaporative heat flux [W/m^2].
    sigma_SB : float
        Stefan-Boltzmann constant [W/(m^2 K^4)].
    epsilon : float
        Emissivity [-].
    k_by_label : mapping
        Subdomain name to conductivity [W/(m K)].
    gravity_dir : tuple
        Unit vector of gravity (2 or 3 components).
    """

    mu: float = 1e-3
    rho: float = 1000.0
    Cp: float = 4178.0
    beta: float = 3e-4
    g_mag: float = 9.81
    T_ref: float = 298.0
    h_bl: float = 65.0
    h_amb: float = 10.0
    T_bl: float = 310.0
    T_amb: float = 294.0
    E: float = 40.0
    sigma_SB: float = 5.67e-8
    epsilon: float = 0.975
    k_by_label: Mapping[str, float] = field(default_factory=lambda: dict(TISSUE_CONDUCTIVITY))
    gravity_dir: tuple = (0.0, -1.0, 0.0)

    def __post_init__(self):
        for name in ("mu", "rho", "Cp", "T_ref", "T_bl", "T_amb", "sigma_SB"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        # zero is allowed for these to switch a mechanism off
        for name in ("beta", "g_mag", "h_bl", "h_amb", "E", "epsilon"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")
        g = tuple(float(c) for c in self.gravity_dir)
        if len(g) not in (2, 3) or abs(np.linalg.norm(g) - 1.0) > 1e-12:
            raise ValueError(f"gravity_dir must be a unit vector of length 2 or 3, got {g}")
        object.__setattr__(self, "gravity_dir", g)
        k = {str(key): float(v) for key, v in dict(self.k_by_label).items()}
        for key, v in k.items():
            if not v > 0:
                raise ValueError(f"conductivity of {key!r} must be positive, got {v}")
        object.__setattr__(self, "k_by_label", k)

    @property
    def gravity(self) -> np.ndarray:
        return self.g_mag * np.asarray(self.gravity_dir)

    @property
    def h_rad(self) -> float:
        """Linearized radiative transfer coefficient ``4 sigma eps T_amb^3``."""
        return 4.0 * self.sigma_SB * self.epsilon * self.T_amb**3

    def conductivity(self, label: str) -> float:
        try:
            return self.k_by_label[label]
        except KeyError:
            raise KeyError(f"no conductivity given for subdomain {label!r}") from None

    def replace(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gravity_dir"] = list(self.gravity_dir)
        return d


def _labels(x) -> tuple:
    if x is None:
        return ()
    if isinstance(x, str):
        return (x,)
    return tuple(x)


@dataclass(eq=False)
class HeatFluidProblem:
    """A fully specified discrete problem.

    Parameters
    ----------
    mesh : Mesh
        Whole domain, carrying the temperature.
    fluid_labels : labels
        Subdomains where the fluid equations are solved.
    params : PhysicalParams
    gamma_amb, gamma_body : labels
        Boundary labels of the ambient and body heat-exchange conditions.
    flow : {"navier_stokes", "stokes"}
    radiation : {"nonlinear", "linearized"}
    velocity_dirichlet : dict, optional
        Fluid boundary label to velocity value (constant or vectorized
        callable). The rest of the fluid boundary is no-slip.
    temperature_dirichlet : dict, optional
        Boundary label to temperature value (constant or callable).
    velocity_source, pressure_source, temperature_source : callable, optional
        Volumetric sources added to the right-hand sides (manufactured
        solutions); vectorized over points ``(..., dim)``.
    """

    mesh: Mesh
    fluid_labels: tuple
    params: PhysicalParams
    gamma_amb: tuple = ()
    gamma_body: tuple = ()
    flow: str = "navier_stokes"
    radiation: str = "nonlinear"
    velocity_dirichlet: dict = field(default_factory=dict)
    temperature_dirichlet: dict = field(default_factory=dict)
    velocity_source: Callable | None = None
    pressure_source: Callable | None = None
    temperature_source: Callable | None = None

    def __post_init__(self):
        if self.flow not in FLOW_VARIANTS:
            raise ValueError(f"flow must be one of {FLOW_VARIANTS}, got {self.flow!r}")
        if self.radiation not in RADIATION_VARIANTS:
            raise ValueError(f"radiation must be one of {RADIATION_VARIANTS}, got {self.radiation!r}")
        self.fluid_labels = _labels(self.fluid_labels)
        self.gamma_amb = _labels(self.gamma_amb)
        self.gamma_body = _labels(self.gamma_body)
        m = self.mesh
        if len(self.params.gravity_dir) != m.dim:
            raise ValueError(f"gravity_dir has {len(self.params.gravity_dir)} components for a {m.dim}D mesh")
        overlap = set(self.gamma_amb) & set(self.gamma_body)
        if overlap:
            raise ValueError(f"labels {sorted(overlap)} are assigned to both Gamma_amb and Gamma_body")
        for lab in self.gamma_amb + self.gamma_body + tuple(self.temperature_dirichlet):
            m.boundary_tag(lab)
        self.k_cell = np.array([self.params.conductivity(m.subdomain_names[t]) for t in m.cell_labels])
        self.fluid: SubMesh = extract_subdomain(m, self.fluid_labels)
        for lab in self.velocity_dirichlet:
            self.fluid.mesh.boundary_tag(lab)

        self.V = build_space(self.fluid, 2, components=m.dim)
        self.Q = build_space(self.fluid, 1)
        self.W = build_space(m, 1)
        self.fluid_domain = Domain(self.fluid.mesh, self.fluid)
        self.domain = Domain(m)

        # velocity: the whole fluid boundary is Dirichlet
        bnodes = self.V.boundary_nodes()
        self.u_bc_dofs = np.concatenate([self.V.component_dofs(c, bnodes) for c in range(m.dim)])
        ubc = np.zeros(self.V.n_dofs)
        for lab, val in self.velocity_dirichlet.items():
            nodes = self.V.facet_nodes(lab)
            vals = _nodal_values(val, self.V.dof_coords[nodes], m.dim)
            for c in range(m.dim):
                ubc[self.V.component_dofs(c, nodes)] = vals[:, c]
        self.u_bc_values = ubc[self.u_bc_dofs]
        self.u_free = np.setdiff1d(np.arange(self.V.n_dofs), self.u_bc_dofs)

        tnodes, tvals = [], []
        for lab, val in self.temperature_dirichlet.items():
            nodes = self.W.facet_nodes(lab)
            tnodes.append(nodes)
            tvals.append(_nodal_values(val, self.W.dof_coords[nodes], 1)[:, 0])
        if tnodes:
            allnodes = np.concatenate(tnodes)
            allvals = np.concatenate(tvals)
            self.T_bc_dofs, first = np.unique(allnodes, return_index=True)
            self.T_bc_values = allvals[first]
        else:
            self.T_bc_dofs = np.zeros(0, dtype=np.int64)
            self.T_bc_values = np.zeros(0)
        self.T_free = np.setdiff1d(np.arange(self.W.n_dofs), self.T_bc_dofs)
        self.p_free = np.arange(self.Q.n_dofs)

    # -- sizes -------------------------------------------------------------------
    @property
    def sizes(self) -> tuple[int, int, int]:
        """Free dof counts ``(N_u, N_p, N_T)``."""
        return len(self.u_free), len(self.p_free), len(self.T_free)

    def with_params(self, **changes) -> "HeatFluidProblem":
        return replace(self, params=self.params.replace(**changes))


def _nodal_values(val, x, ncomp) -> np.ndarray:
    if callable(val):
        out = np.asarray(val(x), dtype=float)
    else:
        out = np.broadcast_to(np.asarray(val, dtype=float), (len(x),) + np.shape(val))
    out = out.reshape(len(x), -1)
    if out.shape[1] != ncomp:
        raise ValueError(f"boundary data must have {ncomp} components, got {out.shape[1]}")
    if not np.all(np.isfinite(out)):
        raise ValueError("boundary data must be finite")
    return out


# -- state ----------------------------------------------------------------------

@dataclass(eq=False)
class State:
    """Velocity, pressure and temperature fields."""

    u: Field
    p: Field
    T: Field

    def copy(self) -> "State":
        return State(self.u.copy(), self.p.copy(), self.T.copy())


def initial_state(problem: HeatFluidProblem, T0: float | np.ndarray | None = None) -> State:
    """``u`` with its boundary values, ``p = 0`` and ``T = T0`` (default ``T_ref``)."""
    u = np.zeros(problem.V.n_dofs)
    u[problem.u_bc_dofs] = problem.u_bc_values
    T = np.zeros(problem.W.n_dofs)
    T[:] = problem.params.T_ref if T0 is None else T0
    T[problem.T_bc_dofs] = problem.T_bc_values
    return State(Field(problem.V, u), Field(problem.Q, np.zeros(problem.Q.n_dofs)), Field(problem.W, T))


def pack(problem: HeatFluidProblem, state: State) -> np.ndarray:
    """Free coefficients ``[u_free, p, T_free]``."""
    return np.concatenate([state.u.coeffs[problem.u_free], state.p.coeffs, state.T.coeffs[problem.T_free]])


def unpack(problem: HeatFluidProblem, x: np.ndarray, base: State | None = None) -> State:
    """Inverse of :func:`pack`; Dirichlet values come from ``base`` or the problem."""
    nu, np_, _ = problem.sizes
    st = initial_state(problem) if base is None else base.copy()
    st.u.coeffs[problem.u_free] = x[:nu]
    st.p.coeffs[:] = x[nu:nu + np_]
    st.T.coeffs[problem.T_free] = x[nu + np_:]
    for f in (st.u, st.p, st.T):
        if not np.all(np.isfinite(f.coeffs)):
            raise FloatingPointError("non-finite value in state")
    return st


# -- kernels --------------------------------------------------------------------

def _vec_test(loc):
    """(ne, comps, nloc) local vector to the blocked local layout."""
    return loc.reshape(loc.shape[0], -1)


def _k_at(problem, ctx):
    return problem.k_cell[ctx.cells] if ctx.mesh is problem.mesh else problem.k_cell[
        problem.fluid.parent_cell_map[ctx.cells]]


def momentum_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    """Local vectors of ``F_u = a1(u,u,v) + a2(u,v) + b(p,v) + d(T,v) - l1(v) - s(v)``."""
    pr = problem.params
    g = pr.gravity
    nav = problem.flow == "navier_stokes"

    def func(ctx):
        phi = ctx.phi(2)
        dphi = ctx.dphi(2)
        gu = ctx.grad(st.u)  # (e,q,c,x)
        D = 0.5 * (gu + np.swapaxes(gu, 2, 3))
        p = ctx.value(st.p)
        T = ctx.value(st.T)
        loc = pr.mu * np.einsum("eq,eqcx,eqax->eca", ctx.dx, D, dphi)
        loc -= np.einsum("eq,eq,eqac->eca", ctx.dx, p, dphi)
        f = pr.rho * pr.beta * (T - pr.T_ref)[..., None] * g
        if nav:
            f = f + pr.rho * np.einsum("eqx,eqcx->eqc", ctx.value(st.u), gu)
        if problem.velocity_source is not None:
            f = f - np.asarray(problem.velocity_source(ctx.x))
        loc += np.einsum("eq,eqc,eqa->eca", ctx.dx, f, phi)
        return _vec_test(loc)

    return Kernel(func, 5, "momentum residual")


def continuity_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    """Local vectors of ``F_p = b(q, u) - s_p(q)``."""

    def func(ctx):
        div = np.trace(ctx.grad(st.u), axis1=2, axis2=3)
        val = -div
        if problem.pressure_source is not None:
            val = val - np.asarray(problem.pressure_source(ctx.x))
        return np.einsum("eq,eq,eqa->ea", ctx.dx, val, ctx.phi(1))

    return Kernel(func, 2, "continuity residual")


def convection_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    """Local vectors of ``e(u, T, phi)`` on fluid cells."""
    c = problem.params.rho * problem.params.Cp

    def func(ctx):
        adv = np.einsum("eqx,eqx->eq", ctx.value(st.u), ctx.grad(st.T))
        return c * np.einsum("eq,eq,eqa->ea", ctx.dx, adv, ctx.phi(1))

    return Kernel(func, 3, "convection residual")


def conduction_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    def func(ctx):
        k = _k_at(problem, ctx)
        loc = np.einsum("e,eq,eqx,eqax->ea", k, ctx.dx, ctx.grad(st.T), ctx.dphi(1))
        if problem.temperature_source is not None:
            s = np.asarray(problem.temperature_source(ctx.x))
            loc -= np.einsum("eq,eq,eqa->ea", ctx.dx, s, ctx.phi(1))
        return loc

    return Kernel(func, 6 if problem.temperature_source is not None else 0, "conduction residual")


def ambient_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    """Facet residual ``[h_amb (T - T_amb) + rad(T) + E] phi`` on Gamma_amb."""
    pr = problem.params
    se = pr.sigma_SB * pr.epsilon

    def func(ctx):
        T = ctx.value(st.T)
        flux = pr.h_amb * (T - pr.T_amb) + pr.E
        if problem.radiation == "nonlinear":
            flux = flux + se * (T**4 - pr.T_amb**4)
        else:
            flux = flux + pr.h_rad * (T - pr.T_amb)
        return np.einsum("eq,eq,eqa->ea", ctx.dx, flux, ctx.phi(1))

    return Kernel(func, 8, "ambient residual")


def body_residual_kernel(problem: HeatFluidProblem, st: State) -> Kernel:
    pr = problem.params

    def func(ctx):
        flux = pr.h_bl * (ctx.value(st.T) - pr.T_bl)
        return np.einsum("eq,eq,eqa->ea", ctx.dx, flux, ctx.phi(1))

    return Kernel(func, 2, "body residual")


# -- residual ---------------------------------------------------------------------

@dataclass
class Residual:
    """Free-dof residual blocks ``r = l - F`` (pressure block mean-free)."""

    r_u: np.ndarray
    r_p: np.ndarray
    r_T: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r_u, self.r_p, self.r_T])

    def norms(self) -> tuple[float, float, float]:
        return tuple(float(np.linalg.norm(r)) for r in (self.r_u, self.r_p, self.r_T))

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def assemble_forms(problem: HeatFluidProblem, st: State) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-length ``F_u, F_p, F_T`` (forms minus loads) at a state."""
    V, Q, W = problem.V, problem.Q, problem.W
    Fu = assemble_cells(momentum_residual_kernel(problem, st), None, V, domain=problem.fluid_domain)
    Fp = assemble_cells(continuity_residual_kernel(problem, st), None, Q, domain=problem.fluid_domain)
    FT = assemble_cells(conduction_residual_kernel(problem, st), None, W, domain=problem.domain)
    FT = FT + assemble_cells(convection_residual_kernel(problem, st), None, W, domain=problem.fluid_domain)
    if problem.gamma_amb:
        FT = FT + assemble_facets(ambient_residual_kernel(problem, st), None, W, problem.gamma_amb,
                                  domain=problem.domain)
    if problem.gamma_body:
        FT = FT + assemble_facets(body_residual_kernel(problem, st), None, W, problem.gamma_body,
                                  domain=problem.domain)
    return Fu, Fp, FT


def project_constant(v: np.ndarray) -> np.ndarray:
    return v - v.mean() if len(v) else v


def assemble_residual(problem: HeatFluidProblem, st: State) -> Residual:
    """Residual ``r = l - F(u, p, T)`` restricted to free dofs.

    The constant pressure mode is projected out of ``r_p``.
    """
    Fu, Fp, FT = assemble_forms(problem, st)
    return Residual(-Fu[problem.u_free], project_constant(-Fp), -FT[problem.T_free])


# -- matrices -----------------------------------------------------------------------

def _viscous_kernel(pr: PhysicalParams, dim: int) -> Kernel:
    """``a2(du, v) = mu D(du) : grad v`` in the blocked (comp, node) layout.

    Entry (test ``(c, a)``, trial ``(d, b)``) is
    ``mu/2 [delta_cd grad phi_a . grad phi_b + d_d phi_a d_c phi_b]``.
    """

    def func(ctx):
        g = ctx.dphi(2)  # (e,q,a,x)
        out = 0.5 * np.einsum("eq,eqad,eqbc->ecadb", ctx.dx, g, g)
        lap = 0.5 * np.einsum("eq,eqax,eqbx->eab", ctx.dx, g, g)
        for c in range(dim):
            out[:, c, :, c, :] += lap
        ne, nl = lap.shape[:2]
        return pr.mu * out.reshape(ne, dim * nl, dim * nl)

    return Kernel(func, 2, "viscous")


def _pressure_kernel() -> Kernel:
    """``b(p, v)`` as the (q, v) block ``B[q, (c, b)] = -psi_q d_c phi_b``."""

    def func(ctx):
        psi = ctx.phi(1)
        g = ctx.dphi(2)
        loc = -np.einsum("eq,eqa,eqbc->eacb", ctx.dx, psi, g)
        return loc.reshape(loc.shape[0], loc.shape[1], -1)

    return Kernel(func, 2, "divergence")


def _buoyancy_kernel(pr: PhysicalParams) -> Kernel:
    """``d(T, v) = rho beta T g . v``: rows velocity, columns temperature."""
    g = pr.gravity

    def func(ctx):
        m = np.einsum("eq,eqa,eqb->eab", ctx.dx, ctx.phi(2), ctx.phi(1))
        loc = pr.rho * pr.beta * g[None, :, None, None] * m[:, None]
        return loc.reshape(loc.shape[0], -1, loc.shape[-1])

    return Kernel(func, 3, "buoyancy")


def _advection_kernel(pr: PhysicalParams, u: Field, dim: int) -> Kernel:
    """``V = a1(u_k, du, v)``: rho (u_k . grad phi_b) phi_a per component."""

    def func(ctx):
        uk = ctx.value(u)
        blk = pr.rho * np.einsum("eq,eqa,eqx,eqbx->eab", ctx.dx, ctx.phi(2), uk, ctx.dphi(2))
        ne, nl = blk.shape[:2]
        out = np.zeros((ne, dim, nl, dim, nl))
        for c in range(dim):
            out[:, c, :, c, :] = blk
        return out.reshape(ne, dim * nl, dim * nl)

    return Kernel(func, 5, "advection V")


def _reaction_kernel(pr: PhysicalParams, u: Field, dim: int) -> Kernel:
    """``W = a1(du, u_k, v)``: rho phi_a phi_b d_d u_k,c."""

    def func(ctx):
        gu = ctx.grad(u)  # (e,q,c,d)
        phi = ctx.phi(2)
        out = pr.rho * np.einsum("eq,eqcd,eqa,eqb->ecadb", ctx.dx, gu, phi, phi)
        ne, nl = out.shape[0], out.shape[2]
        return out.reshape(ne, dim * nl, dim * nl)

    return Kernel(func, 5, "reaction W")


def _heat_velocity_kernel(pr: PhysicalParams, T: Field) -> Kernel:
    """``E1 = e(du, T_k, phi)``: rows temperature, columns velocity."""

    def func(ctx):
        gT = ctx.grad(T)  # (e,q,x)
        loc = pr.rho * pr.Cp * np.einsum("eq,eqa,eqx,eqb->eaxb", ctx.dx, ctx.phi(1), gT, ctx.phi(2))
        return loc.reshape(loc.shape[0], loc.shape[1], -1)

    return Kernel(func, 3, "heat-velocity E1")


def _heat_advection_kernel(pr: PhysicalParams, u: Field) -> Kernel:
    """``E2 = e(u_k, dT, phi)``."""

    def func(ctx):
        return pr.rho * pr.Cp * np.einsum("eq,eqa,eqx,eqbx->eab", ctx.dx, ctx.phi(1), ctx.value(u),
                                          ctx.dphi(1))

    return Kernel(func, 3, "heat advection E2")


def _conduction_kernel(problem: HeatFluidProblem) -> Kernel:
    def func(ctx):
        k = _k_at(problem, ctx)
        g = ctx.dphi(1)
        return np.einsum("e,eq,eqax,eqbx->eab", k, ctx.dx, g, g)

    return Kernel(func, 0, "conduction")


def _mass_kernel() -> Kernel:
    def func(ctx):
        phi = ctx.phi(1)
        return np.einsum("eq,eqa,eqb->eab", ctx.dx, phi, phi)

    return Kernel(func, 2, "pressure mass")


def _robin_kernel(h: float) -> Kernel:
    def func(ctx):
        phi = ctx.phi(1)
        return h * np.einsum("eq,eqa,eqb->eab", ctx.dx, phi, phi)

    return Kernel(func, 2, "robin")


def _radiation_jacobian_kernel(pr: PhysicalParams, T: Field) -> Kernel:
    se = pr.sigma_SB * pr.epsilon

    def func(ctx):
        phi = ctx.phi(1)
        w = 4.0 * se * ctx.value(T) ** 3
        return np.einsum("eq,eq,eqa,eqb->eab", ctx.dx, w, phi, phi)

    return Kernel(func, 8, "radiation jacobian")


def assemble_constant_blocks(problem: HeatFluidProblem) -> dict[str, sp.csr_matrix]:
    """Full-size state-independent blocks ``N, B, D``, the heat operator ``F0`` and pressure mass ``Mp``.

    ``F0`` holds conduction and the linear Robin terms (including the
    linearized radiation coefficient in that variant).
    """
    pr = problem.params
    V, Q, W = problem.V, problem.Q, problem.W
    fd = problem.fluid_domain
    dim = problem.mesh.dim
    N = assemble_cells(_viscous_kernel(pr, dim), V, V, domain=fd)
    B = assemble_cells(_pressure_kernel(), V, Q, domain=fd)
    D = assemble_cells(_buoyancy_kernel(pr), W, V, domain=fd)
    F0 = assemble_cells(_conduction_kernel(problem), W, W, domain=problem.domain)
    h_amb = pr.h_amb + (pr.h_rad if problem.radiation == "linearized" else 0.0)
    if problem.gamma_amb and h_amb:
        F0 = F0 + assemble_facets(_robin_kernel(h_amb), W, W, problem.gamma_amb, domain=problem.domain)
    if problem.gamma_body and pr.h_bl:
        F0 = F0 + assemble_facets(_robin_kernel(pr.h_bl), W, W, problem.gamma_body, domain=problem.domain)
    Mp = assemble_cells(_mass_kernel(), Q, Q, domain=fd)
    return {"N": N.tocsr(), "B": B.tocsr(), "D": D.tocsr(), "F0": F0.tocsr(), "Mp": Mp.tocsr()}


def assemble_state_blocks(problem: HeatFluidProblem, st: State,
                          T_radiation: Field | None = None) -> dict[str, sp.csr_matrix]:
    """Full-size state-dependent blocks ``V, W, E1, E2`` and ``F_rad``.

    ``F_rad`` is the facet matrix of ``4 sigma eps T^3`` evaluated at
    ``T_radiation`` (default ``st.T``); it is zero in the linearized
    radiation variant. ``V`` and ``W`` are zero in the Stokes variant.
    """
    for f in (st.u, st.p, st.T):
        if not np.all(np.isfinite(f.coeffs)):
            raise ValueError("state contains non-finite values")
    pr = problem.params
    V, W = problem.V, problem.W
    fd = problem.fluid_domain
    dim = problem.mesh.dim
    out = {}
    if problem.flow == "navier_stokes":
        out["V"] = assemble_cells(_advection_kernel(pr, st.u, dim), V, V, domain=fd)
        out["W"] = assemble_cells(_reaction_kernel(pr, st.u, dim), V, V, domain=fd)
    else:
        out["V"] = sp.csr_matrix((V.n_dofs, V.n_dofs))
        out["W"] = sp.csr_matrix((V.n_dofs, V.n_dofs))
    out["E1"] = assemble_cells(_heat_velocity_kernel(pr, st.T), V, W, domain=fd)
    out["E2"] = assemble_cells(_heat_advection_kernel(pr, st.u), W, W, domain=fd)
    if problem.radiation == "nonlinear" and problem.gamma_amb and pr.epsilon:
        Tr = st.T if T_radiation is None else T_radiation
        out["F_rad"] = assemble_facets(_radiation_jacobian_kernel(pr, Tr), W, W, problem.gamma_amb,
                                       domain=problem.domain)
    else:
        out["F_rad"] = sp.csr_matrix((W.n_dofs, W.n_dofs))
    return {k: v.tocsr() for k, v in out.items()}


@dataclass(eq=False)
class NewtonSystem:
    """Block Newton system on free dofs.

    ::

        [ A   B^T  D ] [du]   [r_u]
        [ B   0    0 ] [dp] = [r_p]
        [ E1  0    K ] [dT]   [r_T]

    with ``A = N + V + W`` and ``K = E2 + F``. The fluid block
    ``K00 = [[A, B^T], [B, 0]]`` and heat block ``K11 = K`` are coupled by
    ``K01 = [D; 0]`` and ``K10 = [E1, 0]``.
    """

    blocks: dict
    r_u: np.ndarray
    r_p: np.ndarray
    r_T: np.ndarray

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.r_u), len(self.r_p), len(self.r_T)

    @property
    def A(self) -> sp.csr_matrix:
        b = self.blocks
        return (b["N"] + b["V"] + b["W"]).tocsr()

    @property
    def K(self) -> sp.csr_matrix:
        return (self.blocks["E2"] + self.blocks["F"]).tocsr()

    @property
    def K00(self) -> sp.csr_matrix:
        B = self.blocks["B"]
        return sp.bmat([[self.A, B.T], [B, None]], format="csr")

    @property
    def K11(self) -> sp.csr_matrix:
        return self.K

    @property
    def K01(self) -> sp.csr_matrix:
        return sp.vstack([self.blocks["D"], sp.csr_matrix((self.sizes[1], self.sizes[2]))], format="csr")

    @property
    def K10(self) -> sp.csr_matrix:
        return sp.hstack([self.blocks["E1"], sp.csr_matrix((self.sizes[2], self.sizes[1]))], format="csr")

    def matrix(self) -> sp.csr_matrix:
        b = self.blocks
        return sp.bmat([[self.A, b["B"].T, b["D"]],
                        [b["B"], None, None],
                        [b["E1"], None, self.K]], format="csr")

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.r_u, self.r_p, self.r_T])

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nu, np_, _ = self.sizes
        return x[:nu], x[nu:nu + np_], x[nu + np_:]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Block-wise product, equal to ``matrix() @ x``."""
        b = self.blocks
        u, p, T = self.split(x)
        yu = b["N"] @ u + b["V"] @ u + b["W"] @ u + b["B"].T @ p + b["D"] @ T
        yp = b["B"] @ u
        yT = b["E1"] @ u + b["E2"] @ T + b["F"] @ T
        return np.concatenate([yu, yp, yT])


def build_newton_system(problem: HeatFluidProblem, st: State, constant: dict | None = None,
                        T_radiation: Field | None = None, residual: Residual | None = None) -> NewtonSystem:
    """Assemble the Newton system at ``st`` with Dirichlet dofs eliminated."""
    cb = assemble_constant_blocks(problem) if constant is None else constant
    sb = assemble_state_blocks(problem, st, T_radiation)
    res = assemble_residual(problem, st) if residual is None else residual
    uf, tf = problem.u_free, problem.T_free

    def r(M, rows, cols):
        return M[rows][:, cols].tocsr()

    allp = problem.p_free
    blocks = {
        "N": r(cb["N"], uf, uf),
        "V": r(sb["V"], uf, uf),
        "W": r(sb["W"], uf, uf),
        "B": r(cb["B"], allp, uf),
        "D": r(cb["D"], uf, tf),
        "E1": r(sb["E1"], tf, uf),
        "E2": r(sb["E2"], tf, tf),
        "F": r(cb["F0"] + sb["F_rad"], tf, tf),
        "Mp": cb["Mp"],
    }
    nu, np_, nT = problem.sizes
    if res.r_u.shape != (nu,) or res.r_p.shape != (np_,) or res.r_T.shape != (nT,):
        raise ValueError("residual does not match the system dimensions")
    return NewtonSystem(blocks, res.r_u, res.r_p, res.r_T)


def conduction_state(problem: HeatFluidProblem, T0: float | None = None, tol: float = 1e-12,
                     max_iters: int = 50) -> State:
    """State with ``u`` at its boundary values, ``p = 0`` and ``T`` solving heat
    conduction with ``u = 0`` (Newton on the radiation term)."""
    from scipy.sparse.linalg import spsolve

    st = initial_state(problem, T0)
    st.u.coeffs[:] = 0.0
    cb = assemble_constant_blocks(problem)
    tf = problem.T_free
    for _ in range(max_iters):
        _, _, FT = assemble_forms(problem, st)
        r = -FT[tf]
        sb_rad = assemble_state_blocks(problem, st)["F_rad"]
        K = (cb["F0"] + sb_rad)[tf][:, tf].tocsc()
        dT = spsolve(K, r)
        st.T.coeffs[tf] += dT
        if np.linalg.norm(dT) <= tol * max(np.linalg.norm(st.T.coeffs[tf]), 1.0):
            break
    st.u.coeffs[problem.u_bc_dofs] = problem.u_bc_values
    return st


def make_spaces(mesh: Mesh, fluid_labels) -> tuple[FunctionSpace, FunctionSpace, FunctionSpace]:
    """Taylor-Hood velocity/pressure on the fluid submesh and P1 temperature on ``mesh``."""
    fluid = extract_subdomain(mesh, fluid_labels)
    return (build_space(fluid, 2, components=mesh.dim), build_space(fluid, 1), build_space(mesh, 1))


__all__ = [
    "HeatFluidProblem", "NewtonSystem", "PhysicalParams", "Residual", "State", "TISSUE_CONDUCTIVITY",
    "assemble_constant_blocks", "assemble_forms", "assemble_residual", "assemble_state_blocks",
    "build_newton_system", "conduction_state", "initial_state", "make_spaces",
    "pack", "project_constant", "unpack",
]
