"""Problem instances: eye model with posture, desk-scale analogues and manufactured solutions.

A :class:`ScenarioSpec` is an immutable description (mesh source, label
roles, parameters, posture, variant) that round-trips through a flat
dotted-key TOML config file and builds a :class:`~ocuflow.forms.HeatFluidProblem`.
"""
from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import numpy as np
import sympy

from .fem import Field, interpolate, l2_error
from .forms import FLOW_VARIANTS, RADIATION_VARIANTS, HeatFluidProblem, PhysicalParams, State
from .mesh import Mesh, extract_subdomain, generate_box, generate_polar_blocks, generate_rect, load_msh
from .newton import LineSearch, NewtonConfig, NewtonResult, newton_solve

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


class ScenarioError(ValueError):
    """Inconsistent scenario description."""


class Posture(str, Enum):
    """Head posture; fixes the gravity direction."""

    STANDING = "standing"
    SUPINE = "supine"
    PRONE = "prone"

    def gravity_dir(self, dim: int = 3) -> tuple:
        """Unit gravity vector; 2D uses the in-plane axes ``(x, y)``."""
        g3 = {"standing": (0.0, -1.0, 0.0), "supine": (1.0, 0.0, 0.0), "prone": (-1.0, 0.0, 0.0)}[self.value]
        if dim == 3:
            return g3
        if dim == 2:
            return g3[:2]
        raise ValueError(f"dim must be 2 or 3, got {dim}")

    def gravity(self, g_mag: float = 9.81, dim: int = 3) -> tuple:
        return tuple(g_mag * c for c in self.gravity_dir(dim))


def as_posture(p) -> Posture | None:
    if p is None or isinstance(p, Posture):
        return p
    try:
        return Posture(str(p).lower())
    except ValueError:
        raise ScenarioError(f"unknown posture {p!r}; choose from {[q.value for q in Posture]}") from None


# -- geometries ------------------------------------------------------------------------

MM = 1e-3

# radial layers (mm) of the eye slice: lens/iris, a 2 mm deep aqueous humor chamber, cornea
EYE_SLICE_RADII = (3.8, 5.8, 7.8, 8.35)
# angular segments (degrees): sclera | iris | lens | iris | sclera
EYE_SLICE_ANGLES = (-90.0, -50.0, -20.0, 20.0, 50.0, 90.0)


def eye_slice_mesh(n: int = 1) -> Mesh:
    """Desk-scale 2D vertical cut through the front of an eye (an analogue, not anatomy).

    A half annulus centred at the corneal centre of curvature with the
    cornea facing ``+x``. Radially: iris (sides) or lens (centre), then the
    aqueous humor chamber, then the cornea; the angular ends are sclera.

    Subdomains: ``lens``, ``iris``, ``aqueousHumor``, ``cornea``, ``sclera``.
    Boundaries: ``cornea_surface`` (exposed), ``sclera_surface``,
    ``posterior`` and ``sclera_cut``; fluid walls ``wall_cornea``,
    ``wall_iris``, ``wall_lens``, ``wall_sclera``.
    """
    if n < 1:
        raise ValueError("refinement factor must be >= 1")
    r_breaks = [r * MM for r in EYE_SLICE_RADII]
    t_breaks = [math.radians(t) for t in EYE_SLICE_ANGLES]
    inner_layer = ("sclera", "iris", "lens", "iris", "sclera")

    def region(i, j):
        if j in (0, 4):
            return "sclera"
        return (inner_layer[j], "aqueousHumor", "cornea")[i]

    def boundary(kind, r, t, name):
        if kind == "outer":
            return "cornea_surface" if name == "cornea" else "sclera_surface"
        if kind == "inner":
            return "posterior"
        return "sclera_cut"

    def interface(a, b):
        pair = {a, b}
        if "aqueousHumor" not in pair:
            return None
        other = (pair - {"aqueousHumor"}).pop()
        return f"wall_{other}"

    return generate_polar_blocks(r_breaks, t_breaks, nr=[2 * n, 6 * n, 2 * n], ntheta=[4 * n, 4 * n, 6 * n, 4 * n, 4 * n],
                                 region=region, boundary=boundary, interface=interface)


def cavity_mesh(nx: int, ny: int, width: float, height: float, subdomain: str = "aqueousHumor") -> Mesh:
    return generate_rect(nx, ny, (width, height), subdomain=subdomain)


def box_mesh(nx: int, ny: int, nz: int, width: float, height: float, depth: float,
             subdomain: str = "aqueousHumor") -> Mesh:
    return generate_box(nx, ny, nz, (width, height, depth), subdomain=subdomain)


def rect_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0, subdomain: str = "domain") -> Mesh:
    return generate_rect(nx, ny, (width, height), subdomain=subdomain)


GENERATORS: dict[str, Callable[..., Mesh]] = {
    "eye_slice": eye_slice_mesh,
    "cavity": cavity_mesh,
    "box": box_mesh,
    "rect": rect_mesh,
}

# generator arguments that count divisions (scaled by ScenarioSpec.refined)
_DIVISION_ARGS = ("n", "nx", "ny", "nz")


# -- manufactured solutions -----------------------------------------------------------

_XYZ = sympy.symbols("x y z", real=True)


def _sym(expr) -> sympy.Expr:
    return sympy.sympify(expr, locals=dict(zip(("x", "y", "z"), _XYZ)))


def _lambdify(expr, dim: int) -> Callable:
    """Vectorized ``f(x)`` over points of shape ``(..., dim)``."""
    syms = _XYZ[:dim]
    f = sympy.lambdify(syms, expr, modules="numpy")

    def call(x):
        x = np.asarray(x, dtype=float)
        out = f(*(x[..., i] for i in range(dim)))
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return call


def _vector_fn(comps: list) -> Callable:
    def call(x):
        return np.stack([c(x) for c in comps], axis=-1)
    return call


@dataclass(frozen=True)
class Manufactured:
    """Exact fields and the sources that make them solve the flow/heat equations."""

    u: Callable
    p: Callable
    T: Callable
    f_u: Callable
    f_p: Callable
    f_T: Callable


def manufactured_sources(u_exact, p_exact, T_exact, params: PhysicalParams, flow: str = "navier_stokes",
                         conductivity: float = 1.0) -> Manufactured:
    """Sources for the strong form matching the implemented weak forms.

    ``rho (u.grad)u - div(mu D(u)) + grad p + rho beta (T - T_ref) g = f_u``,
    ``-div u = f_p`` and ``rho Cp u.grad T - div(k grad T) = f_T`` with
    ``D(u) = (grad u + grad u^T)/2``.
    """
    dim = len(u_exact)
    X = _XYZ[:dim]
    u = [_sym(c) for c in u_exact]
    p = _sym(p_exact)
    T = _sym(T_exact)
    pr = params
    g = [pr.g_mag * c for c in pr.gravity_dir]
    if len(g) != dim:
        raise ScenarioError("gravity_dir does not match the dimension of the exact velocity")
    grad_u = [[sympy.diff(u[i], X[j]) for j in range(dim)] for i in range(dim)]
    D = [[(grad_u[i][j] + grad_u[j][i]) / 2 for j in range(dim)] for i in range(dim)]
    f_u = []
    for i in range(dim):
        fi = -pr.mu * sum(sympy.diff(D[i][j], X[j]) for j in range(dim)) + sympy.diff(p, X[i])
        fi += pr.rho * pr.beta * (T - pr.T_ref) * g[i]
        if flow == "navier_stokes":
            fi += pr.rho * sum(u[j] * grad_u[i][j] for j in range(dim))
        f_u.append(fi)
    f_p = -sum(grad_u[i][i] for i in range(dim))
    lap_T = sum(sympy.diff(T, X[j], 2) for j in range(dim))
    f_T = pr.rho * pr.Cp * sum(u[j] * sympy.diff(T, X[j]) for j in range(dim)) - conductivity * lap_T
    lam = [_lambdify(c, dim) for c in u]
    return Manufactured(
        u=_vector_fn(lam), p=_lambdify(p, dim), T=_lambdify(T, dim),
        f_u=_vector_fn([_lambdify(c, dim) for c in f_u]), f_p=_lambdify(f_p, dim), f_T=_lambdify(f_T, dim),
    )


# default smooth manufactured solution: velocity is the curl of a stream function
MMS_DEFAULT = {
    "u": ("pi*sin(pi*x)*cos(pi*y)", "-pi*cos(pi*x)*sin(pi*y)"),
    "p": "cos(pi*x)*cos(pi*y)",
    "T": "1 + sin(pi*x)*sin(2*pi*y)/2",
}

MMS_PARAMS = dict(mu=1.0, rho=1.0, Cp=1.0, beta=0.1, g_mag=1.0, T_ref=1.0, T_bl=1.0, T_amb=1.0,
                  h_bl=0.0, h_amb=0.0, E=0.0, epsilon=0.0, k_by_label={"domain": 1.0},
                  gravity_dir=(0.0, -1.0))


# -- scenario spec ---------------------------------------------------------------------

_BOUNDARY_SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class ScenarioSpec:
    """Immutable description of a problem instance.

    Attributes
    ----------
    name : str
    mesh_path : str or None
        MSH 4.1 file; exclusive with ``generator``.
    generator : str or None
        Key of :data:`GENERATORS`, called with ``generator_args``.
    fluid_labels, gamma_amb, gamma_body, wall_labels : tuple of str
    params : PhysicalParams
    posture : Posture or None
        Overrides ``params.gravity_dir`` when set.
    flow, radiation : str
        Model variant.
    temperature_dirichlet : dict
        Boundary label to temperature [K] (benchmarks only).
    velocity_dirichlet : dict
        Fluid boundary label to a constant velocity (lid-driven tests).
    mms : dict or None
        Exact ``u`` (tuple of expressions), ``p`` and ``T`` as strings in
        ``x, y, z``; sources and Dirichlet data follow from them.
    solver : str
        Solver preset name.
    newton : dict
        Keyword overrides of :class:`~ocuflow.newton.NewtonConfig`.
    """

    name: str = "scenario"
    mesh_path: str | None = None
    generator: str | None = None
    generator_args: dict = field(default_factory=dict)
    fluid_labels: tuple = ("aqueousHumor",)
    gamma_amb: tuple = ()
    gamma_body: tuple = ()
    wall_labels: tuple = ()
    params: PhysicalParams = field(default_factory=PhysicalParams)
    posture: Posture | None = Posture.STANDING
    flow: str = "navier_stokes"
    radiation: str = "nonlinear"
    temperature_dirichlet: dict = field(default_factory=dict)
    velocity_dirichlet: dict = field(default_factory=dict)
    mms: dict | None = None
    solver: str = "table2"
    newton: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("fluid_labels", "gamma_amb", "gamma_body", "wall_labels"):
            v = getattr(self, name)
            object.__setattr__(self, name, (v,) if isinstance(v, str) else tuple(v))
        object.__setattr__(self, "posture", as_posture(self.posture))
        if (self.mesh_path is None) == (self.generator is None):
            raise ScenarioError("exactly one of mesh.path and mesh.generator must be given")
        if self.generator is not None and self.generator not in GENERATORS:
            raise ScenarioError(f"unknown mesh generator {self.generator!r}; choose from {sorted(GENERATORS)}")
        if self.flow not in FLOW_VARIANTS:
            raise ScenarioError(f"variant.flow must be one of {FLOW_VARIANTS}, got {self.flow!r}")
        if self.radiation not in RADIATION_VARIANTS:
            raise ScenarioError(f"variant.radiation must be one of {RADIATION_VARIANTS}, got {self.radiation!r}")
        if not self.fluid_labels:
            raise ScenarioError("fluid.labels must name at least one subdomain")
        overlap = set(self.gamma_amb) & set(self.gamma_body)
        if overlap:
            raise ScenarioError(f"boundary labels {sorted(overlap)} are in both gamma_amb and gamma_body")
        object.__setattr__(self, "temperature_dirichlet",
                           {str(k): float(v) for k, v in dict(self.temperature_dirichlet).items()})
        object.__setattr__(self, "velocity_dirichlet",
                           {str(k): tuple(float(c) for c in v) for k, v in dict(self.velocity_dirichlet).items()})
        if self.mms is not None:
            m = dict(self.mms)
            if set(m) != {"u", "p", "T"}:
                raise ScenarioError("mms needs exactly the keys u, p and T")
            object.__setattr__(self, "mms", {"u": tuple(str(c) for c in m["u"]), "p": str(m["p"]),
                                             "T": str(m["T"])})

    # -- derived ------------------------------------------------------------------
    def effective_params(self, dim: int) -> PhysicalParams:
        """Parameters with the posture's gravity direction for a ``dim``-D mesh."""
        if self.posture is None:
            return self.params
        return self.params.replace(gravity_dir=self.posture.gravity_dir(dim))

    def gravity(self, dim: int) -> tuple:
        return tuple(float(c) for c in self.effective_params(dim).gravity)

    def replace(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)

    def with_posture(self, posture) -> "ScenarioSpec":
        return replace(self, posture=as_posture(posture))

    def with_variant(self, flow: str | None = None, radiation: str | None = None) -> "ScenarioSpec":
        return replace(self, flow=flow or self.flow, radiation=radiation or self.radiation)

    def with_param(self, key: str, value) -> "ScenarioSpec":
        """Copy with ``params.<key>`` (or ``params.k_by_label.<label>``) set."""
        key = key[len("params."):] if key.startswith("params.") else key
        if key.startswith("k_by_label."):
            label = key.split(".", 1)[1]
            k = dict(self.params.k_by_label)
            k[label] = float(value)
            return replace(self, params=self.params.replace(k_by_label=k))
        if key not in {f.name for f in fields(PhysicalParams)}:
            raise ScenarioError(f"unknown parameter {key!r}")
        return replace(self, params=self.params.replace(**{key: value}))

    def refined(self, factor: int) -> "ScenarioSpec":
        """Copy whose generated mesh has ``factor`` times the divisions."""
        if self.generator is None:
            raise ScenarioError("only generated meshes can be refined")
        args = {k: (v * factor if k in _DIVISION_ARGS else v) for k, v in self.generator_args.items()}
        return replace(self, generator_args=args)

    # -- building -----------------------------------------------------------------
    def build_mesh(self) -> Mesh:
        if self.mesh_path is not None:
            path = Path(self.mesh_path)
            if not path.exists():
                raise FileNotFoundError(f"mesh file not found: {path}")
            return load_msh(path)
        try:
            return GENERATORS[self.generator](**self.generator_args)
        except TypeError as exc:
            raise ScenarioError(f"bad arguments for generator {self.generator!r}: {exc}") from None

    def manufactured(self, dim: int) -> Manufactured | None:
        if self.mms is None:
            return None
        pr = self.effective_params(dim)
        k = {pr.conductivity(lab) for lab in self.fluid_labels}
        if len(k) != 1:
            raise ScenarioError("manufactured solutions need a single conductivity")
        return manufactured_sources(self.mms["u"], self.mms["p"], self.mms["T"], pr, self.flow, k.pop())

    def check_mesh(self, mesh: Mesh) -> None:
        """Validate label roles against a mesh."""
        missing = [lab for lab in mesh.subdomain_names.values() if lab not in self.effective_params(mesh.dim).k_by_label]
        if missing:
            raise ScenarioError(f"no conductivity for subdomain(s) {missing}")
        for lab in self.fluid_labels:
            if lab not in mesh.subdomain_names.values():
                raise ScenarioError(f"fluid label {lab!r} is not a subdomain of the mesh")
        for lab in self.gamma_amb + self.gamma_body + tuple(self.temperature_dirichlet):
            if not mesh.has_boundary_label(lab):
                raise ScenarioError(f"boundary label {lab!r} is not in the mesh")
        if self.wall_labels:
            sub = extract_subdomain(mesh, self.fluid_labels)
            used = {sub.mesh.boundary_names[t] for t in np.unique(sub.mesh.facet_labels).tolist()}
            uncovered = sorted(used - set(self.wall_labels))
            if uncovered:
                raise ScenarioError(f"fluid boundary labels {uncovered} are not listed as walls")

    def build_problem(self, mesh: Mesh | None = None) -> HeatFluidProblem:
        mesh = self.build_mesh() if mesh is None else mesh
        self.check_mesh(mesh)
        pr = self.effective_params(mesh.dim)
        udir: dict = dict(self.velocity_dirichlet)
        tdir: dict = dict(self.temperature_dirichlet)
        sources: dict = {}
        mf = self.manufactured(mesh.dim)
        if mf is not None:
            fluid = extract_subdomain(mesh, self.fluid_labels)
            for lab in fluid.mesh.boundary_names.values():
                udir[lab] = mf.u
            for lab in mesh.boundary_names.values():
                tdir[lab] = mf.T
            sources = dict(velocity_source=mf.f_u, pressure_source=mf.f_p, temperature_source=mf.f_T)
        return HeatFluidProblem(mesh, self.fluid_labels, pr, gamma_amb=self.gamma_amb, gamma_body=self.gamma_body,
                                flow=self.flow, radiation=self.radiation, velocity_dirichlet=udir,
                                temperature_dirichlet=tdir, **sources)

    def newton_config(self) -> NewtonConfig:
        """:class:`~ocuflow.newton.NewtonConfig` from the ``newton.*`` entries."""
        kw = dict(self.newton)
        ls = {k.split(".", 1)[1]: kw.pop(k) for k in list(kw) if k.startswith("line_search.")}
        if "line_search" in kw:
            ls["kind"] = kw.pop("line_search")
        known = {f.name for f in fields(NewtonConfig)} - {"line_search", "variant"}
        unknown = sorted(set(kw) - known)
        if unknown:
            raise ScenarioError(f"unknown newton option(s) {unknown}")
        try:
            return NewtonConfig(line_search=LineSearch(**ls), **kw)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid newton options: {exc}") from None

    # -- config I/O ---------------------------------------------------------------
    def to_config(self) -> dict[str, Any]:
        """Flat dotted-key dictionary (the config file content)."""
        c: dict[str, Any] = {"scenario.name": self.name}
        if self.mesh_path is not None:
            c["mesh.path"] = str(self.mesh_path)
        else:
            c["mesh.generator"] = self.generator
            for k, v in self.generator_args.items():
                c[f"mesh.{k}"] = v
        c["posture"] = self.posture.value if self.posture is not None else "none"
        c["variant.flow"] = self.flow
        c["variant.radiation"] = self.radiation
        c["fluid.labels"] = list(self.fluid_labels)
        c["boundaries.gamma_amb"] = list(self.gamma_amb)
        c["boundaries.gamma_body"] = list(self.gamma_body)
        c["boundaries.walls"] = list(self.wall_labels)
        for k, v in self.params.to_dict().items():
            if k == "k_by_label":
                for lab, kv in v.items():
                    c[f"params.k_by_label.{lab}"] = kv
            else:
                c[f"params.{k}"] = v
        for lab, v in self.temperature_dirichlet.items():
            c[f"bc.temperature.{lab}"] = v
        for lab, v in self.velocity_dirichlet.items():
            c[f"bc.velocity.{lab}"] = list(v)
        if self.mms is not None:
            c["mms.u"] = list(self.mms["u"])
            c["mms.p"] = self.mms["p"]
            c["mms.T"] = self.mms["T"]
        c["solver.preset"] = self.solver
        for k, v in self.newton.items():
            c[f"newton.{k}"] = v
        return c

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "ScenarioSpec":
        """Inverse of :meth:`to_config`; accepts nested or flat dictionaries."""
        flat = flatten(cfg)
        known_params = {f.name for f in fields(PhysicalParams)}
        kw: dict[str, Any] = {"generator_args": {}, "temperature_dirichlet": {}, "velocity_dirichlet": {},
                              "newton": {}}
        params: dict[str, Any] = {}
        kby: dict[str, float] = {}
        mms: dict[str, Any] = {}

        def parse(key, v):
            head, _, rest = key.partition(".")
            if key == "scenario.name":
                kw["name"] = str(v)
            elif key == "mesh.path":
                kw["mesh_path"] = str(v)
            elif key == "mesh.generator":
                kw["generator"] = str(v)
            elif head == "mesh":
                kw["generator_args"][rest] = v
            elif key == "posture":
                kw["posture"] = None if str(v).lower() == "none" else v
            elif key == "variant.flow":
                kw["flow"] = v
            elif key == "variant.radiation":
                kw["radiation"] = v
            elif key == "fluid.labels":
                kw["fluid_labels"] = _str_list(v, key)
            elif key == "boundaries.gamma_amb":
                kw["gamma_amb"] = _str_list(v, key)
            elif key == "boundaries.gamma_body":
                kw["gamma_body"] = _str_list(v, key)
            elif key == "boundaries.walls":
                kw["wall_labels"] = _str_list(v, key)
            elif head == "params" and rest.startswith("k_by_label."):
                kby[rest.split(".", 1)[1]] = float(v)
            elif head == "params":
                if rest not in known_params:
                    raise ScenarioError(f"unknown parameter {key!r}")
                params[rest] = tuple(v) if rest == "gravity_dir" else v
            elif key.startswith("bc.temperature."):
                kw["temperature_dirichlet"][key[len("bc.temperature."):]] = v
            elif key.startswith("bc.velocity."):
                kw["velocity_dirichlet"][key[len("bc.velocity."):]] = v
            elif head == "mms" and rest in ("u", "p", "T"):
                mms[rest] = v
            elif key == "solver.preset":
                kw["solver"] = str(v)
            elif head == "newton":
                kw["newton"][rest] = v
            else:
                raise ScenarioError(f"unknown config key {key!r}")

        for key, v in flat.items():
            try:
                parse(key, v)
            except ScenarioError:
                raise
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"invalid value for {key!r}: {v!r} ({exc})") from None
        if kby:
            params["k_by_label"] = kby
        try:
            kw["params"] = PhysicalParams(**params)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid parameters: {exc}") from None
        if mms:
            kw["mms"] = mms
        try:
            return cls(**kw)
        except ScenarioError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid config: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(dumps_config(self.to_config()))

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
        spec = cls.from_config(data)
        if spec.mesh_path is not None and not Path(spec.mesh_path).is_absolute():
            spec = replace(spec, mesh_path=str((path.parent / spec.mesh_path)))
        return spec


def _str_list(v, key) -> tuple:
    if isinstance(v, str):
        return (v,)
    if not isinstance(v, (list, tuple)) or not all(isinstance(s, str) for s in v):
        raise ScenarioError(f"{key} must be a list of strings")
    return tuple(v)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


_BARE = re.compile(r"^[A-Za-z0-9_-]+$")


def _toml_key(key: str) -> str:
    return ".".join(p if _BARE.match(p) else '"' + p.replace("\\", "\\\\").replace('"', '\\"') + '"'
                    for p in key.split("."))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to a config file")


def dumps_config(flat: dict) -> str:
    """Serialize a flat dotted-key dictionary as TOML (one ``key = value`` per line)."""
    return "".join(f"{_toml_key(k)} = {_toml_value(v)}\n" for k, v in flat.items())


# -- scenario factories --------------------------------------------------------------

def make_eye_scenario(mesh: str | None = None, params: PhysicalParams | None = None,
                      posture="standing", variant: tuple = ("navier_stokes", "nonlinear"),
                      n: int = 1, gamma_amb=None, gamma_body=None, fluid_labels=("aqueousHumor",),
                      wall_labels=None) -> ScenarioSpec:
    """Eye model: the desk-scale slice (``mesh=None``) or a mesh file.

    For a mesh file the label roles must be given unless its boundary
    groups are literally named ``gamma_amb`` and ``gamma_body``.
    """
    params = params or PhysicalParams()
    flow, radiation = variant
    if mesh is None:
        return ScenarioSpec(
            name="eye_slice", generator="eye_slice", generator_args={"n": int(n)}, fluid_labels=fluid_labels,
            gamma_amb=gamma_amb or ("cornea_surface",),
            gamma_body=gamma_body or ("sclera_surface", "posterior", "sclera_cut"),
            wall_labels=wall_labels or ("wall_cornea", "wall_iris", "wall_lens", "wall_sclera"),
            params=params, posture=posture, flow=flow, radiation=radiation)
    return ScenarioSpec(
        name="eye", mesh_path=str(mesh), fluid_labels=fluid_labels,
        gamma_amb=gamma_amb or ("gamma_amb",), gamma_body=gamma_body or ("gamma_body",),
        wall_labels=wall_labels or (), params=params, posture=posture, flow=flow, radiation=radiation)


def make_cavity_scenario(n: int, delta_T: float, params: PhysicalParams | None = None,
                         width: float = 4e-3, height: float | None = None, dim: int = 2,
                         posture="standing", variant: tuple = ("navier_stokes", "nonlinear"),
                         aspect_divisions: bool = True) -> ScenarioSpec:
    """Differentially heated cavity: no-slip walls, ``left`` at ``T_ref + dT/2``, ``right`` at ``T_ref - dT/2``.

    ``height`` defaults to ``width`` (square). With ``aspect_divisions`` the
    vertical division count is scaled by ``height / width``. In 3D the
    cavity depth equals the width.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or PhysicalParams()
    height = width if height is None else height
    ny = max(1, round(n * height / width)) if aspect_divisions else n
    Tr = params.T_ref
    if dim == 2:
        gen, args = "cavity", {"nx": n, "ny": ny, "width": width, "height": height}
        walls = _BOUNDARY_SIDES
    elif dim == 3:
        gen, args = "box", {"nx": n, "ny": ny, "nz": n, "width": width, "height": height, "depth": width}
        walls = _BOUNDARY_SIDES + ("front", "back")
    else:
        raise ValueError("dim must be 2 or 3")
    flow, radiation = variant
    return ScenarioSpec(
        name="cavity", generator=gen, generator_args=args, fluid_labels=("aqueousHumor",),
        wall_labels=walls, params=params, posture=posture, flow=flow, radiation=radiation,
        temperature_dirichlet={"left": Tr + 0.5 * delta_T, "right": Tr - 0.5 * delta_T})


# Slot standing in for the anterior chamber in the Canning lubrication estimate
CANNING_GAP = 2e-3
CANNING_HEIGHT = 12e-3


def make_canning_scenario(n: int = 8, delta_T: float = 2.03, params: PhysicalParams | None = None,
                          variant: tuple = ("navier_stokes", "nonlinear")) -> ScenarioSpec:
    """Tall vertical slot (2 mm gap, 12 mm high) with the walls ``dT`` apart."""
    spec = make_cavity_scenario(n, delta_T, params, width=CANNING_GAP, height=CANNING_HEIGHT, variant=variant)
    return replace(spec, name="canning")


def make_lid_scenario(n: int, lid_speed: float = 1.0, params: PhysicalParams | None = None) -> ScenarioSpec:
    """Lid-driven Stokes cavity on the unit square (buoyancy off)."""
    params = params or PhysicalParams(mu=1.0, rho=1.0, beta=0.0, k_by_label={"domain": 1.0},
                                      gravity_dir=(0.0, -1.0))
    return ScenarioSpec(
        name="lid", generator="rect", generator_args={"nx": n, "ny": n}, fluid_labels=("domain",),
        wall_labels=_BOUNDARY_SIDES, params=params, posture=None, flow="stokes", radiation="linearized",
        velocity_dirichlet={"top": (lid_speed, 0.0)})


def make_mms_scenario(u_exact=None, p_exact=None, T_exact=None, n: int = 4,
                      params: PhysicalParams | None = None, flow: str = "navier_stokes") -> ScenarioSpec:
    """Unit-square manufactured-solution scenario (all boundaries Dirichlet).

    Expressions are strings (or sympy expressions) in ``x, y``. Defaults to
    :data:`MMS_DEFAULT` with nondimensional :data:`MMS_PARAMS`.
    """
    params = params or PhysicalParams(**MMS_PARAMS)
    mms = {
        "u": tuple(str(c) for c in (u_exact if u_exact is not None else MMS_DEFAULT["u"])),
        "p": str(p_exact if p_exact is not None else MMS_DEFAULT["p"]),
        "T": str(T_exact if T_exact is not None else MMS_DEFAULT["T"]),
    }
    return ScenarioSpec(
        name="mms", generator="rect", generator_args={"nx": n, "ny": n}, fluid_labels=("domain",),
        wall_labels=_BOUNDARY_SIDES, params=params, posture=None, flow=flow, radiation="linearized",
        mms=mms, solver="direct")


@dataclass
class ScenarioRun:
    """A solved scenario."""

    spec: ScenarioSpec
    problem: HeatFluidProblem
    result: NewtonResult

    @property
    def state(self) -> State:
        return self.result.state

    @property
    def converged(self) -> bool:
        return self.result.converged


def solve_scenario(spec: ScenarioSpec, mesh: Mesh | None = None, solver=None, init: State | None = None,
                   timings: dict | None = None) -> ScenarioRun:
    """Build and solve ``spec`` with its Newton settings and solver preset.

    ``timings`` (if given) receives ``init``, ``assembly`` and ``solve`` wall times.
    """
    tm = timings if timings is not None else {}
    t0 = time.perf_counter()
    problem = spec.build_problem(mesh)
    tm["init"] = tm.get("init", 0.0) + time.perf_counter() - t0
    result = newton_solve(problem, init=init, cfg=spec.newton_config(),
                          solver=spec.solver if solver is None else solver, timings=tm)
    return ScenarioRun(spec, problem, result)


# -- manufactured-solution errors -------------------------------------------------------

def _mean(f: Field, domain) -> float:
    from .fem import integrate
    area = integrate(domain, lambda ctx: np.ones_like(ctx.dx), order=1)
    return integrate(domain, lambda ctx: ctx.value(f), order=4) / area


def mms_errors(problem: HeatFluidProblem, state: State, manufactured: Manufactured) -> dict[str, float]:
    """L2 errors of ``u``, ``p`` (both compared with zero mean) and ``T``."""
    from .fem import integrate
    eu = l2_error(state.u, manufactured.u, order=8)
    dom = problem.fluid_domain
    area = integrate(dom, lambda ctx: np.ones_like(ctx.dx), order=1)
    p_mean_exact = integrate(dom, lambda ctx: manufactured.p(ctx.x), order=8) / area
    p_mean_h = _mean(state.p, dom)
    ph = Field(state.p.space, state.p.coeffs - p_mean_h)
    ep = l2_error(ph, lambda x: manufactured.p(x) - p_mean_exact, order=8)
    eT = l2_error(state.T, manufactured.T, order=8)
    return {"u": eu, "p": ep, "T": eT}


def interpolate_exact(problem: HeatFluidProblem, manufactured: Manufactured) -> State:
    return State(interpolate(problem.V, manufactured.u), interpolate(problem.Q, manufactured.p),
                 interpolate(problem.W, manufactured.T))


__all__ = [
    "CANNING_GAP", "CANNING_HEIGHT", "GENERATORS", "MMS_DEFAULT", "MMS_PARAMS", "Manufactured", "Posture",
    "ScenarioError", "ScenarioRun", "ScenarioSpec", "as_posture", "box_mesh", "cavity_mesh", "dumps_config", "eye_slice_mesh",
    "flatten", "interpolate_exact", "make_canning_scenario", "make_cavity_scenario", "make_eye_scenario",
    "make_lid_scenario", "make_mms_scenario", "manufactured_sources", "mms_errors", "rect_mesh",
    "solve_scenario",
]
