"""Experiment driver: mesh families, assembly, solves, energy errors, rate
fits, and serialized outputs (CSV + field dumps) for the plotting tools.

Experiments:

* ``linear``            unconstrained solve with the benchmark forcing;
                        energy error against the exact radial solution.
* ``explicit_obstacle`` obstacle problem with the benchmark obstacle and
                        modified forcing; same exact-solution error.
* ``qualitative``       zero forcing with the off-center cone obstacle;
                        errors measured against the finest level's solution
                        in its own energy norm (surrogate protocol).
"""

import io
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from fracfem.assembly import assemble_load, assemble_stiffness
from fracfem.interp import NodalField, interpolate
from fracfem.mesh import build_graded_mesh, build_star_index, disk_domain, mesh_stats, save_mesh
from fracfem.oracle import ExplicitSolution, energy_error
from fracfem.quadrature import QuadratureRules
from fracfem.solver import ObstacleProblem, discrete_contact_set, solve_linear, solve_obstacle

__all__ = [
    "ExperimentConfig",
    "ConvergenceTable",
    "run_experiment",
    "fit_rate",
    "write_convergence_csv",
    "read_convergence_csv",
    "write_solution_dump",
]

EXPERIMENTS = ("linear", "explicit_obstacle", "qualitative")
CONE_CENTER = (0.25, 0.25)


@dataclass
class ExperimentConfig:
    experiment: str
    s: float
    mu: float = 2.0
    h_list: tuple = ()
    levels: int = 4
    h0: float = 0.64
    ratio: float = 2.0
    q_sing: int = 5
    q_far: int = 3
    q_ang: int = 16
    q_load: int = 6
    q_ball: int = 8
    tol: float = 1e-12
    max_iter: int = 100
    r_c: float = 0.02
    coarse_segments: int = 16
    sigma_max: float = 10.0
    dof_cap: int = 16000
    out_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if not 1.0 <= self.mu <= 2.0:
            raise ValueError("mu must lie in [1, 2]")
        if not self.h_list:
            self.h_list = tuple(
                self.h0 * self.ratio ** (-k) for k in range(self.levels)
            )
        hs = tuple(float(h) for h in self.h_list)
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ValueError("h list must be strictly decreasing")
        self.h_list = hs


@dataclass
class LevelRecord:
    h: float
    ndof: int
    energy_error: float
    iters: int
    wall_seconds: float


@dataclass
class RateFit:
    slope_ndof: float
    slope_h: float
    intercept: float
    residual: float


@dataclass
class ConvergenceTable:
    config: ExperimentConfig
    rows: list
    meta: dict

    def fit(self):
        return fit_rate(self)


def fit_rate(table):
    """Least-squares fit of log(error) against log(ndof) and log(h)."""
    rows = table.rows if isinstance(table, ConvergenceTable) else list(table)
    if len(rows) < 3:
        raise ValueError("rate fit needs at least 3 rows")
    h = np.array([r.h for r in rows])
    n = np.array([r.ndof for r in rows], dtype=float)
    e = np.array([r.energy_error for r in rows])
    if np.any(e <= 0):
        raise ValueError("nonpositive errors cannot be fitted")
    if np.ptp(np.log(n)) < 1e-12 or np.ptp(np.log(h)) < 1e-12:
        raise ValueError("degenerate abscissae")
    slope_n, _ = np.polyfit(np.log(n), np.log(e), 1)
    slope_h, intercept = np.polyfit(np.log(h), np.log(e), 1)
    resid = float(
        np.sqrt(np.mean((np.polyval([slope_h, intercept], np.log(h)) - np.log(e)) ** 2))
    )
    return RateFit(float(slope_n), float(slope_h), float(intercept), resid)


def _chi_cone(x):
    x = np.atleast_2d(x)
    return 0.5 - np.hypot(x[:, 0] - CONE_CENTER[0], x[:, 1] - CONE_CENTER[1])


def _zero(x):
    return np.zeros(len(np.atleast_2d(x)))


def run_experiment(cfg, progress=None):
    """Run all levels of an experiment; returns the convergence table and,
    if cfg.out_dir is set, writes convergence.csv plus per-level dumps."""
    log = progress if progress is not None else (lambda msg: None)
    exact = (
        ExplicitSolution(cfg.s, r_c=cfg.r_c)
        if cfg.experiment in ("linear", "explicit_obstacle")
        else None
    )
    rows = []
    meta = {}
    fields = []
    levels = []
    for li, h in enumerate(cfg.h_list):
        t0 = time.perf_counter()
        domain = disk_domain(coarse_segments=cfg.coarse_segments)
        mesh = build_graded_mesh(domain, h, cfg.mu, sigma_max=cfg.sigma_max)
        if mesh.ndof > cfg.dof_cap:
            raise RuntimeError(
                f"level {li} (h={h}) has {mesh.ndof} dofs, above the cap "
                f"{cfg.dof_cap}; lower h0 or raise dof_cap"
            )
        star = build_star_index(mesh)
        stats = mesh_stats(mesh)
        rules = QuadratureRules(
            cfg.s, q_sing=cfg.q_sing, q_far=cfg.q_far, q_ang=cfg.q_ang, q_load=cfg.q_load
        )
        log(f"level {li}: h={h:.5g} ndof={mesh.ndof} ntris={mesh.ntris} assembling")
        system = assemble_stiffness(mesh, star, cfg.s, rules)
        A = system.matrix
        try:
            if cfg.experiment == "linear":
                F = assemble_load(mesh, exact.rhs_linear, cfg.q_load)
                u = solve_linear(A, F)
                err = energy_error(u, A, F, exact.energy_exact)
                iters = 0
                contact = np.zeros(mesh.nverts, dtype=bool)
            elif cfg.experiment == "explicit_obstacle":
                F = assemble_load(mesh, exact.forcing, cfg.q_load)
                chi_h = interpolate(mesh, star, exact.obstacle, cfg.q_ball).values
                report = solve_obstacle(
                    ObstacleProblem(A, F, chi_h), tol=cfg.tol, max_iter=cfg.max_iter
                )
                u = report.u
                iters = report.iterations
                F_lin = assemble_load(mesh, exact.rhs_linear, cfg.q_load)
                err = energy_error(u, A, F_lin, exact.energy_exact)
                contact, _ = discrete_contact_set(
                    mesh, system.dof_of_vertex, report, chi_h
                )
            else:  # qualitative: error filled in after the finest level
                F = np.zeros(mesh.ndof)
                chi_h = interpolate(mesh, star, _chi_cone, cfg.q_ball).values
                report = solve_obstacle(
                    ObstacleProblem(A, F, chi_h), tol=cfg.tol, max_iter=cfg.max_iter
                )
                u = report.u
                iters = report.iterations
                err = np.nan
                contact, _ = discrete_contact_set(
                    mesh, system.dof_of_vertex, report, chi_h
                )
            wall = time.perf_counter() - t0
            rows.append(LevelRecord(h, mesh.ndof, float(err), iters, wall))
            fields.append((mesh, NodalField(mesh, u), contact))
            levels.append((mesh, system if li == len(cfg.h_list) - 1 else None, u))
            log(
                f"level {li}: done in {wall:.1f}s"
                + ("" if np.isnan(err) else f", energy error {err:.4e}")
            )
        finally:
            if cfg.experiment != "qualitative" or li < len(cfg.h_list) - 1:
                del system, A

    if cfg.experiment == "qualitative":
        fine_mesh, fine_system, fine_u = levels[-1]
        A_fine = fine_system.matrix
        fine_nodes = fine_mesh.vertices[fine_mesh.interior_vertices()]
        for li in range(len(levels) - 1):
            mesh_k, _, u_k = levels[li]
            uk_at_fine = NodalField(mesh_k, u_k)(fine_nodes)
            e = fine_u - uk_at_fine
            rows[li].energy_error = float(np.sqrt(max(e @ (A_fine @ e), 0.0)))
        rows = rows[:-1]  # the surrogate level has no error of its own
        meta["surrogate_h"] = levels[-1][0].h
        meta["surrogate_ndof"] = levels[-1][0].ndof

    stats = mesh_stats(fields[-1][0])
    meta.update(
        {
            "sigma_observed": stats["sigma"],
            "c1_observed": stats["c1"],
            "c2_observed": stats["c2"],
        }
    )
    table = ConvergenceTable(config=cfg, rows=rows, meta=meta)
    if cfg.out_dir is not None:
        import os

        os.makedirs(cfg.out_dir, exist_ok=True)
        write_convergence_csv(os.path.join(cfg.out_dir, "convergence.csv"), table)
        for li, (mesh, fld, contact) in enumerate(fields):
            write_solution_dump(
                os.path.join(cfg.out_dir, f"solution_{li}.txt"), mesh, fld, contact
            )
    return table


# ---------------------------------------------------------------------------
# serialization (frozen formats shared with the plotting package)


def _meta_lines(table):
    cfg = asdict(table.config)
    cfg.pop("out_dir")
    from fracfem import __version__
    lines = [f"# fracfem {__version__}"]
    for k in sorted(cfg):
        lines.append(f"# {k} = {cfg[k]}")
    for k in sorted(table.meta):
        lines.append(f"# {k} = {table.meta[k]}")
    return lines


def write_convergence_csv(path, table):
    buf = io.StringIO()
    for line in _meta_lines(table):
        buf.write(line + "\n")
    buf.write("h,ndof,energy_error,iters,wall_seconds\n")
    for r in table.rows:
        buf.write(
            f"{r.h:.17g},{r.ndof},{r.energy_error:.17g},{r.iters},"
            f"{r.wall_seconds:.17g}\n"
        )
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_convergence_csv(path):
    """Rows of a convergence.csv as LevelRecord objects (metadata skipped)."""
    rows = []
    with open(path) as f:
        header = None
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line
                if header != "h,ndof,energy_error,iters,wall_seconds":
                    raise ValueError(f"{path}: unexpected CSV header {header!r}")
                continue
            h, nd, e, it, w = line.split(",")
            rows.append(LevelRecord(float(h), int(nd), float(e), int(it), float(w)))
    if header is None:
        raise ValueError(f"{path}: missing header")
    return rows


def write_solution_dump(path, mesh, fld, contact_vertex):
    """Mesh dump followed by one nodal value per interior vertex and one
    contact flag (0/1) per vertex."""
    buf = io.StringIO()
    buf.write(f"frac-mesh v1 {mesh.nverts} {mesh.ntris}\n")
    for (x, y), flag in zip(mesh.vertices, mesh.boundary_vertex):
        buf.write(f"{x:.17g} {y:.17g} {int(flag)}\n")
    for i, j, k in mesh.triangles:
        buf.write(f"{i} {j} {k}\n")
    for v in fld.values:
        buf.write(f"{v:.17g}\n")
    for c in contact_vertex:
        buf.write(f"{int(c)}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())
