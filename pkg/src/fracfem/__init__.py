"""Finite elements for the obstacle problem of the integral fractional
Laplacian on 2D polygonal domains, over boundary-graded meshes."""

from fracfem.mesh import (
    Polygon,
    TriangleMesh,
    StarIndex,
    disk_domain,
    square_domain,
    build_graded_mesh,
    build_star_index,
    maximal_ball,
    mesh_stats,
    save_mesh,
    load_mesh,
)
from fracfem.quadrature import QuadratureRules
from fracfem.assembly import (
    normalization_constant,
    complement_weight,
    pair_integral,
    assemble_stiffness,
    assemble_load,
    FractionalSystem,
)
from fracfem.interp import NodalField, ball_average, interpolate
from fracfem.solver import (
    ObstacleProblem,
    SolveReport,
    solve_obstacle,
    solve_linear,
    discrete_contact_set,
)
from fracfem.oracle import ExplicitSolution, jacobi_p2, energy_error
from fracfem.harness import ExperimentConfig, ConvergenceTable, run_experiment, fit_rate

__version__ = "0.1.0"
