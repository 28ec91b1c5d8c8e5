"""Unfitted mixed finite elements for the Poisson problem in 2D.

The flux lives in Raviart-Thomas spaces on the active background mesh; the
divergence constraint is imposed on the whole active mesh, which keeps the
discrete mass balance exact independently of how the boundary cuts the
mesh.  Ghost penalties, local post-processings, hybridization and Neumann
boundary conditions are provided along with an experiment harness.
"""

from .geometry import (
    ConvexPolygonDomain,
    CutData,
    LevelSetDomain,
    classify,
    ring_domain,
    rotated_square_domain,
)
from .mesh import BackgroundMesh, build_rectangle, build_structured, refine_uniform
from .patches import build_patches
from .postprocess import pp_element, pp_patch
from .spaces import DGSpace, FacetSpace, RTSpace, div_map, interpolate_rt, project_l2
from .systems import (
    Discretization,
    MixedSolution,
    SolveError,
    build_variant_matrices,
    solve_frachon,
    solve_hybrid,
    solve_main,
    solve_neumann,
    solve_restricted,
)

__version__ = "0.1.0"
