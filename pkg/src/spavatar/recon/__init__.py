from .marching_cubes import EmptySurface, marching_cubes
from .poisson import (
    ScalarGrid,
    VectorGrid,
    poisson_solve,
    rasterize_normals,
    reconstruct,
    sample_grid,
    select_isolevel,
)

__all__ = [
    "EmptySurface", "ScalarGrid", "VectorGrid", "marching_cubes", "poisson_solve",
    "rasterize_normals", "reconstruct", "sample_grid", "select_isolevel",
]
