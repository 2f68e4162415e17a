from . import backend
from .core import (FAR_DEPTH, Projection, RenderOutput, depth_to_normals, eval_sh, project_gaussian,
                   project_gaussians, render)

__all__ = ["FAR_DEPTH", "Projection", "RenderOutput", "backend", "depth_to_normals", "eval_sh",
           "project_gaussian", "project_gaussians", "render"]
