"""Unsupervised stereo scene understanding: geometry, dense losses, a
synthetic ground-truth generator, a coarse-to-fine solver and benchmark
metrics — all in float64 with verified gradients."""

from . import (evalio, geom, losses, occl, photo, report, rigid, scene,
               sceneio, semantic, solver, warp)

__all__ = ["evalio", "geom", "losses", "occl", "photo", "report", "rigid",
           "scene", "sceneio", "semantic", "solver", "warp"]
__version__ = "0.1.0"
