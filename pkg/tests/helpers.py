"""Shared fixtures: verification scenes and ground-truth variable sets."""

from __future__ import annotations

import functools
from pathlib import Path

from stereoscene import scene, sceneio

SCENE_DIR = Path(__file__).resolve().parents[1] / "scenes"


def load_spec(name) -> scene.SceneSpec:
    return sceneio.parse_scene_file(SCENE_DIR / f"{name}.scene")


@functools.lru_cache(maxsize=None)
def truth(name, seed=7):
    """Generated ground truth for one of the shipped verification scenes."""
    return scene.generate(load_spec(name), seed=seed)


def gt_setup(name, seed=7):
    """(inputs, ground-truth variables, ground truth) for a scene."""
    gt = truth(name, seed)
    return sceneio.inputs_from_truth(gt), sceneio.variables_from_truth(gt), gt
