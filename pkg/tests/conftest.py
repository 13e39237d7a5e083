"""Shared fixtures: the BRDF table is expensive, build it once per session."""

import numpy as np
import pytest

from texsplat.environment import BrdfLut
from texsplat.synth import camera_ring, make_gradcheck_scene, make_plane_scene


@pytest.fixture(scope="session")
def lut():
    return BrdfLut.build()


@pytest.fixture(scope="session")
def plane_scene():
    return make_plane_scene(nx=3, ny=3, texture_res=4, seed=7)


@pytest.fixture(scope="session")
def gradcheck_scene():
    return make_gradcheck_scene(seed=11)


@pytest.fixture()
def small_camera():
    return camera_ring(1, width=32, height=32)[0]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
