import sys
from pathlib import Path

import numpy as np
import pytest

from brwtail.laws import reference_model

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def ref():
    return reference_model()


class RiggedRng:
    """Stand-in generator that replays scripted uniforms and normals."""

    def __init__(self, uniforms=(), normals=()):
        self.uniforms = list(uniforms)
        self.normals = list(normals)

    def random(self, size):
        out, self.uniforms = self.uniforms[:size], self.uniforms[size:]
        if len(out) < size:
            raise AssertionError("rigged generator ran out of uniforms")
        return np.array(out, dtype=float)

    def standard_normal(self, size):
        out, self.normals = self.normals[:size], self.normals[size:]
        if len(out) < size:
            raise AssertionError("rigged generator ran out of normals")
        return np.array(out, dtype=float)


@pytest.fixture
def rigged():
    return RiggedRng
