import numpy as np
import pytest

from jointreg.body_model import BodyParams
from jointreg.camera_render import Camera
from jointreg.dataio import PRESETS, generate_synthetic, load_manifest
from jointreg.dataio.synthetic import synthetic_camera, toy_model


@pytest.fixture(scope="session")
def toy():
    model, part = toy_model(np.random.default_rng(11))
    return model


@pytest.fixture(scope="session")
def toy_blend():
    model, _ = toy_model(np.random.default_rng(11), pose_basis_scale=0.02)
    return model


@pytest.fixture(scope="session")
def mini_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini")
    generate_synthetic(PRESETS["mini"], out)
    return out


@pytest.fixture(scope="session")
def mini(mini_dir):
    return load_manifest(mini_dir / "manifest.json")


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic(PRESETS["tiny"], out)
    return out


@pytest.fixture
def camera():
    return synthetic_camera(PRESETS["mini"])


def random_params(rng, model, scale=0.4):
    return BodyParams(rng.normal(scale=scale, size=(model.n_joints, 3)), rng.normal(size=model.n_shape))


def simple_camera(size=32, focal=40.0):
    c = (size - 1) / 2.0
    return Camera(focal, focal, c, c, size, size, rotation=np.diag([1.0, -1.0, -1.0]), translation=[0, 0, 3.0])


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
