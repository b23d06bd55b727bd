import numpy as np
import pytest
import torch

from uvinpaint import facemodel as fm

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_model():
    return fm.build_toy_model(0, n_subdiv=3, dims=(8, 4, 8))


@pytest.fixture(scope="session")
def small_model():
    return fm.build_toy_model(0, n_subdiv=2, dims=(8, 4, 8))


@pytest.fixture(scope="session")
def camera224():
    return fm.default_camera((224, 224))


@pytest.fixture(scope="session")
def camera64():
    return fm.default_camera((64, 64))


@pytest.fixture
def front_params(toy_model):
    d_id, d_exp, d_tex = toy_model.dims
    return fm.FaceParams(alpha=np.zeros(d_id), beta=np.zeros(d_exp),
                         delta=np.zeros(d_tex), trans=np.array([0.0, 0.0, 8.0]))
