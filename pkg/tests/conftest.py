import numpy as np
import pytest

from piave import data, geometry


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator) -> geometry.PoseParams:
    return geometry.PoseParams(
        rng.uniform(0.5, 2.0), random_rotation(rng), rng.uniform(-1.0, 1.0, 3)
    )


@pytest.fixture(scope="session")
def face():
    topo = geometry.synthetic_face_topology(32, 32)
    return topo, geometry.synthetic_mean_shape(topo)


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """Small corpus shared by harness/CLI tests; big enough to learn a bit."""
    root = tmp_path_factory.mktemp("corpus") / "micro"
    cfg = data.CorpusConfig(
        n_train=24,
        n_val=8,
        n_test=8,
        duration_s=1.0,
        n_train_speakers=8,
        n_test_speakers=4,
        seed=123,
    )
    data.build_corpus(cfg, root)
    return data.Corpus(root)
