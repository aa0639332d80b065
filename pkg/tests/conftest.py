import numpy as np
import pytest

from duosplat import synth
from duosplat.geometry import CameraModel


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation matrix with det +1."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, width=32, height=32) -> CameraModel:
    return CameraModel(
        fx=float(rng.uniform(40, 200)),
        fy=float(rng.uniform(40, 200)),
        cx=float(rng.uniform(0.25, 0.75) * width),
        cy=float(rng.uniform(0.25, 0.75) * height),
        rotation=random_rotation(rng),
        translation=rng.normal(size=3),
        width=width,
        height=height,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two subjects at 32x32 with one novel view each; shared across tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    manifest = synth.make_dataset(2, 1, 32, root, seed_base=7)
    return str(root), manifest


@pytest.fixture(scope="session")
def tiny_stage2_ckpt(tiny_dataset, tmp_path_factory):
    """A few-iteration stage-1 + stage-2 run; weights are nearly random but
    the checkpoint is structurally complete."""
    from duosplat.pointnet import NetConfig
    from duosplat.training import Stage1Config, Stage2Config, train_stage1, train_stage2

    root, _ = tiny_dataset
    out = tmp_path_factory.mktemp("tiny_ckpt")
    s1 = train_stage1(root, Stage1Config(iterations=5, seed=0, net=NetConfig(image_size=32)),
                      out_path=str(out / "s1.ckpt"))
    train_stage2(root, s1, Stage2Config(iterations=2, seed=0, novel_views_per_step=1,
                                        include_canonical=False),
                 out_path=str(out / "s2.ckpt"))
    return str(out / "s2.ckpt"), str(out / "s1.ckpt")
