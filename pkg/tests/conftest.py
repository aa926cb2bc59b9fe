import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvpose.skeleton import CameraIntrinsics, default_skeleton
from mvpose.synth import NoiseSpec, generate_dataset

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


@pytest.fixture(scope="session")
def clean_samples():
    return generate_dataset(3, 4, NoiseSpec(seed=11))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_intrinsics(rng):
    f = rng.uniform(200.0, 2000.0)
    return CameraIntrinsics.from_params(f * rng.uniform(0.9, 1.1), f, rng.uniform(50, 600), rng.uniform(50, 600))


def random_normalized_pose(rng, skel):
    """Random pose seen by a random rig camera (camera frame), divided by its neck-pelvis distance."""
    from mvpose.skeleton import scale_normalize
    from mvpose.synth import make_rig, sample_pose
    pose = sample_pose(skel, rng)
    cam = make_rig(1, rng)[0]
    return scale_normalize(cam.to_camera(pose), skel)[0].joints


def random_oriented_pose(rng, skel):
    """Pose under a uniformly random orientation, 2.5 to 6 m in front of the camera (normalized)."""
    from mvpose.skeleton import scale_normalize
    from mvpose.synth import sample_pose
    pose = sample_pose(skel, rng)
    pose = (pose - pose.mean(0)) @ random_rotation(rng).T
    pose[:, 2] += rng.uniform(2500.0, 6000.0)
    return scale_normalize(pose, skel)[0].joints


ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
