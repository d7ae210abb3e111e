from pathlib import Path

import numpy as np
import pytest

from quadloco.model import JointState, RobotDescription

REPO_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = REPO_ROOT / "data"


@pytest.fixture(scope="session")
def desc() -> RobotDescription:
    return RobotDescription()


def random_joint_angles(rng: np.random.Generator, desc: RobotDescription, margin: float = 0.15) -> np.ndarray:
    """Uniform draw strictly inside the joint limits.

    The margin keeps samples away from the straight-knee singularity and the
    limit walls, where conditioning (not correctness) dominates the error.
    """
    lo = desc.joint_limits[:, 0] + margin
    hi = desc.joint_limits[:, 1] - margin
    return rng.uniform(lo, hi)


def random_joint_state(rng: np.random.Generator, desc: RobotDescription, qd_scale: float = 3.0) -> JointState:
    q = random_joint_angles(rng, desc)
    qd = rng.uniform(-qd_scale, qd_scale, size=3)
    return JointState(q, qd)
