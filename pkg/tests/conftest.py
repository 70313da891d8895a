"""Shared fixtures: small synthetic bases, cameras, and the seeded recovery
protocol used by the acceptance suite (targets, weights, and schedule are
frozen here; the thresholds they establish live in test_acceptance)."""

import math

import numpy as np
import pytest

from facefit.camera import CameraModel
from facefit.fitting import FitConfig, default_translation
from facefit.losses import LossWeights, SkinMask
from facefit.morphable import FaceCoefficients, synthetic_basis
from facefit.render import project_landmarks, render_face


@pytest.fixture(scope="session")
def basis_small():
    return synthetic_basis(7, 220)


@pytest.fixture(scope="session")
def basis_recovery():
    return synthetic_basis(7, 500)


@pytest.fixture(scope="session")
def camera_small():
    return CameraModel.default_perspective((48, 48))


@pytest.fixture(scope="session")
def camera_recovery():
    return CameraModel.default_perspective((128, 128))


# ----------------------------------------------------------------- recovery

RECOVERY_SEEDS = tuple(range(10))

# fixture protocol, frozen after the calibration sweeps: moderate poses,
# ~3.5-sigma identity deformation, landmark-weighted objective, 500-step
# adaptive-moment descent with two decay steps
RECOVERY_ALPHA_SIGMA = 3.5
RECOVERY_WEIGHTS = dict(lambda_pho=2.0, lambda_lmk=0.1, lambda_3dmm=1e-4)
RECOVERY_FIT = dict(max_iterations=500, learning_rate=0.1, lr_decay_interval=120)


def make_recovery_target(basis, camera, seed):
    """Seeded ground-truth coefficients for one synthetic face."""
    rng = np.random.default_rng(1000 + seed)
    c = FaceCoefficients.zeros()
    c.alpha[:] = rng.normal(0, RECOVERY_ALPHA_SIGMA, 80)
    c.beta[:] = rng.normal(0, 0.6 * RECOVERY_ALPHA_SIGMA, 64)
    c.gamma[:] = rng.normal(0, 0.6, 80)
    c.rotation[:] = rng.uniform(-0.15, 0.15, 3)
    base_t = default_translation(basis, camera)
    c.translation[:] = base_t + (rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-40, 40))
    c.delta[0] = 2 * math.sqrt(math.pi)
    c.delta[1:4] = rng.normal(0, 0.25, 3)
    c.delta[4:] = rng.normal(0, 0.1, 5)
    return c


def make_recovery_case(basis, camera, seed):
    """(target image, landmarks, mask, ground-truth coefficients)."""
    cstar = make_recovery_target(basis, camera, seed)
    fb, _ = render_face(cstar, basis, camera)
    landmarks, _ = project_landmarks(cstar, basis, camera)
    mask = SkinMask(fb.mask.astype(np.float64))
    return fb.color, landmarks, mask, cstar


def recovery_config():
    return FitConfig(loss_weights=LossWeights(**RECOVERY_WEIGHTS), **RECOVERY_FIT)
