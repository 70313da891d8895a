"""Pose-to-image geometry and spherical-harmonics shading, with exact gradients.

Conventions:
  * camera sits at the origin looking along +z; visible points have z > 0
  * Euler rotation order is Z @ Y @ X applied to column vectors
  * image coordinates are (u, v) = (column, row) in pixels; depth is camera z
  * real SH basis, orthonormal convention, bands 0-2, ordered
    [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]; constants come from
    their closed forms, never hard-coded decimals
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ProjectionError, ShapeError

PERSPECTIVE = "perspective"
WEAK_PERSPECTIVE = "weak_perspective"

# conventional focal length for this pipeline family at 224x224 (configurable)
REFERENCE_FOCAL = 1015.0
REFERENCE_IMAGE_SIZE = 224


@dataclass(frozen=True)
class CameraModel:
    mode: str
    focal_length: float
    principal_point: tuple  # (cx, cy) pixels
    image_size: tuple       # (H, W)

    def __post_init__(self):
        if self.mode not in (PERSPECTIVE, WEAK_PERSPECTIVE):
            raise ShapeError(f"unknown camera mode {self.mode!r}")
        if self.focal_length <= 0:
            raise ShapeError(f"focal length must be positive, got {self.focal_length}")
        cx, cy = self.principal_point
        h, w = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ShapeError(f"principal point {self.principal_point} outside image {self.image_size}")

    @classmethod
    def default_perspective(cls, image_size):
        h, w = image_size
        focal = REFERENCE_FOCAL * min(h, w) / REFERENCE_IMAGE_SIZE
        return cls(PERSPECTIVE, focal, (w / 2.0, h / 2.0), (h, w))


def rotation_matrix(euler):
    """R = Rz(rz) @ Ry(ry) @ Rx(rx) and its three partial-derivative matrices."""
    rx, ry, rz = (float(a) for a in np.asarray(euler, dtype=np.float64).reshape(3))
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dmx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dmy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dmz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    r = mz @ my @ mx
    partials = np.stack([mz @ my @ dmx, mz @ dmy @ mx, dmz @ my @ mx])
    return r, partials


_NEAR_THRESHOLD = 1e-6


def project(vertices, euler, translation, camera):
    """Project model-space vertices to image points and camera depths.

    Returns (points (V,2), depths (V,), backward) where
    backward(grad_points, grad_depths=None) yields gradients w.r.t. the
    vertices, the Euler angles, and the translation.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    r, partials = rotation_matrix(euler)
    q = v @ r.T + t
    f = camera.focal_length
    cx, cy = camera.principal_point

    if camera.mode == PERSPECTIVE:
        bad = np.nonzero(q[:, 2] <= _NEAR_THRESHOLD)[0]
        if bad.size:
            raise ProjectionError(f"vertex {int(bad[0])} lies behind the camera (z={q[bad[0], 2]:.6g})")
        inv_z = 1.0 / q[:, 2]
        pts = np.stack([f * q[:, 0] * inv_z + cx, f * q[:, 1] * inv_z + cy], axis=1)
    else:
        pts = np.stack([f * q[:, 0] + cx, f * q[:, 1] + cy], axis=1)
    depths = q[:, 2].copy()

    def backward(grad_points, grad_depths=None):
        gp = np.asarray(grad_points, dtype=np.float64).reshape(-1, 2)
        if gp.shape[0] != v.shape[0]:
            raise ShapeError(f"grad has {gp.shape[0]} rows, expected {v.shape[0]}")
        gq = np.zeros_like(q)
        if camera.mode == PERSPECTIVE:
            gq[:, 0] = gp[:, 0] * f * inv_z
            gq[:, 1] = gp[:, 1] * f * inv_z
            gq[:, 2] = -(gp[:, 0] * q[:, 0] + gp[:, 1] * q[:, 1]) * f * inv_z ** 2
        else:
            gq[:, 0] = gp[:, 0] * f
            gq[:, 1] = gp[:, 1] * f
        if grad_depths is not None:
            gq[:, 2] += np.asarray(grad_depths, dtype=np.float64).reshape(-1)
        grad_v = gq @ r
        grad_t = gq.sum(axis=0)
        grad_euler = np.array([np.sum(gq * (v @ partials[k].T)) for k in range(3)])
        return grad_v, grad_euler, grad_t

    return pts, depths, backward


def _sh_constants():
    c0 = 0.5 / math.sqrt(math.pi)
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    c2 = 0.5 * math.sqrt(15.0 / math.pi)
    c3 = 0.25 * math.sqrt(5.0 / math.pi)
    c4 = 0.25 * math.sqrt(15.0 / math.pi)
    return c0, c1, c2, c3, c4


def sh_basis(normals):
    """Evaluate the 9 SH basis functions and their gradients w.r.t. the normal.

    Accepts one unit vector (3,) or a stack (V, 3). Returns (values, grads)
    shaped (..., 9) and (..., 9, 3).
    """
    n = np.asarray(normals, dtype=np.float64)
    single = n.ndim == 1
    n = n.reshape(-1, 3)
    lengths = np.linalg.norm(n, axis=1)
    if np.any(np.abs(lengths - 1.0) > 1e-6):
        worst = int(np.argmax(np.abs(lengths - 1.0)))
        raise ShapeError(f"normal {worst} has length {lengths[worst]:.8f}, expected 1")
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    c0, c1, c2, c3, c4 = _sh_constants()
    count = n.shape[0]
    vals = np.empty((count, 9))
    vals[:, 0] = c0
    vals[:, 1] = c1 * y
    vals[:, 2] = c1 * z
    vals[:, 3] = c1 * x
    vals[:, 4] = c2 * x * y
    vals[:, 5] = c2 * y * z
    vals[:, 6] = c3 * (3.0 * z ** 2 - 1.0)
    vals[:, 7] = c2 * x * z
    vals[:, 8] = c4 * (x ** 2 - y ** 2)

    grads = np.zeros((count, 9, 3))
    grads[:, 1, 1] = c1
    grads[:, 2, 2] = c1
    grads[:, 3, 0] = c1
    grads[:, 4, 0] = c2 * y
    grads[:, 4, 1] = c2 * x
    grads[:, 5, 1] = c2 * z
    grads[:, 5, 2] = c2 * y
    grads[:, 6, 2] = 6.0 * c3 * z
    grads[:, 7, 0] = c2 * z
    grads[:, 7, 2] = c2 * x
    grads[:, 8, 0] = 2.0 * c4 * x
    grads[:, 8, 1] = -2.0 * c4 * y
    if single:
        return vals[0], grads[0]
    return vals, grads


def shade_texture(texture, normals, delta):
    """Per-vertex SH irradiance applied to all three channels.

    shaded = texture * L(n) with L(n) = sum_k delta_k Psi_k(n). Returns
    (shaded (V,3), backward) where backward(grad) yields gradients w.r.t.
    texture, delta, and normals.
    """
    tex = np.asarray(texture, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    if d.size != 9:
        raise ShapeError(f"delta must have 9 values, got {d.size}")
    if tex.shape[0] != nrm.shape[0]:
        raise ShapeError(f"texture has {tex.shape[0]} vertices, normals {nrm.shape[0]}")
    basis, basis_grads = sh_basis(nrm)          # (V, 9), (V, 9, 3)
    irradiance = basis @ d                       # (V,)
    shaded = tex * irradiance[:, None]

    def backward(grad):
        g = np.asarray(grad, dtype=np.float64).reshape(-1, 3)
        grad_tex = g * irradiance[:, None]
        g_l = np.sum(g * tex, axis=1)            # dL/d(irradiance) per vertex
        grad_delta = basis.T @ g_l
        grad_normals = np.einsum("v,vkK,k->vK", g_l, basis_grads, d)
        return grad_tex, grad_delta, grad_normals

    return shaded, backward
