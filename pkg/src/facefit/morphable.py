"""Statistical face model: linear shape/texture synthesis and topology utilities.

Vertex layout convention: flat model vectors are vertex-major, i.e.
(x0, y0, z0, x1, y1, z1, ...), so a 3V vector reshapes to (V, 3) row-wise.
Units are millimetres for shape, [0, 1] RGB for texture.

The synthetic basis generator stands in for licensed scan-derived bases so
every test is self-contained: a face-like ellipsoid patch (front toward -z,
nose bump included) with smooth random orthonormal deformation bases.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .errors import ParameterError, ShapeError

DIM_ID = 80
DIM_EXP = 64
DIM_TEX = 80
NUM_LANDMARKS = 68
COEFF_LENGTH = DIM_ID + DIM_EXP + DIM_TEX + 3 + 3 + 9  # 239
NOSE_TIP_LANDMARK = 30  # index into the 68-point convention


@dataclass
class FaceBasis:
    """Mean shape/texture plus identity/expression/texture linear bases."""

    mean_shape: np.ndarray      # (3V,) mm
    mean_texture: np.ndarray    # (3V,) RGB in [0,1]
    basis_id: np.ndarray        # (3V, n_id)
    basis_exp: np.ndarray       # (3V, n_exp)
    basis_tex: np.ndarray       # (3V, n_tex)
    triangles: np.ndarray       # (T, 3) int vertex indices
    landmark_indices: np.ndarray  # (68,) int vertex indices
    skin_vertex_flags: np.ndarray  # (V,) bool

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        self.mean_texture = np.asarray(self.mean_texture, dtype=np.float64).reshape(-1)
        self.basis_id = np.asarray(self.basis_id, dtype=np.float64)
        self.basis_exp = np.asarray(self.basis_exp, dtype=np.float64)
        self.basis_tex = np.asarray(self.basis_tex, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int32).reshape(-1)
        self.skin_vertex_flags = np.asarray(self.skin_vertex_flags, dtype=bool).reshape(-1)
        rows = self.mean_shape.shape[0]
        if rows % 3:
            raise ShapeError(f"mean shape length {rows} is not a multiple of 3")
        v = rows // 3
        for name, mat in (("mean_texture", self.mean_texture[:, None]),
                          ("basis_id", self.basis_id),
                          ("basis_exp", self.basis_exp),
                          ("basis_tex", self.basis_tex)):
            if mat.shape[0] != rows:
                raise ShapeError(f"{name} has {mat.shape[0]} rows, expected {rows}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ShapeError(f"triangle indices must lie in [0, {v})")
        if self.landmark_indices.shape[0] != NUM_LANDMARKS:
            raise ShapeError(f"expected {NUM_LANDMARKS} landmark indices, got {self.landmark_indices.shape[0]}")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= v:
            raise ShapeError("landmark indices out of vertex range")
        if self.skin_vertex_flags.shape[0] != v:
            raise ShapeError(f"skin flags length {self.skin_vertex_flags.shape[0]} != V={v}")

    @property
    def num_vertices(self):
        return self.mean_shape.shape[0] // 3

    @property
    def dims(self):
        return self.basis_id.shape[1], self.basis_exp.shape[1], self.basis_tex.shape[1]

    @property
    def nose_tip_index(self):
        return int(self.landmark_indices[NOSE_TIP_LANDMARK])


def _wrap_angle(a):
    # wrap into (-pi, pi]
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


@dataclass
class FaceCoefficients:
    """The 239-value parameter vector the whole pipeline optimizes."""

    alpha: np.ndarray        # (80,) identity
    beta: np.ndarray         # (64,) expression
    gamma: np.ndarray        # (80,) texture
    rotation: np.ndarray     # (3,) Euler angles, radians, wrapped to (-pi, pi]
    translation: np.ndarray  # (3,) mm
    delta: np.ndarray        # (9,) SH lighting

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.rotation = _wrap_angle(np.asarray(self.rotation, dtype=np.float64).reshape(-1))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        lengths = (self.alpha.size, self.beta.size, self.gamma.size,
                   self.rotation.size, self.translation.size, self.delta.size)
        if lengths != (DIM_ID, DIM_EXP, DIM_TEX, 3, 3, 9):
            raise ShapeError(f"coefficient block lengths {lengths} != (80, 64, 80, 3, 3, 9)")

    @classmethod
    def zeros(cls):
        return cls(np.zeros(DIM_ID), np.zeros(DIM_EXP), np.zeros(DIM_TEX),
                   np.zeros(3), np.zeros(3), np.zeros(9))

    def to_vector(self):
        """Flatten in the fixed order (alpha, beta, t, r, delta, gamma) -> 239 values."""
        return np.concatenate([self.alpha, self.beta, self.translation,
                               self.rotation, self.delta, self.gamma])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != COEFF_LENGTH:
            raise ShapeError(f"coefficient vector must have {COEFF_LENGTH} values, got {vec.size}")
        a, b = vec[:DIM_ID], vec[DIM_ID:DIM_ID + DIM_EXP]
        rest = vec[DIM_ID + DIM_EXP:]
        t, r, d, g = rest[:3], rest[3:6], rest[6:15], rest[15:]
        return cls(a, b, g, r, t, d)

    def copy(self):
        return FaceCoefficients(self.alpha.copy(), self.beta.copy(), self.gamma.copy(),
                                self.rotation.copy(), self.translation.copy(), self.delta.copy())


@dataclass
class CoefficientGradient:
    """Per-block gradient of a scalar w.r.t. a FaceCoefficients vector.

    Same blocks as FaceCoefficients but without the angle wrapping (a
    gradient is not an angle), packed in the same fixed order.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    delta: np.ndarray

    @classmethod
    def zeros(cls):
        return cls(np.zeros(DIM_ID), np.zeros(DIM_EXP), np.zeros(DIM_TEX),
                   np.zeros(3), np.zeros(3), np.zeros(9))

    def to_vector(self):
        return np.concatenate([self.alpha, self.beta, self.translation,
                               self.rotation, self.delta, self.gamma])

    def add_scaled(self, other, factor=1.0):
        self.alpha += factor * other.alpha
        self.beta += factor * other.beta
        self.gamma += factor * other.gamma
        self.rotation += factor * other.rotation
        self.translation += factor * other.translation
        self.delta += factor * other.delta
        return self


def synthesize_shape(basis, alpha, beta):
    """S = mean + basis_id @ alpha + basis_exp @ beta, reshaped to (V, 3).

    The Jacobians w.r.t. alpha and beta are the (constant) basis matrices.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if alpha.size != basis.basis_id.shape[1]:
        raise ShapeError(f"alpha has {alpha.size} values, basis expects {basis.basis_id.shape[1]}")
    if beta.size != basis.basis_exp.shape[1]:
        raise ShapeError(f"beta has {beta.size} values, basis expects {basis.basis_exp.shape[1]}")
    flat = basis.mean_shape + basis.basis_id @ alpha + basis.basis_exp @ beta
    return flat.reshape(-1, 3)


def synthesize_texture(basis, gamma):
    """T = mean + basis_tex @ gamma, reshaped to (V, 3). Never clamped here."""
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if gamma.size != basis.basis_tex.shape[1]:
        raise ShapeError(f"gamma has {gamma.size} values, basis expects {basis.basis_tex.shape[1]}")
    flat = basis.mean_texture + basis.basis_tex @ gamma
    return flat.reshape(-1, 3)


_DEGENERATE_NORM = 1e-12


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals, unit length.

    Returns (normals, degenerate_count). Vertices whose incident faces are
    all degenerate (or which are isolated) get a zero normal and are counted.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    face = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, tri[:, corner], face)
    norms = np.linalg.norm(acc, axis=1)
    good = norms > _DEGENERATE_NORM
    out = np.zeros_like(v)
    out[good] = acc[good] / norms[good, None]
    return out, int((~good).sum())


def vertex_normals_vjp(vertices, triangles, grad_normals):
    """Gradient of vertex_normals w.r.t. vertex positions (chain rule helper)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    g_n = np.asarray(grad_normals, dtype=np.float64).reshape(-1, 3)
    a = v[tri[:, 1]] - v[tri[:, 0]]
    b = v[tri[:, 2]] - v[tri[:, 0]]
    face = np.cross(a, b)
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, tri[:, corner], face)
    norms = np.linalg.norm(acc, axis=1)
    good = norms > _DEGENERATE_NORM
    # d(u/|u|) pullback: (g - n (n.g)) / |u|
    g_u = np.zeros_like(v)
    n_hat = acc[good] / norms[good, None]
    gg = g_n[good]
    g_u[good] = (gg - n_hat * np.sum(n_hat * gg, axis=1, keepdims=True)) / norms[good, None]
    g_face = g_u[tri[:, 0]] + g_u[tri[:, 1]] + g_u[tri[:, 2]]
    # cross-product pullbacks: d/da <a x b, g> = b x g ; d/db = g x a
    g_a = np.cross(b, g_face)
    g_b = np.cross(g_face, a)
    g_v = np.zeros_like(v)
    np.add.at(g_v, tri[:, 0], -g_a - g_b)
    np.add.at(g_v, tri[:, 1], g_a)
    np.add.at(g_v, tri[:, 2], g_b)
    return g_v


def _smooth_columns(rng, px, py, n_cols):
    """Random smooth 3V displacement fields: per-axis 2D polynomials, degree <= 6."""
    monomials = [px ** i * py ** j for i in range(7) for j in range(7 - i)]  # 28 terms
    basis2d = np.stack(monomials, axis=1)                                   # (V, 28)
    n_modes = 3 * basis2d.shape[1]
    if n_cols > n_modes:
        raise ParameterError(f"cannot build {n_cols} smooth columns from {n_modes} modes")
    coeffs = rng.standard_normal((n_modes, n_cols))
    fields = basis2d @ coeffs.reshape(3, basis2d.shape[1], n_cols)  # (3, V, n_cols)
    return fields.transpose(1, 0, 2).reshape(-1, n_cols)            # (3V, n_cols) vertex-major


def _orthonormalize(mat):
    q, r = np.linalg.qr(mat)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    return q * sign[None, :]


def synthetic_basis(seed, num_vertices, dims=(DIM_ID, DIM_EXP, DIM_TEX)):
    """Deterministic face-like basis for self-contained tests.

    Mean shape: front half of an ellipsoid (width +-70, height +-90, depth
    55 mm) facing -z, with a gaussian nose bump. Basis columns are smooth
    random fields, orthonormalized (Gram matrix = identity to ~1e-14).
    Landmark 30 is pinned to the nose tip (most negative z).
    """
    if num_vertices < NUM_LANDMARKS:
        raise ParameterError(f"need at least {NUM_LANDMARKS} vertices, got {num_vertices}")
    v_count = int(num_vertices)
    rng = np.random.default_rng(seed)

    # Fibonacci spiral on the unit disk: well-spread, deterministic
    i = np.arange(v_count)
    radius = np.sqrt((i + 0.5) / v_count)
    angle = i * np.pi * (3.0 - np.sqrt(5.0))
    px = radius * np.cos(angle)
    py = radius * np.sin(angle)

    x = 70.0 * px
    y = 90.0 * py
    z = -55.0 * np.sqrt(np.maximum(0.0, 1.0 - radius ** 2))
    z -= 14.0 * np.exp(-((x / 14.0) ** 2 + ((y + 20.0) / 18.0) ** 2))  # nose bump
    verts = np.stack([x, y, z], axis=1)

    tri = Delaunay(np.stack([px, py], axis=1)).simplices.astype(np.int32)
    # enforce clockwise winding in the parameter plane so face normals point -z
    p0, p1, p2 = (np.stack([px, py], axis=1)[tri[:, k]] for k in range(3))
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    flip = area2 > 0
    tri[flip, 1], tri[flip, 2] = tri[flip, 2], tri[flip, 1]

    n_id, n_exp, n_tex = dims
    basis_id = _orthonormalize(_smooth_columns(rng, px, py, n_id))
    basis_exp = _orthonormalize(_smooth_columns(rng, px, py, n_exp))
    basis_tex = _orthonormalize(_smooth_columns(rng, px, py, n_tex))

    tex = np.stack([
        0.78 - 0.10 * radius ** 2 + 0.02 * py,
        0.62 - 0.08 * radius ** 2 + 0.01 * py,
        0.54 - 0.06 * radius ** 2,
    ], axis=1)
    tex = np.clip(tex, 0.05, 0.95)

    nose_tip = int(np.argmin(verts[:, 2]))
    spread = np.unique(np.round(np.linspace(0, v_count - 1, NUM_LANDMARKS)).astype(np.int64))
    # rounding keeps them distinct for V >= 68; place the nose tip at slot 30
    landmarks = list(spread[:NUM_LANDMARKS])
    if nose_tip in landmarks:
        j = landmarks.index(nose_tip)
        landmarks[j], landmarks[NOSE_TIP_LANDMARK] = landmarks[NOSE_TIP_LANDMARK], landmarks[j]
    else:
        landmarks[NOSE_TIP_LANDMARK] = nose_tip
    landmarks = np.asarray(landmarks, dtype=np.int32)

    return FaceBasis(
        mean_shape=verts.reshape(-1),
        mean_texture=tex.reshape(-1),
        basis_id=basis_id,
        basis_exp=basis_exp,
        basis_tex=basis_tex,
        triangles=tri,
        landmark_indices=landmarks,
        skin_vertex_flags=radius < 0.9,
    )
