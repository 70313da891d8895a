"""The five-term weakly supervised objective with exact coefficient gradients.

Terms: photometric (masked per-pixel L2 over the rendered face region),
perceptual (1 - cosine between feature embeddings), landmark reprojection
(weighted mean squared pixel distance), coefficient regularization
(weighted squared norms pulling toward the mean face), and reflectance
(variance of the skin-region texture around its mean).

The regularization pair (coefficient + reflectance) is composed once into
the total, weighted by lambda_3dmm and lambda_refl.
"""

from dataclasses import dataclass, field

import numpy as np

from . import morphable as mm
from .errors import DegenerateEmbeddingError, DegenerateMaskError, ShapeError
from .render import render_face, project_landmarks

INNER_MOUTH_LANDMARKS = tuple(range(60, 68))


def default_landmark_weights():
    w = np.ones(mm.NUM_LANDMARKS)
    w[list(INNER_MOUTH_LANDMARKS)] = 20.0
    return w


@dataclass
class LossWeights:
    """Balance weights; the inner regularizer values follow the reference setting."""

    lambda_pho: float = 1.0
    lambda_per: float = 0.2
    lambda_lmk: float = 2e-3
    lambda_3dmm: float = 3e-4
    lambda_refl: float = 5.0
    lambda_alpha: float = 1.0
    lambda_beta: float = 0.8
    lambda_gamma: float = 1.7e-2
    landmark_weights: np.ndarray = field(default_factory=default_landmark_weights)

    def __post_init__(self):
        self.landmark_weights = np.asarray(self.landmark_weights, dtype=np.float64).reshape(-1)
        if self.landmark_weights.size != mm.NUM_LANDMARKS:
            raise ShapeError(f"need {mm.NUM_LANDMARKS} landmark weights, got {self.landmark_weights.size}")
        for name in ("lambda_pho", "lambda_per", "lambda_lmk", "lambda_3dmm",
                     "lambda_refl", "lambda_alpha", "lambda_beta", "lambda_gamma"):
            if getattr(self, name) < 0:
                raise ShapeError(f"{name} must be >= 0")
        if np.any(self.landmark_weights < 0):
            raise ShapeError("landmark weights must be >= 0")


@dataclass
class SkinMask:
    """Per-pixel skin confidence A in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"skin mask must be 2D, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ShapeError("skin mask values must lie in [0, 1]")


def photometric_loss(image, rendered, skin_mask, coverage):
    """A-weighted mean of per-pixel RGB L2 norms over the covered region.

    Returns (value, grad w.r.t. rendered). The zero-residual subgradient
    is 0. Raises if no covered pixel carries mask weight.
    """
    i = np.asarray(image, dtype=np.float64)
    ir = np.asarray(rendered, dtype=np.float64)
    a = skin_mask.values if isinstance(skin_mask, SkinMask) else np.asarray(skin_mask, dtype=np.float64)
    m = np.asarray(coverage, dtype=bool)
    if i.shape != ir.shape or i.shape[:2] != a.shape or a.shape != m.shape:
        raise ShapeError(f"photometric shapes disagree: I{i.shape} Ir{ir.shape} A{a.shape} M{m.shape}")
    weights = a * m
    denom = weights.sum()
    if denom <= 0.0:
        raise DegenerateMaskError("no covered pixel has positive mask weight")
    diff = ir - i
    norms = np.sqrt(np.sum(diff * diff, axis=2))
    value = float((weights * norms).sum() / denom)
    grad = np.zeros_like(ir)
    pos = (norms > 0.0) & (weights > 0.0)
    grad[pos] = diff[pos] * (weights[pos] / (norms[pos] * denom))[:, None]
    return value, grad


class AveragePoolEmbedder:
    """Built-in stand-in for a pretrained identity embedder.

    Pools the image to a grid x grid x 3 block mean and flattens it; this
    keeps the cosine loss self-contained while a real embedder can be
    plugged in through the same interface (embed -> (vector, backward)).
    """

    def __init__(self, grid=8):
        self.grid = grid

    def embed(self, image):
        img = np.asarray(image, dtype=np.float64)
        h, w, c = img.shape
        g = self.grid
        if h % g or w % g:
            raise ShapeError(f"image dims {h}x{w} not divisible by pool grid {g}")
        bh, bw = h // g, w // g
        pooled = img.reshape(g, bh, g, bw, c).mean(axis=(1, 3))
        vec = pooled.reshape(-1)

        def backward(grad_vec):
            gv = np.asarray(grad_vec, dtype=np.float64).reshape(g, 1, g, 1, c)
            return np.broadcast_to(gv / (bh * bw), (g, bh, g, bw, c)).reshape(h, w, c).copy()

        return vec, backward


def perceptual_loss(embedder, image, rendered):
    """1 - cos(embed(I), embed(Ir)); gradient w.r.t. the rendered image."""
    u, _ = embedder.embed(np.asarray(image, dtype=np.float64))
    v, back = embedder.embed(np.asarray(rendered, dtype=np.float64))
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("zero-norm embedding; cosine similarity undefined")
    if np.array_equal(u, v):
        # the gradient of 1 - cos is exactly zero at u == v; computing it
        # through the quotient would leave cancellation noise that a
        # moment-normalizing optimizer then amplifies
        return 0.0, back(np.zeros_like(v))
    cos = float(u @ v / (nu * nv))
    grad_v = -(u / (nu * nv) - (u @ v) * v / (nu * nv ** 3))
    return 1.0 - cos, back(grad_v)


def landmark_loss(detected, projected, weights):
    """Weighted mean squared pixel distance; gradient w.r.t. the projections."""
    p = np.asarray(detected, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if p.shape != q.shape or p.shape[0] != w.shape[0]:
        raise ShapeError(f"landmark shapes disagree: {p.shape} vs {q.shape}, {w.shape[0]} weights")
    n = p.shape[0]
    diff = q - p
    value = float((w * np.sum(diff * diff, axis=1)).sum() / n)
    grad = 2.0 * w[:, None] * diff / n
    return value, grad


def coefficient_regularization(alpha, beta, gamma, weights):
    """lambda_a ||alpha||^2 + lambda_b ||beta||^2 + lambda_g ||gamma||^2."""
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    value = float(weights.lambda_alpha * a @ a + weights.lambda_beta * b @ b
                  + weights.lambda_gamma * g @ g)
    return value, (2.0 * weights.lambda_alpha * a, 2.0 * weights.lambda_beta * b,
                   2.0 * weights.lambda_gamma * g)


def reflectance_loss(texture, skin_flags):
    """Mean squared deviation of flagged-vertex texture from its channel means.

    Favors constant skin albedo. The masked mean depends on the texture;
    its contribution to the gradient cancels analytically, leaving
    2 (T - mean) / count on flagged vertices.
    """
    t = np.asarray(texture, dtype=np.float64).reshape(-1, 3)
    flags = np.asarray(skin_flags, dtype=bool).reshape(-1)
    if flags.shape[0] != t.shape[0]:
        raise ShapeError(f"{flags.shape[0]} flags for {t.shape[0]} vertices")
    count = int(flags.sum())
    if count == 0:
        raise DegenerateMaskError("no skin-flagged vertices; reflectance mean undefined")
    sel = t[flags]
    mean = sel.mean(axis=0)
    dev = sel - mean
    value = float((dev * dev).sum() / count)
    grad = np.zeros_like(t)
    grad[flags] = 2.0 * dev / count
    return value, grad


@dataclass
class TotalLossResult:
    total: float
    breakdown: dict            # term -> {"unweighted", "weighted", "lambda"}
    gradient: mm.CoefficientGradient
    framebuffer: object        # renderer output, reusable by callers
    landmarks_projected: np.ndarray

    def breakdown_json(self):
        return {name: {k: float(v) for k, v in entry.items()}
                for name, entry in self.breakdown.items()}


def total_loss(coefficients, basis, camera_model, image, landmarks, skin_mask,
               weights=None, embedder=None):
    """Assemble the weighted objective and its gradient w.r.t. all 239 coefficients.

    Terms with a zero lambda are skipped entirely (their breakdown entry
    reports zeros), so the null objective is exactly 0 for any inputs.
    """
    w = weights if weights is not None else LossWeights()
    emb = embedder if embedder is not None else AveragePoolEmbedder()
    image = np.asarray(image, dtype=np.float64)

    grad = mm.CoefficientGradient.zeros()
    breakdown = {}
    total = 0.0
    fb = None
    lmk_proj = None

    need_render = w.lambda_pho > 0 or w.lambda_per > 0
    grad_image_total = None
    render_back = None
    if need_render:
        fb, render_back = render_face(coefficients, basis, camera_model)
        if image.shape != fb.color.shape:
            raise ShapeError(f"target image {image.shape} does not match render {fb.color.shape}")
        grad_image_total = np.zeros_like(fb.color)

    def record(name, lam, value):
        breakdown[name] = {"unweighted": value, "weighted": lam * value, "lambda": lam}
        return lam * value

    if w.lambda_pho > 0:
        val, g_ir = photometric_loss(image, fb.color, skin_mask, fb.mask)
        total += record("photometric", w.lambda_pho, val)
        grad_image_total += w.lambda_pho * g_ir
    else:
        record("photometric", 0.0, 0.0)

    if w.lambda_per > 0:
        val, g_ir = perceptual_loss(emb, image, fb.color)
        total += record("perceptual", w.lambda_per, val)
        grad_image_total += w.lambda_per * g_ir
    else:
        record("perceptual", 0.0, 0.0)

    if w.lambda_lmk > 0:
        lmk_proj, lmk_back = project_landmarks(coefficients, basis, camera_model)
        val, g_p = landmark_loss(landmarks, lmk_proj, w.landmark_weights)
        total += record("landmark", w.lambda_lmk, val)
        grad.add_scaled(lmk_back(g_p), w.lambda_lmk)
    else:
        record("landmark", 0.0, 0.0)

    if w.lambda_3dmm > 0:
        val, (ga, gb, gg) = coefficient_regularization(
            coefficients.alpha, coefficients.beta, coefficients.gamma, w)
        total += record("coefficients", w.lambda_3dmm, val)
        grad.alpha += w.lambda_3dmm * ga
        grad.beta += w.lambda_3dmm * gb
        grad.gamma += w.lambda_3dmm * gg
    else:
        record("coefficients", 0.0, 0.0)

    if w.lambda_refl > 0:
        texture = mm.synthesize_texture(basis, coefficients.gamma)
        val, g_t = reflectance_loss(texture, basis.skin_vertex_flags)
        total += record("reflectance", w.lambda_refl, val)
        grad.gamma += w.lambda_refl * (basis.basis_tex.T @ g_t.reshape(-1))
    else:
        record("reflectance", 0.0, 0.0)

    if need_render:
        grad.add_scaled(render_back(grad_image_total))

    return TotalLossResult(float(total), breakdown, grad, fb, lmk_proj)
