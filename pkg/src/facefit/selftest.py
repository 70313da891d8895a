"""Built-in assertion suite covering the documented basic behaviors.

Every check is a small, self-contained example with a hand-checkable
expected outcome (definitions, identities, round trips, degenerate cases).
The CLI `selftest` subcommand runs them all and exits nonzero if any fail.
"""

import json
import math
import os
import sys
import tempfile
from functools import lru_cache

import numpy as np

from . import io as ffio
from .camera import CameraModel, project, rotation_matrix, sh_basis, shade_texture
from .errors import CropError, FaceFitError, ParseError
from .evaluation import (Mesh, crop_by_radius, icp_align, point_to_plane_rmse,
                         point_to_point_rmse)
from .fitting import (Adam, FitConfig, fit_coefficients, initial_coefficients,
                      lr_schedule, train_step)
from .losses import (AveragePoolEmbedder, LossWeights, SkinMask,
                     coefficient_regularization, landmark_loss, perceptual_loss,
                     photometric_loss, reflectance_loss, total_loss)
from .morphable import (FaceCoefficients, synthesize_shape, synthesize_texture,
                        synthetic_basis, vertex_normals)
from .network import (backbone_forward, init_network_params, mlka_block,
                      msf_align, msf_fuse, network_forward, regression_heads)
from .render import project_landmarks, rasterize, rasterize_backward, render_face
from .tensor_ops import (Tensor4, concat_channels, conv2d, elementwise,
                         fully_connected, global_average_pool, gradcheck,
                         interpolate, pointwise_conv, relu, split_channels)

CHECKS = []


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn
    return deco


@lru_cache(maxsize=None)
def _basis(v=220, seed=7):
    return synthetic_basis(seed, v)


@lru_cache(maxsize=None)
def _camera(size=48):
    return CameraModel.default_perspective((size, size))


def _frontal_coeffs():
    return initial_coefficients(_basis(), _camera())


# ---------------------------------------------------------------------- tensor

@check("conv2d: 3x3 ones against 3x3 ones sums to 9")
def _conv_sum():
    out, _ = conv2d(Tensor4(np.ones((1, 1, 3, 3))), Tensor4(np.ones((1, 1, 3, 3))))
    assert out.data.shape == (1, 1, 1, 1) and out.data.ravel()[0] == 9.0


@check("conv2d: depthwise identity-center kernels preserve the input")
def _conv_identity():
    rng = np.random.default_rng(0)
    x = Tensor4(rng.standard_normal((1, 2, 4, 4)))
    k = np.zeros((2, 1, 3, 3))
    k[:, 0, 1, 1] = 1.0
    out, _ = conv2d(x, Tensor4(k), groups=2, padding=1)
    assert np.array_equal(out.data, x.data)


@check("pointwise_conv: (1,1) weights produce per-pixel channel sums")
def _pointwise_sum():
    rng = np.random.default_rng(1)
    x = Tensor4(rng.standard_normal((1, 2, 2, 2)))
    out, _ = pointwise_conv(x, Tensor4(np.ones((1, 2, 1, 1))))
    assert np.allclose(out.data[0, 0], x.data[0].sum(axis=0), atol=1e-15)


@check("pointwise_conv: identity channel map preserves the input")
def _pointwise_identity():
    rng = np.random.default_rng(2)
    x = Tensor4(rng.standard_normal((1, 3, 2, 2)))
    out, _ = pointwise_conv(x, Tensor4(np.eye(3).reshape(3, 3, 1, 1)))
    assert np.array_equal(out.data, x.data)


@check("interpolate: constant field stays constant in both modes")
def _interp_constant():
    x = Tensor4(np.full((1, 1, 2, 2), 3.25))
    for mode in ("nearest", "bilinear"):
        out, _ = interpolate(x, 4, 4, mode)
        assert np.all(out.data == 3.25)


@check("interpolate: identity target dims return the input")
def _interp_identity():
    rng = np.random.default_rng(3)
    x = Tensor4(rng.standard_normal((1, 2, 3, 5)))
    for mode in ("nearest", "bilinear"):
        out, _ = interpolate(x, 3, 5, mode)
        assert np.array_equal(out.data, x.data)


@check("relu: [-1, 0, 2] maps to [0, 0, 2]")
def _relu_def():
    out, _ = relu(Tensor4(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
    assert np.array_equal(out.data.ravel(), [0.0, 0.0, 2.0])


@check("split/concat: round trip is exact")
def _split_concat():
    rng = np.random.default_rng(4)
    a = Tensor4(rng.standard_normal((1, 2, 3, 3)))
    b = Tensor4(rng.standard_normal((1, 2, 3, 3)))
    cat, _ = concat_channels([a, b])
    parts, _ = split_channels(cat, 2)
    assert np.array_equal(parts[0].data, a.data) and np.array_equal(parts[1].data, b.data)


@check("fully_connected: zero weights return the bias")
def _fc_bias():
    bias = np.array([1.5, -2.0])
    out, _ = fully_connected(np.ones(4), np.zeros((2, 4)), bias)
    assert np.array_equal(out, bias)


@check("global_average_pool: constant channel pools to its value")
def _gap_constant():
    out, _ = global_average_pool(Tensor4(np.full((1, 2, 3, 3), 0.75)))
    assert np.allclose(out, 0.75, atol=0)


@check("gradcheck: linear op (add) is exact to 1e-9")
def _gradcheck_linear():
    def f(a, b):
        out, rec = elementwise(Tensor4(a), Tensor4(b), "add")
        return out.data, lambda g: rec.backward(g)
    rng = np.random.default_rng(5)
    err = gradcheck(f, [rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2))])
    assert err < 1e-9, err


# ------------------------------------------------------------------ morphable

@check("synthesize_shape: zero coefficients give the mean face")
def _shape_mean():
    basis = _basis()
    verts = synthesize_shape(basis, np.zeros(80), np.zeros(64))
    assert np.array_equal(verts, basis.mean_shape.reshape(-1, 3))


@check("synthesize_shape: unit coefficient adds one basis column")
def _shape_linear():
    basis = _basis()
    e1 = np.zeros(80)
    e1[0] = 1.0
    verts = synthesize_shape(basis, e1, np.zeros(64))
    expect = basis.mean_shape + basis.basis_id[:, 0]
    assert np.allclose(verts.reshape(-1), expect, atol=1e-15)


@check("synthesize_texture: zero gamma gives the mean texture")
def _texture_mean():
    basis = _basis()
    tex = synthesize_texture(basis, np.zeros(80))
    assert np.array_equal(tex, basis.mean_texture.reshape(-1, 3))


@check("synthesize_texture: scaled basis column adds linearly")
def _texture_linear():
    basis = _basis()
    g = np.zeros(80)
    g[4] = 2.5
    tex = synthesize_texture(basis, g)
    expect = basis.mean_texture + 2.5 * basis.basis_tex[:, 4]
    assert np.allclose(tex.reshape(-1), expect, atol=1e-12)


_SQUARE_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
_SQUARE_TRIS = np.array([[0, 1, 2], [0, 2, 3]])


@check("vertex_normals: planar CCW square has all normals (0, 0, 1)")
def _normals_planar():
    n, bad = vertex_normals(_SQUARE_VERTS, _SQUARE_TRIS)
    assert bad == 0 and np.allclose(n, [0, 0, 1], atol=1e-15)


@check("vertex_normals: reversed winding flips the normals")
def _normals_flip():
    n, _ = vertex_normals(_SQUARE_VERTS, _SQUARE_TRIS[:, ::-1])
    assert np.allclose(n, [0, 0, -1], atol=1e-15)


@check("synthetic_basis: same seed twice is bitwise identical")
def _basis_deterministic():
    a = synthetic_basis(11, 90)
    b = synthetic_basis(11, 90)
    assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in
               ("mean_shape", "mean_texture", "basis_id", "basis_exp", "basis_tex",
                "triangles", "landmark_indices", "skin_vertex_flags"))


@check("synthetic_basis: identity-basis Gram matrix is the identity")
def _basis_gram():
    basis = _basis()
    gram = basis.basis_id.T @ basis.basis_id
    assert np.abs(gram - np.eye(80)).max() < 1e-10


# --------------------------------------------------------------------- camera

@check("rotation_matrix: zero angles give the identity")
def _rot_zero():
    r, _ = rotation_matrix((0.0, 0.0, 0.0))
    assert np.array_equal(r, np.eye(3))


@check("rotation_matrix: quarter turn about z maps x to y")
def _rot_quarter():
    r, _ = rotation_matrix((0.0, 0.0, math.pi / 2))
    assert np.abs(r @ np.array([1.0, 0, 0]) - np.array([0, 1.0, 0])).max() < 1e-12


@check("project: optical-axis vertex lands on the principal point")
def _project_axis():
    cam = _camera()
    pts, _, _ = project(np.zeros((1, 3)), (0, 0, 0), (0, 0, 500.0), cam)
    assert np.abs(pts[0] - np.asarray(cam.principal_point)).max() < 1e-12


@check("project: weak perspective with f=1, centered, equals world xy")
def _project_weak_identity():
    cam = CameraModel("weak_perspective", 1.0, (0.0, 0.0), (64, 64))
    rng = np.random.default_rng(6)
    v = rng.standard_normal((10, 3))
    pts, _, _ = project(v, (0, 0, 0), (0, 0, 0), cam)
    assert np.array_equal(pts, v[:, :2])


@check("sh_basis: x/y-proportional terms vanish at n = (0, 0, 1)")
def _sh_zeros():
    vals, _ = sh_basis(np.array([0.0, 0.0, 1.0]))
    assert np.array_equal(vals[[1, 3, 4, 5, 7]], np.zeros(5))


@check("shade_texture: zero lighting blacks out the texture")
def _shade_zero():
    rng = np.random.default_rng(7)
    tex = rng.uniform(0, 1, (5, 3))
    nrm = np.tile([0.0, 0.0, 1.0], (5, 1))
    shaded, _ = shade_texture(tex, nrm, np.zeros(9))
    assert np.array_equal(shaded, np.zeros((5, 3)))


# ------------------------------------------------------------------- renderer

def _rect_triangle(size=8):
    pts = np.array([[-2.0 * size, -2.0 * size], [4.0 * size, -2.0 * size], [-2.0 * size, 4.0 * size]])
    return pts, np.full(3, 5.0), np.array([[0, 1, 2]])


@check("rasterize: one covering triangle with constant attribute fills the frame")
def _raster_full():
    pts, z, tri = _rect_triangle()
    fb = rasterize(pts, z, tri, np.full((3, 3), 0.6), (8, 8))
    assert fb.mask.all() and np.abs(fb.color - 0.6).max() < 1e-12


@check("rasterize: uncovered pixels keep background color and false mask")
def _raster_uncovered():
    pts = np.array([[0.5, 0.5], [2.5, 0.5], [0.5, 2.5]])
    fb = rasterize(pts, np.ones(3), np.array([[0, 1, 2]]), np.ones((3, 3)), (8, 8))
    assert not fb.mask[7, 7] and np.all(fb.color[7, 7] == 0.0) and fb.triangle_ids[7, 7] == -1


@check("rasterize: nearer of two overlapping triangles wins the z-buffer")
def _raster_zorder():
    pts, _, _ = _rect_triangle()
    pts = np.concatenate([pts, pts])
    z = np.array([2.0] * 3 + [1.0] * 3)
    tri = np.array([[0, 1, 2], [3, 4, 5]])
    attr = np.array([[0.2] * 3] * 3 + [[0.9] * 3] * 3)
    fb = rasterize(pts, z, tri, attr, (8, 8))
    assert np.all(fb.triangle_ids[fb.mask] == 1) and np.abs(fb.color[fb.mask] - 0.9).max() < 1e-12


@check("rasterize_backward: uniform gradient sums each vertex's barycentric weights")
def _raster_grad_sums():
    pts, z, tri = _rect_triangle()
    fb = rasterize(pts, z, tri, np.zeros((3, 1)), (8, 8))
    ga, _ = rasterize_backward(fb, np.ones((8, 8, 1)))
    sums = np.zeros(3)
    for corner in range(3):
        sums[corner] = fb.barycentrics[..., corner][fb.mask].sum()
    assert np.abs(ga.ravel() - sums).max() < 1e-12


@check("rasterize_backward: zero output gradient yields zero input gradients")
def _raster_grad_zero():
    pts, z, tri = _rect_triangle()
    fb = rasterize(pts, z, tri, np.zeros((3, 3)), (8, 8))
    ga, gp = rasterize_backward(fb, np.zeros((8, 8, 3)))
    assert not ga.any() and not gp.any()


@check("render_face: identical inputs render bitwise identically")
def _render_deterministic():
    co = _frontal_coeffs()
    fa, _ = render_face(co, _basis(), _camera())
    fbb, _ = render_face(co, _basis(), _camera())
    assert np.array_equal(fa.color, fbb.color) and np.array_equal(fa.depth, fbb.depth)


@check("render_face: zero lighting renders a black face region, same mask")
def _render_dark():
    co = _frontal_coeffs()
    lit, _ = render_face(co, _basis(), _camera())
    dark_co = co.copy()
    dark_co.delta[:] = 0.0
    dark, _ = render_face(dark_co, _basis(), _camera())
    assert dark.color.max() == 0.0 and np.array_equal(dark.mask, lit.mask)


@check("render_face: texture perturbations only change covered pixels")
def _render_mask_support():
    co = _frontal_coeffs()
    fa, _ = render_face(co, _basis(), _camera())
    co2 = co.copy()
    co2.gamma[3] += 0.2
    fbb, _ = render_face(co2, _basis(), _camera())
    changed = np.any(fa.color != fbb.color, axis=2)
    assert not np.any(changed & ~fa.mask)


@check("project_landmarks: axis landmark projects to the principal point")
def _landmark_axis():
    basis = _basis()
    cam = _camera()
    co = _frontal_coeffs()
    lm_vertex = basis.mean_shape.reshape(-1, 3)[basis.nose_tip_index]
    co.translation[:] = (-lm_vertex[0], -lm_vertex[1], co.translation[2])
    pts, _ = project_landmarks(co, basis, cam)
    from .morphable import NOSE_TIP_LANDMARK
    assert np.abs(pts[NOSE_TIP_LANDMARK] - np.asarray(cam.principal_point)).max() < 1e-9


@check("project_landmarks: weak-perspective xy shift moves all landmarks by f*t")
def _landmark_shift():
    basis = _basis()
    cam = CameraModel("weak_perspective", 2.0, (24.0, 24.0), (48, 48))
    co = _frontal_coeffs()
    base, _ = project_landmarks(co, basis, cam)
    co2 = co.copy()
    co2.translation[:2] += (1.25, -0.5)
    moved, _ = project_landmarks(co2, basis, cam)
    assert np.abs((moved - base) - np.array([2.0 * 1.25, 2.0 * -0.5])).max() < 1e-12


# --------------------------------------------------------------------- losses

@check("photometric_loss: identical images score 0")
def _pho_zero():
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (6, 6, 3))
    val, grad = photometric_loss(img, img, SkinMask(np.ones((6, 6))), np.ones((6, 6), bool))
    assert val == 0.0 and not grad.any()


@check("photometric_loss: constant +1 offset scores sqrt(3)")
def _pho_offset():
    rng = np.random.default_rng(9)
    img = rng.uniform(0, 1, (6, 6, 3))
    val, _ = photometric_loss(img, img + 1.0, SkinMask(np.ones((6, 6))), np.ones((6, 6), bool))
    assert abs(val - math.sqrt(3)) < 1e-12


@check("perceptual_loss: identical images score 0")
def _per_zero():
    rng = np.random.default_rng(10)
    img = rng.uniform(0, 1, (16, 16, 3))
    val, _ = perceptual_loss(AveragePoolEmbedder(grid=4), img, img)
    assert val == 0.0


@check("perceptual_loss: orthogonal embeddings score 1")
def _per_orthogonal():
    class TwoHot:
        def __init__(self, idx):
            self.idx = idx

        def embed(self, image):
            vec = np.zeros(4)
            vec[self.idx if image[0, 0, 0] > 0.5 else (self.idx + 1)] = 1.0
            return vec, lambda g: np.zeros_like(image)

    img_a = np.full((2, 2, 3), 1.0)
    img_b = np.zeros((2, 2, 3))
    val, _ = perceptual_loss(TwoHot(0), img_a, img_b)
    assert abs(val - 1.0) < 1e-15


@check("landmark_loss: perfect alignment scores 0")
def _lmk_zero():
    rng = np.random.default_rng(11)
    p = rng.uniform(0, 48, (68, 2))
    val, grad = landmark_loss(p, p.copy(), np.ones(68))
    assert val == 0.0 and not grad.any()


@check("landmark_loss: one weight-1 landmark off by (3,4) scores 25/68")
def _lmk_25():
    p = np.zeros((68, 2))
    q = p.copy()
    q[5] = (3.0, 4.0)
    w = np.ones(68)
    w[60:68] = 20.0
    val, _ = landmark_loss(p, q, w)
    assert abs(val - 25.0 / 68.0) < 1e-12


@check("coefficient_regularization: zero coefficients are unpenalized")
def _reg_zero():
    val, grads = coefficient_regularization(np.zeros(80), np.zeros(64), np.zeros(80), LossWeights())
    assert val == 0.0 and not any(g.any() for g in grads)


@check("reflectance_loss: constant texture scores 0")
def _refl_zero():
    val, grad = reflectance_loss(np.full((7, 3), 0.4), np.ones(7, bool))
    assert abs(val) < 1e-30 and np.abs(grad).max() < 1e-15


@check("reflectance_loss: two-point single-channel variance is 1 per channel")
def _refl_twopoint():
    tex = np.zeros((2, 3))
    tex[1, 0] = 2.0
    val, _ = reflectance_loss(tex, np.ones(2, bool))
    assert abs(val - 1.0) < 1e-15


@check("total_loss: data terms vanish at the generating coefficients")
def _total_selfconsistent():
    basis, cam = _basis(), _camera()
    co = _frontal_coeffs()
    fb, _ = render_face(co, basis, cam)
    lm, _ = project_landmarks(co, basis, cam)
    res = total_loss(co, basis, cam, fb.color, lm, SkinMask(fb.mask.astype(float)),
                     LossWeights(lambda_3dmm=0.0, lambda_refl=0.0))
    assert res.total == 0.0


@check("total_loss: all-zero weights give total 0 regardless of inputs")
def _total_null():
    basis, cam = _basis(), _camera()
    lw = LossWeights(lambda_pho=0, lambda_per=0, lambda_lmk=0, lambda_3dmm=0, lambda_refl=0)
    res = total_loss(_frontal_coeffs(), basis, cam, np.zeros((48, 48, 3)),
                     np.zeros((68, 2)), SkinMask(np.zeros((48, 48))), lw)
    assert res.total == 0.0 and not res.gradient.to_vector().any()


# -------------------------------------------------------------------- network

@check("backbone: 64x64 input yields stage spatial dims 16, 8, 4, 2")
def _backbone_dims():
    params = init_network_params(0, widths=(8, 16, 32, 64), attention=False)
    pyr, _ = backbone_forward(Tensor4(np.zeros((1, 3, 64, 64))), params)
    assert [t.dims[2] for t in pyr.stages()] == [16, 8, 4, 2]


@check("backbone: same seed and input produce bitwise-identical pyramids")
def _backbone_deterministic():
    rng = np.random.default_rng(12)
    x = Tensor4(rng.standard_normal((1, 3, 64, 64)))
    pa, _ = backbone_forward(x, init_network_params(3))
    pb, _ = backbone_forward(x, init_network_params(3))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(pa.stages(), pb.stages()))


@check("msf_align: aligning a stage to itself is the identity")
def _align_identity():
    params = init_network_params(0)
    x = Tensor4(np.random.default_rng(13).standard_normal((1, 12, 8, 8)))
    out, _ = msf_align(x, 2, 2, params)
    assert out is x


@check("msf_align: an 8x8 to 2x2 path applies exactly two stride-2 convolutions")
def _align_two_steps():
    params = init_network_params(0)
    step_keys = [k for k in params if k.startswith("align.2to4.step")]
    assert len(step_keys) == 2
    x = Tensor4(np.random.default_rng(14).standard_normal((1, 12, 8, 8)))
    out, _ = msf_align(x, 2, 4, params)
    assert out.dims == (1, 48, 2, 2)


@check("msf_fuse: zero siblings reduce fusion to ReLU of the stage")
def _fuse_zero_siblings():
    params = {k: (np.zeros_like(v) if k.startswith("align.") else v)
              for k, v in init_network_params(0).items()}
    rng = np.random.default_rng(15)
    pyr, _ = backbone_forward(Tensor4(rng.standard_normal((1, 3, 64, 64))), params)
    fused, _ = msf_fuse(pyr, 3, params)
    expect = np.maximum(pyr.stages()[2].data, 0.0)
    assert np.array_equal(fused.data, expect)


@check("msf_fuse: output equals the pre-activation wherever it is positive")
def _fuse_relu():
    params = init_network_params(0)
    rng = np.random.default_rng(16)
    pyr, _ = backbone_forward(Tensor4(rng.standard_normal((1, 3, 64, 64))), params)
    stages = pyr.stages()
    pre = stages[1].data.copy()
    for j in (1, 3, 4):
        aligned, _ = msf_align(stages[j - 1], j, 2, params)
        pre = pre + aligned.data
    fused, _ = msf_fuse(pyr, 2, params)
    pos = pre > 0
    assert np.array_equal(fused.data[pos], pre[pos]) and np.all(fused.data[~pos] == 0.0)


@check("mlka_block: scale 0 is the bitwise identity")
def _mlka_identity():
    params = init_network_params(0)
    params = {k: (np.zeros_like(v) if k == "attn2.scale" else v) for k, v in params.items()}
    x = Tensor4(np.random.default_rng(17).standard_normal((1, 12, 9, 9)))
    out, _ = mlka_block(x, params, "attn2")
    assert np.array_equal(out.data, x.data)


@check("mlka_block: 48 channels split into three 16-channel segments")
def _mlka_split():
    x = Tensor4(np.random.default_rng(18).standard_normal((1, 48, 5, 5)))
    parts, _ = split_channels(x, 3)
    assert [p.channels for p in parts] == [16, 16, 16]
    params = init_network_params(0)
    assert params["attn4.dw3.w"].shape[0] == 16


@check("regression_heads: zero weights return the per-head biases")
def _heads_bias():
    params = init_network_params(0)
    for name in ("alpha", "beta", "gamma", "rotation", "delta", "translation"):
        params[f"head_{name}.w"] = np.zeros_like(params[f"head_{name}.w"])
    rng = np.random.default_rng(19)
    low = Tensor4(rng.standard_normal((1, 48, 2, 2)))
    mid = Tensor4(rng.standard_normal((1, 24, 4, 4)))
    high = Tensor4(rng.standard_normal((1, 12, 8, 8)))
    coeffs, _ = regression_heads(low, mid, high, params)
    assert np.array_equal(coeffs[0].translation, params["head_translation.b"])
    assert np.array_equal(coeffs[0].delta, params["head_delta.b"])


@check("regression_heads: each map feeds exactly its two attribute heads")
def _heads_wiring():
    params = init_network_params(0)
    rng = np.random.default_rng(20)
    low = Tensor4(rng.standard_normal((1, 48, 2, 2)))
    mid = Tensor4(rng.standard_normal((1, 24, 4, 4)))
    high = Tensor4(rng.standard_normal((1, 12, 8, 8)))
    base, _ = regression_heads(low, mid, high, params)
    low2 = Tensor4(low.data + 0.5)
    bumped, _ = regression_heads(low2, mid, high, params)
    same = lambda a, b: np.array_equal(a, b)
    assert not same(base[0].alpha, bumped[0].alpha) and not same(base[0].beta, bumped[0].beta)
    assert same(base[0].gamma, bumped[0].gamma) and same(base[0].rotation, bumped[0].rotation)
    assert same(base[0].delta, bumped[0].delta) and same(base[0].translation, bumped[0].translation)


@check("coefficients: pack/unpack round trip is identical")
def _coeff_roundtrip():
    rng = np.random.default_rng(21)
    co = FaceCoefficients(rng.normal(size=80), rng.normal(size=64), rng.normal(size=80),
                          rng.uniform(-1, 1, 3), rng.normal(size=3), rng.normal(size=9))
    back = FaceCoefficients.from_vector(co.to_vector())
    assert np.array_equal(back.to_vector(), co.to_vector())


@check("coefficients: zero blocks pack to the zero 239-vector")
def _coeff_zero():
    vec = FaceCoefficients.zeros().to_vector()
    assert vec.shape == (239,) and not vec.any()


@check("network_forward: same seed and input give identical coefficients")
def _network_deterministic():
    rng = np.random.default_rng(22)
    x = Tensor4(rng.standard_normal((1, 3, 64, 64)))
    a, _ = network_forward(x, init_network_params(5))
    b, _ = network_forward(x, init_network_params(5))
    assert np.array_equal(a[0].to_vector(), b[0].to_vector())


@check("network_forward: duplicated batch rows produce identical outputs")
def _network_batch():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((1, 3, 64, 64))
    both, _ = network_forward(Tensor4(np.concatenate([x, x])), init_network_params(6))
    assert np.array_equal(both[0].to_vector(), both[1].to_vector())


# -------------------------------------------------------------------- fitting

@check("lr_schedule: 0.0004 at start, halved at the decay interval")
def _lr_values():
    cfg = FitConfig()
    assert lr_schedule(0, cfg) == 0.0004
    assert lr_schedule(cfg.lr_decay_interval, cfg) == 0.0002
    assert abs(lr_schedule(3 * cfg.lr_decay_interval, cfg) - 5e-5) < 1e-20


@check("fit_coefficients: zero max_iterations returns the init with an empty trace")
def _fit_noop():
    basis, cam = _basis(), _camera()
    co0 = _frontal_coeffs()
    fb, _ = render_face(co0, basis, cam)
    lm, _ = project_landmarks(co0, basis, cam)
    co, trace = fit_coefficients(fb.color, lm, SkinMask(fb.mask.astype(float)),
                                 basis, cam, FitConfig(max_iterations=0))
    assert len(trace.records) == 0 and np.array_equal(co.to_vector(), co0.to_vector())


@check("fit_coefficients: the generating coefficients are a data-term fixed point")
def _fit_fixed_point():
    basis, cam = _basis(), _camera()
    cstar = _frontal_coeffs()
    fb, _ = render_face(cstar, basis, cam)
    lm, _ = project_landmarks(cstar, basis, cam)
    lw = LossWeights(lambda_3dmm=0.0, lambda_refl=0.0)
    co, trace = fit_coefficients(fb.color, lm, SkinMask(fb.mask.astype(float)), basis, cam,
                                 FitConfig(max_iterations=10, loss_weights=lw), init=cstar)
    assert trace.records[0].total == 0.0
    assert np.abs(co.to_vector() - cstar.to_vector()).max() < 1e-6


@check("optimizer: a zero-learning-rate step leaves parameters bitwise unchanged")
def _train_null_step():
    params = init_network_params(7)
    rng = np.random.default_rng(27)
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    new_params = Adam().step(params, grads, 0.0)
    assert all(np.array_equal(params[k], new_params[k]) for k in params)


@check("train_step: duplicated batch images score identical per-sample losses")
def _train_batch_symmetry():
    basis = _basis()
    cam = CameraModel.default_perspective((64, 64))
    co = _frontal_coeffs()
    fb, _ = render_face(co, basis, cam)
    lm, _ = project_landmarks(co, basis, cam)
    sample = (fb.color, lm, SkinMask(fb.mask.astype(float)))
    params = init_network_params(8)
    _, loss2 = train_step(params, Adam(), [sample, sample], basis, cam, FitConfig())
    _, loss1 = train_step(params, Adam(), [sample], basis, cam, FitConfig())
    assert abs(loss2 - loss1) < 1e-12


# ----------------------------------------------------------------- evaluation

@check("icp_align: identical meshes give identity, scale 1, residual ~0")
def _icp_identity():
    basis = _basis()
    mesh = Mesh(basis.mean_shape.reshape(-1, 3), basis.triangles)
    tr, res = icp_align(mesh, mesh)
    assert np.abs(tr.rotation - np.eye(3)).max() < 1e-10
    assert np.abs(tr.translation).max() < 1e-8 and abs(tr.scale - 1) < 1e-10
    assert res[-1] < 1e-8


@check("icp_align: a pure (5, 0, 0) translation is recovered to 1e-8")
def _icp_translation():
    basis = _basis()
    v = basis.mean_shape.reshape(-1, 3)
    tr, res = icp_align(Mesh(v, basis.triangles), Mesh(v + (5.0, 0, 0), basis.triangles))
    assert np.abs(tr.translation - (5.0, 0, 0)).max() < 1e-8 and res[-1] < 1e-8


@check("crop_by_radius: infinite radius keeps the whole mesh")
def _crop_noop():
    basis = _basis()
    mesh = Mesh(basis.mean_shape.reshape(-1, 3), basis.triangles)
    sub = crop_by_radius(mesh, 0, np.inf)
    assert sub.num_vertices == mesh.num_vertices and np.array_equal(sub.triangles, mesh.triangles)


@check("crop_by_radius: sub-spacing radius keeps one vertex; errors if triangles required")
def _crop_degenerate():
    verts = np.array([[0.0, 0, 0], [10, 0, 0], [0, 10, 0]])
    mesh = Mesh(verts, np.array([[0, 1, 2]]))
    sub = crop_by_radius(mesh, 0, 1.0)
    assert sub.num_vertices == 1 and len(sub.triangles) == 0
    try:
        crop_by_radius(mesh, 0, 1.0, require_triangles=True)
    except CropError:
        pass
    else:
        raise AssertionError("expected CropError")


@check("point_to_plane_rmse: identical meshes score 0")
def _p2plane_zero():
    basis = _basis()
    mesh = Mesh(basis.mean_shape.reshape(-1, 3), basis.triangles)
    assert point_to_plane_rmse(mesh, mesh) == 0.0


@check("point_to_plane_rmse: uniformly lifted plane scores exactly the lift")
def _p2plane_lift():
    g = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij"), -1).reshape(-1, 2)
    verts = np.concatenate([g, np.zeros((16, 1))], axis=1)
    tris = []
    for r in range(3):
        for c in range(3):
            i = r * 4 + c
            tris += [[i, i + 1, i + 4], [i + 1, i + 5, i + 4]]
    plane = Mesh(verts, np.array(tris))
    lifted = verts + (0.0, 0.0, 0.8)
    assert abs(point_to_plane_rmse(lifted, plane) - 0.8) < 1e-12


@check("point_to_point_rmse: identical meshes score 0; shifts are bounded by the shift")
def _p2point_bounds():
    basis = _basis()
    v = basis.mean_shape.reshape(-1, 3)
    assert point_to_point_rmse(v, v) == 0.0
    shifted = v + (0.5, 0.5, 0.5)
    d = point_to_point_rmse(shifted, v)
    assert d <= math.sqrt(0.75) + 1e-12


# ------------------------------------------------------------------ assets-io

@check("read_image: all-white 2x2 PPM decodes to ones")
def _ppm_white():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "white.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P6\n2 2\n255\n" + b"\xff" * 12)
        img = ffio.read_image(path)
        assert img.shape == (2, 2, 3) and np.all(img == 1.0)


@check("image round trip: write-then-read equals the 8-bit quantization")
def _ppm_roundtrip():
    rng = np.random.default_rng(24)
    img = rng.uniform(0, 1, (5, 7, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "img.ppm")
        ffio.write_image(img, path)
        back = ffio.read_image(path)
    quant = np.round(img * 255.0) / 255.0
    assert np.array_equal(back, quant)


@check("read_image: truncated pixel data raises a parse error")
def _ppm_truncated():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trunc.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P6\n4 4\n255\n" + b"\x00" * 10)
        try:
            ffio.read_image(path)
        except ParseError as exc:
            assert "truncated" in str(exc)
        else:
            raise AssertionError("expected ParseError")


@check("read_obj: a single-triangle file yields 3 vertices and 1 face")
def _obj_minimal():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "tri.obj")
        with open(path, "w") as fh:
            fh.write("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        mesh = ffio.read_obj(path)
        assert mesh.num_vertices == 3 and len(mesh.triangles) == 1


@check("obj round trip: icosahedron connectivity is preserved exactly")
def _obj_roundtrip():
    phi = (1 + math.sqrt(5)) / 2
    verts = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                      [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                      [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=float)
    tris = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                     [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                     [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                     [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ico.obj")
        ffio.write_obj(Mesh(verts, tris), path)
        back = ffio.read_obj(path)
    assert np.array_equal(back.triangles, tris)
    assert np.abs(back.vertices - verts).max() < 1e-8


@check("read_obj: 1-based violation (index 0) raises a parse error")
def _obj_zero_index():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "bad.obj")
        with open(path, "w") as fh:
            fh.write("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
        try:
            ffio.read_obj(path)
        except ParseError as exc:
            assert "1-based" in str(exc)
        else:
            raise AssertionError("expected ParseError")


@check("read_landmarks: 68 rows parse; 67 rows raise naming the count")
def _landmarks_count():
    rng = np.random.default_rng(25)
    pts = rng.uniform(0, 48, (68, 2))
    with tempfile.TemporaryDirectory() as tmp:
        good = os.path.join(tmp, "good.txt")
        ffio.write_landmarks(pts, good)
        assert ffio.read_landmarks(good).shape == (68, 2)
        bad = os.path.join(tmp, "bad.txt")
        with open(good) as src, open(bad, "w") as dst:
            dst.writelines(src.readlines()[:-1])
        try:
            ffio.read_landmarks(bad)
        except ParseError as exc:
            assert "expected 68 landmarks, found 67" in str(exc)
        else:
            raise AssertionError("expected ParseError")


@check("coefficients file: round trip is bitwise identical")
def _coeff_file_roundtrip():
    rng = np.random.default_rng(26)
    co = FaceCoefficients(rng.normal(size=80), rng.normal(size=64), rng.normal(size=80),
                          rng.uniform(-1, 1, 3), rng.normal(size=3), rng.normal(size=9))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.json")
        ffio.write_coefficients(co, path)
        back = ffio.read_coefficients(path)
    assert np.array_equal(back.to_vector(), co.to_vector())


@check("read_config: unknown keys are rejected by name")
def _config_unknown_key():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cfg.json")
        with open(path, "w") as fh:
            json.dump({"lr": 0.1}, fh)
        try:
            ffio.read_config(path)
        except ParseError as exc:
            assert "'lr'" in str(exc)
        else:
            raise AssertionError("expected ParseError")


def run_selftest(stream=None):
    """Run every check; print one line each; return the number of failures."""
    out = stream if stream is not None else sys.stdout
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except AssertionError as exc:
            failures += 1
            detail = f" ({exc})" if str(exc) else ""
            print(f"FAIL  {name}{detail}", file=out)
        except FaceFitError as exc:
            failures += 1
            print(f"FAIL  {name} (unexpected error: {exc})", file=out)
        else:
            print(f"ok    {name}", file=out)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=out)
    return failures
