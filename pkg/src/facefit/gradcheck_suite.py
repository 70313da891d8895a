"""Finite-difference verification of every differentiable operation.

Used by the `gradcheck` CLI subcommand. Each entry compares an analytic
backward rule against central differences and reports
max |analytic - fd| / max(1, |fd|). Probes are seeded, sized for sub-second
runtime, and placed away from non-smooth points (relu kinks, zero
photometric residuals, coverage boundaries).
"""

import math
import sys

import numpy as np

from .camera import CameraModel, project, sh_basis, shade_texture
from .fitting import default_translation
from .losses import (AveragePoolEmbedder, LossWeights, SkinMask,
                     coefficient_regularization, landmark_loss, perceptual_loss,
                     photometric_loss, reflectance_loss, total_loss)
from .morphable import (CoefficientGradient, FaceCoefficients, synthetic_basis,
                        vertex_normals, vertex_normals_vjp)
from .network import (backbone_forward, init_network_params, mlka_block,
                      msf_fuse, network_forward, regression_heads)
from .render import project_landmarks, rasterize, rasterize_backward, render_face
from .tensor_ops import (Tensor4, concat_channels, conv2d, elementwise,
                         fully_connected, global_average_pool, gradcheck,
                         interpolate, pointwise_conv, relu, split_channels)

EPS = 1e-5


def _wrap(op, *build_args, **build_kw):
    """Adapt a tensor op to the gradcheck callable protocol."""
    def f(*arrays):
        tensors = [Tensor4(a) for a in arrays]
        out, rec = op(*tensors, *build_args, **build_kw)
        return out.data, lambda g: rec.backward(g)
    return f


def _sampled_fd(value_and_grad, params, keys, rng, samples=4, eps=EPS):
    """Check dict-parameter gradients on sampled coordinates."""
    value, grads = value_and_grad(params)
    worst = 0.0
    for key in keys:
        arr = np.atleast_1d(params[key])
        count = min(samples, arr.size)
        for j in rng.choice(arr.size, count, replace=False):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            np.atleast_1d(plus[key]).reshape(-1)[j] += eps
            np.atleast_1d(minus[key]).reshape(-1)[j] -= eps
            fd = (value_and_grad(plus)[0] - value_and_grad(minus)[0]) / (2 * eps)
            ana = float(np.atleast_1d(grads[key]).reshape(-1)[j])
            worst = max(worst, abs(ana - fd) / max(1.0, abs(fd)))
    return worst


# ------------------------------------------------------------------ tensor ops

def _check_conv2d():
    rng = np.random.default_rng(10)
    return gradcheck(_wrap(conv2d, stride=1, dilation=2, groups=2, padding=2),
                     [rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((4, 2, 3, 3))])


def _check_conv2d_strided():
    rng = np.random.default_rng(11)
    return gradcheck(_wrap(conv2d, stride=2, padding=1),
                     [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))])


def _check_pointwise():
    rng = np.random.default_rng(12)
    return gradcheck(_wrap(pointwise_conv),
                     [rng.standard_normal((1, 6, 4, 4)), rng.standard_normal((3, 6, 1, 1))])


def _check_interpolate_bilinear():
    rng = np.random.default_rng(13)
    return gradcheck(_wrap(interpolate, 7, 5, "bilinear"), [rng.standard_normal((1, 2, 3, 4))])


def _check_interpolate_nearest():
    rng = np.random.default_rng(14)
    return gradcheck(_wrap(interpolate, 6, 6, "nearest"), [rng.standard_normal((1, 2, 3, 3))])


def _check_elementwise_add():
    rng = np.random.default_rng(15)
    shape = (1, 2, 3, 3)
    return gradcheck(_wrap(elementwise, "add"),
                     [rng.standard_normal(shape), rng.standard_normal(shape)])


def _check_elementwise_mul():
    rng = np.random.default_rng(16)
    shape = (1, 2, 3, 3)
    return gradcheck(_wrap(elementwise, "mul"),
                     [rng.standard_normal(shape), rng.standard_normal(shape)])


def _check_relu():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((1, 2, 4, 4))
    x[np.abs(x) < 0.1] = 0.5  # keep probes away from the kink
    return gradcheck(_wrap(relu), [x])


def _check_concat_split():
    rng = np.random.default_rng(18)

    def f(a, b):
        cat, rec = concat_channels([Tensor4(a), Tensor4(b)])
        parts, rec_split = split_channels(cat, 2)
        out = parts[0].data * 2.0 + parts[1].data

        def back(g):
            (g_cat,) = rec_split.backward([g * 2.0, g])
            return rec.backward(g_cat)

        return out, back

    shape = (1, 2, 2, 2)
    return gradcheck(f, [rng.standard_normal(shape), rng.standard_normal(shape)])


def _check_fully_connected():
    rng = np.random.default_rng(19)

    def f(x, w, b):
        out, rec = fully_connected(x, w, b)
        return out, lambda g: rec.backward(g)

    return gradcheck(f, [rng.standard_normal(16), rng.standard_normal((8, 16)),
                         rng.standard_normal(8)])


def _check_gap():
    rng = np.random.default_rng(20)

    def f(x):
        out, rec = global_average_pool(Tensor4(x))
        return out, lambda g: rec.backward(g)

    return gradcheck(f, [rng.standard_normal((2, 3, 4, 4))])


# ------------------------------------------------------------ render-path ops

def _check_sh_shading():
    rng = np.random.default_rng(21)
    nrm = rng.standard_normal((6, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    tex = rng.uniform(0.2, 0.8, (6, 3))
    delta = rng.standard_normal(9) * 0.3
    delta[0] += 2 * math.sqrt(math.pi)
    shaded, back = shade_texture(tex, nrm, delta)
    g = np.random.default_rng(22).standard_normal(shaded.shape)
    g_tex, g_delta, _ = back(g)
    worst = 0.0
    for arr, ana in ((tex, g_tex), (delta, g_delta)):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + EPS
            hi = float((shade_texture(tex, nrm, delta)[0] * g).sum())
            flat[j] = orig - EPS
            lo = float((shade_texture(tex, nrm, delta)[0] * g).sum())
            flat[j] = orig
            fd = (hi - lo) / (2 * EPS)
            worst = max(worst, abs(ana.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_sh_normal_grad():
    rng = np.random.default_rng(23)
    # analytic d(psi)/dn against FD along tangent directions, renormalizing
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    vals, grads = sh_basis(n)
    g = rng.standard_normal(9)
    worst = 0.0
    for j in range(3):
        step = np.zeros(3)
        step[j] = EPS
        hi = float(sh_basis((n + step) / np.linalg.norm(n + step))[0] @ g)
        lo = float(sh_basis((n - step) / np.linalg.norm(n - step))[0] @ g)
        fd = (hi - lo) / (2 * EPS)
        # analytic: chain through the normalization x/|x| at |n| = 1
        jn = (np.eye(3) - np.outer(n, n))
        ana = float((g @ grads) @ jn[:, j])
        worst = max(worst, abs(ana - fd) / max(1.0, abs(fd)))
    return worst


def _check_projection():
    rng = np.random.default_rng(24)
    cam = CameraModel.default_perspective((64, 64))
    verts = rng.standard_normal((12, 3)) * 25
    euler = rng.uniform(-0.4, 0.4, 3)
    trans = np.array([2.0, -3.0, 700.0])
    pts, depths, back = project(verts, euler, trans, cam)
    g = rng.standard_normal(pts.shape)
    gd = rng.standard_normal(depths.shape)
    gv, ge, gt = back(g, gd)

    def value(v, e, t):
        p, d, _ = project(v, e, t, cam)
        return float((g * p).sum() + (gd * d).sum())

    worst = 0.0
    for arr, ana in ((verts, gv), (euler, ge), (trans, gt)):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + EPS
            hi = value(verts, euler, trans)
            flat[j] = orig - EPS
            lo = value(verts, euler, trans)
            flat[j] = orig
            fd = (hi - lo) / (2 * EPS)
            worst = max(worst, abs(np.asarray(ana).reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_vertex_normals():
    rng = np.random.default_rng(25)
    basis = synthetic_basis(3, 80)
    verts = basis.mean_shape.reshape(-1, 3)
    g = rng.standard_normal(verts.shape)
    ana = vertex_normals_vjp(verts, basis.triangles, g)
    worst = 0.0
    for j in rng.choice(verts.size, 40, replace=False):
        plus = verts.copy()
        minus = verts.copy()
        plus.reshape(-1)[j] += EPS
        minus.reshape(-1)[j] -= EPS
        hi = float((vertex_normals(plus, basis.triangles)[0] * g).sum())
        lo = float((vertex_normals(minus, basis.triangles)[0] * g).sum())
        fd = (hi - lo) / (2 * EPS)
        worst = max(worst, abs(ana.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_rasterizer_attributes():
    rng = np.random.default_rng(26)
    pts = np.array([[1.2, 1.1], [10.4, 2.3], [3.2, 9.6], [11.1, 10.8]])
    z = np.array([2.0, 2.0, 2.0, 1.5])
    tri = np.array([[0, 1, 2], [1, 3, 2]])
    attr = rng.uniform(0, 1, (4, 3))
    fb = rasterize(pts, z, tri, attr, (12, 12))
    g = rng.standard_normal(fb.color.shape)
    ga, _ = rasterize_backward(fb, g)
    worst = 0.0
    for j in range(attr.size):
        plus, minus = attr.copy(), attr.copy()
        plus.reshape(-1)[j] += EPS
        minus.reshape(-1)[j] -= EPS
        hi = float((rasterize(pts, z, tri, plus, (12, 12)).color * g).sum())
        lo = float((rasterize(pts, z, tri, minus, (12, 12)).color * g).sum())
        fd = (hi - lo) / (2 * EPS)
        worst = max(worst, abs(ga.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


# -------------------------------------------------------------------- losses

def _loss_env(size=48, v=300):
    basis = synthetic_basis(7, v)
    cam = CameraModel.default_perspective((size, size))
    rng = np.random.default_rng(27)
    cstar = FaceCoefficients.zeros()
    cstar.alpha[:] = rng.normal(0, 3, 80)
    cstar.beta[:] = rng.normal(0, 2, 64)
    cstar.gamma[:] = rng.normal(0, 0.4, 80)
    cstar.delta[0] = 2 * math.sqrt(math.pi)
    cstar.delta[1:4] = rng.normal(0, 0.2, 3)
    cstar.translation[:] = default_translation(basis, cam)
    fb, _ = render_face(cstar, basis, cam)
    lm, _ = project_landmarks(cstar, basis, cam)
    return basis, cam, cstar, fb, lm, rng


def _check_photometric():
    _, _, _, fb, _, rng = _loss_env()
    target = np.clip(fb.color + rng.normal(0, 0.1, fb.color.shape), 0, 1)
    a = SkinMask(rng.uniform(0.2, 1.0, fb.mask.shape))
    rendered = fb.color.copy()
    _, grad = photometric_loss(target, rendered, a, fb.mask)
    worst = 0.0
    covered = np.argwhere(fb.mask)
    for row, col in covered[rng.choice(len(covered), 10, replace=False)]:
        for ch in range(3):
            plus, minus = rendered.copy(), rendered.copy()
            plus[row, col, ch] += EPS
            minus[row, col, ch] -= EPS
            hi, _ = photometric_loss(target, plus, a, fb.mask)
            lo, _ = photometric_loss(target, minus, a, fb.mask)
            fd = (hi - lo) / (2 * EPS)
            worst = max(worst, abs(grad[row, col, ch] - fd) / max(1.0, abs(fd)))
    return worst


def _check_perceptual():
    _, _, _, fb, _, rng = _loss_env()
    target = np.clip(fb.color + rng.normal(0, 0.1, fb.color.shape), 0, 1)
    emb = AveragePoolEmbedder()
    rendered = fb.color.copy()
    _, grad = perceptual_loss(emb, target, rendered)
    worst = 0.0
    for j in rng.choice(rendered.size, 20, replace=False):
        plus, minus = rendered.copy(), rendered.copy()
        plus.reshape(-1)[j] += EPS
        minus.reshape(-1)[j] -= EPS
        fd = (perceptual_loss(emb, target, plus)[0]
              - perceptual_loss(emb, target, minus)[0]) / (2 * EPS)
        worst = max(worst, abs(grad.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_landmark():
    rng = np.random.default_rng(28)
    p = rng.uniform(0, 48, (68, 2))
    q = p + rng.normal(0, 2, (68, 2))
    w = np.ones(68)
    w[60:] = 20.0
    _, grad = landmark_loss(p, q, w)
    worst = 0.0
    for j in rng.choice(q.size, 20, replace=False):
        plus, minus = q.copy(), q.copy()
        plus.reshape(-1)[j] += EPS
        minus.reshape(-1)[j] -= EPS
        fd = (landmark_loss(p, plus, w)[0] - landmark_loss(p, minus, w)[0]) / (2 * EPS)
        worst = max(worst, abs(grad.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_regularization():
    rng = np.random.default_rng(29)
    lw = LossWeights()
    a, b, g = rng.normal(0, 2, 80), rng.normal(0, 2, 64), rng.normal(0, 2, 80)
    _, (ga, gb, gg) = coefficient_regularization(a, b, g, lw)
    worst = 0.0
    for arr, ana in ((a, ga), (b, gb), (g, gg)):
        for j in rng.choice(arr.size, 8, replace=False):
            plus, minus = arr.copy(), arr.copy()
            plus[j] += EPS
            minus[j] -= EPS
            blocks_p = [plus if arr is x else x for x in (a, b, g)]
            blocks_m = [minus if arr is x else x for x in (a, b, g)]
            fd = (coefficient_regularization(*blocks_p, lw)[0]
                  - coefficient_regularization(*blocks_m, lw)[0]) / (2 * EPS)
            worst = max(worst, abs(ana[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_reflectance():
    rng = np.random.default_rng(30)
    tex = rng.uniform(0, 1, (40, 3))
    flags = rng.uniform(size=40) > 0.3
    _, grad = reflectance_loss(tex, flags)
    worst = 0.0
    for j in rng.choice(tex.size, 20, replace=False):
        plus, minus = tex.copy(), tex.copy()
        plus.reshape(-1)[j] += EPS
        minus.reshape(-1)[j] -= EPS
        fd = (reflectance_loss(plus, flags)[0] - reflectance_loss(minus, flags)[0]) / (2 * EPS)
        worst = max(worst, abs(grad.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
    return worst


def _check_total_loss():
    basis, cam, cstar, fb, lm, rng = _loss_env()
    mask = SkinMask(fb.mask.astype(np.float64))
    co = cstar.copy()
    co.alpha += rng.normal(0, 0.5, 80)
    co.rotation[:] = (0.03, -0.02, 0.01)
    res = total_loss(co, basis, cam, fb.color, lm, mask)
    vec = co.to_vector()
    gvec = res.gradient.to_vector()
    base_ids = res.framebuffer.triangle_ids

    def value(v):
        r = total_loss(FaceCoefficients.from_vector(v), basis, cam, fb.color, lm, mask)
        return r.total, r.framebuffer.triangle_ids

    worst = 0.0
    for j in rng.choice(239, 40, replace=False):
        plus, minus = vec.copy(), vec.copy()
        plus[j] += EPS
        minus[j] -= EPS
        hi, ids_hi = value(plus)
        lo, ids_lo = value(minus)
        if not (np.array_equal(ids_hi, base_ids) and np.array_equal(ids_lo, base_ids)):
            continue  # coverage changed; probe not informative
        fd = (hi - lo) / (2 * EPS)
        worst = max(worst, abs(gvec[j] - fd) / max(1.0, abs(fd)))
    return worst


# -------------------------------------------------------------------- network

def _check_mlka():
    rng = np.random.default_rng(31)
    params = init_network_params(2, widths=(6, 6, 6, 6))
    x = rng.standard_normal((1, 6, 9, 9))

    def vg(p):
        out, back = mlka_block(Tensor4(x), p, "attn2")
        value = float(out.data.sum())
        _, grads = back(np.ones(out.dims))
        return value, grads

    keys = [k for k in params if k.startswith("attn2.")]
    return _sampled_fd(vg, params, keys, rng, samples=3)


def _check_msf():
    rng = np.random.default_rng(32)
    params = init_network_params(3, widths=(6, 6, 6, 6))
    img = Tensor4(rng.standard_normal((1, 3, 64, 64)))

    def vg(p):
        pyr, b_back = backbone_forward(img, p)
        fused, b_fuse = msf_fuse(pyr, 3, p)
        value = float(fused.data.sum())
        stage_grads, grads = b_fuse(np.ones(fused.dims))
        _, d_back = b_back(stage_grads)
        merged = dict(grads)
        for k, v in d_back.items():
            merged[k] = merged.get(k, 0) + v
        return value, merged

    keys = [k for k in params if k.startswith("align.") and "to3" in k] + ["stage2.conv1.w"]
    return _sampled_fd(vg, params, keys, rng, samples=3)


def _check_heads():
    rng = np.random.default_rng(33)
    params = init_network_params(4)
    low = Tensor4(rng.standard_normal((1, 48, 2, 2)))
    mid = Tensor4(rng.standard_normal((1, 24, 4, 4)))
    high = Tensor4(rng.standard_normal((1, 12, 8, 8)))

    def vg(p):
        coeffs, back = regression_heads(low, mid, high, p)
        value = float(coeffs[0].to_vector().sum())
        ones = CoefficientGradient(np.ones(80), np.ones(64), np.ones(80),
                                   np.ones(3), np.ones(3), np.ones(9))
        _, grads = back([ones])
        return value, grads

    keys = [k for k in params if k.startswith("head_")]
    return _sampled_fd(vg, params, keys, rng, samples=3)


def _check_network_end_to_end():
    rng = np.random.default_rng(34)
    params = init_network_params(5)
    img = Tensor4(rng.standard_normal((1, 3, 64, 64)))

    def vg(p):
        coeffs, back = network_forward(img, p)
        value = float(coeffs[0].to_vector().sum())
        ones = CoefficientGradient(np.ones(80), np.ones(64), np.ones(80),
                                   np.ones(3), np.ones(3), np.ones(9))
        _, grads = back([ones])
        return value, grads

    keys = ["stem.w", "stage1.conv1.w", "stage4.skip.w", "align.1to4.step2.w",
            "align.4to2.proj.w", "attn3.dw5.w", "attn3.scale", "head_alpha.w"]
    return _sampled_fd(vg, params, keys, rng, samples=3)


GROUPS = {
    "tensor": [
        ("conv2d (dilated, grouped)", _check_conv2d, 1e-6),
        ("conv2d (strided, padded)", _check_conv2d_strided, 1e-6),
        ("pointwise_conv", _check_pointwise, 1e-6),
        ("interpolate bilinear", _check_interpolate_bilinear, 1e-6),
        ("interpolate nearest", _check_interpolate_nearest, 1e-6),
        ("elementwise add", _check_elementwise_add, 1e-6),
        ("elementwise mul", _check_elementwise_mul, 1e-6),
        ("relu (off-kink probes)", _check_relu, 1e-6),
        ("concat/split chain", _check_concat_split, 1e-6),
        ("fully_connected", _check_fully_connected, 1e-6),
        ("global_average_pool", _check_gap, 1e-6),
    ],
    "losses": [
        ("sh shading (texture, delta)", _check_sh_shading, 1e-6),
        ("sh basis normal gradient", _check_sh_normal_grad, 1e-6),
        ("projection (verts, euler, t)", _check_projection, 1e-6),
        ("vertex normals", _check_vertex_normals, 1e-6),
        ("rasterizer attributes", _check_rasterizer_attributes, 1e-6),
        ("photometric", _check_photometric, 1e-6),
        ("perceptual", _check_perceptual, 1e-6),
        ("landmark", _check_landmark, 1e-6),
        ("regularization", _check_regularization, 1e-6),
        ("reflectance", _check_reflectance, 1e-6),
        ("total_loss w.r.t. 239 coefficients", _check_total_loss, 1e-5),
    ],
    "network": [
        ("attention block", _check_mlka, 1e-6),
        ("fusion + backbone", _check_msf, 1e-6),
        ("regression heads", _check_heads, 1e-6),
        ("network end-to-end", _check_network_end_to_end, 1e-5),
    ],
}


def run_gradcheck(module="all", stream=None):
    """Run the selected group(s); print a pass/fail table; return exit code."""
    out = stream if stream is not None else sys.stdout
    names = ["tensor", "losses", "network"] if module == "all" else [module]
    failures = 0
    print(f"{'check':<42} {'max rel err':>12} {'tol':>8}  result", file=out)
    for group in names:
        for name, fn, tol in GROUPS[group]:
            err = fn()
            ok = err <= tol
            failures += 0 if ok else 1
            print(f"{group + ': ' + name:<42} {err:>12.3e} {tol:>8.0e}  {'PASS' if ok else 'FAIL'}",
                  file=out)
    print(("all checks passed" if not failures else f"{failures} checks FAILED"), file=out)
    return 1 if failures else 0
