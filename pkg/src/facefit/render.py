"""Differentiable triangle rasterizer and the full face rendering pipeline.

Rasterization contract:
  * z-buffered scan conversion, nearest camera depth wins, and at equal
    depth the lower triangle index wins
  * pixel centers sit at (column + 0.5, row + 0.5); coverage on shared
    edges follows a top-left fill rule so adjacent triangles partition
    edge pixels exactly
  * attribute and depth interpolation is plain (perspective-agnostic)
    barycentric interpolation
  * backward: attribute gradients are exact; position gradients come from
    the barycentric-weight derivatives of interior pixels only - coverage
    changes at occlusion boundaries carry no gradient (documented limit)

Rendering pipeline (render_face): synthesize shape -> vertex normals ->
SH-shade texture -> project -> back-face cull -> rasterize -> clamp.
Shading uses camera-space normals (lighting fixed to the camera frame, not
the head). Colors are clamped to [0, 1] only at this final stage, with
zero gradient where the clamp is active.
"""

from dataclasses import dataclass, field

import numpy as np

from . import camera as cam
from . import morphable as mm
from .errors import ShapeError, StateError


@dataclass
class Framebuffer:
    """Rendered image plus the per-pixel records needed for backprop."""

    color: np.ndarray        # (H, W, K) interpolated attributes (clamped in render_face)
    depth: np.ndarray        # (H, W) camera z at covered pixels, 0 elsewhere
    mask: np.ndarray         # (H, W) bool coverage
    triangle_ids: np.ndarray  # (H, W) int32, -1 where uncovered
    barycentrics: np.ndarray  # (H, W, 3) in the triangle's original vertex order
    _saved: dict = field(default=None, repr=False, compare=False)

    @property
    def image_size(self):
        return self.mask.shape


def _edge_accepts_zero(d):
    # top-left tie-break: of the two directed copies of a shared edge,
    # exactly one satisfies (dy < 0) or (dy == 0 and dx > 0)
    return (d[:, 1] < 0) | ((d[:, 1] == 0) & (d[:, 0] > 0))


def rasterize(projected, depths, triangles, attributes, image_size, keep_records=True):
    """Scan-convert triangles over an (H, W) grid.

    projected: (V, 2) image points, depths: (V,) camera z, triangles: (T, 3),
    attributes: (V, K). Returns a Framebuffer; an empty triangle list yields
    an all-background buffer rather than an error.
    """
    pts = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    attr = np.asarray(attributes, dtype=np.float64)
    if attr.ndim == 1:
        attr = attr[:, None]
    h, w = image_size
    if pts.shape[0] != z.shape[0] or pts.shape[0] != attr.shape[0]:
        raise ShapeError(f"projected/depth/attribute vertex counts disagree: "
                         f"{pts.shape[0]}/{z.shape[0]}/{attr.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise ShapeError("projected points must be finite")
    k = attr.shape[1]

    color = np.zeros((h, w, k))
    depth = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    tri_ids = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3))
    saved = {"projected": pts, "triangles": tri, "attributes": attr} if keep_records else None
    fb = Framebuffer(color, depth, mask, tri_ids, bary, saved)
    if tri.shape[0] == 0:
        return fb

    # orient every triangle to positive signed area (u right, v down)
    p = pts[tri]                                   # (T, 3, 2)
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    live = area2 != 0.0
    orig_id = np.nonzero(live)[0].astype(np.int64)
    if orig_id.size == 0:
        return fb
    tri_live = tri[live]
    swapped = area2[live] < 0.0
    tri_or = tri_live.copy()
    tri_or[swapped, 1], tri_or[swapped, 2] = tri_live[swapped, 2], tri_live[swapped, 1]
    area = np.abs(area2[live])
    po = pts[tri_or]                               # oriented corners (T', 3, 2)

    # bounding boxes in pixel indices (centers at +0.5)
    c0 = np.clip(np.ceil(po[:, :, 0].min(axis=1) - 0.5), 0, w - 1).astype(np.int64)
    c1 = np.clip(np.floor(po[:, :, 0].max(axis=1) - 0.5), 0, w - 1).astype(np.int64)
    r0 = np.clip(np.ceil(po[:, :, 1].min(axis=1) - 0.5), 0, h - 1).astype(np.int64)
    r1 = np.clip(np.floor(po[:, :, 1].max(axis=1) - 0.5), 0, h - 1).astype(np.int64)
    bw = np.maximum(0, c1 - c0 + 1)
    bh = np.maximum(0, r1 - r0 + 1)
    counts = bw * bh
    keep = counts > 0
    if not np.any(keep):
        return fb
    idx = np.nonzero(keep)[0]
    counts = counts[idx]
    total = int(counts.sum())

    cand = np.repeat(idx, counts)                                  # local triangle row
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(starts, counts)
    rows = r0[cand] + within // bw[cand]
    cols = c0[cand] + within % bw[cand]
    pu = cols + 0.5
    pv = rows + 0.5

    a, b, c = po[cand, 0], po[cand, 1], po[cand, 2]
    ea = (c[:, 0] - b[:, 0]) * (pv - b[:, 1]) - (c[:, 1] - b[:, 1]) * (pu - b[:, 0])
    eb = (a[:, 0] - c[:, 0]) * (pv - c[:, 1]) - (a[:, 1] - c[:, 1]) * (pu - c[:, 0])
    ec = (b[:, 0] - a[:, 0]) * (pv - a[:, 1]) - (b[:, 1] - a[:, 1]) * (pu - a[:, 0])
    tl_a = _edge_accepts_zero(c - b)
    tl_b = _edge_accepts_zero(a - c)
    tl_c = _edge_accepts_zero(b - a)
    inside = (((ea > 0) | ((ea == 0) & tl_a))
              & ((eb > 0) | ((eb == 0) & tl_b))
              & ((ec > 0) | ((ec == 0) & tl_c)))
    if not np.any(inside):
        return fb

    cand = cand[inside]
    rows, cols = rows[inside], cols[inside]
    wa = ea[inside] / area[cand]
    wb = eb[inside] / area[cand]
    wc = ec[inside] / area[cand]
    zvals = (wa * z[tri_or[cand, 0]] + wb * z[tri_or[cand, 1]] + wc * z[tri_or[cand, 2]])

    # winner per pixel: nearest depth, then lowest original triangle index
    pix = rows * w + cols
    owner = orig_id[cand]
    order = np.lexsort((owner, zvals, pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    wr, wcol = rows[win], cols[win]
    wcand = cand[win]
    # report barycentrics in the triangle's original vertex order
    w0 = wa[win]
    w1 = np.where(swapped[wcand], wc[win], wb[win])
    w2 = np.where(swapped[wcand], wb[win], wc[win])
    tri_win = tri_live[wcand]
    interp = (attr[tri_win[:, 0]] * w0[:, None]
              + attr[tri_win[:, 1]] * w1[:, None]
              + attr[tri_win[:, 2]] * w2[:, None])

    mask[wr, wcol] = True
    tri_ids[wr, wcol] = orig_id[wcand].astype(np.int32)
    depth[wr, wcol] = zvals[win]
    bary[wr, wcol, 0] = w0
    bary[wr, wcol, 1] = w1
    bary[wr, wcol, 2] = w2
    color[wr, wcol] = interp
    return fb


def rasterize_backward(fb, grad_color):
    """Pull an output-color gradient back to vertex attributes and positions.

    Attribute gradients are exact. Position gradients differentiate the
    barycentric weights at the pixels each triangle owns; coverage changes
    are not differentiated.
    """
    if fb._saved is None:
        raise StateError("framebuffer was rasterized without records; backward unavailable")
    pts = fb._saved["projected"]
    tri = fb._saved["triangles"]
    attr = fb._saved["attributes"]
    g = np.asarray(grad_color, dtype=np.float64)
    if g.shape != fb.color.shape:
        raise ShapeError(f"grad shape {g.shape} != color shape {fb.color.shape}")

    grad_attr = np.zeros_like(attr)
    grad_pts = np.zeros_like(pts)
    covered = np.nonzero(fb.mask)
    if covered[0].size == 0:
        return grad_attr, grad_pts

    tids = fb.triangle_ids[covered].astype(np.int64)   # (P,)
    weights = fb.barycentrics[covered]                 # (P, 3)
    gpix = g[covered]                                  # (P, K)
    tri_pix = tri[tids]                                # (P, 3)

    for corner in range(3):
        np.add.at(grad_attr, tri_pix[:, corner], gpix * weights[:, corner:corner + 1])

    # position gradients: w_i = E_i / F with E_i, F the edge/area functions
    av, bv, cv = pts[tri_pix[:, 0]], pts[tri_pix[:, 1]], pts[tri_pix[:, 2]]
    pu = covered[1] + 0.5
    pv = covered[0] + 0.5
    p = np.stack([pu, pv], axis=1)
    area = ((bv[:, 0] - av[:, 0]) * (cv[:, 1] - av[:, 1])
            - (bv[:, 1] - av[:, 1]) * (cv[:, 0] - av[:, 0]))    # signed, may be negative

    # dL/dw_i = g . attr_i
    dw = np.stack([np.sum(gpix * attr[tri_pix[:, i]], axis=1) for i in range(3)], axis=1)
    de = dw / area[:, None]
    dF = -np.sum(weights * dw, axis=1) / area

    def d_edge(u, v):
        # E(u, v; p) = cross(v - u, p - u); returns gradients w.r.t. u and v
        gu = np.stack([v[:, 1] - p[:, 1], p[:, 0] - v[:, 0]], axis=1)
        gv = np.stack([p[:, 1] - u[:, 1], u[:, 0] - p[:, 0]], axis=1)
        return gu, gv

    ga = np.zeros_like(av)
    gb = np.zeros_like(bv)
    gc = np.zeros_like(cv)
    # Ea = E(b, c; p), Eb = E(c, a; p), Ec = E(a, b; p)
    gu, gv = d_edge(bv, cv)
    gb += de[:, 0:1] * gu
    gc += de[:, 0:1] * gv
    gu, gv = d_edge(cv, av)
    gc += de[:, 1:2] * gu
    ga += de[:, 1:2] * gv
    gu, gv = d_edge(av, bv)
    ga += de[:, 2:3] * gu
    gb += de[:, 2:3] * gv
    # F = E(a, b; c)
    fa = np.stack([bv[:, 1] - cv[:, 1], cv[:, 0] - bv[:, 0]], axis=1)
    fbv = np.stack([cv[:, 1] - av[:, 1], av[:, 0] - cv[:, 0]], axis=1)
    fc = np.stack([av[:, 1] - bv[:, 1], bv[:, 0] - av[:, 0]], axis=1)
    ga += dF[:, None] * fa
    gb += dF[:, None] * fbv
    gc += dF[:, None] * fc

    np.add.at(grad_pts, tri_pix[:, 0], ga)
    np.add.at(grad_pts, tri_pix[:, 1], gb)
    np.add.at(grad_pts, tri_pix[:, 2], gc)
    return grad_attr, grad_pts


def _backface_cull(vertices, euler, translation, triangles):
    """Keep triangles whose camera-space normal faces the camera (z < 0)."""
    r, _ = cam.rotation_matrix(euler)
    q = vertices @ r.T + np.asarray(translation, dtype=np.float64).reshape(3)
    m = np.cross(q[triangles[:, 1]] - q[triangles[:, 0]],
                 q[triangles[:, 2]] - q[triangles[:, 0]])
    return triangles[m[:, 2] < 0.0]


def render_face(coefficients, basis, camera_model):
    """Render a coefficient vector to a framebuffer.

    Returns (framebuffer, backward) where backward(grad_color) produces a
    FaceCoefficients holding dLoss/d(each coefficient block). The
    framebuffer color is clamped to [0, 1]; clamped pixels pass no gradient.
    """
    co = coefficients
    verts = mm.synthesize_shape(basis, co.alpha, co.beta)
    normals, degenerate = mm.vertex_normals(verts, basis.triangles)
    if degenerate:
        raise ShapeError(f"{degenerate} vertices have degenerate normals; cannot shade")
    r, partials = cam.rotation_matrix(co.rotation)
    normals_cam = normals @ r.T
    texture = mm.synthesize_texture(basis, co.gamma)
    shaded, shade_back = cam.shade_texture(texture, normals_cam, co.delta)
    pts, depths, proj_back = cam.project(verts, co.rotation, co.translation, camera_model)
    tri_front = _backface_cull(verts, co.rotation, co.translation, basis.triangles)
    fb = rasterize(pts, depths, tri_front, shaded, camera_model.image_size)
    raw = fb.color
    clamp_pass = (raw >= 0.0) & (raw <= 1.0)
    fb.color = np.clip(raw, 0.0, 1.0)

    def backward(grad_color):
        g = np.asarray(grad_color, dtype=np.float64) * clamp_pass
        grad_shaded, grad_pts = rasterize_backward(fb, g)
        grad_tex, grad_delta, grad_ncam = shade_back(grad_shaded)
        grad_nmodel = grad_ncam @ r
        grad_euler_shade = np.array([np.sum(grad_ncam * (normals @ partials[k].T)) for k in range(3)])
        grad_verts = mm.vertex_normals_vjp(verts, basis.triangles, grad_nmodel)
        gv_proj, grad_euler_proj, grad_t = proj_back(grad_pts)
        grad_verts += gv_proj
        flat = grad_verts.reshape(-1)
        return mm.CoefficientGradient(
            alpha=basis.basis_id.T @ flat,
            beta=basis.basis_exp.T @ flat,
            gamma=basis.basis_tex.T @ grad_tex.reshape(-1),
            rotation=grad_euler_shade + grad_euler_proj,
            translation=grad_t,
            delta=grad_delta,
        )

    return fb, backward


def project_landmarks(coefficients, basis, camera_model):
    """Project the 68 landmark vertices; backward reaches alpha, beta, r, t."""
    co = coefficients
    lm = basis.landmark_indices.astype(np.int64)
    rows = (lm[:, None] * 3 + np.arange(3)).reshape(-1)
    verts_lm = (basis.mean_shape[rows]
                + basis.basis_id[rows] @ co.alpha
                + basis.basis_exp[rows] @ co.beta).reshape(-1, 3)
    pts, _, proj_back = cam.project(verts_lm, co.rotation, co.translation, camera_model)

    def backward(grad_points):
        gv, grad_euler, grad_t = proj_back(grad_points)
        flat = gv.reshape(-1)
        return mm.CoefficientGradient(
            alpha=basis.basis_id[rows].T @ flat,
            beta=basis.basis_exp[rows].T @ flat,
            gamma=np.zeros(basis.basis_tex.shape[1]),
            rotation=grad_euler,
            translation=grad_t,
            delta=np.zeros(9),
        )

    return pts, backward
