"""Rasterizer contracts and the full rendering pipeline."""

import numpy as np
import pytest

from facefit.errors import StateError
from facefit.fitting import initial_coefficients
from facefit.morphable import FaceCoefficients
from facefit.render import (project_landmarks, rasterize, rasterize_backward,
                            render_face)


def full_cover_triangle(size=8):
    pts = np.array([[-2.0 * size, -2.0 * size], [4.0 * size, -2.0 * size],
                    [-2.0 * size, 4.0 * size]])
    return pts, np.full(3, 5.0), np.array([[0, 1, 2]])


class TestRasterizeForward:
    def test_constant_attribute_full_cover(self):
        pts, z, tri = full_cover_triangle()
        fb = rasterize(pts, z, tri, np.full((3, 3), 0.4), (8, 8))
        assert fb.mask.all()
        assert np.abs(fb.color - 0.4).max() < 1e-12

    def test_uncovered_pixels_background(self):
        pts = np.array([[0.5, 0.5], [3.5, 0.5], [0.5, 3.5]])
        fb = rasterize(pts, np.ones(3), np.array([[0, 1, 2]]), np.ones((3, 3)), (8, 8))
        assert not fb.mask[6:, 6:].any()
        assert np.all(fb.color[~fb.mask] == 0.0)
        assert np.all(fb.triangle_ids[~fb.mask] == -1)

    def test_z_buffer_nearest_wins(self):
        pts, _, _ = full_cover_triangle()
        pts = np.vstack([pts, pts])
        z = np.array([2.0] * 3 + [1.0] * 3)
        tri = np.array([[0, 1, 2], [3, 4, 5]])
        attr = np.array([[0.1] * 3] * 3 + [[0.8] * 3] * 3)
        fb = rasterize(pts, z, tri, attr, (8, 8))
        assert np.all(fb.triangle_ids[fb.mask] == 1)

    def test_equal_depth_lower_index_wins(self):
        pts, z, _ = full_cover_triangle()
        pts = np.vstack([pts, pts])
        tri = np.array([[0, 1, 2], [3, 4, 5]])
        fb = rasterize(pts, np.full(6, 5.0), tri, np.zeros((6, 1)), (8, 8))
        assert np.all(fb.triangle_ids[fb.mask] == 0)

    @pytest.mark.parametrize("diag", [([0, 1, 2], [0, 2, 3]), ([0, 1, 3], [1, 2, 3])])
    def test_shared_edges_partition_exactly(self, diag):
        pts = np.array([[0.0, 0.0], [8.0, 0.0], [8.0, 8.0], [0.0, 8.0]])
        tri = np.array(diag)
        fb = rasterize(pts, np.ones(4), tri, np.zeros((4, 1)), (8, 8))
        assert fb.mask.sum() == 64  # no cracks, no double coverage

    def test_barycentrics_valid(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 16, (9, 2))
        tri = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        fb = rasterize(pts, rng.uniform(1, 3, 9), tri, rng.uniform(0, 1, (9, 3)), (16, 16))
        w = fb.barycentrics[fb.mask]
        assert w.min() >= 0.0
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9

    def test_depth_is_interpolated_vertex_depth(self):
        rng = np.random.default_rng(1)
        pts = np.array([[1.0, 1.0], [14.0, 2.0], [3.0, 14.0]])
        z = np.array([2.0, 5.0, 9.0])
        fb = rasterize(pts, z, np.array([[0, 1, 2]]), np.zeros((3, 1)), (16, 16))
        covered = np.argwhere(fb.mask)
        w = fb.barycentrics[fb.mask]
        assert np.abs(fb.depth[fb.mask] - w @ z).max() < 1e-12

    def test_empty_triangle_list(self):
        fb = rasterize(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), dtype=int),
                       np.zeros((0, 3)), (4, 4))
        assert not fb.mask.any() and np.all(fb.color == 0.0)

    def test_record_consistency(self):
        pts, z, tri = full_cover_triangle()
        fb = rasterize(pts, z, tri, np.zeros((3, 2)), (8, 8))
        assert np.all((fb.triangle_ids >= 0) == fb.mask)

    def test_determinism(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 12, (12, 2))
        z = rng.uniform(1, 4, 12)
        tri = rng.integers(0, 12, (8, 3))
        attr = rng.uniform(0, 1, (12, 3))
        a = rasterize(pts, z, tri, attr, (12, 12))
        b = rasterize(pts, z, tri, attr, (12, 12))
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.triangle_ids, b.triangle_ids)


class TestRasterizeBackward:
    def test_uniform_gradient_sums_barycentrics(self):
        pts, z, tri = full_cover_triangle()
        fb = rasterize(pts, z, tri, np.zeros((3, 1)), (8, 8))
        ga, _ = rasterize_backward(fb, np.ones((8, 8, 1)))
        for corner in range(3):
            assert abs(ga[corner, 0] - fb.barycentrics[..., corner][fb.mask].sum()) < 1e-12

    def test_zero_gradient(self):
        pts, z, tri = full_cover_triangle()
        fb = rasterize(pts, z, tri, np.zeros((3, 3)), (8, 8))
        ga, gp = rasterize_backward(fb, np.zeros((8, 8, 3)))
        assert not ga.any() and not gp.any()

    def test_attribute_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        pts = np.array([[1.3, 1.1], [10.6, 2.2], [3.1, 9.7], [11.2, 10.9]])
        z = np.array([2.0, 2.0, 2.0, 1.5])
        tri = np.array([[0, 1, 2], [1, 3, 2]])
        attr = rng.uniform(0, 1, (4, 3))
        fb = rasterize(pts, z, tri, attr, (12, 12))
        g = rng.standard_normal(fb.color.shape)
        ga, _ = rasterize_backward(fb, g)
        eps = 1e-6
        for j in range(attr.size):
            plus, minus = attr.copy(), attr.copy()
            plus.reshape(-1)[j] += eps
            minus.reshape(-1)[j] -= eps
            fd = ((rasterize(pts, z, tri, plus, (12, 12)).color * g).sum()
                  - (rasterize(pts, z, tri, minus, (12, 12)).color * g).sum()) / (2 * eps)
            assert abs(ga.reshape(-1)[j] - fd) / max(1.0, abs(fd)) < 1e-6

    def test_position_gradients_on_stable_probes(self):
        rng = np.random.default_rng(4)
        pts = np.array([[1.3, 1.1], [10.6, 2.2], [3.1, 9.7], [11.2, 10.9]])
        z = np.array([2.0, 2.0, 2.0, 1.5])
        tri = np.array([[0, 1, 2], [1, 3, 2]])
        attr = rng.uniform(0, 1, (4, 3))
        fb = rasterize(pts, z, tri, attr, (12, 12))
        g = rng.standard_normal(fb.color.shape)
        _, gp = rasterize_backward(fb, g)
        eps = 1e-6
        checked = 0
        for j in range(pts.size):
            plus, minus = pts.copy(), pts.copy()
            plus.reshape(-1)[j] += eps
            minus.reshape(-1)[j] -= eps
            fb_p = rasterize(plus, z, tri, attr, (12, 12))
            fb_m = rasterize(minus, z, tri, attr, (12, 12))
            if not (np.array_equal(fb_p.triangle_ids, fb.triangle_ids)
                    and np.array_equal(fb_m.triangle_ids, fb.triangle_ids)):
                continue  # coverage flip; excluded by the probe contract
            fd = ((fb_p.color * g).sum() - (fb_m.color * g).sum()) / (2 * eps)
            assert abs(gp.reshape(-1)[j] - fd) < 5e-3
            checked += 1
        assert checked >= 2

    def test_records_required(self):
        pts, z, tri = full_cover_triangle()
        fb = rasterize(pts, z, tri, np.zeros((3, 1)), (8, 8), keep_records=False)
        with pytest.raises(StateError):
            rasterize_backward(fb, np.ones((8, 8, 1)))


class TestRenderFace:
    def test_deterministic(self, basis_small, camera_small):
        co = initial_coefficients(basis_small, camera_small)
        a, _ = render_face(co, basis_small, camera_small)
        b, _ = render_face(co, basis_small, camera_small)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.mask, b.mask)

    def test_renders_visible_face(self, basis_small, camera_small):
        co = initial_coefficients(basis_small, camera_small)
        fb, _ = render_face(co, basis_small, camera_small)
        assert 0.05 < fb.mask.mean() < 0.95
        assert fb.color[fb.mask].max() > 0.2
        assert fb.color.min() >= 0.0 and fb.color.max() <= 1.0

    def test_zero_lighting_black_face(self, basis_small, camera_small):
        co = initial_coefficients(basis_small, camera_small)
        lit, _ = render_face(co, basis_small, camera_small)
        co_dark = co.copy()
        co_dark.delta[:] = 0.0
        dark, _ = render_face(co_dark, basis_small, camera_small)
        assert dark.color.max() == 0.0
        assert np.array_equal(dark.mask, lit.mask)

    def test_texture_changes_confined_to_mask(self, basis_small, camera_small):
        co = initial_coefficients(basis_small, camera_small)
        base, _ = render_face(co, basis_small, camera_small)
        co2 = co.copy()
        co2.gamma[5] += 0.3
        bumped, _ = render_face(co2, basis_small, camera_small)
        changed = np.any(base.color != bumped.color, axis=2)
        assert changed.any()
        assert not np.any(changed & ~base.mask)

    def test_backward_matches_fd_on_stable_probes(self, basis_small, camera_small):
        rng = np.random.default_rng(5)
        co = initial_coefficients(basis_small, camera_small)
        co.alpha[:] = rng.normal(0, 2, 80)
        co.gamma[:] = rng.normal(0, 0.3, 80)
        co.rotation[:] = (0.05, -0.04, 0.02)
        fb, back = render_face(co, basis_small, camera_small)
        g = rng.standard_normal(fb.color.shape)
        grad = back(g).to_vector()
        vec = co.to_vector()
        eps = 1e-5
        checked = 0
        for j in rng.choice(239, 30, replace=False):
            plus, minus = vec.copy(), vec.copy()
            plus[j] += eps
            minus[j] -= eps
            fb_p, _ = render_face(FaceCoefficients.from_vector(plus), basis_small, camera_small)
            fb_m, _ = render_face(FaceCoefficients.from_vector(minus), basis_small, camera_small)
            if not (np.array_equal(fb_p.triangle_ids, fb.triangle_ids)
                    and np.array_equal(fb_m.triangle_ids, fb.triangle_ids)):
                continue
            fd = ((fb_p.color * g).sum() - (fb_m.color * g).sum()) / (2 * eps)
            assert abs(grad[j] - fd) / max(1.0, abs(fd)) < 1e-5
            checked += 1
        assert checked >= 20


class TestProjectLandmarks:
    def test_weak_perspective_shift_linearity(self, basis_small):
        from facefit.camera import CameraModel
        cam = CameraModel("weak_perspective", 2.5, (24.0, 24.0), (48, 48))
        co = initial_coefficients(basis_small, cam)
        base, _ = project_landmarks(co, basis_small, cam)
        co2 = co.copy()
        co2.translation[:2] += (2.0, -1.0)
        moved, _ = project_landmarks(co2, basis_small, cam)
        assert np.abs((moved - base) - np.array([5.0, -2.5])).max() < 1e-12

    def test_jacobian_matches_fd(self, basis_small, camera_small):
        rng = np.random.default_rng(6)
        co = initial_coefficients(basis_small, camera_small)
        co.rotation[:] = (0.1, -0.05, 0.08)
        pts, back = project_landmarks(co, basis_small, camera_small)
        g = rng.standard_normal(pts.shape)
        grad = back(g).to_vector()
        vec = co.to_vector()
        eps = 1e-5
        for j in list(range(144, 150)) + list(rng.choice(144, 20, replace=False)):
            plus, minus = vec.copy(), vec.copy()
            plus[j] += eps
            minus[j] -= eps
            p_hi, _ = project_landmarks(FaceCoefficients.from_vector(plus), basis_small, camera_small)
            p_lo, _ = project_landmarks(FaceCoefficients.from_vector(minus), basis_small, camera_small)
            fd = ((p_hi * g).sum() - (p_lo * g).sum()) / (2 * eps)
            assert abs(grad[j] - fd) / max(1.0, abs(fd)) < 1e-6
