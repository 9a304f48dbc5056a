"""Hexplane interpolation, visibility, feature-plane sampling, decoder."""

import io

import numpy as np
import pytest

from splat4d import gradcheck
from splat4d.appearance import SH4DCoeffs
from splat4d.core import (
    Camera,
    DeformedGaussians,
    Gaussian3D,
    Gaussian4DState,
    GaussianCloud,
    bilinear_sample_many,
    pixel_to_feature_coords,
    project_points,
    quat_to_rotmat,
)
from splat4d.errors import OutOfBox, ShapeMismatch
from splat4d.motionfield import (
    PLANE_PAIRS,
    DeformationDecoder,
    FeatureVideo,
    HexPlaneField,
    apply_deformation,
    deform_decode,
    feature_plane_sample,
    hexplane_interp,
    hybrid_feature,
    read_hexfield,
    visibility_check,
    visibility_mask,
    write_hexfield,
)

from conftest import make_camera


def _field(rng=None, dim=4, levels=2, n_frames=6, spatial=8, temporal=4):
    field = HexPlaneField.create(
        np.array([-1.0, -1.0, -1.0]),
        np.array([1.0, 1.0, 1.0]),
        n_frames=n_frames,
        spatial_res=spatial,
        temporal_res=temporal,
        dim=dim,
        levels=levels,
        seed=3,
    )
    if rng is not None:
        for level in field.planes:
            for p in level:
                p += 0.4 * rng.standard_normal(p.shape)
    return field


def _oracle_hexfeat(field, x, f):
    """Independent sampler: explicit per-plane bilinear corner math."""
    span = field.bbox_hi - field.bbox_lo
    norm = np.empty(4)
    norm[:3] = (np.asarray(x) - field.bbox_lo) / span
    norm[3] = f / (field.n_frames - 1) if field.n_frames > 1 else 0.0
    feats = []
    for level in field.planes:
        prod = np.ones(field.dim)
        for k, (a, b) in enumerate(PLANE_PAIRS):
            plane = level[k]
            ca = norm[a] * (plane.shape[0] - 1)
            cb = norm[b] * (plane.shape[1] - 1)
            ia, ib = int(np.floor(ca)), int(np.floor(cb))
            ia = min(max(ia, 0), plane.shape[0] - 2)
            ib = min(max(ib, 0), plane.shape[1] - 2)
            fa, fb = ca - ia, cb - ib
            val = (
                plane[ia, ib] * (1 - fa) * (1 - fb)
                + plane[ia, ib + 1] * (1 - fa) * fb
                + plane[ia + 1, ib] * fa * (1 - fb)
                + plane[ia + 1, ib + 1] * fa * fb
            )
            prod = prod * val
        feats.append(prod)
    return np.concatenate(feats)


class TestHexplaneInterp:
    def test_constant_one_planes(self):
        field = _field()
        for level in field.planes:
            for p in level:
                p[:] = 1.0
        out = hexplane_interp(field, np.array([0.2, -0.3, 0.5]), 2.5)
        np.testing.assert_allclose(out, np.ones(field.feature_dim), atol=1e-12)

    def test_zero_plane_annihilates_level(self, rng):
        field = _field(rng)
        field.planes[1][3][:] = 0.0
        out = hexplane_interp(field, np.array([0.1, 0.1, 0.1]), 1.0)
        np.testing.assert_array_equal(out[field.dim :], 0.0)
        assert np.any(out[: field.dim] != 0.0)

    def test_matches_bilinear_product_oracle(self, rng):
        field = _field(rng)
        for _ in range(20):
            x = rng.uniform(-0.95, 0.95, 3)
            f = rng.uniform(0, 5)
            np.testing.assert_allclose(
                hexplane_interp(field, x, f), _oracle_hexfeat(field, x, f), atol=1e-10
            )

    def test_out_of_box(self, rng):
        field = _field(rng)
        with pytest.raises(OutOfBox):
            hexplane_interp(field, np.array([1.5, 0, 0]), 1.0)
        with pytest.raises(OutOfBox):
            hexplane_interp(field, np.array([0.0, 0, 0]), 5.5)

    def test_continuity_across_cell_boundary(self, rng):
        """Values converge when approaching a grid line from either side."""
        field = _field(rng)
        span = field.bbox_hi[0] - field.bbox_lo[0]
        # x-coordinate of an interior grid node at base resolution 8
        x_node = field.bbox_lo[0] + span * (3 / 7)
        eps = 1e-8
        lo = hexplane_interp(field, np.array([x_node - eps, 0.1, -0.2]), 1.7)
        hi = hexplane_interp(field, np.array([x_node + eps, 0.1, -0.2]), 1.7)
        np.testing.assert_allclose(lo, hi, atol=1e-6)

    def test_lipschitz_along_segments(self, rng):
        """Adjacent samples within a cell differ by at most L * step."""
        field = _field(rng)
        x0 = np.array([0.11, -0.2, 0.33])
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        step = 1e-4
        prev = hexplane_interp(field, x0, 2.0)
        plane_max = max(np.abs(p).max() for lvl in field.planes for p in lvl)
        # crude bound: 6 factors, each Lipschitz ~ plane_max * grid_scale
        L = 6 * plane_max**6 * 8 * 10
        for k in range(1, 30):
            cur = hexplane_interp(field, x0 + k * step * direction, 2.0)
            assert np.max(np.abs(cur - prev)) <= L * step
            prev = cur

    def test_gradient_suite(self):
        res = gradcheck.check_hexplane()
        assert res.passed, res


def _scene_cloud(rng, n=12, radius=0.8, sigma=0.18, opacity=0.95):
    v = rng.standard_normal((n, 3))
    positions = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    sh = SH4DCoeffs.from_rgb(rng.uniform(0.2, 0.8, (n, 3)), 1, 2, 4)
    return GaussianCloud(
        positions,
        np.tile([1.0, 0, 0, 0], (n, 1)),
        np.full((n, 3), sigma),
        np.full(n, opacity),
        sh,
    )


def _oracle_visibility(cloud, cam, x, step_frac=1e-3, tol=None):
    """Brute-force ray march from the camera toward x.

    Each Gaussian contributes its peak density along the ray (evaluated at
    march samples); contributions composite in depth order and the point
    is visible if accumulated opacity stays below 0.5 until its depth.
    """
    lo, hi = cloud.bounding_box()
    extent = float(np.linalg.norm(hi - lo))
    if tol is None:
        tol = 0.01 * extent
    origin = cam.center()
    direction = x - origin
    dist = float(np.linalg.norm(direction))
    direction /= dist
    n_steps = int(np.ceil(1.0 / step_frac))
    ts = np.linspace(0.0, dist + tol, n_steps)
    pts = origin + ts[:, None] * direction
    peaks = np.zeros(len(cloud))
    peak_depth = np.zeros(len(cloud))
    W = cam.rotation
    for g in range(len(cloud)):
        R = quat_to_rotmat(cloud.rotations[g])
        prec = R @ np.diag(1.0 / cloud.scales[g] ** 2) @ R.T
        d = pts - cloud.positions[g]
        q = np.einsum("nd,de,ne->n", d, prec, d)
        dens = np.where(q <= 9.0, np.exp(-0.5 * q), 0.0)
        k = int(np.argmax(dens))
        peaks[g] = cloud.opacities[g] * dens[k]
        peak_depth[g] = (W @ (pts[k] - origin))[2] + (W @ origin + cam.translation)[2]
        peak_depth[g] = (W @ pts[k] + cam.translation)[2]
    order = np.argsort(peak_depth, kind="stable")
    x_depth = (W @ x + cam.translation)[2]
    acc = 0.0
    trans = 1.0
    for g in order:
        if peak_depth[g] > x_depth + tol:
            break
        if acc + 1e-12 >= 0.5:
            return False
        contrib = trans * peaks[g]
        trans *= 1.0 - peaks[g]
        acc += contrib
        if acc >= 0.5 and peak_depth[g] < x_depth - tol:
            return False
    return True


class TestVisibility:
    def test_own_center_visible(self, rng):
        cloud = _scene_cloud(rng, n=1)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        state = Gaussian4DState.rest(cloud)
        assert visibility_check(state, cam, cloud.positions[0])

    def test_occluded_behind_opaque(self):
        sh = SH4DCoeffs.from_rgb(np.full((1, 3), 0.5), 1, 2, 4)
        cloud = GaussianCloud(
            np.array([[0.0, 0.0, 0.0]]),
            np.array([[1.0, 0, 0, 0]]),
            np.full((1, 3), 0.3),
            np.array([1.0]),
            sh,
        )
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        state = Gaussian4DState.rest(cloud)
        # query point sits directly behind the opaque blob on the same ray
        assert not visibility_check(state, cam, np.array([0.0, 2.0, 0.0]))

    def test_agrees_with_ray_march_oracle(self, rng):
        """>= 95% agreement on 50 query points in a 20-Gaussian scene."""
        cloud = _scene_cloud(rng, n=20, sigma=0.15)
        cam = make_camera(48, 50.0, eye=(0.3, -3.2, 0.7))
        state = Gaussian4DState.rest(cloud)
        queries = rng.uniform(-0.9, 0.9, size=(50, 3))
        agree = 0
        for q in queries:
            got = visibility_check(state, cam, q)
            want = _oracle_visibility(cloud, cam, q)
            agree += got == want
        assert agree >= 48, f"only {agree}/50 agree"

    def test_behind_camera_raises(self, rng):
        from splat4d.errors import PointBehindCamera

        cloud = _scene_cloud(rng, n=3)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        state = Gaussian4DState.rest(cloud)
        with pytest.raises(PointBehindCamera):
            visibility_check(state, cam, np.array([0.0, -5.0, 0.0]))


def _feature_video(rng, cams, frames=4, size=8, dim=3, constant=None):
    n = len(cams)
    maps = rng.standard_normal((n, frames, size, size, dim))
    if constant is not None:
        maps[:] = constant
    return FeatureVideo(maps, cams)


class TestFeaturePlaneSample:
    def test_single_view_constant_map(self, rng):
        cloud = _scene_cloud(rng, n=4)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,), constant=0.0)
        fv.maps[:] = 2.5
        state = Gaussian4DState.rest(cloud)
        feat, occ = feature_plane_sample(fv, state, np.array([0.0, 0.0, 0.0]), 1.0)
        assert not occ
        np.testing.assert_allclose(feat, 2.5, atol=1e-12)

    def test_fully_occluded_zero_flagged(self, rng):
        cloud = _scene_cloud(rng, n=1, sigma=0.4, opacity=1.0)
        cloud.positions[0] = np.array([0.0, 0.0, 0.0])
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,))
        state = Gaussian4DState.rest(cloud)
        feat, occ = feature_plane_sample(fv, state, np.array([0.0, 2.0, 0.0]), 1.0)
        assert occ
        np.testing.assert_array_equal(feat, 0.0)

    def test_two_views_mean_with_manual_oracle(self, rng):
        cloud = _scene_cloud(rng, n=3, sigma=0.1, opacity=0.3)  # nothing occludes
        cams = (make_camera(32, 50.0, eye=(0, -3, 0)), make_camera(32, 50.0, eye=(3, 0, 0)))
        fv = _feature_video(rng, cams)
        state = Gaussian4DState.rest(cloud)
        x = np.array([0.1, -0.05, 0.2])
        feat, occ = feature_plane_sample(fv, state, x, 2.0)
        assert not occ
        want = np.zeros(fv.descriptor_dim)
        for i, cam in enumerate(cams):
            uv, _ = project_points(cam, x[None])
            pf = pixel_to_feature_coords(uv[0], (32, 32), (8, 8))
            pf = np.clip(pf, 0, 7)
            want += bilinear_sample_many(fv.maps[i, 2], np.array([pf[1], pf[0]]))
        want /= 2.0
        np.testing.assert_allclose(feat, want, atol=1e-12)

    def test_invariant_to_all_occluded_extra_view(self, rng):
        cloud = _scene_cloud(rng, n=3, sigma=0.1, opacity=0.3)
        cam1 = make_camera(32, 50.0, eye=(0, -3, 0))
        cam_away = make_camera(32, 50.0, eye=(0, -3, 0), target=(0, -6, 0))  # faces away
        x = np.array([0.1, 0.0, 0.0])
        state = Gaussian4DState.rest(cloud)
        fv1 = _feature_video(rng, (cam1,))
        feat1, _ = feature_plane_sample(fv1, state, x, 1.0)
        maps2 = np.concatenate([fv1.maps, rng.standard_normal((1,) + fv1.maps.shape[1:])])
        fv2 = FeatureVideo(maps2, (cam1, cam_away))
        feat2, _ = feature_plane_sample(fv2, state, x, 1.0)
        np.testing.assert_array_equal(feat1, feat2)

    def test_temporal_linearity(self, rng):
        cloud = _scene_cloud(rng, n=3, sigma=0.1, opacity=0.3)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,))
        state = Gaussian4DState.rest(cloud)
        x = np.array([0.0, 0.1, -0.1])
        f0, _ = feature_plane_sample(fv, state, x, 1.0)
        f1, _ = feature_plane_sample(fv, state, x, 2.0)
        fmid, _ = feature_plane_sample(fv, state, x, 1.3)
        np.testing.assert_allclose(fmid, 0.7 * f0 + 0.3 * f1, atol=1e-12)


class TestHybridFeature:
    def test_zero_hex_unit_features(self, rng):
        field = _field()
        for level in field.planes:
            for p in level:
                p[:] = 0.0
        cloud = _scene_cloud(rng, n=2, sigma=0.1, opacity=0.3)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,), constant=1.0)
        state = Gaussian4DState.rest(cloud)
        out = hybrid_feature(field, fv, state, np.array([0.0, 0.0, 0.0]), 1.0)
        np.testing.assert_array_equal(out[: field.feature_dim], 0.0)
        np.testing.assert_allclose(out[field.feature_dim :], 1.0, atol=1e-12)

    def test_dimension_bookkeeping(self, rng):
        field = _field(dim=16, levels=1)
        cloud = _scene_cloud(rng, n=2)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,), dim=8)
        state = Gaussian4DState.rest(cloud)
        out = hybrid_feature(field, fv, state, np.zeros(3), 0.0)
        assert out.shape == (24,)

    def test_concatenation_bit_exact(self, rng):
        field = _field(rng)
        cloud = _scene_cloud(rng, n=3)
        cam = make_camera(32, 50.0, eye=(0, -3, 0))
        fv = _feature_video(rng, (cam,))
        state = Gaussian4DState.rest(cloud)
        x = np.array([0.2, -0.1, 0.05])
        out = hybrid_feature(field, fv, state, x, 1.5)
        hexpart = hexplane_interp(field, x, 1.5)
        featpart, _ = feature_plane_sample(fv, state, x, 1.5)
        np.testing.assert_array_equal(out, np.concatenate([hexpart, featpart]))


class TestDeformationDecoder:
    def test_fresh_decoder_outputs_zero(self, rng):
        dec = DeformationDecoder(10, hidden=16, seed=0)
        feat = rng.standard_normal(10)
        dx, dr, ds = deform_decode(dec, feat)
        np.testing.assert_array_equal(dx, 0.0)
        np.testing.assert_array_equal(dr, 0.0)
        np.testing.assert_array_equal(ds, 0.0)

    def test_tiny_decoder_hand_computation(self):
        """Two-layer algebra on explicit weights, input F = 0."""
        dec = DeformationDecoder(2, hidden=2, seed=0)
        dec.w0 = np.array([[0.5, -0.25], [0.0, 1.0]])
        dec.b0 = np.array([0.1, -0.2])
        hp = dec.heads["pos"]
        hp["w1"] = np.array([[1.0, 0.5], [-0.5, 0.25]])
        hp["b1"] = np.array([0.05, 0.15])
        hp["w2"] = np.array([[0.3, -0.1], [0.2, 0.4], [0.0, 1.0]])
        hp["b2"] = np.array([0.01, -0.02, 0.03])
        dx, _, _ = deform_decode(dec, np.zeros(2))
        h0 = np.tanh(np.array([0.1, -0.2]))
        h1 = np.tanh(hp["w1"] @ h0 + hp["b1"])
        want = hp["w2"] @ h1 + hp["b2"]
        np.testing.assert_allclose(dx, want, atol=1e-14)

    def test_bad_feature_shape(self):
        dec = DeformationDecoder(8)
        with pytest.raises(ShapeMismatch):
            deform_decode(dec, np.zeros(9))

    def test_gradient_suite(self):
        res = gradcheck.check_decoder()
        assert res.passed, res


class TestApplyDeformation:
    def _gaussian(self):
        sh = SH4DCoeffs.zeros(1, 2, 4)
        return Gaussian3D(
            np.array([0.0, 0.0, 0.0]), sh, 0.8, np.array([1.0, 0, 0, 0]), np.array([0.5, 0.5, 0.5])
        )

    def test_zero_deltas_identity_except_color(self):
        g = self._gaussian()
        out = apply_deformation(g, np.zeros(3), np.zeros(4), np.zeros(3), np.array([0.1, 0.2, 0.3]))
        np.testing.assert_array_equal(out.position, g.position)
        np.testing.assert_allclose(out.rotation, g.rotation, atol=1e-15)
        np.testing.assert_array_equal(out.scale, g.scale)
        assert out.opacity == g.opacity
        np.testing.assert_array_equal(out.color, [0.1, 0.2, 0.3])

    def test_scale_clamped(self):
        g = self._gaussian()
        out = apply_deformation(g, np.zeros(3), np.zeros(4), np.array([-1.0, 0, 0]), np.zeros(3))
        np.testing.assert_allclose(out.scale, [1e-6, 0.5, 0.5], atol=1e-15)

    def test_translation(self):
        g = self._gaussian()
        out = apply_deformation(g, np.array([1.0, 0, 0]), np.zeros(4), np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(out.position, [1.0, 0.0, 0.0])

    def test_rotation_renormalized(self):
        g = self._gaussian()
        out = apply_deformation(g, np.zeros(3), np.array([0.0, 0.5, 0, 0]), np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(np.linalg.norm(out.rotation), 1.0, atol=1e-12)


class TestFullChainGradient:
    def test_suite(self):
        res = gradcheck.check_full_chain()
        assert res.passed, res


class TestHexCheckpoint:
    def test_roundtrip(self, rng):
        field = _field(rng)
        # f32-representable entries round-trip exactly
        for level in field.planes:
            for p in level:
                p[:] = p.astype(np.float32).astype(np.float64)
        buf = io.BytesIO()
        write_hexfield(field, buf)
        buf.seek(0)
        back = read_hexfield(buf)
        assert back.levels == field.levels and back.dim == field.dim
        assert back.n_frames == field.n_frames
        np.testing.assert_array_equal(back.bbox_lo, field.bbox_lo)
        for la, lb in zip(field.planes, back.planes):
            for pa, pb in zip(la, lb):
                np.testing.assert_array_equal(pa, pb)

    def test_write_is_idempotent_after_read(self, rng):
        field = _field(rng)
        buf = io.BytesIO()
        write_hexfield(field, buf)
        raw = buf.getvalue()
        back = read_hexfield(io.BytesIO(raw))
        buf2 = io.BytesIO()
        write_hexfield(back, buf2)
        assert buf2.getvalue() == raw

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            read_hexfield(io.BytesIO(b"NOPE" + b"\x00" * 100))
