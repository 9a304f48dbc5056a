"""Hybrid motion representation and the multi-head deformation decoder.

A Gaussian's motion feature at (x, frame) concatenates two parts:

- hexplane part: six axis-pair planes over (x, y, z, t) are bilinearly
  sampled at the normalized query and fused by elementwise product within
  each resolution level; levels are concatenated;
- feature-plane part: the query point is projected into every view of a
  per-view, per-frame feature video, occlusion-tested by ray casting
  against the splatted scene, and the surviving bilinear samples are
  averaged (zero vector with an ``occluded`` flag when no view survives).

A shared-trunk decoder with three two-layer heads maps the concatenated
feature to per-Gaussian position/rotation/scale deltas; head output layers
start at zero so a fresh decoder leaves the canonical asset untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    Camera,
    DeformedGaussians,
    Gaussian3D,
    Gaussian4DState,
    compose_rotation,
    compose_scale,
    DeformedGaussian,
    bilinear_sample_many,
    bilinear_scatter,
    pixel_to_feature_coords,
    project_point,
    project_points,
    quat_normalize,
)
from .errors import OutOfBox, ShapeMismatch
from .splatter import render_hit_depth

__all__ = [
    "PLANE_PAIRS",
    "HexPlaneField",
    "FeatureVideo",
    "DeformationDecoder",
    "hexplane_interp",
    "hexplane_interp_batch",
    "hexplane_interp_backward",
    "hexplane_point_jacobian",
    "visibility_check",
    "visibility_mask",
    "feature_plane_sample",
    "sample_feature_planes",
    "hybrid_feature",
    "deform_decode",
    "apply_deformation",
    "apply_deformation_batch",
    "compose_backward",
    "write_hexfield",
    "read_hexfield",
]

# axis pairs over (x, y, z, t); fixed storage and checkpoint order
PLANE_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))

_HEX_MAGIC = b"HEX4"


@dataclass
class HexPlaneField:
    """Multi-resolution six-plane factorized spatio-temporal field.

    ``planes[level][k]`` is an (Ra, Rb, dim) grid for axis pair
    ``PLANE_PAIRS[k]``; level resolutions halve as the level index grows.
    """

    planes: list[list[np.ndarray]]
    bbox_lo: np.ndarray  # (3,)
    bbox_hi: np.ndarray  # (3,)
    n_frames: int
    dim: int

    def __post_init__(self):
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=np.float64)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=np.float64)
        if np.any(self.bbox_hi <= self.bbox_lo):
            raise ValueError("bounding box must be non-degenerate")
        if self.n_frames < 1 or self.dim < 1:
            raise ValueError("n_frames and dim must be >= 1")
        for level in self.planes:
            if len(level) != 6:
                raise ValueError("each level needs six planes")
            for p in level:
                if p.ndim != 3 or p.shape[2] != self.dim:
                    raise ValueError("plane arrays must be (Ra, Rb, dim)")
                if not np.all(np.isfinite(p)):
                    raise ValueError("non-finite plane entries")

    @property
    def levels(self) -> int:
        return len(self.planes)

    @property
    def feature_dim(self) -> int:
        return self.dim * self.levels

    @staticmethod
    def create(
        bbox_lo,
        bbox_hi,
        n_frames: int,
        spatial_res: int = 100,
        temporal_res: int = 8,
        dim: int = 16,
        levels: int = 2,
        seed: int = 0,
        init_scale: float = 0.1,
    ) -> "HexPlaneField":
        """Freshly initialized field: entries near 1 so the six-way product
        starts near 1 and keeps early gradients alive."""
        rng = np.random.Generator(np.random.PCG64(seed))
        planes = []
        for lvl in range(levels):
            rs = max(2, spatial_res >> lvl)
            rt = max(2, temporal_res >> lvl)
            level = []
            for a, b in PLANE_PAIRS:
                ra = rs if a < 3 else rt
                rb = rs if b < 3 else rt
                level.append(1.0 + init_scale * rng.uniform(-1.0, 1.0, size=(ra, rb, dim)))
            planes.append(level)
        return HexPlaneField(planes, bbox_lo, bbox_hi, n_frames, dim)

    def normalized_coords(self, xs: np.ndarray, f: float) -> np.ndarray:
        """Map world points plus a frame to [0, 1]^4 (raises OutOfBox)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        span = self.bbox_hi - self.bbox_lo
        nx = (xs - self.bbox_lo) / span
        if np.any(nx < -1e-9) or np.any(nx > 1.0 + 1e-9):
            raise OutOfBox("query point outside the field bounding box")
        if not 0.0 <= f <= self.n_frames - 1 + 1e-9:
            raise OutOfBox(f"frame {f} outside [0, {self.n_frames - 1}]")
        nt = f / (self.n_frames - 1) if self.n_frames > 1 else 0.0
        out = np.empty((xs.shape[0], 4))
        out[:, :3] = np.clip(nx, 0.0, 1.0)
        out[:, 3] = nt
        return out

    def param_names(self) -> list[str]:
        return [f"plane_{l}_{k}" for l in range(self.levels) for k in range(6)]

    def params(self) -> dict[str, np.ndarray]:
        return {
            f"plane_{l}_{k}": self.planes[l][k]
            for l in range(self.levels)
            for k in range(6)
        }


def hexplane_interp_batch(field: HexPlaneField, xs: np.ndarray, f: float):
    """Sampled hex features for a batch of points at one frame.

    Returns (features (N, dim*levels), cache for the backward pass).
    """
    coords = field.normalized_coords(xs, f)  # (N, 4)
    n = coords.shape[0]
    feats = []
    cache = {"coords": [], "samples": []}
    for level in field.planes:
        samples = []
        lv_coords = []
        for k, (a, b) in enumerate(PLANE_PAIRS):
            plane = level[k]
            ca = coords[:, a] * (plane.shape[0] - 1)
            cb = coords[:, b] * (plane.shape[1] - 1)
            pts = np.stack([ca, cb], axis=-1)
            samples.append(bilinear_sample_many(plane, pts))
            lv_coords.append(pts)
        prod = samples[0].copy()
        for s in samples[1:]:
            prod *= s
        feats.append(prod)
        cache["samples"].append(samples)
        cache["coords"].append(lv_coords)
    return np.concatenate(feats, axis=1), cache


def hexplane_interp(field: HexPlaneField, x: np.ndarray, f: float) -> np.ndarray:
    """Hybrid-motion hex feature of a single point; shape (dim*levels,)."""
    feat, _ = hexplane_interp_batch(field, np.asarray(x, dtype=np.float64)[None], f)
    return feat[0]


def hexplane_interp_backward(
    field: HexPlaneField, cache: dict, grad_feat: np.ndarray
) -> list[list[np.ndarray]]:
    """Scatter feature gradients back onto every plane grid."""
    grad_feat = np.asarray(grad_feat, dtype=np.float64)
    out = []
    for lvl in range(field.levels):
        g_lvl = grad_feat[:, lvl * field.dim : (lvl + 1) * field.dim]
        samples = cache["samples"][lvl]
        coords = cache["coords"][lvl]
        # prefix/suffix products leave out one factor at a time
        prefix = [None] * 6
        suffix = [None] * 6
        acc = np.ones_like(samples[0])
        for k in range(6):
            prefix[k] = acc
            acc = acc * samples[k]
        acc = np.ones_like(samples[0])
        for k in range(5, -1, -1):
            suffix[k] = acc
            acc = acc * samples[k]
        grads = []
        for k in range(6):
            partial = g_lvl * prefix[k] * suffix[k]
            grads.append(bilinear_scatter(partial, field.planes[lvl][k].shape, coords[k]))
        out.append(grads)
    return out


def _bilinear_point_grad(plane: np.ndarray, pa: float, pb: float) -> tuple[np.ndarray, np.ndarray]:
    """d sample / d(pa, pb) of one bilinear lookup; each (dim,)."""
    na, nb = plane.shape[0], plane.shape[1]
    a0 = int(np.clip(np.floor(pa), 0, max(na - 2, 0)))
    b0 = int(np.clip(np.floor(pb), 0, max(nb - 2, 0)))
    a1, b1 = min(a0 + 1, na - 1), min(b0 + 1, nb - 1)
    fa, fb = pa - a0, pb - b0
    d_a = (plane[a1, b0] - plane[a0, b0]) * (1 - fb) + (plane[a1, b1] - plane[a0, b1]) * fb
    d_b = (plane[a0, b1] - plane[a0, b0]) * (1 - fa) + (plane[a1, b1] - plane[a1, b0]) * fa
    return d_a, d_b


def hexplane_point_jacobian(field: HexPlaneField, x: np.ndarray, f: float) -> np.ndarray:
    """Analytic d(feature)/d(x) of :func:`hexplane_interp`; (dim*levels, 3)."""
    coords = field.normalized_coords(np.asarray(x, dtype=np.float64)[None], f)[0]
    span = field.bbox_hi - field.bbox_lo
    jac = np.zeros((field.feature_dim, 3))
    for lvl, level in enumerate(field.planes):
        samples = []
        partials = []  # per plane: (d/dca, d/dcb)
        pair_coords = []
        for k, (a, b) in enumerate(PLANE_PAIRS):
            plane = level[k]
            ca = coords[a] * (plane.shape[0] - 1)
            cb = coords[b] * (plane.shape[1] - 1)
            samples.append(bilinear_sample_many(plane, np.array([ca, cb])))
            partials.append(_bilinear_point_grad(plane, ca, cb))
            pair_coords.append((a, b))
        for k in range(6):
            others = np.ones(field.dim)
            for j in range(6):
                if j != k:
                    others = others * samples[j]
            a, b = pair_coords[k]
            plane = level[k]
            d_a, d_b = partials[k]
            for axis, cgrid, dvec in ((a, plane.shape[0] - 1, d_a), (b, plane.shape[1] - 1, d_b)):
                if axis >= 3:  # time axis: no x dependence
                    continue
                scale = cgrid / span[axis]
                jac[lvl * field.dim : (lvl + 1) * field.dim, axis] += others * dvec * scale
    return jac


@dataclass
class FeatureVideo:
    """Per-view, per-frame descriptor maps with their source cameras."""

    maps: np.ndarray  # (n_views, n_frames, Hf, Wf, D)
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.cameras = tuple(self.cameras)
        if self.maps.ndim != 5:
            raise ValueError("maps must be (views, frames, Hf, Wf, D)")
        if len(self.cameras) != self.maps.shape[0]:
            raise ValueError("camera count must match the view dimension")

    @property
    def views(self) -> int:
        return self.maps.shape[0]

    @property
    def frames(self) -> int:
        return self.maps.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.maps.shape[4]


def _default_depth_tolerance(state: Gaussian4DState) -> float:
    lo, hi = state.base.bounding_box()
    return 0.01 * float(np.linalg.norm(hi - lo))


def _state_to_splats(state: Gaussian4DState) -> DeformedGaussians:
    n = len(state.base)
    return DeformedGaussians(
        state.positions(), state.rotations(), state.scales(), state.base.opacities, np.zeros((n, 1))
    )


def visibility_mask(
    state: Gaussian4DState,
    cam: Camera,
    xs: np.ndarray,
    depth_tolerance: float | None = None,
    hit_depth: np.ndarray | None = None,
) -> np.ndarray:
    """Ray-casting visibility of world points against the splatted scene.

    A point is visible when its camera depth does not exceed the first
    opacity-0.5 crossing depth rendered at its pixel (plus a tolerance,
    default 1% of the scene bounding-box diagonal). Points behind the
    camera are reported occluded; points projecting off-image are visible
    (nothing renders in front of them).
    """
    if depth_tolerance is None:
        depth_tolerance = _default_depth_tolerance(state)
    if hit_depth is None:
        hit_depth = render_hit_depth(_state_to_splats(state), cam)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    uv, depth = project_points(cam, xs)
    out = np.zeros(xs.shape[0], dtype=bool)
    front = depth > 1e-6
    ix = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, cam.width - 1)
    iy = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, cam.height - 1)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height)
    occ_depth = np.where(inside, hit_depth[iy, ix], np.inf)
    out[front] = depth[front] <= occ_depth[front] + depth_tolerance
    return out


def visibility_check(
    state: Gaussian4DState, cam: Camera, x: np.ndarray, depth_tolerance: float | None = None
) -> bool:
    """Single-point visibility; raises PointBehindCamera for depth <= 0."""
    project_point(cam, x)  # raises PointBehindCamera when appropriate
    return bool(visibility_mask(state, cam, np.asarray(x)[None], depth_tolerance)[0])


def sample_feature_planes(
    fv: FeatureVideo,
    state: Gaussian4DState,
    xs: np.ndarray,
    f: float,
    depth_tolerance: float | None = None,
    hit_depths: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean visible-view feature-video sample for a batch of points.

    Non-integer ``f`` blends the two neighboring frames linearly. Returns
    (features (N, D), occluded (N,) bool); fully occluded points get zeros.
    ``hit_depths`` lets callers reuse precomputed per-view occlusion maps.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n = xs.shape[0]
    if not 0.0 <= f <= fv.frames - 1 + 1e-9:
        raise OutOfBox(f"frame {f} outside [0, {fv.frames - 1}]")
    j0 = int(np.floor(min(f, fv.frames - 1)))
    j1 = min(j0 + 1, fv.frames - 1)
    tau = f - j0
    acc = np.zeros((n, fv.descriptor_dim))
    count = np.zeros(n)
    for i, cam in enumerate(fv.cameras):
        vis = visibility_mask(
            state, cam, xs, depth_tolerance, hit_depth=None if hit_depths is None else hit_depths[i]
        )
        uv, depth = project_points(cam, xs)
        inside = (
            (depth > 1e-6)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= cam.width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= cam.height)
        )
        use = vis & inside
        if not np.any(use):
            continue
        hf, wf = fv.maps.shape[2], fv.maps.shape[3]
        pf = pixel_to_feature_coords(uv[use], (cam.width, cam.height), (wf, hf))
        pf[:, 0] = np.clip(pf[:, 0], 0.0, wf - 1)
        pf[:, 1] = np.clip(pf[:, 1], 0.0, hf - 1)
        rc = np.stack([pf[:, 1], pf[:, 0]], axis=-1)
        val = bilinear_sample_many(fv.maps[i, j0], rc)
        if tau > 0.0:
            val = (1.0 - tau) * val + tau * bilinear_sample_many(fv.maps[i, j1], rc)
        acc[use] += val
        count[use] += 1.0
    occluded = count == 0
    feats = np.where(occluded[:, None], 0.0, acc / np.maximum(count, 1.0)[:, None])
    return feats, occluded


def feature_plane_sample(
    fv: FeatureVideo,
    state: Gaussian4DState,
    x: np.ndarray,
    f: float,
    depth_tolerance: float | None = None,
) -> tuple[np.ndarray, bool]:
    """Single-point variant of :func:`sample_feature_planes`."""
    feats, occ = sample_feature_planes(fv, state, np.asarray(x)[None], f, depth_tolerance)
    return feats[0], bool(occ[0])


def hybrid_feature(
    field: HexPlaneField,
    fv: FeatureVideo,
    state: Gaussian4DState,
    x: np.ndarray,
    f: float,
) -> np.ndarray:
    """Concatenated [hexplane || feature-plane] motion feature of a point."""
    hexpart = hexplane_interp(field, x, f)
    featpart, _ = feature_plane_sample(fv, state, x, f)
    return np.concatenate([hexpart, featpart])


class DeformationDecoder:
    """Shared trunk + three two-layer heads emitting (dX, dr, ds).

    tanh nonlinearities keep the map smooth for finite-difference checks;
    head output layers are zero-initialized so a fresh decoder returns
    exactly zero deltas.
    """

    HEADS = (("pos", 3), ("rot", 4), ("scale", 3))

    def __init__(self, feature_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))

        def xavier(fan_out, fan_in):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_out, fan_in))

        self.feature_dim = feature_dim
        self.hidden = hidden
        self.w0 = xavier(hidden, feature_dim)
        self.b0 = np.zeros(hidden)
        self.heads: dict[str, dict[str, np.ndarray]] = {}
        for name, out_dim in self.HEADS:
            self.heads[name] = {
                "w1": xavier(hidden, hidden),
                "b1": np.zeros(hidden),
                "w2": np.zeros((out_dim, hidden)),
                "b2": np.zeros(out_dim),
            }

    def params(self) -> dict[str, np.ndarray]:
        out = {"w0": self.w0, "b0": self.b0}
        for name, _ in self.HEADS:
            for key, arr in self.heads[name].items():
                out[f"{name}_{key}"] = arr
        return out

    def forward(self, feats: np.ndarray):
        """Batched decode: feats (N, feature_dim) -> (dx, dr, ds, cache)."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ShapeMismatch(f"expected (N, {self.feature_dim}), got {feats.shape}")
        h0 = np.tanh(feats @ self.w0.T + self.b0)
        cache = {"feats": feats, "h0": h0, "h1": {}}
        outs = {}
        for name, _ in self.HEADS:
            hp = self.heads[name]
            h1 = np.tanh(h0 @ hp["w1"].T + hp["b1"])
            cache["h1"][name] = h1
            outs[name] = h1 @ hp["w2"].T + hp["b2"]
        return outs["pos"], outs["rot"], outs["scale"], cache

    def backward(self, cache: dict, g_pos: np.ndarray, g_rot: np.ndarray, g_scale: np.ndarray):
        """Returns (parameter grads keyed like :meth:`params`, d loss/d feats)."""
        h0, feats = cache["h0"], cache["feats"]
        grads: dict[str, np.ndarray] = {}
        gh0 = np.zeros_like(h0)
        for (name, _), gout in zip(self.HEADS, (g_pos, g_rot, g_scale)):
            hp = self.heads[name]
            h1 = cache["h1"][name]
            gout = np.asarray(gout, dtype=np.float64)
            grads[f"{name}_w2"] = gout.T @ h1
            grads[f"{name}_b2"] = gout.sum(axis=0)
            gh1 = gout @ hp["w2"]
            gz1 = gh1 * (1.0 - h1 * h1)
            grads[f"{name}_w1"] = gz1.T @ h0
            grads[f"{name}_b1"] = gz1.sum(axis=0)
            gh0 += gz1 @ hp["w1"]
        gz0 = gh0 * (1.0 - h0 * h0)
        grads["w0"] = gz0.T @ feats
        grads["b0"] = gz0.sum(axis=0)
        return grads, gz0 @ self.w0


def deform_decode(dec: DeformationDecoder, feat: np.ndarray):
    """Decode one hybrid feature into (dX (3,), dr (4,), ds (3,))."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (dec.feature_dim,):
        raise ShapeMismatch(f"expected ({dec.feature_dim},), got {feat.shape}")
    dx, dr, ds, _ = dec.forward(feat[None])
    return dx[0], dr[0], ds[0]


def apply_deformation(
    g: Gaussian3D, dx: np.ndarray, dr: np.ndarray, ds: np.ndarray, color: np.ndarray
) -> DeformedGaussian:
    """Deformed sample of one Gaussian with its time-evaluated color."""
    return DeformedGaussian(
        position=g.position + np.asarray(dx, dtype=np.float64),
        color=np.asarray(color, dtype=np.float64),
        opacity=g.opacity,
        rotation=compose_rotation(g.rotation, dr),
        scale=compose_scale(g.scale, ds),
    )


def apply_deformation_batch(cloud, dx, dr, ds, colors) -> DeformedGaussians:
    """Batched :func:`apply_deformation` over a canonical cloud."""
    return DeformedGaussians(
        positions=cloud.positions + dx,
        rotations=compose_rotation(cloud.rotations, dr),
        scales=compose_scale(cloud.scales, ds),
        opacities=cloud.opacities,
        colors=colors,
    )


def compose_backward(
    cloud, dx, dr, ds, grad_positions, grad_rotations, grad_scales
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the deformed attributes w.r.t. the decoder deltas."""
    v = cloud.rotations + dr
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / norm
    g = np.asarray(grad_rotations, dtype=np.float64)
    g_dr = (g - np.sum(g * u, axis=1, keepdims=True) * u) / norm
    active = (cloud.scales + ds) > 1e-6
    g_ds = np.where(active, grad_scales, 0.0)
    return np.asarray(grad_positions, dtype=np.float64), g_dr, g_ds


def write_hexfield(field: HexPlaneField, fh) -> None:
    """Binary checkpoint: magic, level count, base plane dims, feature dim,
    frame count, bbox, then all planes (level-major, fixed pair order,
    row-major little-endian f32)."""
    fh.write(_HEX_MAGIC)
    fh.write(struct.pack("<I", field.levels))
    for k in range(6):
        ra, rb, _ = field.planes[0][k].shape
        fh.write(struct.pack("<II", ra, rb))
    fh.write(struct.pack("<II", field.dim, field.n_frames))
    fh.write(struct.pack("<6d", *field.bbox_lo, *field.bbox_hi))
    for level in field.planes:
        for plane in level:
            fh.write(plane.astype("<f4").tobytes())


def read_hexfield(fh) -> HexPlaneField:
    """Inverse of :func:`write_hexfield`."""
    magic = fh.read(4)
    if magic != _HEX_MAGIC:
        raise ValueError(f"bad hexfield magic {magic!r}")
    (levels,) = struct.unpack("<I", fh.read(4))
    base_dims = [struct.unpack("<II", fh.read(8)) for _ in range(6)]
    dim, n_frames = struct.unpack("<II", fh.read(8))
    bbox = struct.unpack("<6d", fh.read(48))
    planes = []
    for lvl in range(levels):
        level = []
        for k in range(6):
            ra = max(2, base_dims[k][0] >> lvl)
            rb = max(2, base_dims[k][1] >> lvl)
            data = np.frombuffer(fh.read(ra * rb * dim * 4), dtype="<f4")
            level.append(data.reshape(ra, rb, dim).astype(np.float64))
        planes.append(level)
    return HexPlaneField(planes, np.array(bbox[:3]), np.array(bbox[3:]), n_frames, dim)
